use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/tiny20")
}

fn bin(work: &Path, cache: &Path, args: &[&str]) -> Output {
    let config = fixture().join("config.toml");
    Command::new(env!("CARGO_BIN_EXE_mm-interleave"))
        .arg("--work")
        .arg(work)
        .arg("--config")
        .arg(&config)
        .args(args)
        .env("MM_INTERLEAVE_CACHE", cache)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn run_pipeline(root: &Path) -> PathBuf {
    let work = root.join("work");
    let manifest = fixture().join("manifest.jsonl");
    ok(bin(&work, &root.join("cache"), &["pipeline", manifest.to_str().unwrap()]));
    work
}

#[test]
fn stages_run_one_by_one_match_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let whole = run_pipeline(tmp.path());

    let staged = tmp.path().join("staged");
    let manifest = fixture().join("manifest.jsonl");
    for args in [
        vec!["ingest", manifest.to_str().unwrap()],
        vec!["fetch"],
        vec!["hashdedup"],
        vec!["embed"],
        vec!["filter"],
        vec!["align"],
        vec!["flatten"],
        vec!["stats"],
    ] {
        ok(bin(&staged, &cache, &args));
    }
    for name in ["docs.jsonl", "images.jsonl", "images.filtered.jsonl", "corpus.jsonl", "sequences.jsonl", "stats.json"] {
        assert_eq!(
            std::fs::read(whole.join(name)).unwrap(),
            std::fs::read(staged.join(name)).unwrap(),
            "{name} differs"
        );
    }
    let run: Value = serde_json::from_str(&std::fs::read_to_string(staged.join("filter.run.json")).unwrap()).unwrap();
    assert_eq!(run["stage"], "filter");
    assert!(run["outputs"].as_array().is_some_and(|o| !o.is_empty()));
}

#[test]
fn corpus_and_sequences_respect_their_contracts() {
    let tmp = tempfile::tempdir().unwrap();
    let work = run_pipeline(tmp.path());
    let docs = lines(&work.join("corpus.jsonl"));
    assert!(!docs.is_empty());
    for d in &docs {
        let sentences = d["text_list"].as_array().unwrap().len();
        let matrix = d["similarity_matrix"].as_array().unwrap();
        assert_eq!(matrix.len(), sentences);
        let images = d["image_info"].as_array().unwrap();
        assert!(!images.is_empty());
        for (i, info) in images.iter().enumerate() {
            let s = info["matched_text_index"].as_u64().unwrap() as usize;
            assert_eq!(info["matched_sim"], matrix[s][i]);
            assert!(info["matched_sim"].as_f64().unwrap() >= 0.15);
        }
    }
    for seq in lines(&work.join("sequences.jsonl")) {
        let tokens = seq["token_texts"].as_array().unwrap().len();
        let images = seq["images"].as_array().unwrap();
        assert!(tokens <= 256);
        assert!((1..=5).contains(&images.len()));
        for slot in images {
            assert!(slot["sim"].as_f64().unwrap() >= 0.20);
            assert!(slot["position"].as_u64().unwrap() as usize <= tokens);
        }
    }
    let stats: Value = serde_json::from_str(&std::fs::read_to_string(work.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["docs"].as_u64(), Some(docs.len() as u64), "{stats}");
    assert!(stats["image_domains"]["top"][0]["domain"].as_str().unwrap().starts_with("www.example"));
}

#[test]
fn subsets_filter_faces_and_apply_core_rules() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let work = run_pipeline(tmp.path());

    let face: HashMap<String, f64> = lines(&work.join("images.filtered.jsonl"))
        .into_iter()
        .map(|r| (r["image_id"].as_str().unwrap().to_string(), r["head_scores"]["face"].as_f64().unwrap()))
        .collect();
    ok(bin(&work, &cache, &["subset", "--variant", "ff", "--face-threshold", "0.5"]));
    let ff = work.join("corpus.ff.jsonl");
    for d in lines(&ff) {
        for info in d["image_info"].as_array().unwrap() {
            assert!(face[info["image_name"].as_str().unwrap()] < 0.5);
        }
    }
    // applying the face filter again changes nothing
    let again = work.join("again.jsonl");
    ok(bin(
        &work,
        &cache,
        &["subset", "--variant", "ff", "--input", ff.to_str().unwrap(), "--output", again.to_str().unwrap()],
    ));
    assert_eq!(std::fs::read(&ff).unwrap(), std::fs::read(&again).unwrap());

    ok(bin(&work, &cache, &["subset", "--variant", "core"]));
    for d in lines(&work.join("corpus.core.jsonl")) {
        assert!((4..=40).contains(&d["text_list"].as_array().unwrap().len()));
        assert!((2..=15).contains(&d["image_info"].as_array().unwrap().len()));
    }
}

#[test]
fn calibrate_picks_the_largest_threshold_meeting_recall() {
    let tmp = tempfile::tempdir().unwrap();
    let scores = tmp.path().join("scores.jsonl");
    let rows = [(0.9, true), (0.8, true), (0.7, true), (0.2, true), (0.1, false), (0.1, false)];
    let text: String = rows
        .iter()
        .map(|(p, l)| format!("{{\"prob\":{p},\"label\":{l}}}\n"))
        .collect();
    std::fs::write(&scores, text).unwrap();
    let out = ok(bin(tmp.path(), tmp.path(), &["calibrate", "--scores", scores.to_str().unwrap()]));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["threshold"], 0.2);
    assert_eq!(r["achieved_recall"], 1.0);
    assert!((r["kept_fraction"].as_f64().unwrap() - 2.0 / 6.0).abs() < 1e-12);

    let calibration = tmp.path().join("calibration.json");
    ok(bin(
        tmp.path(),
        tmp.path(),
        &["calibrate", "--scores", scores.to_str().unwrap(), "--output", calibration.to_str().unwrap()],
    ));
    assert!(calibration.exists());
}

#[test]
fn eval_separates_planted_signal_from_noise() {
    let tmp = tempfile::tempdir().unwrap();
    let report = |extra: &[&str]| -> Value {
        let mut args = vec!["eval", "--docs", "300"];
        args.extend_from_slice(extra);
        serde_json::from_slice(&ok(bin(tmp.path(), tmp.path(), &args)).stdout).unwrap()
    };
    let random = report(&["--synthetic", "random"]);
    let planted = report(&["--synthetic", "planted"]);
    assert!(planted["auc"].as_f64() > random["auc"].as_f64());
    assert!(planted["p_at_1"].as_f64() > random["p_at_1"].as_f64());
    assert_eq!(random["n_docs"], 300);

    let input = tmp.path().join("bench.jsonl");
    std::fs::write(&input, "{\"scores\":[[0.9,0.1],[0.2,0.8]],\"gold\":[[0],[1]]}\n").unwrap();
    let perfect = report(&["--input", input.to_str().unwrap(), "--scorer", "max"]);
    assert_eq!(perfect["auc"], 100.0);
    assert_eq!(perfect["p_at_1"], 100.0);
}

#[test]
fn exit_codes_distinguish_usage_config_and_input_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| bin(tmp.path(), tmp.path(), args).status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["no-such-command"]), Some(1));
    assert_eq!(code(&["align", "--relevance-tau", "1.1"]), Some(1));
    assert_eq!(code(&["stats", "--input", "missing.jsonl"]), Some(2));
    assert_eq!(code(&["fetch"]), Some(2));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\nunknown_key = true\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mm-interleave"))
        .arg("--work")
        .arg(tmp.path())
        .arg("--config")
        .arg(&bad)
        .arg("hashdedup")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));
}

#[test]
fn plot_writes_histogram_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let work = run_pipeline(tmp.path());
    let plots = tmp.path().join("plots");
    ok(bin(&work, &cache, &["plot", "--out-dir", plots.to_str().unwrap()]));
    for name in ["images_per_doc.csv", "sentences_per_doc.csv", "images_sentences_joint.csv"] {
        let text = std::fs::read_to_string(plots.join(name)).unwrap();
        assert!(text.lines().count() > 1, "{name} is empty");
    }
}
