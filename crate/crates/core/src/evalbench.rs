//! Within-document alignment metrics (AUC, precision@1), benchmark suites
//! and the exhaustive assignment oracle.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aligner::{max_assignment_baseline, solve_assignment, AlignError};
use crate::corpus::{Assignment, MatchKind, Pair, SimilarityMatrix};
use crate::rng::derive_rng;

/// Largest smaller side accepted by [`brute_force_assignment`].
pub const ORACLE_MAX_SIDE: usize = 8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("benchmark has no documents")]
    EmptyBenchmark,
    #[error("oracle limited to min(sentences, images) <= {ORACLE_MAX_SIDE}, got {0}")]
    OracleTooLarge(usize),
    #[error("document {doc}: {reason}")]
    InvalidDocument { doc: usize, reason: String },
    #[error(transparent)]
    Align(#[from] AlignError),
}

/// Scores for one document plus the correct sentences of every image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDocument {
    pub scores: SimilarityMatrix,
    /// `gold[i]` lists the correct sentence indices for image `i`.
    pub gold: Vec<Vec<usize>>,
}

impl LabeledDocument {
    pub fn validate(&self) -> Result<(), String> {
        if self.gold.len() != self.scores.n_images() {
            return Err(format!(
                "{} gold sets for {} images",
                self.gold.len(),
                self.scores.n_images()
            ));
        }
        for (i, g) in self.gold.iter().enumerate() {
            if g.is_empty() {
                return Err(format!("image {i} has no gold sentence"));
            }
            if let Some(&s) = g.iter().find(|&&s| s >= self.scores.n_sentences()) {
                return Err(format!("image {i} gold sentence {s} out of range"));
            }
        }
        Ok(())
    }
}

fn precision_from(doc: &LabeledDocument, predicted: impl Fn(usize) -> usize) -> f64 {
    let n = doc.scores.n_images();
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n).filter(|&i| doc.gold[i].contains(&predicted(i))).count();
    hits as f64 / n as f64
}

/// Fraction of images whose top-scored sentence (ties → lowest) is gold.
pub fn precision_at_1(doc: &LabeledDocument) -> f64 {
    precision_from(doc, |i| doc.scores.column_argmax(i).map_or(usize::MAX, |(s, _)| s))
}

/// Precision@1 where the prediction is the sentence given by `assignment`.
pub fn precision_at_1_with(doc: &LabeledDocument, assignment: &Assignment) -> f64 {
    precision_from(doc, |i| assignment.sentence_of(i).unwrap_or(usize::MAX))
}

/// Mean over images of P(score(pos) > score(neg)), ties counted ½.
/// Images without negatives are skipped; `None` if every image is skipped.
pub fn auc(doc: &LabeledDocument) -> Option<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for (i, gold) in doc.gold.iter().enumerate() {
        let col: Vec<f64> = doc.scores.column(i).collect();
        let (pos, neg): (Vec<usize>, Vec<usize>) = (0..col.len()).partition(|s| gold.contains(s));
        if neg.is_empty() {
            warn!("image {i} has no negative sentences; skipped in AUC");
            continue;
        }
        let mut correct = 0.0;
        for &p in &pos {
            for &n in &neg {
                if col[p] > col[n] {
                    correct += 1.0;
                } else if col[p] == col[n] {
                    correct += 0.5;
                }
            }
        }
        total += correct / (pos.len() * neg.len()) as f64;
        counted += 1;
    }
    (counted > 0).then(|| total / counted as f64)
}

/// Exhaustive maximum-total injective assignment.
///
/// Enumerates every injective map of the smaller side into the larger one.
/// When images outnumber sentences only the one-per-sentence part is
/// returned (no surplus attachment).
pub fn brute_force_assignment(matrix: &SimilarityMatrix) -> Result<Assignment, EvalError> {
    let (ns, ni) = (matrix.n_sentences(), matrix.n_images());
    let small = ns.min(ni);
    if small > ORACLE_MAX_SIDE {
        return Err(EvalError::OracleTooLarge(small));
    }
    let images_small = ni <= ns;
    let (n_small, n_large) = if images_small { (ni, ns) } else { (ns, ni) };
    let weight = |a: usize, b: usize| {
        if images_small {
            matrix.get(b, a)
        } else {
            matrix.get(a, b)
        }
    };

    let mut best_total = f64::NEG_INFINITY;
    let mut best: Vec<usize> = Vec::new();
    let mut current = Vec::with_capacity(n_small);
    let mut used = vec![false; n_large];
    fn search(
        depth: usize,
        n_small: usize,
        acc: f64,
        current: &mut Vec<usize>,
        used: &mut [bool],
        weight: &dyn Fn(usize, usize) -> f64,
        best_total: &mut f64,
        best: &mut Vec<usize>,
    ) {
        if depth == n_small {
            if acc > *best_total {
                *best_total = acc;
                best.clone_from(current);
            }
            return;
        }
        for j in 0..used.len() {
            if used[j] {
                continue;
            }
            used[j] = true;
            current.push(j);
            search(depth + 1, n_small, acc + weight(depth, j), current, used, weight, best_total, best);
            current.pop();
            used[j] = false;
        }
    }
    search(0, n_small, 0.0, &mut current, &mut used, &weight, &mut best_total, &mut best);

    let mut pairs: Vec<Pair> = best
        .iter()
        .enumerate()
        .map(|(a, &b)| {
            let (image, sentence) = if images_small { (a, b) } else { (b, a) };
            Pair {
                image,
                sentence,
                similarity: matrix.get(sentence, image),
                kind: MatchKind::Assignment,
            }
        })
        .collect();
    pairs.sort_by_key(|p| p.image);
    Ok(Assignment {
        pairs,
        unassigned_images: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    Lap,
    Max,
}

/// Benchmark summary; metrics are ×100, one decimal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scorer: Scorer,
    pub auc: f64,
    pub p_at_1: f64,
    pub n_docs: usize,
}

fn percent_1dp(x: f64) -> f64 {
    (x * 1000.0).round() / 10.0
}

/// Macro-averaged (per document, then mean) AUC and precision@1.
pub fn run_benchmark(docs: &[LabeledDocument], scorer: Scorer) -> Result<BenchmarkReport, EvalError> {
    if docs.is_empty() {
        return Err(EvalError::EmptyBenchmark);
    }
    let mut auc_sum = 0.0;
    let mut auc_docs = 0usize;
    let mut p1_sum = 0.0;
    for (d, doc) in docs.iter().enumerate() {
        doc.validate()
            .map_err(|reason| EvalError::InvalidDocument { doc: d, reason })?;
        if let Some(a) = auc(doc) {
            auc_sum += a;
            auc_docs += 1;
        }
        p1_sum += match scorer {
            Scorer::Max => precision_at_1_with(doc, &max_assignment_baseline(&doc.scores)),
            Scorer::Lap => precision_at_1_with(doc, &solve_assignment(&doc.scores)?),
        };
    }
    let auc_mean = if auc_docs == 0 { 0.0 } else { auc_sum / auc_docs as f64 };
    Ok(BenchmarkReport {
        scorer,
        auc: percent_1dp(auc_mean),
        p_at_1: percent_1dp(p1_sum / docs.len() as f64),
        n_docs: docs.len(),
    })
}

/// Synthetic suite: `n_docs` documents with `k` sentences and
/// `images_per_doc` images, each image owning one distinct gold sentence.
/// Scores are uniform in `[-1, 1)`; gold cells get `+signal` (clamped to 1).
pub fn synthetic_suite(
    n_docs: usize,
    k: usize,
    images_per_doc: usize,
    signal: f64,
    seed: u64,
) -> Vec<LabeledDocument> {
    assert!(images_per_doc <= k && k >= 1);
    (0..n_docs)
        .map(|d| {
            let mut rng = derive_rng(seed, "synthetic-suite", &d.to_string());
            let mut sentences: Vec<usize> = (0..k).collect();
            // partial Fisher-Yates for the gold sentences
            for i in 0..images_per_doc {
                let j = rng.random_range(i..k);
                sentences.swap(i, j);
            }
            let gold: Vec<Vec<usize>> = sentences[..images_per_doc].iter().map(|&s| vec![s]).collect();
            let mut values: Vec<f64> = (0..k * images_per_doc)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            for (i, g) in gold.iter().enumerate() {
                let cell = &mut values[g[0] * images_per_doc + i];
                *cell = (*cell + signal).min(1.0);
            }
            LabeledDocument {
                scores: SimilarityMatrix::new(k, images_per_doc, values).expect("shape"),
                gold,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(rows: &[&[f64]], gold: Vec<Vec<usize>>) -> LabeledDocument {
        LabeledDocument {
            scores: SimilarityMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
            gold,
        }
    }

    #[test]
    fn precision_examples() {
        let perfect = doc(&[&[0.9, 0.1], &[0.2, 0.8]], vec![vec![0], vec![1]]);
        assert_eq!(precision_at_1(&perfect), 1.0);
        let half = doc(&[&[0.9, 0.9], &[0.2, 0.8]], vec![vec![0], vec![1]]);
        assert_eq!(precision_at_1(&half), 0.5);
    }

    #[test]
    fn auc_examples() {
        let perfect = doc(&[&[0.9], &[0.1], &[0.0]], vec![vec![0]]);
        assert_eq!(auc(&perfect), Some(1.0));
        // gold 0.9 vs negatives 0.95, 0.1, 0.1 -> 2/3
        let d = doc(&[&[0.9], &[0.95], &[0.1], &[0.1]], vec![vec![0]]);
        assert!((auc(&d).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let tie = doc(&[&[0.5], &[0.5]], vec![vec![0]]);
        assert_eq!(auc(&tie), Some(0.5));
        let no_neg = doc(&[&[0.5]], vec![vec![0]]);
        assert_eq!(auc(&no_neg), None);
    }

    #[test]
    fn oracle_examples() {
        let m = SimilarityMatrix::from_rows(&[vec![0.9, 0.8], vec![0.85, 0.1]]).unwrap();
        assert!((brute_force_assignment(&m).unwrap().total_similarity() - 1.65).abs() < 1e-12);
        let one = SimilarityMatrix::from_rows(&[vec![0.4]]).unwrap();
        assert_eq!(brute_force_assignment(&one).unwrap().pairs.len(), 1);
        let flat = SimilarityMatrix::new(3, 5, vec![0.2; 15]).unwrap();
        let a = brute_force_assignment(&flat).unwrap();
        assert_eq!(a.pairs.len(), 3);
        assert!((a.total_similarity() - 0.6).abs() < 1e-12);
        let big = SimilarityMatrix::new(9, 9, vec![0.0; 81]).unwrap();
        assert!(matches!(brute_force_assignment(&big), Err(EvalError::OracleTooLarge(9))));
    }

    #[test]
    fn benchmark_examples() {
        let perfect = doc(&[&[0.9, 0.1], &[0.2, 0.8]], vec![vec![0], vec![1]]);
        for scorer in [Scorer::Lap, Scorer::Max] {
            let r = run_benchmark(std::slice::from_ref(&perfect), scorer).unwrap();
            assert_eq!((r.auc, r.p_at_1, r.n_docs), (100.0, 100.0, 1));
        }
        assert!(matches!(run_benchmark(&[], Scorer::Lap), Err(EvalError::EmptyBenchmark)));
    }

    #[test]
    fn planted_signal_beats_random() {
        let random = synthetic_suite(300, 20, 10, 0.0, 5);
        let planted = synthetic_suite(300, 20, 10, 0.3, 5);
        for scorer in [Scorer::Lap, Scorer::Max] {
            let r = run_benchmark(&random, scorer).unwrap();
            let p = run_benchmark(&planted, scorer).unwrap();
            assert!(p.auc > r.auc && p.p_at_1 > r.p_at_1, "{scorer:?}: {r:?} vs {p:?}");
        }
    }

    #[test]
    fn lap_uses_assignment_for_p1() {
        // argmax puts both images on sentence 0; the assignment separates them
        let d = doc(&[&[0.9, 0.8], &[0.85, 0.1]], vec![vec![1], vec![0]]);
        assert_eq!(run_benchmark(std::slice::from_ref(&d), Scorer::Max).unwrap().p_at_1, 50.0);
        assert_eq!(run_benchmark(std::slice::from_ref(&d), Scorer::Lap).unwrap().p_at_1, 100.0);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(vals in prop::collection::vec(-1.0f64..1.0, 6), g in 0usize..6) {
            let d = LabeledDocument { scores: SimilarityMatrix::new(6, 1, vals.clone()).unwrap(), gold: vec![vec![g]] };
            let t = LabeledDocument {
                scores: SimilarityMatrix::new(6, 1, vals.iter().map(|v| (3.0 * v).exp() + 2.0).collect()).unwrap(),
                gold: vec![vec![g]],
            };
            prop_assert_eq!(auc(&d), auc(&t));
        }

        #[test]
        fn p1_invariant_under_positive_scaling(vals in prop::collection::vec(-1.0f64..1.0, 12), a in 0.01f64..50.0) {
            let d = LabeledDocument { scores: SimilarityMatrix::new(4, 3, vals.clone()).unwrap(), gold: vec![vec![0], vec![1], vec![2, 3]] };
            let s = LabeledDocument { scores: SimilarityMatrix::new(4, 3, vals.iter().map(|v| v * a).collect()).unwrap(), gold: d.gold.clone() };
            prop_assert_eq!(precision_at_1(&d), precision_at_1(&s));
        }
    }
}
