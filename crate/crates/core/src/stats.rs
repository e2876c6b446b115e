//! Corpus statistics: per-document counts, sentence coverage, domain
//! concentration and rank correlation. Accumulators merge associatively so
//! shards can be summarized in parallel.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::aligner::{max_assignment_baseline, solve_assignment};
use crate::corpus::InterleavedDocument;

pub const INVALID_DOMAIN: &str = "<invalid>";
pub const TOP_DOMAINS: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Host of `url`, lowercased, with every maximal digit run replaced by `*`.
pub fn normalize_domain(url: &str) -> String {
    let host = match Url::parse(url.trim()).ok().and_then(|u| u.host_str().map(str::to_lowercase)) {
        Some(h) if !h.is_empty() => h,
        _ => return INVALID_DOMAIN.to_string(),
    };
    let mut out = String::with_capacity(host.len());
    let mut in_digits = false;
    for c in host.chars() {
        if c.is_ascii_digit() {
            if !in_digits {
                out.push('*');
            }
            in_digits = true;
        } else {
            out.push(c);
            in_digits = false;
        }
    }
    out
}

/// Domain of an image reference, resolving relative references against the
/// page URL first.
pub fn image_domain(page_url: &str, raw_url: &str) -> String {
    match Url::parse(page_url.trim()).and_then(|base| base.join(raw_url.trim())) {
        Ok(u) => normalize_domain(u.as_str()),
        Err(_) => normalize_domain(raw_url),
    }
}

/// Fraction of sentences with at least one image matched to them.
pub fn sentence_coverage(doc: &InterleavedDocument) -> f64 {
    if doc.text_list.is_empty() {
        return 0.0;
    }
    let mut seen: Vec<usize> = doc.image_info.iter().map(|i| i.matched_text_index).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len() as f64 / doc.text_list.len() as f64
}

/// Coverage under the assignment solver and under the per-image argmax
/// baseline, both recomputed from the stored similarity matrix.
pub fn coverage_lap_vs_max(doc: &InterleavedDocument) -> Option<(f64, f64)> {
    let m = &doc.similarity_matrix;
    if m.n_sentences() == 0 || m.n_images() == 0 {
        return None;
    }
    let lap = solve_assignment(m).ok()?;
    let max = max_assignment_baseline(m);
    let n = m.n_sentences() as f64;
    Some((lap.distinct_sentences() as f64 / n, max.distinct_sentences() as f64 / n))
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: the Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::InvalidInput(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(StatsError::InvalidInput("need at least two observations".into()));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(StatsError::InvalidInput("NaN observation".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::InvalidInput("constant sequence has no rank correlation".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Element `(n-1)/2` of the sorted values described by a histogram.
fn lower_median(hist: &BTreeMap<usize, u64>) -> Option<usize> {
    let n: u64 = hist.values().sum();
    if n == 0 {
        return None;
    }
    let target = (n - 1) / 2;
    let mut seen = 0;
    for (&v, &c) in hist {
        seen += c;
        if seen > target {
            return Some(v);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub mean: f64,
    pub median: usize,
    pub min: usize,
    pub max: usize,
}

fn distribution(hist: &BTreeMap<usize, u64>) -> Option<Distribution> {
    let n: u64 = hist.values().sum();
    let median = lower_median(hist)?;
    let total: u64 = hist.iter().map(|(&v, &c)| v as u64 * c).sum();
    Some(Distribution {
        mean: total as f64 / n as f64,
        median,
        min: *hist.keys().next()?,
        max: *hist.keys().next_back()?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCount {
    pub domain: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub unique_domains: usize,
    /// Share of all items held by the most frequent `ceil(10%)` of domains.
    pub top_decile_share: f64,
    pub mean_per_domain: f64,
    pub median_per_domain: u64,
    pub top: Vec<DomainCount>,
}

/// Concentration statistics for a domain frequency table.
pub fn domain_report(freq: &BTreeMap<String, u64>) -> Option<DomainReport> {
    let total: u64 = freq.values().sum();
    if freq.is_empty() || total == 0 {
        return None;
    }
    let mut ranked: Vec<DomainCount> = freq
        .iter()
        .map(|(d, &c)| DomainCount {
            domain: d.clone(),
            count: c,
        })
        .collect();
    ranked.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.domain.cmp(&b.domain)));
    let decile = ranked.len().div_ceil(10);
    let top_mass: u64 = ranked[..decile].iter().map(|d| d.count).sum();
    let mut counts: Vec<u64> = ranked.iter().map(|d| d.count).collect();
    counts.sort_unstable();
    Some(DomainReport {
        unique_domains: ranked.len(),
        top_decile_share: top_mass as f64 / total as f64,
        mean_per_domain: total as f64 / ranked.len() as f64,
        median_per_domain: counts[(counts.len() - 1) / 2],
        top: ranked.into_iter().take(TOP_DOMAINS).collect(),
    })
}

/// Single-pass corpus accumulator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub docs: u64,
    pub images: u64,
    pub sentences: u64,
    pub image_histogram: BTreeMap<usize, u64>,
    pub sentence_histogram: BTreeMap<usize, u64>,
    /// `(n_images, n_sentences)` → document count.
    pub joint_histogram: BTreeMap<(usize, usize), u64>,
    pub coverage_sum: f64,
    pub coverage_lap_sum: f64,
    pub coverage_max_sum: f64,
    pub coverage_compared: u64,
    pub doc_domains: BTreeMap<String, u64>,
    pub image_domains: BTreeMap<String, u64>,
}

impl CorpusStats {
    pub fn add(&mut self, doc: &InterleavedDocument) {
        let ni = doc.image_info.len();
        let ns = doc.text_list.len();
        self.docs += 1;
        self.images += ni as u64;
        self.sentences += ns as u64;
        *self.image_histogram.entry(ni).or_default() += 1;
        *self.sentence_histogram.entry(ns).or_default() += 1;
        *self.joint_histogram.entry((ni, ns)).or_default() += 1;
        self.coverage_sum += sentence_coverage(doc);
        if let Some((lap, max)) = coverage_lap_vs_max(doc) {
            self.coverage_lap_sum += lap;
            self.coverage_max_sum += max;
            self.coverage_compared += 1;
        }
        *self.doc_domains.entry(normalize_domain(&doc.url)).or_default() += 1;
        for info in &doc.image_info {
            *self.image_domains.entry(image_domain(&doc.url, &info.raw_url)).or_default() += 1;
        }
    }

    pub fn merge(&mut self, other: &CorpusStats) {
        fn add_all<K: Ord + Clone>(into: &mut BTreeMap<K, u64>, from: &BTreeMap<K, u64>) {
            for (k, v) in from {
                *into.entry(k.clone()).or_default() += v;
            }
        }
        self.docs += other.docs;
        self.images += other.images;
        self.sentences += other.sentences;
        add_all(&mut self.image_histogram, &other.image_histogram);
        add_all(&mut self.sentence_histogram, &other.sentence_histogram);
        add_all(&mut self.joint_histogram, &other.joint_histogram);
        self.coverage_sum += other.coverage_sum;
        self.coverage_lap_sum += other.coverage_lap_sum;
        self.coverage_max_sum += other.coverage_max_sum;
        self.coverage_compared += other.coverage_compared;
        add_all(&mut self.doc_domains, &other.doc_domains);
        add_all(&mut self.image_domains, &other.image_domains);
    }

    pub fn report(&self) -> Result<CorpusReport, StatsError> {
        if self.docs == 0 {
            return Err(StatsError::EmptyCorpus);
        }
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (&(ni, ns), &c) in &self.joint_histogram {
            for _ in 0..c {
                xs.push(ni as f64);
                ys.push(ns as f64);
            }
        }
        let compared = self.coverage_compared.max(1) as f64;
        Ok(CorpusReport {
            docs: self.docs,
            images: self.images,
            sentences: self.sentences,
            images_per_doc: distribution(&self.image_histogram).ok_or(StatsError::EmptyCorpus)?,
            sentences_per_doc: distribution(&self.sentence_histogram).ok_or(StatsError::EmptyCorpus)?,
            mean_sentence_coverage: self.coverage_sum / self.docs as f64,
            mean_coverage_lap: self.coverage_lap_sum / compared,
            mean_coverage_max: self.coverage_max_sum / compared,
            spearman_images_sentences: spearman(&xs, &ys).ok(),
            doc_domains: domain_report(&self.doc_domains),
            image_domains: domain_report(&self.image_domains),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub docs: u64,
    pub images: u64,
    pub sentences: u64,
    pub images_per_doc: Distribution,
    pub sentences_per_doc: Distribution,
    pub mean_sentence_coverage: f64,
    pub mean_coverage_lap: f64,
    pub mean_coverage_max: f64,
    /// `None` when either count is constant across the corpus.
    pub spearman_images_sentences: Option<f64>,
    pub doc_domains: Option<DomainReport>,
    pub image_domains: Option<DomainReport>,
}

pub fn per_doc_counts<'a, I>(corpus: I) -> Result<CorpusReport, StatsError>
where
    I: IntoIterator<Item = &'a InterleavedDocument>,
{
    let mut acc = CorpusStats::default();
    for doc in corpus {
        acc.add(doc);
    }
    acc.report()
}
