//! Size/aspect gating, embedding classifier heads and recall-targeted
//! threshold calibration.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_SIDE_PX: u32 = 150;
pub const MAX_ASPECT: f64 = 2.0;
pub const NSFW_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    TooSmall,
    Aspect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeRules {
    pub min_side_px: u32,
    /// Images with `w/h` above this or below its reciprocal are rejected.
    pub max_aspect: f64,
}

impl Default for SizeRules {
    fn default() -> Self {
        SizeRules {
            min_side_px: MIN_SIDE_PX,
            max_aspect: MAX_ASPECT,
        }
    }
}

/// Reject when the short side is under the minimum or the aspect ratio
/// falls strictly outside `[1/max_aspect, max_aspect]`.
pub fn size_aspect_filter(width: u32, height: u32, rules: &SizeRules) -> Result<(), Rejection> {
    if width.min(height) < rules.min_side_px {
        return Err(Rejection::TooSmall);
    }
    // w/h > r  <=>  w > r*h ; w/h < 1/r  <=>  h > r*w
    let (w, h) = (f64::from(width), f64::from(height));
    if w > rules.max_aspect * h || h > rules.max_aspect * w {
        return Err(Rejection::Aspect);
    }
    Ok(())
}

/// Reject iff the probability is strictly over the cutoff.
pub fn nsfw_gate(prob: f64, cutoff: f64) -> bool {
    prob <= cutoff
}

/// Keep iff the face probability is below the calibrated threshold.
pub fn face_gate(prob: f64, threshold: f64) -> bool {
    prob < threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Mlp,
    Logistic,
}

/// Dense layer: `rows` outputs over `cols` inputs, weights row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
}

/// A classifier over embeddings: ReLU hidden layers, sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub name: String,
    pub kind: HeadKind,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("head `{head}` expects input dim {expected}, got {got}")]
    DimMismatch {
        head: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid head: {0}")]
    Invalid(String),
    #[error("bad magic, not a head weights file")]
    BadMagic,
    #[error("unsupported head file version {0}")]
    UnsupportedVersion(u32),
    #[error("head file truncated at byte {offset}")]
    Truncated { offset: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

const HEAD_MAGIC: &[u8; 4] = b"MMHD";
const HEAD_VERSION: u32 = 1;

impl ClassifierHead {
    pub fn new(name: impl Into<String>, kind: HeadKind, layers: Vec<Layer>) -> Result<Self, HeadError> {
        let head = ClassifierHead {
            name: name.into(),
            kind,
            layers,
        };
        head.validate()?;
        Ok(head)
    }

    /// Single-layer logistic regression head.
    pub fn logistic(name: impl Into<String>, weights: Vec<f32>, bias: f32) -> Result<Self, HeadError> {
        let cols = weights.len();
        Self::new(
            name,
            HeadKind::Logistic,
            vec![Layer {
                rows: 1,
                cols,
                weights,
                biases: vec![bias],
            }],
        )
    }

    fn validate(&self) -> Result<(), HeadError> {
        let invalid = |m: String| Err(HeadError::Invalid(m));
        let Some(last) = self.layers.last() else {
            return invalid("no layers".into());
        };
        if last.rows != 1 {
            return invalid(format!("output dim is {}, expected 1", last.rows));
        }
        if self.kind == HeadKind::Logistic && self.layers.len() != 1 {
            return invalid("logistic head must have exactly one layer".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.rows == 0 || l.cols == 0 {
                return invalid(format!("layer {i} has an empty dimension"));
            }
            if l.weights.len() != l.rows * l.cols || l.biases.len() != l.rows {
                return invalid(format!("layer {i} weight/bias sizes do not match {}x{}", l.rows, l.cols));
            }
            if i > 0 && self.layers[i - 1].rows != l.cols {
                return invalid(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.cols,
                    i - 1,
                    self.layers[i - 1].rows
                ));
            }
            if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
                return invalid(format!("layer {i} has non-finite parameters"));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    /// Forward pass; returns the sigmoid probability.
    pub fn score(&self, embedding: &[f32]) -> Result<f64, HeadError> {
        if embedding.len() != self.input_dim() {
            return Err(HeadError::DimMismatch {
                head: self.name.clone(),
                expected: self.input_dim(),
                got: embedding.len(),
            });
        }
        let mut act: Vec<f64> = embedding.iter().map(|&v| f64::from(v)).collect();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut next = Vec::with_capacity(layer.rows);
            for r in 0..layer.rows {
                let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                let z = row
                    .iter()
                    .zip(&act)
                    .fold(f64::from(layer.biases[r]), |acc, (&w, &a)| acc + f64::from(w) * a);
                next.push(if li == last { z } else { z.max(0.0) });
            }
            act = next;
        }
        Ok(sigmoid(act[0]))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(HEAD_MAGIC)?;
        w.write_all(&HEAD_VERSION.to_le_bytes())?;
        let name = self.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[match self.kind {
            HeadKind::Mlp => 0,
            HeadKind::Logistic => 1,
        }])?;
        w.write_all(&[self.layers.len() as u8])?;
        for l in &self.layers {
            w.write_all(&(l.rows as u32).to_le_bytes())?;
            w.write_all(&(l.cols as u32).to_le_bytes())?;
            for v in l.weights.iter().chain(&l.biases) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, HeadError> {
        let mut r = CountingReader { inner: r, offset: 0 };
        if &r.array::<4>()? != HEAD_MAGIC {
            return Err(HeadError::BadMagic);
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != HEAD_VERSION {
            return Err(HeadError::UnsupportedVersion(version));
        }
        let name_len = u16::from_le_bytes(r.array()?) as usize;
        let mut name = vec![0u8; name_len];
        r.fill(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| HeadError::Invalid("name is not UTF-8".into()))?;
        let kind = match r.array::<1>()?[0] {
            0 => HeadKind::Mlp,
            1 => HeadKind::Logistic,
            k => return Err(HeadError::Invalid(format!("unknown head kind {k}"))),
        };
        let n_layers = r.array::<1>()?[0] as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let rows = u32::from_le_bytes(r.array()?) as usize;
            let cols = u32::from_le_bytes(r.array()?) as usize;
            let mut read_f32s = |n: usize| -> Result<Vec<f32>, HeadError> {
                (0..n).map(|_| Ok(f32::from_le_bytes(r.array()?))).collect()
            };
            let weights = read_f32s(rows * cols)?;
            let biases = read_f32s(rows)?;
            layers.push(Layer {
                rows,
                cols,
                weights,
                biases,
            });
        }
        Self::new(name, kind, layers)
    }
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<(), HeadError> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => HeadError::Truncated { offset: self.offset },
            _ => HeadError::Io(e),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], HeadError> {
        let mut buf = [0u8; N];
        self.fill(&mut buf)?;
        Ok(buf)
    }
}

/// Logistic function, clamped so the result stays strictly inside (0, 1).
pub fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Forward pass of `head` on `embedding`.
pub fn score_head(embedding: &[f32], head: &ClassifierHead) -> Result<f64, HeadError> {
    head.score(embedding)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold: f64,
    pub achieved_recall: f64,
    /// Fraction of all scored items kept by `prob < threshold`.
    pub kept_fraction: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("calibration impossible: no positive labels")]
    CalibrationImpossible,
    #[error("target recall {0} outside [0, 1]")]
    BadTarget(f64),
    #[error("score {0} is not a probability")]
    BadScore(f64),
}

/// Recall of the rule "positive iff prob ≥ threshold".
pub fn recall_at(scores: &[(f64, bool)], threshold: f64) -> f64 {
    let positives = scores.iter().filter(|(_, l)| *l).count();
    let hit = scores.iter().filter(|(p, l)| *l && *p >= threshold).count();
    hit as f64 / positives as f64
}

/// Largest threshold (searched over observed scores and 1.0) whose recall on
/// positives reaches `target_recall`.
pub fn calibrate_threshold(
    scores: &[(f64, bool)],
    target_recall: f64,
) -> Result<CalibrationResult, CalibrationError> {
    if !(0.0..=1.0).contains(&target_recall) {
        return Err(CalibrationError::BadTarget(target_recall));
    }
    if let Some(&(p, _)) = scores.iter().find(|(p, _)| !(0.0..=1.0).contains(p)) {
        return Err(CalibrationError::BadScore(p));
    }
    let mut positives: Vec<f64> = scores.iter().filter(|(_, l)| *l).map(|(p, _)| *p).collect();
    if positives.is_empty() {
        return Err(CalibrationError::CalibrationImpossible);
    }
    positives.sort_by(|a, b| b.total_cmp(a));
    let n_pos = positives.len();

    let mut candidates: Vec<f64> = scores.iter().map(|(p, _)| *p).collect();
    candidates.push(1.0);
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();

    // Walk thresholds downward; `hit` counts positives ≥ t.
    let mut hit = 0usize;
    for t in candidates {
        while hit < n_pos && positives[hit] >= t {
            hit += 1;
        }
        let recall = hit as f64 / n_pos as f64;
        if recall >= target_recall {
            let kept = scores.iter().filter(|(p, _)| *p < t).count();
            return Ok(CalibrationResult {
                threshold: t,
                achieved_recall: recall,
                kept_fraction: kept as f64 / scores.len() as f64,
            });
        }
    }
    unreachable!("the smallest observed score always reaches full recall")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn size_aspect_examples() {
        let r = SizeRules::default();
        assert_eq!(size_aspect_filter(100, 200, &r), Err(Rejection::TooSmall));
        assert_eq!(size_aspect_filter(800, 300, &r), Err(Rejection::Aspect));
        assert_eq!(size_aspect_filter(150, 150, &r), Ok(()));
        assert_eq!(size_aspect_filter(300, 150, &r), Ok(()));
        assert_eq!(size_aspect_filter(150, 300, &r), Ok(()));
        assert_eq!(size_aspect_filter(301, 150, &r), Err(Rejection::Aspect));
        assert_eq!(size_aspect_filter(149, 800, &r), Err(Rejection::TooSmall));
    }

    #[test]
    fn sigmoid_never_saturates() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(40.0) < 1.0 && sigmoid(1e6) < 1.0);
        assert!(sigmoid(-800.0) > 0.0 && sigmoid(-1e6) > 0.0);
    }

    #[test]
    fn gates() {
        assert!(!nsfw_gate(0.25, NSFW_THRESHOLD));
        assert!(nsfw_gate(0.10, NSFW_THRESHOLD));
        assert!(nsfw_gate(0.0, NSFW_THRESHOLD));
        assert!(face_gate(0.29, 0.3));
        assert!(!face_gate(0.3, 0.3));
        assert!(!face_gate(0.31, 0.3));
    }

    #[test]
    fn head_scores() {
        let zero = ClassifierHead::logistic("z", vec![0.0; 4], 0.0).unwrap();
        assert_eq!(zero.score(&[0.3, -1.0, 2.0, 0.5]).unwrap(), 0.5);
        let mut w = vec![0.0; 4];
        w[0] = 1.0;
        let e1 = ClassifierHead::logistic("e1", w, 0.0).unwrap();
        let p = e1.score(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        // 1 / (1 + e^-1)
        assert!((p - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(matches!(e1.score(&[1.0, 0.0]), Err(HeadError::DimMismatch { .. })));
    }

    #[test]
    fn mlp_forward_by_hand() {
        // 2 -> 2 (relu) -> 1
        let head = ClassifierHead::new(
            "mlp",
            HeadKind::Mlp,
            vec![
                Layer { rows: 2, cols: 2, weights: vec![1.0, -1.0, 0.5, 0.5], biases: vec![0.0, -1.0] },
                Layer { rows: 1, cols: 2, weights: vec![2.0, 3.0], biases: vec![-1.0] },
            ],
        )
        .unwrap();
        // x = (2, 1): hidden = relu(1, 0.5) = (1, 0.5); out = 2 + 1.5 - 1 = 2.5
        let p = head.score(&[2.0, 1.0]).unwrap();
        assert!((p - sigmoid(2.5)).abs() < 1e-15);
        // x = (-1, 1): hidden = relu(-2, -1) = (0, 0); out = -1
        assert!((head.score(&[-1.0, 1.0]).unwrap() - sigmoid(-1.0)).abs() < 1e-15);
    }

    #[test]
    fn head_validation() {
        assert!(ClassifierHead::new("x", HeadKind::Mlp, vec![]).is_err());
        let bad_chain = vec![
            Layer { rows: 3, cols: 2, weights: vec![0.0; 6], biases: vec![0.0; 3] },
            Layer { rows: 1, cols: 2, weights: vec![0.0; 2], biases: vec![0.0] },
        ];
        assert!(ClassifierHead::new("x", HeadKind::Mlp, bad_chain).is_err());
    }

    #[test]
    fn head_file_round_trip() {
        let head = ClassifierHead::new(
            "nsfw",
            HeadKind::Mlp,
            vec![
                Layer { rows: 2, cols: 3, weights: vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6], biases: vec![0.01, 0.02] },
                Layer { rows: 1, cols: 2, weights: vec![1.5, -2.5], biases: vec![0.25] },
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        head.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MMHD");
        let back = ClassifierHead::read_from(&buf[..]).unwrap();
        assert_eq!(back, head);
        assert!(matches!(
            ClassifierHead::read_from(&buf[..buf.len() - 1]),
            Err(HeadError::Truncated { .. })
        ));
    }

    #[test]
    fn calibration_examples() {
        let separable = [(1.0, true), (1.0, true), (0.0, false), (0.0, false), (0.0, false)];
        let r = calibrate_threshold(&separable, 0.95).unwrap();
        assert_eq!(r.threshold, 1.0);
        assert_eq!(r.achieved_recall, 1.0);
        assert_eq!(r.kept_fraction, 3.0 / 5.0);

        let scores = [(0.9, true), (0.8, true), (0.7, true), (0.2, true), (0.1, false), (0.1, false)];
        let r = calibrate_threshold(&scores, 0.95).unwrap();
        assert_eq!(r.threshold, 0.2);
        assert_eq!(r.achieved_recall, 1.0);
        assert_eq!(r.kept_fraction, 2.0 / 6.0);

        assert_eq!(
            calibrate_threshold(&[(0.3, false)], 0.95),
            Err(CalibrationError::CalibrationImpossible)
        );
        assert!(calibrate_threshold(&scores, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn aspect_is_symmetric(w in 1u32..2000, h in 1u32..2000) {
            let r = SizeRules::default();
            prop_assert_eq!(size_aspect_filter(w, h, &r).is_ok(), size_aspect_filter(h, w, &r).is_ok());
        }

        #[test]
        fn head_output_in_open_unit_interval(x in prop::collection::vec(-5.0f32..5.0, 6), w in prop::collection::vec(-3.0f32..3.0, 6), b in -3.0f32..3.0) {
            let head = ClassifierHead::logistic("p", w, b).unwrap();
            let p = head.score(&x).unwrap();
            prop_assert!(p > 0.0 && p < 1.0);
        }

        #[test]
        fn calibration_is_exact_and_monotone(
            scores in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..80),
            t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0,
        ) {
            prop_assume!(scores.iter().any(|(_, l)| *l));
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = calibrate_threshold(&scores, lo).unwrap();
            let b = calibrate_threshold(&scores, hi).unwrap();
            prop_assert!(b.threshold <= a.threshold);
            prop_assert_eq!(recall_at(&scores, a.threshold), a.achieved_recall);
            prop_assert!(a.achieved_recall >= lo);
            // no larger candidate reaches the target
            for &(p, _) in &scores {
                if p > a.threshold {
                    prop_assert!(recall_at(&scores, p) < lo);
                }
            }
        }
    }
}
