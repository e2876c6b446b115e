//! DCT perceptual hashing and duplicate detection.
//!
//! The hash is the classical 64-bit pHash: luma → 32×32 area resample →
//! 2-D DCT-II → the 8×8 block of lowest non-DC frequencies (rows and columns
//! 1..=8) → one bit per coefficient, set when it exceeds the block median.
//! Bits are stored most-significant first in row-major block order. All
//! arithmetic is f64 in a fixed order, so the hash depends only on pixels.

use std::f64::consts::PI;
use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;
use std::sync::OnceLock;

use image::RgbImage;
use rand::seq::index::sample;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::rng::derive_rng;

const SIDE: usize = 32;
const BLOCK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct PHash(pub u64);

impl PHash {
    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn distance(self, other: PHash) -> u32 {
        hamming(self, other)
    }
}

/// Number of differing bits.
pub fn hamming(a: PHash, b: PHash) -> u32 {
    (a.0 ^ b.0).count_ones()
}

impl fmt::Display for PHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for PHash {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u64::from_str_radix(s, 16).map(PHash)
    }
}

impl Serialize for PHash {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PHash {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Perceptual hash of an RGB raster.
pub fn phash64(image: &RgbImage) -> PHash {
    let (w, h) = (image.width() as usize, image.height() as usize);
    assert!(w >= 1 && h >= 1, "image must be at least 1x1");
    let luma: Vec<f64> = image
        .pixels()
        .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
        .collect();
    let small = area_resample(&luma, w, h, SIDE, SIDE);
    let mut coeffs = dct2d(&small);
    // Rounding noise on flat regions would otherwise decide bits.
    let eps = 1e-9 * (coeffs[0].abs() + 1.0);
    for c in &mut coeffs {
        if c.abs() < eps {
            *c = 0.0;
        }
    }

    let mut block = [0.0f64; BLOCK * BLOCK];
    for r in 0..BLOCK {
        for c in 0..BLOCK {
            block[r * BLOCK + c] = coeffs[(r + 1) * SIDE + (c + 1)];
        }
    }
    let mut sorted = block;
    sorted.sort_by(f64::total_cmp);
    let median = (sorted[31] + sorted[32]) / 2.0;

    let bits = block
        .iter()
        .fold(0u64, |acc, &v| (acc << 1) | u64::from(v > median));
    PHash(bits)
}

/// Box-filter resample; each output pixel averages the input area it covers.
fn area_resample(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let xw = area_weights(w, out_w);
    let yw = area_weights(h, out_h);
    let mut tmp = vec![0.0; h * out_w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (ox, weights) in xw.iter().enumerate() {
            tmp[y * out_w + ox] = weights.iter().map(|&(k, wt)| row[k] * wt).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for (oy, weights) in yw.iter().enumerate() {
        for ox in 0..out_w {
            out[oy * out_w + ox] = weights.iter().map(|&(k, wt)| tmp[k * out_w + ox] * wt).sum();
        }
    }
    out
}

fn area_weights(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|j| {
            let lo = j as f64 * scale;
            let hi = (j + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(input);
            (first..last)
                .filter_map(|k| {
                    let overlap = (hi.min((k + 1) as f64) - lo.max(k as f64)).max(0.0);
                    (overlap > 0.0).then_some((k, overlap / scale))
                })
                .collect()
        })
        .collect()
}

fn cos_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = SIDE as f64;
        let mut t = vec![0.0; SIDE * SIDE];
        for k in 0..SIDE {
            for x in 0..SIDE {
                t[k * SIDE + x] = (PI / n * (x as f64 + 0.5) * k as f64).cos();
            }
        }
        t
    })
}

/// Unnormalised separable DCT-II over a SIDE×SIDE grid.
fn dct2d(input: &[f64]) -> Vec<f64> {
    let table = cos_table();
    let mut rows = vec![0.0; SIDE * SIDE];
    for y in 0..SIDE {
        for k in 0..SIDE {
            rows[y * SIDE + k] = (0..SIDE)
                .map(|x| input[y * SIDE + x] * table[k * SIDE + x])
                .sum();
        }
    }
    let mut out = vec![0.0; SIDE * SIDE];
    for k in 0..SIDE {
        for c in 0..SIDE {
            out[k * SIDE + c] = (0..SIDE)
                .map(|y| rows[y * SIDE + c] * table[k * SIDE + y])
                .sum();
        }
    }
    out
}

/// Anything carrying a perceptual hash.
pub trait Hashed {
    fn phash(&self) -> PHash;
}

impl Hashed for PHash {
    fn phash(&self) -> PHash {
        *self
    }
}

impl Hashed for crate::corpus::ImageRecord {
    fn phash(&self) -> PHash {
        self.phash
    }
}

/// Greedy in-order dedup: a record is dropped iff it lies within `threshold`
/// of a record already kept. Returns `(kept, dropped)`.
pub fn dedup_within_document<T: Hashed>(records: Vec<T>, threshold: u32) -> (Vec<T>, Vec<T>) {
    let mut kept: Vec<T> = Vec::with_capacity(records.len());
    let mut dropped = Vec::new();
    for r in records {
        let h = r.phash();
        if kept.iter().any(|k| hamming(k.phash(), h) <= threshold) {
            dropped.push(r);
        } else {
            kept.push(r);
        }
    }
    (kept, dropped)
}

/// Metric tree over Hamming distance.
#[derive(Debug, Default, Clone)]
struct BkTree {
    nodes: Vec<BkNode>,
}

#[derive(Debug, Clone)]
struct BkNode {
    hash: PHash,
    payload: usize,
    children: Vec<(u32, usize)>,
}

impl BkTree {
    fn insert(&mut self, hash: PHash, payload: usize) {
        let new = self.nodes.len();
        self.nodes.push(BkNode {
            hash,
            payload,
            children: Vec::new(),
        });
        if new == 0 {
            return;
        }
        let mut cur = 0;
        loop {
            let d = hamming(self.nodes[cur].hash, hash);
            match self.nodes[cur].children.iter().find(|(cd, _)| *cd == d) {
                Some(&(_, next)) => cur = next,
                None => {
                    self.nodes[cur].children.push((d, new));
                    return;
                }
            }
        }
    }

    /// Payloads of every stored hash within `radius` of `hash`.
    fn within(&self, hash: PHash, radius: u32) -> Vec<usize> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            return out;
        }
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            let d = hamming(node.hash, hash);
            if d <= radius {
                out.push(node.payload);
            }
            let lo = d.saturating_sub(radius);
            let hi = d + radius;
            stack.extend(
                node.children
                    .iter()
                    .filter(|(cd, _)| *cd >= lo && *cd <= hi)
                    .map(|&(_, c)| c),
            );
        }
        out
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Union keeping the smaller index as root, so roots are first members.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cluster {
    /// First sample member of the cluster.
    pub representative: PHash,
    pub count: u32,
}

/// Duplicate-cluster sizes over a corpus sample.
#[derive(Debug, Clone)]
pub struct DuplicateIndex {
    threshold: u8,
    clusters: Vec<Cluster>,
    tree: BkTree,
}

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("bad magic, not a duplicate index")]
    BadMagic,
    #[error("unsupported duplicate index version {0}")]
    UnsupportedVersion(u32),
    #[error("duplicate index truncated at byte {offset}")]
    Truncated { offset: u64 },
    #[error("invalid cluster count 0 at byte {offset}")]
    EmptyCluster { offset: u64 },
    #[error("threshold {0} exceeds 64")]
    BadThreshold(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

const INDEX_MAGIC: &[u8; 4] = b"MMDI";
const INDEX_VERSION: u32 = 1;

impl DuplicateIndex {
    /// Cluster the sample: union-find with an edge between every pair at
    /// Hamming distance ≤ `threshold`.
    pub fn build(sample: &[PHash], threshold: u32) -> Result<Self, IndexError> {
        if threshold > 64 {
            return Err(IndexError::BadThreshold(threshold));
        }
        let mut tree = BkTree::default();
        let mut uf = UnionFind::new(sample.len());
        for (i, &h) in sample.iter().enumerate() {
            for j in tree.within(h, threshold) {
                uf.union(i, j);
            }
            tree.insert(h, i);
        }
        let mut counts = vec![0u32; sample.len()];
        for i in 0..sample.len() {
            let root = uf.find(i);
            counts[root] += 1;
        }
        let clusters = (0..sample.len())
            .filter(|&i| counts[i] > 0)
            .map(|i| Cluster {
                representative: sample[i],
                count: counts[i],
            })
            .collect();
        Ok(Self::from_clusters(threshold as u8, clusters))
    }

    pub fn from_clusters(threshold: u8, clusters: Vec<Cluster>) -> Self {
        let mut tree = BkTree::default();
        for (i, c) in clusters.iter().enumerate() {
            tree.insert(c.representative, i);
        }
        DuplicateIndex {
            threshold,
            clusters,
            tree,
        }
    }

    pub fn threshold(&self) -> u32 {
        u32::from(self.threshold)
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn sample_size(&self) -> u64 {
        self.clusters.iter().map(|c| u64::from(c.count)).sum()
    }

    /// Largest count among clusters whose representative is within the
    /// index threshold of `hash`.
    pub fn matching_count(&self, hash: PHash) -> Option<u32> {
        self.tree
            .within(hash, self.threshold())
            .into_iter()
            .map(|i| self.clusters[i].count)
            .max()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&[self.threshold])?;
        w.write_all(&(self.clusters.len() as u64).to_le_bytes())?;
        for c in &self.clusters {
            w.write_all(&c.representative.0.to_le_bytes())?;
            w.write_all(&c.count.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, IndexError> {
        let mut offset = 0u64;
        let mut take = |buf: &mut [u8], offset: &mut u64| -> Result<(), IndexError> {
            r.read_exact(buf).map_err(|e| match e.kind() {
                io::ErrorKind::UnexpectedEof => IndexError::Truncated { offset: *offset },
                _ => IndexError::Io(e),
            })?;
            *offset += buf.len() as u64;
            Ok(())
        };
        let mut magic = [0u8; 4];
        take(&mut magic, &mut offset)?;
        if &magic != INDEX_MAGIC {
            return Err(IndexError::BadMagic);
        }
        let mut b4 = [0u8; 4];
        take(&mut b4, &mut offset)?;
        let version = u32::from_le_bytes(b4);
        if version != INDEX_VERSION {
            return Err(IndexError::UnsupportedVersion(version));
        }
        let mut b1 = [0u8; 1];
        take(&mut b1, &mut offset)?;
        let threshold = b1[0];
        if threshold > 64 {
            return Err(IndexError::BadThreshold(u32::from(threshold)));
        }
        let mut b8 = [0u8; 8];
        take(&mut b8, &mut offset)?;
        let n = u64::from_le_bytes(b8);
        let mut clusters = Vec::new();
        for _ in 0..n {
            take(&mut b8, &mut offset)?;
            let representative = PHash(u64::from_le_bytes(b8));
            take(&mut b4, &mut offset)?;
            let count = u32::from_le_bytes(b4);
            if count == 0 {
                return Err(IndexError::EmptyCluster { offset: offset - 4 });
            }
            clusters.push(Cluster {
                representative,
                count,
            });
        }
        Ok(Self::from_clusters(threshold, clusters))
    }
}

/// Drop records whose matching cluster holds more than `max_count` members.
/// Returns `(kept, dropped)`.
pub fn drop_frequent_duplicates<T: Hashed>(
    records: Vec<T>,
    index: &DuplicateIndex,
    max_count: u32,
) -> (Vec<T>, Vec<T>) {
    records
        .into_iter()
        .partition(|r| index.matching_count(r.phash()).is_none_or(|c| c <= max_count))
}

/// Deterministic sample of up to `size` hashes, kept in input order.
pub fn choose_sample(hashes: &[PHash], size: usize, seed: u64) -> Vec<PHash> {
    if hashes.len() <= size {
        return hashes.to_vec();
    }
    let mut rng = derive_rng(seed, "dedup-sample", "");
    let mut picked = sample(&mut rng, hashes.len(), size).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| hashes[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn solid(w: u32, h: u32, v: u8) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([v, v, v]))
    }

    fn pattern(w: u32, h: u32, seed: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = ((x * (3 + seed) + y * (5 + 2 * seed)) ^ (x * y / (1 + seed))) % 256;
            Rgb([v as u8, (255 - v) as u8, ((v * 7) % 256) as u8])
        })
    }

    #[test]
    fn hamming_examples() {
        let x = PHash(0xdead_beef);
        assert_eq!(hamming(x, x), 0);
        assert_eq!(hamming(PHash(0x0), PHash(0xF)), 4);
        assert_eq!(hamming(PHash(u64::MAX), PHash(0)), 64);
    }

    #[test]
    fn phash_is_reflexive_and_deterministic() {
        let img = pattern(120, 90, 1);
        assert_eq!(phash64(&img), phash64(&img.clone()));
        assert_eq!(hamming(phash64(&img), phash64(&img)), 0);
    }

    #[test]
    fn phash_depends_on_pixels_not_encoding() {
        let img = pattern(64, 48, 2);
        let mut png = Vec::new();
        image::DynamicImage::ImageRgb8(img.clone())
            .write_to(&mut io::Cursor::new(&mut png), image::ImageFormat::Png)
            .unwrap();
        let decoded = image::load_from_memory(&png).unwrap().to_rgb8();
        assert_eq!(phash64(&decoded), phash64(&img));
    }

    // Pattern hash cross-checked against a numpy/scipy implementation.
    #[test]
    fn solid_images_regression() {
        let black = phash64(&solid(50, 50, 0));
        let white = phash64(&solid(50, 50, 255));
        assert_eq!(black, PHash(0));
        assert_eq!(white, PHash(0));
        assert_eq!(format!("{}", phash64(&pattern(64, 48, 2))), PATTERN_HASH);
    }

    const PATTERN_HASH: &str = "5ee6e842835ed193";

    #[test]
    fn near_copies_are_close_and_distinct_images_far() {
        let a = pattern(200, 150, 3);
        let mut b = a.clone();
        for p in b.pixels_mut().take(50) {
            p[0] = p[0].wrapping_add(3);
        }
        let c = pattern(200, 150, 9);
        assert!(hamming(phash64(&a), phash64(&b)) <= 5);
        assert!(hamming(phash64(&a), phash64(&c)) > 10);
    }

    #[test]
    fn tiny_images_hash() {
        let _ = phash64(&solid(1, 1, 128));
        let _ = phash64(&pattern(3, 7, 1));
    }

    #[test]
    fn within_document_dedup() {
        let same = vec![PHash(0xABCD), PHash(0xABCD)];
        for t in [0, 5, 64] {
            let (kept, dropped) = dedup_within_document(same.clone(), t);
            assert_eq!(kept, vec![PHash(0xABCD)]);
            assert_eq!(dropped.len(), 1);
        }
        // distance 6 at threshold 5
        let (kept, _) = dedup_within_document(vec![PHash(0), PHash(0b11_1111)], 5);
        assert_eq!(kept.len(), 2);
        // three mutually within 5: only the first survives
        let (kept, dropped) =
            dedup_within_document(vec![PHash(0b1), PHash(0b11), PHash(0b111)], 5);
        assert_eq!(kept, vec![PHash(0b1)]);
        assert_eq!(dropped, vec![PHash(0b11), PHash(0b111)]);
    }

    #[test]
    fn frequent_duplicates_use_strict_more_than() {
        let eleven = [PHash(0xFF00); 11];
        let ten = [PHash(0x00FF_0000_0000); 10];
        let sample: Vec<PHash> = eleven.iter().chain(ten.iter()).copied().collect();
        let index = DuplicateIndex::build(&sample, 5).unwrap();
        assert_eq!(index.clusters().len(), 2);
        let records = vec![PHash(0xFF01), PHash(0x00FF_0000_0001), PHash(0x1234_5678_9ABC)];
        let (kept, dropped) = drop_frequent_duplicates(records, &index, 10);
        assert_eq!(dropped, vec![PHash(0xFF01)]);
        assert_eq!(kept, vec![PHash(0x00FF_0000_0001), PHash(0x1234_5678_9ABC)]);
    }

    #[test]
    fn clusters_are_transitive() {
        // 0 -- 0b111 -- 0b111111 chain at threshold 3
        let index = DuplicateIndex::build(&[PHash(0), PHash(0b111), PHash(0b11_1111)], 3).unwrap();
        assert_eq!(
            index.clusters(),
            &[Cluster {
                representative: PHash(0),
                count: 3
            }]
        );
    }

    #[test]
    fn index_file_round_trip_and_errors() {
        let index = DuplicateIndex::build(&[PHash(1), PHash(1), PHash(u64::MAX)], 5).unwrap();
        let mut buf = Vec::new();
        index.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MMDI");
        assert_eq!(buf.len(), 4 + 4 + 1 + 8 + 2 * 12);
        let back = DuplicateIndex::read_from(&buf[..]).unwrap();
        assert_eq!(back.clusters(), index.clusters());
        assert_eq!(back.threshold(), 5);
        assert_eq!(back.sample_size(), 3);

        assert!(matches!(
            DuplicateIndex::read_from(&buf[..buf.len() - 3]),
            Err(IndexError::Truncated { offset: 37 })
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(DuplicateIndex::read_from(&bad[..]), Err(IndexError::BadMagic)));
    }

    #[test]
    fn sample_is_deterministic_subset() {
        let hashes: Vec<PHash> = (0..100).map(PHash).collect();
        let a = choose_sample(&hashes, 10, 3);
        assert_eq!(a, choose_sample(&hashes, 10, 3));
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(choose_sample(&hashes[..5], 10, 3).len(), 5);
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
            let (a, b, c) = (PHash(a), PHash(b), PHash(c));
            prop_assert_eq!(hamming(a, b) == 0, a == b);
            prop_assert_eq!(hamming(a, b), hamming(b, a));
            prop_assert!(hamming(a, c) <= hamming(a, b) + hamming(b, c));
        }

        #[test]
        fn dedup_output_properties(hashes in prop::collection::vec(any::<u16>(), 0..30), t in 0u32..10) {
            let input: Vec<PHash> = hashes.iter().map(|&h| PHash(u64::from(h))).collect();
            let (kept, dropped) = dedup_within_document(input.clone(), t);
            prop_assert_eq!(kept.len() + dropped.len(), input.len());
            // order-stable subset
            let mut it = input.iter();
            for k in &kept {
                prop_assert!(it.any(|x| x == k));
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(hamming(*a, *b) > t);
                }
            }
            for d in &dropped {
                prop_assert!(kept.iter().any(|k| hamming(*k, *d) <= t));
            }
        }

        #[test]
        fn bktree_matches_linear_scan(hashes in prop::collection::vec(any::<u16>(), 1..60), q in any::<u16>(), r in 0u32..8) {
            let mut tree = BkTree::default();
            for (i, &h) in hashes.iter().enumerate() {
                tree.insert(PHash(u64::from(h)), i);
            }
            let mut got = tree.within(PHash(u64::from(q)), r);
            got.sort_unstable();
            let want: Vec<usize> = hashes.iter().enumerate()
                .filter(|(_, &h)| hamming(PHash(u64::from(h)), PHash(u64::from(q))) <= r)
                .map(|(i, _)| i).collect();
            prop_assert_eq!(got, want);
        }
    }
}
