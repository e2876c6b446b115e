//! Image fetching with a global and per-host concurrency bound, retries,
//! size limits, downscaling and an on-disk content-addressed cache.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;
use url::Url;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FetchPolicy {
    pub max_concurrency: usize,
    pub per_host: usize,
    pub timeout_ms: u64,
    pub retries: u32,
    pub max_bytes: u64,
    /// Longer side after downscaling.
    pub max_dim: u32,
    pub backoff_ms: u64,
    pub user_agent: String,
}

impl Default for FetchPolicy {
    fn default() -> Self {
        FetchPolicy {
            max_concurrency: 64,
            per_host: 4,
            timeout_ms: 10_000,
            retries: 2,
            max_bytes: 20 * 1024 * 1024,
            max_dim: 800,
            backoff_ms: 100,
            user_agent: concat!("mm-interleave/", env!("CARGO_PKG_VERSION")).to_string(),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum FetchError {
    #[error("invalid url: {0}")]
    InvalidUrl(String),
    #[error("fetch failed: {0}")]
    FetchFailed(String),
    #[error("http status {0}")]
    HttpStatus(u16),
    #[error("body exceeds {0} bytes")]
    TooLarge(u64),
    #[error("decode failed: {0}")]
    DecodeFailed(String),
}

impl FetchError {
    pub fn label(&self) -> &'static str {
        match self {
            FetchError::InvalidUrl(_) => "invalid_url",
            FetchError::FetchFailed(_) => "fetch_failed",
            FetchError::HttpStatus(_) => "http_status",
            FetchError::TooLarge(_) => "too_large",
            FetchError::DecodeFailed(_) => "decode_failed",
        }
    }

    fn retryable(&self) -> bool {
        match self {
            FetchError::FetchFailed(_) => true,
            FetchError::HttpStatus(s) => *s == 429 || *s >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FetchedImage {
    pub url: String,
    /// sha256 of the original bytes, hex.
    pub content_hash: String,
    pub original_width: u32,
    pub original_height: u32,
    /// Downscaled raster.
    pub image: RgbImage,
    pub from_cache: bool,
}

impl FetchedImage {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }
}

/// Target size keeping the aspect ratio with the longer side at most `cap`.
pub fn resized_dims(width: u32, height: u32, cap: u32) -> (u32, u32) {
    let major = width.max(height);
    if major <= cap {
        return (width, height);
    }
    let minor = width.min(height);
    // round(minor * cap / major) in integers
    let scaled = ((2 * u64::from(minor) * u64::from(cap) + u64::from(major)) / (2 * u64::from(major))).max(1) as u32;
    if width >= height {
        (cap, scaled)
    } else {
        (scaled, cap)
    }
}

/// Bilinear downscale to [`resized_dims`]; smaller images are returned as is.
pub fn resize_max_dim(image: RgbImage, cap: u32) -> RgbImage {
    let (w, h) = resized_dims(image.width(), image.height(), cap);
    if (w, h) == image.dimensions() {
        return image;
    }
    image::imageops::resize(&image, w, h, FilterType::Triangle)
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Decode, record the original size, downscale.
pub fn decode_image(bytes: &[u8], max_dim: u32) -> Result<(u32, u32, RgbImage), FetchError> {
    let img = image::load_from_memory(bytes).map_err(|e| FetchError::DecodeFailed(e.to_string()))?;
    let (w, h) = (img.width(), img.height());
    if w == 0 || h == 0 {
        return Err(FetchError::DecodeFailed("empty image".into()));
    }
    Ok((w, h, resize_max_dim(img.to_rgb8(), max_dim)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub url: String,
    pub content_hash: String,
    pub width: u32,
    pub height: u32,
    pub fetched_at: u64,
}

/// Content-addressed byte cache: `<root>/<hh>/<hash>.bin` plus a JSON Lines
/// URL index.
#[derive(Debug)]
pub struct ImageCache {
    root: PathBuf,
    index: Mutex<HashMap<String, CacheEntry>>,
}

impl ImageCache {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut index = HashMap::new();
        let path = root.join("index.jsonl");
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                // a torn final line from an interrupted run is ignored
                if let Ok(entry) = serde_json::from_str::<CacheEntry>(&line) {
                    index.insert(entry.url.clone(), entry);
                }
            }
        }
        Ok(ImageCache {
            root,
            index: Mutex::new(index),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Where the bytes with content hash `hash` are stored.
    pub fn blob_path(&self, hash: &str) -> PathBuf {
        self.root.join(&hash[..2]).join(format!("{hash}.bin"))
    }

    pub fn lookup(&self, url: &str) -> Option<(CacheEntry, Vec<u8>)> {
        let entry = self.index.lock().expect("cache index lock").get(url).cloned()?;
        let bytes = fs::read(self.blob_path(&entry.content_hash)).ok()?;
        (content_hash(&bytes) == entry.content_hash).then_some((entry, bytes))
    }

    pub fn store(&self, url: &str, bytes: &[u8], width: u32, height: u32) -> io::Result<CacheEntry> {
        let hash = content_hash(bytes);
        let blob = self.blob_path(&hash);
        if !blob.exists() {
            fs::create_dir_all(blob.parent().expect("blob has a parent"))?;
            let tmp = blob.with_extension(format!("tmp{}", std::process::id()));
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &blob)?;
        }
        let entry = CacheEntry {
            url: url.to_string(),
            content_hash: hash,
            width,
            height,
            fetched_at: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let mut index = self.index.lock().expect("cache index lock");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join("index.jsonl"))?;
        writeln!(f, "{}", serde_json::to_string(&entry).expect("entry serializes"))?;
        index.insert(entry.url.clone(), entry.clone());
        Ok(entry)
    }
}

/// Live counters, readable while a batch is running.
#[derive(Debug, Default)]
pub struct FetchCounters {
    pub requested: AtomicU64,
    pub ok: AtomicU64,
    pub cache_hits: AtomicU64,
    pub attempts: AtomicU64,
    pub retries: AtomicU64,
    pub invalid_url: AtomicU64,
    pub fetch_failed: AtomicU64,
    pub http_status: AtomicU64,
    pub too_large: AtomicU64,
    pub decode_failed: AtomicU64,
    in_flight: AtomicU64,
    pub max_in_flight: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchStats {
    pub requested: u64,
    pub ok: u64,
    pub cache_hits: u64,
    pub attempts: u64,
    pub retries: u64,
    pub invalid_url: u64,
    pub fetch_failed: u64,
    pub http_status: u64,
    pub too_large: u64,
    pub decode_failed: u64,
    pub max_in_flight: u64,
}

impl FetchCounters {
    pub fn snapshot(&self) -> FetchStats {
        let g = |a: &AtomicU64| a.load(Ordering::SeqCst);
        FetchStats {
            requested: g(&self.requested),
            ok: g(&self.ok),
            cache_hits: g(&self.cache_hits),
            attempts: g(&self.attempts),
            retries: g(&self.retries),
            invalid_url: g(&self.invalid_url),
            fetch_failed: g(&self.fetch_failed),
            http_status: g(&self.http_status),
            too_large: g(&self.too_large),
            decode_failed: g(&self.decode_failed),
            max_in_flight: g(&self.max_in_flight),
        }
    }

    fn record_error(&self, e: &FetchError) {
        let c = match e {
            FetchError::InvalidUrl(_) => &self.invalid_url,
            FetchError::FetchFailed(_) => &self.fetch_failed,
            FetchError::HttpStatus(_) => &self.http_status,
            FetchError::TooLarge(_) => &self.too_large,
            FetchError::DecodeFailed(_) => &self.decode_failed,
        };
        c.fetch_add(1, Ordering::SeqCst);
    }
}

struct InFlight<'a>(&'a FetchCounters);

impl<'a> InFlight<'a> {
    fn enter(c: &'a FetchCounters) -> Self {
        let now = c.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        c.max_in_flight.fetch_max(now, Ordering::SeqCst);
        InFlight(c)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

pub struct Fetcher {
    client: reqwest::Client,
    policy: FetchPolicy,
    global: Semaphore,
    hosts: Mutex<HashMap<String, Arc<Semaphore>>>,
    cache: Option<ImageCache>,
    counters: FetchCounters,
}

impl Fetcher {
    pub fn new(policy: FetchPolicy, cache: Option<ImageCache>) -> Result<Self, FetchError> {
        if policy.max_concurrency == 0 || policy.per_host == 0 || policy.max_dim == 0 {
            return Err(FetchError::FetchFailed("concurrency limits and max_dim must be positive".into()));
        }
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(policy.timeout_ms))
            .user_agent(policy.user_agent.clone())
            .build()
            .map_err(|e| FetchError::FetchFailed(e.to_string()))?;
        Ok(Fetcher {
            client,
            global: Semaphore::new(policy.max_concurrency),
            hosts: Mutex::new(HashMap::new()),
            policy,
            cache,
            counters: FetchCounters::default(),
        })
    }

    pub fn policy(&self) -> &FetchPolicy {
        &self.policy
    }

    pub fn counters(&self) -> &FetchCounters {
        &self.counters
    }

    fn host_gate(&self, url: &Url) -> Arc<Semaphore> {
        let key = format!("{}://{}:{}", url.scheme(), url.host_str().unwrap_or(""), url.port_or_known_default().unwrap_or(0));
        let mut hosts = self.hosts.lock().expect("host map lock");
        hosts
            .entry(key)
            .or_insert_with(|| Arc::new(Semaphore::new(self.policy.per_host)))
            .clone()
    }

    /// Fetch, decode and downscale one image.
    pub async fn fetch(&self, raw: &str) -> Result<FetchedImage, FetchError> {
        self.counters.requested.fetch_add(1, Ordering::SeqCst);
        let result = self.fetch_inner(raw).await;
        match &result {
            Ok(_) => self.counters.ok.fetch_add(1, Ordering::SeqCst),
            Err(e) => {
                self.counters.record_error(e);
                0
            }
        };
        result
    }

    async fn fetch_inner(&self, raw: &str) -> Result<FetchedImage, FetchError> {
        let url = Url::parse(raw).map_err(|e| FetchError::InvalidUrl(format!("{raw}: {e}")))?;
        if !matches!(url.scheme(), "http" | "https" | "file") {
            return Err(FetchError::InvalidUrl(format!("unsupported scheme {}", url.scheme())));
        }

        if let Some((entry, bytes)) = self.cache.as_ref().and_then(|c| c.lookup(raw)) {
            self.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
            let max_dim = self.policy.max_dim;
            let (w, h, image) = tokio::task::spawn_blocking(move || decode_image(&bytes, max_dim))
                .await
                .map_err(|e| FetchError::DecodeFailed(e.to_string()))??;
            return Ok(FetchedImage {
                url: raw.to_string(),
                content_hash: entry.content_hash,
                original_width: w,
                original_height: h,
                image,
                from_cache: true,
            });
        }

        let bytes = self.download(&url).await?;
        let max_dim = self.policy.max_dim;
        let (bytes, decoded) = tokio::task::spawn_blocking(move || {
            let d = decode_image(&bytes, max_dim);
            (bytes, d)
        })
        .await
        .map_err(|e| FetchError::DecodeFailed(e.to_string()))?;
        let (w, h, image) = decoded?;
        let hash = match &self.cache {
            Some(cache) => match cache.store(raw, &bytes, w, h) {
                Ok(entry) => entry.content_hash,
                Err(e) => {
                    log::warn!("cache write failed for {raw}: {e}");
                    content_hash(&bytes)
                }
            },
            None => content_hash(&bytes),
        };
        Ok(FetchedImage {
            url: raw.to_string(),
            content_hash: hash,
            original_width: w,
            original_height: h,
            image,
            from_cache: false,
        })
    }

    async fn download(&self, url: &Url) -> Result<Vec<u8>, FetchError> {
        if url.scheme() == "file" {
            let path = url
                .to_file_path()
                .map_err(|_| FetchError::InvalidUrl(url.to_string()))?;
            let _permit = self.global.acquire().await.expect("semaphore open");
            let _guard = InFlight::enter(&self.counters);
            self.counters.attempts.fetch_add(1, Ordering::SeqCst);
            let meta = tokio::fs::metadata(&path)
                .await
                .map_err(|e| FetchError::FetchFailed(format!("{}: {e}", path.display())))?;
            if meta.len() > self.policy.max_bytes {
                return Err(FetchError::TooLarge(self.policy.max_bytes));
            }
            return tokio::fs::read(&path)
                .await
                .map_err(|e| FetchError::FetchFailed(format!("{}: {e}", path.display())));
        }

        let host = self.host_gate(url);
        let mut attempt = 0;
        loop {
            let result = {
                // host first, so a slow host cannot hold global permits while queued
                let _host = host.acquire().await.expect("semaphore open");
                let _permit = self.global.acquire().await.expect("semaphore open");
                let _guard = InFlight::enter(&self.counters);
                self.counters.attempts.fetch_add(1, Ordering::SeqCst);
                self.get_once(url).await
            };
            match result {
                Err(e) if e.retryable() && attempt < self.policy.retries => {
                    attempt += 1;
                    self.counters.retries.fetch_add(1, Ordering::SeqCst);
                    log::debug!("retrying {url} after {e}");
                    tokio::time::sleep(Duration::from_millis(self.policy.backoff_ms << (attempt - 1))).await;
                }
                other => return other,
            }
        }
    }

    async fn get_once(&self, url: &Url) -> Result<Vec<u8>, FetchError> {
        let mut resp = self
            .client
            .get(url.clone())
            .send()
            .await
            .map_err(|e| FetchError::FetchFailed(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(FetchError::HttpStatus(status.as_u16()));
        }
        let limit = self.policy.max_bytes;
        if resp.content_length().is_some_and(|n| n > limit) {
            return Err(FetchError::TooLarge(limit));
        }
        let mut body = Vec::new();
        while let Some(chunk) = resp.chunk().await.map_err(|e| FetchError::FetchFailed(e.to_string()))? {
            if body.len() as u64 + chunk.len() as u64 > limit {
                return Err(FetchError::TooLarge(limit));
            }
            body.extend_from_slice(&chunk);
        }
        Ok(body)
    }

    /// Fetch every URL concurrently; results come back in input order.
    pub async fn fetch_many(self: &Arc<Self>, urls: Vec<String>) -> Vec<Result<FetchedImage, FetchError>> {
        let mut set = tokio::task::JoinSet::new();
        let n = urls.len();
        for (i, u) in urls.into_iter().enumerate() {
            let me = Arc::clone(self);
            set.spawn(async move { (i, me.fetch(&u).await) });
        }
        let mut out: Vec<Option<Result<FetchedImage, FetchError>>> = (0..n).map(|_| None).collect();
        while let Some(joined) = set.join_next().await {
            match joined {
                Ok((i, r)) => out[i] = Some(r),
                Err(e) => log::error!("fetch task failed: {e}"),
            }
        }
        out.into_iter()
            .map(|r| r.unwrap_or_else(|| Err(FetchError::FetchFailed("task aborted".into()))))
            .collect()
    }
}

/// Run a batch on a fresh multi-threaded runtime.
pub fn fetch_all_blocking(
    policy: FetchPolicy,
    cache: Option<ImageCache>,
    urls: Vec<String>,
) -> Result<(Vec<Result<FetchedImage, FetchError>>, FetchStats), FetchError> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| FetchError::FetchFailed(e.to_string()))?;
    let fetcher = Arc::new(Fetcher::new(policy, cache)?);
    let results = runtime.block_on(fetcher.fetch_many(urls));
    Ok((results, fetcher.counters().snapshot()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resized_dims_examples() {
        assert_eq!(resized_dims(1600, 800, 800), (800, 400));
        assert_eq!(resized_dims(1000, 333, 800), (800, 266));
        assert_eq!(resized_dims(800, 1600, 800), (400, 800));
        assert_eq!(resized_dims(640, 480, 800), (640, 480));
        assert_eq!(resized_dims(10_000, 1, 800), (800, 1));
        // 1000x335 -> 268.0; 1000x999 -> 799.2
        assert_eq!(resized_dims(1000, 335, 800), (800, 268));
        assert_eq!(resized_dims(999, 1000, 800), (799, 800));
    }

    #[test]
    fn resize_produces_expected_raster() {
        let img = RgbImage::from_pixel(1600, 800, image::Rgb([10, 20, 30]));
        let out = resize_max_dim(img, 800);
        assert_eq!(out.dimensions(), (800, 400));
        assert_eq!(out.get_pixel(5, 5), &image::Rgb([10, 20, 30]));
    }

    #[test]
    fn error_labels_and_retry_classes() {
        assert!(FetchError::HttpStatus(503).retryable());
        assert!(FetchError::HttpStatus(429).retryable());
        assert!(!FetchError::HttpStatus(404).retryable());
        assert!(!FetchError::TooLarge(1).retryable());
        assert_eq!(FetchError::DecodeFailed(String::new()).label(), "decode_failed");
        let json = serde_json::to_string(&FetchError::HttpStatus(404)).unwrap();
        assert_eq!(json, r#"{"kind":"http_status","detail":404}"#);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ImageCache::open(dir.path()).unwrap();
        let entry = cache.store("http://h/a.png", b"bytes", 3, 4).unwrap();
        assert_eq!(entry.content_hash, content_hash(b"bytes"));
        assert!(dir
            .path()
            .join(&entry.content_hash[..2])
            .join(format!("{}.bin", entry.content_hash))
            .exists());
        drop(cache);
        let reopened = ImageCache::open(dir.path()).unwrap();
        let (e, bytes) = reopened.lookup("http://h/a.png").unwrap();
        assert_eq!(bytes, b"bytes");
        assert_eq!((e.width, e.height), (3, 4));
        assert!(reopened.lookup("http://h/other.png").is_none());
    }

    #[test]
    fn undecodable_bytes() {
        assert!(matches!(decode_image(b"not an image", 800), Err(FetchError::DecodeFailed(_))));
    }
}
