mod support;

use std::sync::Arc;

use mm_interleave_fetch::{FetchError, FetchPolicy, Fetcher, ImageCache};

fn policy() -> FetchPolicy {
    FetchPolicy {
        max_concurrency: 6,
        per_host: 4,
        timeout_ms: 500,
        retries: 2,
        max_bytes: 1024 * 1024,
        backoff_ms: 10,
        ..Default::default()
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrency_is_bounded_globally_and_per_host() {
    let (addr, observed) = support::spawn().await;
    let fetcher = Arc::new(Fetcher::new(policy(), None).unwrap());
    let mut urls = Vec::new();
    for i in 0..30 {
        urls.push(format!("http://127.0.0.1:{}/img/a{i}.png", addr.port()));
        urls.push(format!("http://localhost:{}/img/b{i}.png", addr.port()));
    }
    let results = fetcher.fetch_many(urls.clone()).await;
    assert!(results.iter().all(Result::is_ok));
    for (r, u) in results.iter().zip(&urls) {
        assert_eq!(&r.as_ref().unwrap().url, u);
    }
    let stats = fetcher.counters().snapshot();
    assert_eq!(stats.ok, 60);
    assert!(stats.max_in_flight <= 6, "client in-flight {}", stats.max_in_flight);
    let server_max = observed.max_in_flight.load(std::sync::atomic::Ordering::SeqCst);
    assert!((2..=6).contains(&server_max), "server saw {server_max}");
    assert!(observed.max_for_host("127.0.0.1") <= 4);
    assert!(observed.max_for_host("localhost") <= 4);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn failures_are_classified_and_counted() {
    let (addr, _observed) = support::spawn().await;
    let fetcher = Arc::new(Fetcher::new(policy(), None).unwrap());
    let base = format!("http://127.0.0.1:{}/img", addr.port());
    let urls = vec![
        format!("{base}/missing.png"),
        format!("{base}/slow.png"),
        format!("{base}/huge.png"),
        format!("{base}/garbage.png"),
        "not a url".to_string(),
        format!("{base}/wide.png"),
    ];
    let r = fetcher.fetch_many(urls).await;
    assert_eq!(r[0].as_ref().unwrap_err(), &FetchError::HttpStatus(404));
    assert!(matches!(r[1], Err(FetchError::FetchFailed(_))));
    assert!(matches!(r[2], Err(FetchError::TooLarge(_))));
    assert!(matches!(r[3], Err(FetchError::DecodeFailed(_))));
    assert!(matches!(r[4], Err(FetchError::InvalidUrl(_))));
    let wide = r[5].as_ref().unwrap();
    assert_eq!((wide.original_width, wide.original_height), (1600, 800));
    assert_eq!(wide.image.dimensions(), (800, 400));

    let s = fetcher.counters().snapshot();
    assert_eq!((s.http_status, s.fetch_failed, s.too_large, s.decode_failed, s.invalid_url, s.ok), (1, 1, 1, 1, 1, 1));
    // the timed-out request is retried twice, nothing else is
    assert_eq!(s.retries, 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn transient_errors_are_retried() {
    let (addr, observed) = support::spawn().await;
    let fetcher = Fetcher::new(policy(), None).unwrap();
    let img = fetcher
        .fetch(&format!("http://127.0.0.1:{}/img/flaky.png", addr.port()))
        .await
        .unwrap();
    assert_eq!(img.image.dimensions(), (64, 48));
    assert_eq!(observed.flaky_hits.load(std::sync::atomic::Ordering::SeqCst), 2);
    assert_eq!(fetcher.counters().snapshot().retries, 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cache_serves_repeat_fetches() {
    let (addr, observed) = support::spawn().await;
    let dir = tempfile::tempdir().unwrap();
    let url = format!("http://127.0.0.1:{}/img/c.png", addr.port());
    let first = {
        let f = Fetcher::new(policy(), Some(ImageCache::open(dir.path()).unwrap())).unwrap();
        f.fetch(&url).await.unwrap()
    };
    let f = Fetcher::new(policy(), Some(ImageCache::open(dir.path()).unwrap())).unwrap();
    let second = f.fetch(&url).await.unwrap();
    assert!(!first.from_cache && second.from_cache);
    assert_eq!(first.content_hash, second.content_hash);
    assert_eq!(first.image, second.image);
    assert_eq!(observed.hits.load(std::sync::atomic::Ordering::SeqCst), 1);
}

#[tokio::test]
async fn file_urls_are_read_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    std::fs::write(&path, support::png(300, 200)).unwrap();
    let url = url::Url::from_file_path(&path).unwrap();
    let f = Fetcher::new(policy(), None).unwrap();
    let img = f.fetch(url.as_str()).await.unwrap();
    assert_eq!(img.image.dimensions(), (300, 200));
    let missing = f.fetch(url.as_str().replace("x.png", "y.png").as_str()).await;
    assert!(matches!(missing, Err(FetchError::FetchFailed(_))));
}
