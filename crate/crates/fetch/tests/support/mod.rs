//! Instrumented local image server for fetcher tests.

use std::collections::HashMap;
use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;

#[derive(Default)]
pub struct Observed {
    in_flight: AtomicU64,
    pub max_in_flight: AtomicU64,
    per_host: Mutex<HashMap<String, (u64, u64)>>,
    pub flaky_hits: AtomicU64,
    pub hits: AtomicU64,
}

impl Observed {
    /// Highest concurrent request count seen for a `Host` header.
    pub fn max_for_host(&self, host: &str) -> u64 {
        self.per_host.lock().unwrap().get(host).map_or(0, |v| v.1)
    }

    fn enter(&self, host: &str) {
        self.hits.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        let mut m = self.per_host.lock().unwrap();
        let e = m.entry(host.to_string()).or_default();
        e.0 += 1;
        e.1 = e.1.max(e.0);
    }

    fn leave(&self, host: &str) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        self.per_host.lock().unwrap().get_mut(host).unwrap().0 -= 1;
    }
}

pub fn png(width: u32, height: u32) -> Vec<u8> {
    let img = image::RgbImage::from_fn(width, height, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 128]));
    let mut out = Vec::new();
    image::DynamicImage::ImageRgb8(img)
        .write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        .unwrap();
    out
}

struct AppState {
    observed: Arc<Observed>,
    small: Vec<u8>,
    wide: Vec<u8>,
}

async fn handle(State(st): State<Arc<AppState>>, Path(name): Path<String>, headers: HeaderMap) -> Response {
    let host = headers
        .get(header::HOST)
        .and_then(|h| h.to_str().ok())
        .unwrap_or("")
        .split(':')
        .next()
        .unwrap_or("")
        .to_string();
    st.observed.enter(&host);
    let resp = match name.as_str() {
        "missing.png" => StatusCode::NOT_FOUND.into_response(),
        "slow.png" => {
            tokio::time::sleep(Duration::from_millis(2_000)).await;
            st.small.clone().into_response()
        }
        "huge.png" => vec![0u8; 2 * 1024 * 1024].into_response(),
        "wide.png" => st.wide.clone().into_response(),
        "garbage.png" => b"definitely not a png".to_vec().into_response(),
        "flaky.png" => {
            if st.observed.flaky_hits.fetch_add(1, Ordering::SeqCst) == 0 {
                StatusCode::SERVICE_UNAVAILABLE.into_response()
            } else {
                st.small.clone().into_response()
            }
        }
        _ => {
            tokio::time::sleep(Duration::from_millis(40)).await;
            st.small.clone().into_response()
        }
    };
    st.observed.leave(&host);
    resp
}

/// Serve on an ephemeral port of 127.0.0.1.
pub async fn spawn() -> (SocketAddr, Arc<Observed>) {
    let observed = Arc::new(Observed::default());
    let state = Arc::new(AppState {
        observed: observed.clone(),
        small: png(64, 48),
        wide: png(1600, 800),
    });
    let app = Router::new().route("/img/{name}", get(handle)).with_state(state);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (addr, observed)
}
