//! Stage-by-stage pipeline turning document manifests into an interleaved
//! image-text corpus, training sequences and corpus statistics.

pub mod app;
pub mod config;
pub mod error;
pub mod io;
pub mod stages;

pub use app::run;
