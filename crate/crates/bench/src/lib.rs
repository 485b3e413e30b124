//! Benchmarks live in `benches/`; run them with `cargo bench -p spaer-bench`.

pub use spaer_core;
