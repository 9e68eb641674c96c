//! Benchmark-only crate; see benches/dpp.rs.
