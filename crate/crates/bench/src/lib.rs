//! Benchmark-only crate; see benches/tokenizer.rs.
