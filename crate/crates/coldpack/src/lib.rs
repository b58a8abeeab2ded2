//! Quantization, packing and pipeline tooling for fast model cold
//! starts.
//!
//! - [`tensorstore`]: the tensor-archive input format and the EFPK
//!   packed-model container with streaming per-layer reads.
//! - [`quant`]: per-channel statistics, the relative-error metric,
//!   greedy bit-width allocation, symmetric quantization and
//!   activation-to-weight smoothing.
//! - [`pack`]: weightlet decomposition, the interleaved sub-byte block
//!   layout, bit-width metadata and the scalar/wide-lane unpackers.
//! - [`pipeline`]: chunked-prefill task graphs, CPU/NPU placement and
//!   the deterministic two-device scheduling simulator.
//! - [`coldstart`]: overlapped load/unpack/compute orchestration, on a
//!   virtual clock or with real worker threads.

pub mod coldstart;
pub mod pack;
pub mod pipeline;
pub mod quant;
pub mod tensorstore;
