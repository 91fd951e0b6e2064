//! Forward and backward kernels. These operate on raw slices and shapes; the
//! [`Graph`](crate::Graph) wires them into the tape.

pub mod conv;
pub mod norm;
pub mod resample;
pub mod spatial;

/// Rows processed per parallel task in the GEMM-backed kernels. Fixed so the
/// work split never depends on the thread count.
pub(crate) const ROW_CHUNK: usize = 64;
