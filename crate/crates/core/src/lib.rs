//! Near-field full-duplex ISAC simulation library.
//!
//! Models a full-duplex node carrying transmit and receive metasurface
//! antenna panels, each made of single-RF-fed microstrips whose metamaterial
//! elements apply Lorentzian-constrained analog weights. The library
//! synthesizes exact-distance near-field channels, derives Fisher information
//! and position error bounds for target localization from backscattered
//! data signals, optimizes sensing- and communication-oriented beamformers,
//! blends them under self-interference and accuracy constraints, and drives
//! Monte Carlo experiments from a CLI-friendly harness.

pub mod channel;
pub mod codebook;
pub mod comm_opt;
pub mod crb_opt;
pub mod estimation;
pub mod fim;
pub mod harness;
pub mod isac;
pub mod linalg;
pub mod scenario;

#[cfg(test)]
pub(crate) mod test_support;

pub use num_complex::Complex64;
