//! Multi-scale feature interaction network (MSFIN) for lightweight
//! single-image super-resolution.

pub mod arch;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod par;
pub mod selftest;
pub mod tensor;
pub mod train;
