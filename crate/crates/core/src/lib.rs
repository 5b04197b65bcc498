//! Generative-model watermarking: trigger-set black-box keys plus signed
//! normalization scales for white-box ownership checks.

pub mod img;
pub mod losses;
pub mod metrics;
pub mod signature;
pub mod triggers;
pub mod data_io;
pub mod genmodels;
pub mod verify;
pub mod attacks;
