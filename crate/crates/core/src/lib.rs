//! Video moment retrieval trained from single-frame glance annotations.
//!
//! The crate covers the full pipeline: annotation and feature I/O, a
//! query/video encoder with cross-modal attention, Gaussian-weighted
//! contrastive training, anchor-guided proposal inference and
//! recall/IoU evaluation.

pub mod alignment;
pub mod autograd;
pub mod data;
pub mod evaluation;
pub mod harness;
pub mod inference;
pub mod model;
