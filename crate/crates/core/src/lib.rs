//! Desk-scale building blocks for invariance-constrained detector training.
//!
//! The crate covers the full mechanism chain: replayable image augmentation
//! (a frequency-domain global transform fused with per-object spatial
//! transforms), attention-invariance and prototype-invariance losses, and a
//! small tape-based model whose analytic gradients are verified against
//! central finite differences. Everything is seeded and deterministic; any
//! augmentation or training run can be replayed bit-exactly.

pub mod attention;
pub mod gradcore;
pub mod harness;
pub mod localaug;
pub mod prototypes;
pub mod raster;
pub mod seeds;
pub mod spectral;
