//! Image synthesis by inverting a fixed convolutional network under a
//! neural-patch MRF prior.
//!
//! The synthesized image minimizes a weighted sum of three energies over a
//! VGG-19 feature pyramid: squared distances between its `k×k` neural
//! patches and their nearest style patches (matched by normalized
//! cross-correlation), a squared feature distance to a content image, and a
//! squared forward-difference smoothness penalty. Minimization is L-BFGS on
//! the pixels, run coarse to fine.

// `!(x > y)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gemm;
pub mod lbfgs;
pub mod mrf;
pub mod objective;
pub mod synthesis;
pub mod tensor;
pub mod vgg;

pub use error::{Error, Result};
pub use lbfgs::{minimize, LbfgsOptions, LbfgsResult, Termination};
pub use mrf::{AugmentationSet, PatchBank, PatchOrigin};
pub use objective::{EnergyConfig, EnergyReport, Objective};
pub use synthesis::{
    run_invert, run_match_report, run_transfer, InvertJob, MatchRow, PyramidSchedule, SynthesisJob,
    TraceRecord, TransferResult,
};
pub use tensor::{ConvSpec, Tensor};
pub use vgg::{LayerActivations, NetworkDef, WidthScale};
