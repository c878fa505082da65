//! Incremental multi-target domain adaptation (MTDA) for object detection,
//! at desk scale.
//!
//! A miniature two-stage detector is trained on a labeled synthetic source
//! domain and then adapted to a sequence of unlabeled target domains through
//! adversarial domain confusion. A tiny domain transfer module (DTM) is
//! trained after each adaptation to turn source images into pseudo-target
//! samples, which are replayed during later adaptations to limit catastrophic
//! forgetting. The crate also ships every baseline strategy, the evaluation
//! stack (mAP, forgetting curves, domain-shift diagnostics, complexity
//! accounting) and the experiment configuration machinery used by the CLI.
//!
//! All differentiable paths run on a small f64 tape (reverse mode) in
//! [`autodiff`]; gradient correctness is checked against central finite
//! differences in the test suites.

pub mod archive;
pub mod autodiff;
pub mod config;
pub mod da;
pub mod detector;
pub mod dtm;
pub mod error;
pub mod eval;
pub mod optim;
pub mod seeds;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
