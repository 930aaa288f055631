//! Logit calibration (LoCa) for knowledge distillation.
//!
//! A teacher "mis-instructs" a sample when its most probable class differs
//! from the ground-truth label. LoCa rescales the non-target probabilities of
//! such samples by a common factor so that the label becomes the strict
//! argmax, while the ratios among non-target classes (the dark knowledge) are
//! left untouched.
//!
//! The crate is organised bottom-up:
//!
//! * [`probvec`]: logit and probability vectors, temperature softmax.
//! * [`calibrate`]: mis-instruction detection, the LoCa transform and the
//!   batch policies `none` / `skip` / `loca`.
//! * [`losses`]: KL distillation loss, cross-entropy and their gradients.
//! * [`nn`]: a small MLP trainer and synthetic data for desk-scale runs.
//! * [`analyze`]: mis-instruction statistics, top-k accuracy, run reports.
//! * [`dump`] and [`experiment`]: file formats and the workflows behind the
//!   `loca` command-line tool.

pub mod analyze;
pub mod calibrate;
pub mod dump;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod nn;
pub mod probvec;

pub use calibrate::{CalibrationConfig, CalibrationOutcome, Policy};
pub use error::{Error, Result};
pub use losses::{LossConfig, LossValue};
pub use probvec::{ClassIndex, LogitVector, OneHotVector, ProbVector};
