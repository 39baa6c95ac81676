//! Link adaptation from ACK/NACK feedback.
//!
//! The crate implements two outer-loop link adaptation schemes and the
//! machinery to compare them on a deterministic slot-based simulator:
//!
//! - [`olla`]: the classic fixed-step offset loop, in both its offset form and
//!   its stochastic-approximation form.
//! - [`salad`]: self-adaptive link adaptation. A cross-entropy "student"
//!   estimator tracks the SINR, a calibration hypothesis test triggers MCS
//!   probing, and an integral controller holds the long-term BLER at target.
//! - [`teacher`]: a piece-wise linear batch estimator used to pick the
//!   student's learning rate by knowledge distillation.
//!
//! Supporting modules: [`blermodel`] (MCS table and sigmoid BLER curves),
//! [`illa`] (inner-loop MCS selection), [`sim`] (channel, HARQ queue, metrics),
//! [`tuner`] (Nelder-Mead parameter search) and [`cli`] (the `salad-sim`
//! front end).
//!
//! See the `examples/` directory of this crate for one runnable program per
//! capability.

// NaN-rejecting range checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blermodel;
pub mod cli;
pub mod error;
pub mod illa;
pub mod olla;
pub mod salad;
pub mod sim;
pub mod teacher;
pub mod tuner;

pub use blermodel::{BlerTable, ClipConfig, Mcs, McsEntry, McsTable, SigmoidBlerEntry};
pub use error::{Error, Result};
pub use illa::{select_mcs_illa, select_mcs_maxse, IllaDecision};
pub use olla::{OllaConfig, OllaState};
pub use salad::{SaladAdapter, SaladConfig, SaladState};
