//! Continuous-time discrete diffusion over token sequences.
//!
//! The crate covers the forward process ([`ctmc`]), score reconstruction and
//! the tabular reference model ([`scores`], [`model`]), training losses
//! ([`losses`]), Monte Carlo perplexity bounds ([`bounds`]), reverse-process
//! samplers ([`samplers`]) and, behind the `oracle` feature, dense brute-force
//! counterparts of every closed form ([`oracle`]).

// NaN-rejecting guards are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod bounds;
pub mod ctmc;
pub mod error;
pub mod losses;
pub mod model;
#[cfg(feature = "oracle")]
pub mod oracle;
pub mod samplers;
pub mod scores;
pub mod util;

pub use ctmc::{
    corrupt_sequence, Dynamics, Family, MatrixSpec, NoiseLevel, NoiseSchedule, Rates, ScheduleKind, Token,
    TokenSequence, Transition, Vocab,
};
pub use error::{Error, Result};
