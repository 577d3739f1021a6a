//! Minimal reverse-mode differentiation over dense `f64` matrices, with the
//! Adam optimiser, a finite-difference gradient checker and a checkpoint
//! container.

mod check;
pub mod checkpoint;
mod matrix;
mod optim;
mod params;
mod tape;

pub use check::{grad_check, relative_error, GradCheckReport};
pub use matrix::Matrix;
pub use optim::{Adam, AdamConfig, StepOutcome};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The one RNG used for initialisation, shuffling, dropout and synthesis.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}
