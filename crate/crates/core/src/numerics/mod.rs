//! Differentiable-computation substrate: parameter storage, a matrix tape,
//! optimizer, checkpoints and finite-difference verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
pub use gradcheck::{grad_check, GradCheckReport, GradMismatch};
pub use matrix::{Matrix, Real};
pub use optim::{clip_grad_norm, AdamW};
pub use params::{Gradients, Param, ParamSource, ParameterStore, TargetStore};
pub use tape::{Group, Tape, Var, LEAKY_SLOPE};
pub(crate) use tape::{sigmoid, softplus};

use crate::error::{Error, Result};

/// Softmax restricted to the entries where `mask` is true; masked entries get exactly 0.
pub fn softmax_masked(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::dim("softmax_masked", logits.len(), mask.len()));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoValidChoice);
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(l, m)| if *m { (l - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}
