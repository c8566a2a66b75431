use super::matrix::Matrix;
use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// One coordinate whose analytic and numerical derivatives disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares reverse-mode gradients of a scalar computation against central
/// differences for every parameter coordinate.
///
/// `computation` must record a deterministic 1×1 output on the tape it is given.
/// The error measure is `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(
    store: &ParameterStore<f64>,
    computation: F,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = computation(&mut tape, store)?;
    let grads = tape.backward(&[(out, Matrix::from_vec(1, 1, vec![1.0]))])?;

    let eval = |s: &ParameterStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = computation(&mut t, s)?;
        Ok(t.value(v).data[0])
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    for (name, index) in store.coordinates() {
        let original = probe.get(&name)?.value[index];
        probe.get_mut(&name)?.value[index] = original + epsilon;
        let plus = eval(&probe)?;
        probe.get_mut(&name)?.value[index] = original - epsilon;
        let minus = eval(&probe)?;
        probe.get_mut(&name)?.value[index] = original;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads.get(&name).map_or(0.0, |g| g[index]);
        let relative_error = (analytic - numeric).abs() / analytic.abs().max(1.0);
        report.checked += 1;
        report.max_relative_error = report.max_relative_error.max(relative_error);
        if relative_error > tolerance {
            report.failures.push(GradMismatch {
                name: name.clone(),
                index,
                analytic,
                numeric,
                relative_error,
            });
        }
    }
    Ok(report)
}
