//! Central finite-difference gradient checking in 64-bit.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Per-input comparison between tape gradients and finite differences.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// `‖analytic − numeric‖₂ / max(‖numeric‖₂, 1e-10)` for each input.
    pub rel_errors: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Builds `f` on a fresh tape with `inputs` as gradient-requiring leaves, runs
/// backward, and compares every input's gradient with central differences.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids = values
            .iter()
            .map(|v| tape.param(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &ids)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let ids = inputs
        .iter()
        .map(|v| tape.param(v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (k, id) in ids.iter().enumerate() {
        let analytic: Vec<f64> = tape
            .grad(*id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0; inputs[k].numel()];
        let mut probe = inputs.to_vec();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        rel_errors.push(diff / norm.max(1e-10));
    }
    Ok(GradReport { rel_errors })
}
