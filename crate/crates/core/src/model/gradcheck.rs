//! Central finite-difference checks of [`loss_and_grads`] on sampled
//! parameter coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ModelParams;
use super::transformer::{forward, loss_and_grads, Batch};
use crate::error::Result;

/// Denominator floor of the relative error. Central differences of an O(1)
/// loss carry roughly `1e-16 / eps` of roundoff, so gradients smaller than
/// this are compared on absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CoordinateCheck {
    /// `|a - n| / max(|a| + |n|, RELATIVE_FLOOR)`.
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
            / (self.analytic.abs() + self.numeric.abs()).max(RELATIVE_FLOOR)
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.relative_error().total_cmp(&b.relative_error()))
    }

    pub fn max_relative_error(&self) -> f64 {
        self.worst().map_or(0.0, CoordinateCheck::relative_error)
    }

    /// Checks whose tensor name contains `pattern`.
    pub fn matching<'a>(
        &'a self,
        pattern: &'a str,
    ) -> impl Iterator<Item = &'a CoordinateCheck> + 'a {
        self.checks
            .iter()
            .filter(move |c| c.tensor.contains(pattern))
    }
}

/// Compares the analytic gradient against `(L(w + eps) - L(w - eps)) / 2eps`
/// at `per_tensor` random coordinates of every parameter tensor.
pub fn check_gradients(
    params: &ModelParams,
    batch: &Batch,
    per_tensor: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(params, batch)?;
    let grads = grads.tensors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for (t, (name, tensor)) in params.tensors().into_iter().enumerate() {
        for _ in 0..per_tensor.min(tensor.len()) {
            let index = rng.gen_range(0..tensor.len());
            let original = tensor.data()[index];
            let mut loss_at = |value: f64| -> Result<f64> {
                probe.for_each_mut(|i, p| {
                    if i == t {
                        p.data_mut()[index] = value;
                    }
                });
                Ok(forward(&probe, batch)?.loss)
            };
            let plus = loss_at(original + eps)?;
            let minus = loss_at(original - eps)?;
            loss_at(original)?;
            report.checks.push(CoordinateCheck {
                tensor: name.clone(),
                index,
                analytic: grads[t].1.data()[index],
                numeric: (plus - minus) / (2.0 * eps),
            });
        }
    }
    Ok(report)
}
