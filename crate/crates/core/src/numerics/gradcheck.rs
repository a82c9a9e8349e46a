use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates checked per parameter; smaller tensors are checked fully.
    pub samples_per_param: usize,
    pub seed: u64,
    /// Gradient magnitude below which errors are measured on this absolute
    /// scale instead of relative to the gradient itself.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples_per_param: 64,
            seed: 0,
            floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates_checked: usize,
}

/// Compares analytic gradients with central finite differences.
///
/// `f` returns the scalar value and the gradient of every parameter at the
/// given point. The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn grad_check<F>(params: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Contract(format!(
            "gradient count {} differs from parameter count {}",
            analytic.len(),
            params.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut point = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates_checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::Shape(format!(
                "gradient {pi} has shape {:?}, parameter has {:?}",
                grad.shape(),
                params[pi].shape()
            )));
        }
        let n = params[pi].len();
        let coords: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            let mut c = rand::seq::index::sample(&mut rng, n, opts.samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = point[pi].data()[c];
            point[pi].data_mut()[c] = orig + opts.eps;
            let (plus, _) = f(&point)?;
            point[pi].data_mut()[c] = orig - opts.eps;
            let (minus, _) = f(&point)?;
            point[pi].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad.data()[c];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / denom;
            report.coordinates_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}
