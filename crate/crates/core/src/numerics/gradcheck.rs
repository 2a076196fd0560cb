//! Central finite-difference gradient checking.
//!
//! The numerical side perturbs one input element at a time and re-runs the
//! forward function; it never touches the backward pass it is checking.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Relative error with an absolute floor so near-zero derivative pairs
/// compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Central finite difference of `f` at `inputs`, perturbing element `elem`
/// of input tensor `which`.
pub fn central_difference(
    f: &dyn Fn(&[Tensor]) -> f64,
    inputs: &[Tensor],
    which: usize,
    elem: usize,
    h: f64,
) -> f64 {
    let mut plus = inputs.to_vec();
    plus[which].data_mut()[elem] += h;
    let mut minus = inputs.to_vec();
    minus[which].data_mut()[elem] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Result of probing one scalar function.
#[derive(Debug, Default)]
pub struct CheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= FD_TOLERANCE
    }
}

/// Compare an analytic gradient against central differences on randomly
/// chosen elements.
///
/// `f` maps inputs to a scalar loss; `analytic` returns the full gradient for
/// each input (same shapes as `inputs`). `probes` random (input, element)
/// pairs are tested with step [`FD_STEP`].
pub fn check_gradient(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    f: &dyn Fn(&[Tensor]) -> f64,
    analytic: &[Tensor],
    probes: usize,
) -> CheckReport {
    assert_eq!(inputs.len(), analytic.len());
    let mut report = CheckReport::default();
    for _ in 0..probes {
        let which = rng.random_range(0..inputs.len());
        let elem = rng.random_range(0..inputs[which].len());
        let num = central_difference(f, inputs, which, elem, FD_STEP);
        let ana = analytic[which].data()[elem];
        let err = relative_error(ana, num);
        report.probes += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
        }
    }
    report
}
