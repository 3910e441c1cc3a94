//! Central finite differences, used as the oracle for [`super::backward`].

use ndarray::ArrayView2;

use super::network::{forward, GradientBundle, ModelParams};
use crate::error::{Error, Result};
use crate::losses::{evaluate_loss, LossConfig};

/// `(f(x + h) − f(x − h)) / 2h`
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Evaluation-mode loss of a network on a batch.
pub fn network_loss(
    params: &ModelParams,
    features: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    loss_config: &LossConfig,
) -> Result<f64> {
    let probs = forward(params, features, false, 0)?;
    evaluate_loss(targets, probs.view(), loss_config)
}

/// Central-difference estimate of every partial derivative of the
/// evaluation-mode loss.
pub fn finite_diff_grad(
    params: &ModelParams,
    features: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    loss_config: &LossConfig,
    h: f64,
) -> Result<GradientBundle> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidConfig(format!("step h must be positive, got {h}")));
    }
    // surfaces shape errors before the loop
    network_loss(params, features, targets, loss_config)?;

    let mut grads = GradientBundle::zeros_like(params);
    let mut probe = params.clone();
    let originals: Vec<f64> = params.iter_flat().collect();
    let mut out = grads.flat_mut();
    for (k, &x0) in originals.iter().enumerate() {
        let mut at = |x: f64| {
            *probe.flat_mut()[k] = x;
            network_loss(&probe, features, targets, loss_config)
                .expect("shapes were validated above")
        };
        let plus = at(x0 + h);
        let minus = at(x0 - h);
        *probe.flat_mut()[k] = x0;
        *out[k] = (plus - minus) / (2.0 * h);
    }
    drop(out);
    Ok(grads)
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over all entries.
pub fn max_relative_error(a: &GradientBundle, b: &GradientBundle, floor: f64) -> f64 {
    a.iter_flat()
        .zip(b.iter_flat())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let d = central_difference(|w| w * w, 3.0, 1e-5);
        assert!((d - 6.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = crate::numerics::init_params(&[2, 1], 0).unwrap();
        let x = ndarray::array![[1.0, 0.0]];
        let y = ndarray::array![[1.0]];
        let cfg = LossConfig::new(crate::losses::LossKind::Oe, 0.0, vec![crate::losses::ClassWeight::UNIT]);
        assert!(finite_diff_grad(&p, x.view(), y.view(), &cfg, 0.0).is_err());
    }
}
