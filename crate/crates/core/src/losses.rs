//! Reconstruction and evidential loss terms with their adjoints.
//!
//! All gradients are of the *mean* over pixels, i.e. they already carry the
//! `1/N` factor.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::predictor::ParamMaps;
use crate::tensor::{ImageTensor, Tensor3};

const HALF_LN_PI: f64 = 0.572_364_942_924_700_1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecKind {
    #[default]
    Mae,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub rec_kind: RecKind,
    pub rec_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            rec_kind: RecKind::Mae,
            rec_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.rec_weight.is_finite() && self.rec_weight >= 0.0) {
            return Err(Error::Config(format!("rec_weight must be >= 0, got {}", self.rec_weight)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub nll: f64,
    pub reg: f64,
    pub uncertainty: f64,
    pub total: f64,
}

fn check_maps(a: &Tensor3, b: &Tensor3, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn mean(values: &Tensor3) -> f64 {
    values.data().iter().sum::<f64>() / values.data().len() as f64
}

/// Regression target for the fused `delta` field: the per-pixel intensity
/// change `I_target - I_1`.
pub fn change_target(target: &ImageTensor, i1: &ImageTensor) -> Tensor3 {
    let (a, b) = (target.pixels(), i1.pixels());
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor3::from_vec(a.height(), a.width(), 1, data).expect("same-size images")
}

/// Weighted mean absolute or squared pixel error.
pub fn loss_rec(pred: &Tensor3, truth: &Tensor3, cfg: &LossConfig) -> Result<f64> {
    check_maps(pred, truth, "reconstruction shapes differ")?;
    let n = pred.data().len() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| match cfg.rec_kind {
            RecKind::Mae => (p - t).abs(),
            RecKind::Mse => (p - t) * (p - t),
        })
        .sum();
    Ok(cfg.rec_weight * sum / n)
}

pub fn loss_rec_grad(pred: &Tensor3, truth: &Tensor3, cfg: &LossConfig) -> Result<Tensor3> {
    check_maps(pred, truth, "reconstruction shapes differ")?;
    let n = pred.data().len() as f64;
    let scale = cfg.rec_weight / n;
    let data = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| match cfg.rec_kind {
            RecKind::Mae => scale * sign(p - t),
            RecKind::Mse => scale * 2.0 * (p - t),
        })
        .collect();
    Tensor3::from_vec(pred.height(), pred.width(), pred.channels(), data)
}

/// Sign with `sign(0) = 0` (the subgradient used at the kink).
#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `0.5 ln(pi / gamma) - alpha ln(2 gamma + alpha) + ln Gamma(alpha) - ln Gamma(alpha + 1/2)`.
#[inline]
pub fn nll_pixel(gamma: f64, alpha: f64) -> f64 {
    let omega = 2.0 * gamma + alpha;
    HALF_LN_PI - 0.5 * gamma.ln() - alpha * omega.ln() + ln_gamma(alpha) - ln_gamma(alpha + 0.5)
}

/// `(d/dgamma, d/dalpha)` of [`nll_pixel`].
#[inline]
pub fn nll_pixel_grad(gamma: f64, alpha: f64) -> (f64, f64) {
    let omega = 2.0 * gamma + alpha;
    (
        -0.5 / gamma - 2.0 * alpha / omega,
        -omega.ln() - alpha / omega + digamma(alpha) - digamma(alpha + 0.5),
    )
}

/// Per-pixel map and mean of the evidential negative-log term.
pub fn loss_nll(pm: &ParamMaps) -> (Tensor3, f64) {
    let mut map = Tensor3::zeros(pm.height(), pm.width(), 1);
    for (out, (g, a)) in map
        .data_mut()
        .iter_mut()
        .zip(pm.gamma.data().iter().zip(pm.alpha.data()))
    {
        *out = nll_pixel(*g, *a);
    }
    let m = mean(&map);
    (map, m)
}

pub fn loss_nll_grad(pm: &ParamMaps) -> ParamMaps {
    let n = pm.len() as f64;
    let mut grad = ParamMaps::zeros(pm.height(), pm.width());
    for idx in 0..pm.len() {
        let (gg, ga) = nll_pixel_grad(pm.gamma.data()[idx], pm.alpha.data()[idx]);
        grad.gamma.data_mut()[idx] = gg / n;
        grad.alpha.data_mut()[idx] = ga / n;
    }
    grad
}

/// Per-pixel `|d - delta| * (2 gamma + alpha)` and its mean.
pub fn loss_reg(d_truth: &Tensor3, pm: &ParamMaps) -> Result<(Tensor3, f64)> {
    check_maps(d_truth, &pm.delta, "feature-change target and parameter maps differ")?;
    let mut map = Tensor3::zeros(pm.height(), pm.width(), 1);
    for idx in 0..pm.len() {
        let p = pm.at_index(idx);
        map.data_mut()[idx] = (d_truth.data()[idx] - p.delta()).abs() * (2.0 * p.gamma() + p.alpha());
    }
    let m = mean(&map);
    Ok((map, m))
}

/// Gradients of the mean regulariser with respect to the parameter maps and
/// to the target map.
pub fn loss_reg_grad(d_truth: &Tensor3, pm: &ParamMaps) -> Result<(ParamMaps, Tensor3)> {
    check_maps(d_truth, &pm.delta, "feature-change target and parameter maps differ")?;
    let n = pm.len() as f64;
    let mut grad = ParamMaps::zeros(pm.height(), pm.width());
    let mut d_target = Tensor3::zeros(pm.height(), pm.width(), 1);
    for idx in 0..pm.len() {
        let p = pm.at_index(idx);
        let r = d_truth.data()[idx] - p.delta();
        let evidence = 2.0 * p.gamma() + p.alpha();
        let s = sign(r);
        grad.delta.data_mut()[idx] = -s * evidence / n;
        grad.gamma.data_mut()[idx] = 2.0 * r.abs() / n;
        grad.alpha.data_mut()[idx] = r.abs() / n;
        d_target.data_mut()[idx] = s * evidence / n;
    }
    Ok((grad, d_target))
}

/// `(1/N) sum_i (nll_i + tau * reg_i)`.
pub fn loss_uncertainty(d_truth: &Tensor3, pm: &ParamMaps, cfg: &LossConfig) -> Result<f64> {
    let (nll, _) = loss_nll(pm);
    let (reg, _) = loss_reg(d_truth, pm)?;
    let sum: f64 = nll
        .data()
        .iter()
        .zip(reg.data())
        .map(|(a, b)| a + cfg.tau * b)
        .sum();
    Ok(sum / pm.len() as f64)
}

pub fn loss_uncertainty_grad(d_truth: &Tensor3, pm: &ParamMaps, cfg: &LossConfig) -> Result<ParamMaps> {
    let mut grad = loss_nll_grad(pm);
    let (reg, _) = loss_reg_grad(d_truth, pm)?;
    for (dst, src) in [
        (&mut grad.delta, &reg.delta),
        (&mut grad.gamma, &reg.gamma),
        (&mut grad.alpha, &reg.alpha),
        (&mut grad.beta, &reg.beta),
    ] {
        for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
            *a += cfg.tau * b;
        }
    }
    Ok(grad)
}

pub fn loss_total(
    pred: &Tensor3,
    truth: &Tensor3,
    d_truth: &Tensor3,
    pm: &ParamMaps,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    check_maps(pred, &pm.delta, "prediction and parameter maps differ")?;
    let rec = loss_rec(pred, truth, cfg)?;
    let (_, nll) = loss_nll(pm);
    let (_, reg) = loss_reg(d_truth, pm)?;
    let uncertainty = loss_uncertainty(d_truth, pm, cfg)?;
    Ok(LossBreakdown {
        rec,
        nll,
        reg,
        uncertainty,
        total: rec + uncertainty,
    })
}

/// Gradients of the total loss with respect to the predicted image and the
/// parameter maps.
pub fn loss_total_grad(
    pred: &Tensor3,
    truth: &Tensor3,
    d_truth: &Tensor3,
    pm: &ParamMaps,
    cfg: &LossConfig,
) -> Result<(Tensor3, ParamMaps)> {
    check_maps(pred, &pm.delta, "prediction and parameter maps differ")?;
    Ok((loss_rec_grad(pred, truth, cfg)?, loss_uncertainty_grad(d_truth, pm, cfg)?))
}
