//! Central finite-difference checks of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{self, LossConfig, RecKind};
use crate::predictor::{self, ModelConfig, ModelParams, ParamMaps, TimeSpec};
use crate::tensor::{ImageTensor, Tensor3};

/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
    /// Side length of the square test maps and images.
    pub size: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-3,
            seed: 0,
            size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub operation: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` with central differences of `f` around `x`.
fn compare(analytic: &[f64], x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe)?;
        probe[i] = x[i] - eps;
        let down = f(&probe)?;
        probe[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

fn random_map(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Tensor3 {
    let data = (0..n * n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor3::from_vec(n, n, 1, data).expect("square map")
}

fn random_params(rng: &mut ChaCha8Rng, n: usize) -> ParamMaps {
    ParamMaps {
        delta: random_map(rng, n, -0.5, 0.5),
        gamma: random_map(rng, n, 0.5, 3.0),
        alpha: random_map(rng, n, 1.5, 4.0),
        beta: random_map(rng, n, 0.2, 2.0),
    }
}

fn params_flat(p: &ParamMaps) -> Vec<f64> {
    [&p.delta, &p.gamma, &p.alpha, &p.beta]
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

fn params_from_flat(n: usize, flat: &[f64]) -> ParamMaps {
    let part = |k: usize| Tensor3::from_vec(n, n, 1, flat[k * n * n..(k + 1) * n * n].to_vec()).expect("square map");
    ParamMaps {
        delta: part(0),
        gamma: part(1),
        alpha: part(2),
        beta: part(3),
    }
}

fn map_from(n: usize, flat: &[f64]) -> Tensor3 {
    Tensor3::from_vec(n, n, 1, flat.to_vec()).expect("square map")
}

/// Runs every check and reports the worst relative error per operation.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<Vec<GradCheckEntry>> {
    let n = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let mut push = |operation: &str, checked: usize, err: f64| {
        out.push(GradCheckEntry {
            operation: operation.to_string(),
            checked,
            max_rel_err: err,
            passed: err <= cfg.tol,
        });
    };

    let pred = random_map(&mut rng, n, 0.0, 1.0);
    let truth = random_map(&mut rng, n, 0.0, 1.0);
    for kind in [RecKind::Mae, RecKind::Mse] {
        let lc = LossConfig {
            rec_kind: kind,
            rec_weight: 0.7,
            ..LossConfig::default()
        };
        let g = losses::loss_rec_grad(&pred, &truth, &lc)?;
        let err = compare(g.data(), pred.data(), cfg.eps, |x| losses::loss_rec(&map_from(n, x), &truth, &lc))?;
        let name = match kind {
            RecKind::Mae => "loss_rec[mae]",
            RecKind::Mse => "loss_rec[mse]",
        };
        push(name, n * n, err);
    }

    let pm = random_params(&mut rng, n);
    let x = params_flat(&pm);
    let d_truth = random_map(&mut rng, n, -0.5, 0.5);
    let lc = LossConfig::default();

    let g = params_flat(&losses::loss_nll_grad(&pm));
    let err = compare(&g, &x, cfg.eps, |x| Ok(losses::loss_nll(&params_from_flat(n, x)).1))?;
    push("loss_nll", x.len(), err);

    let (g_maps, g_target) = losses::loss_reg_grad(&d_truth, &pm)?;
    let err_maps = compare(&params_flat(&g_maps), &x, cfg.eps, |x| {
        Ok(losses::loss_reg(&d_truth, &params_from_flat(n, x))?.1)
    })?;
    let err_target = compare(g_target.data(), d_truth.data(), cfg.eps, |x| {
        Ok(losses::loss_reg(&map_from(n, x), &pm)?.1)
    })?;
    push("loss_reg", x.len() + n * n, err_maps.max(err_target));

    let g = params_flat(&losses::loss_uncertainty_grad(&d_truth, &pm, &lc)?);
    let err = compare(&g, &x, cfg.eps, |x| {
        losses::loss_uncertainty(&d_truth, &params_from_flat(n, x), &lc)
    })?;
    push("loss_uncertainty", x.len(), err);

    let (g_pred, g_maps) = losses::loss_total_grad(&pred, &truth, &d_truth, &pm, &lc)?;
    let err_pred = compare(g_pred.data(), pred.data(), cfg.eps, |x| {
        Ok(losses::loss_total(&map_from(n, x), &truth, &d_truth, &pm, &lc)?.total)
    })?;
    let err_maps = compare(&params_flat(&g_maps), &x, cfg.eps, |x| {
        Ok(losses::loss_total(&pred, &truth, &d_truth, &params_from_flat(n, x), &lc)?.total)
    })?;
    push("loss_total", n * n + x.len(), err_pred.max(err_maps));

    let (checked, err) = composite(cfg, &mut rng)?;
    push("tnig_forward+loss_total", checked, err);
    Ok(out)
}

/// End-to-end check through the full forward pass with respect to every
/// model parameter. The image term uses the squared error so that only the
/// regulariser carries an absolute-value kink.
fn composite(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    let n = cfg.size;
    let model = ModelParams::init(ModelConfig::default(), cfg.seed)?;
    let i0 = ImageTensor::new(random_map(rng, n, 0.0, 1.0), 70.0)?;
    let i1 = ImageTensor::new(random_map(rng, n, 0.0, 1.0), 71.5)?;
    let target = ImageTensor::new(random_map(rng, n, 0.0, 1.0), 73.0)?;
    let t = TimeSpec::new(i0.age_years(), i1.age_years(), target.age_years())?;
    let lc = LossConfig {
        rec_kind: RecKind::Mse,
        ..LossConfig::default()
    };
    let d_truth = losses::change_target(&target, &i1);

    let loss_of = |m: &ModelParams| -> Result<f64> {
        let p = predictor::tnig_forward(&i0, &i1, &t, m)?;
        Ok(losses::loss_total(p.image.pixels(), target.pixels(), &d_truth, &p.fused, &lc)?.total)
    };

    let (pred, trace) = predictor::forward_traced(&i0, &i1, &t, &model)?;
    let (g_img, g_maps) = losses::loss_total_grad(pred.image.pixels(), target.pixels(), &d_truth, &pred.fused, &lc)?;
    let grad = predictor::backward(&i0, &i1, &model, &pred, &trace, &g_img, &g_maps)?;

    let x = model.flatten();
    let mut probe = model.clone();
    let err = compare(&grad.flatten(), &x, cfg.eps, |x| {
        probe.assign_flat(x)?;
        loss_of(&probe)
    })?;
    Ok((x.len(), err))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let report = run_gradcheck(&GradCheckConfig::default()).unwrap();
        for e in &report {
            assert!(e.passed, "{} max rel err {}", e.operation, e.max_rel_err);
        }
        assert_eq!(report.len(), 7);
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 1e-3).abs() < 1e-15);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
