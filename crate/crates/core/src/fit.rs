//! Moment-matched NIG fitting and a small maximum-likelihood comparison
//! against Student-t, Laplace and exponential fits.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::nig::{self, NigParams};

pub const MIN_FIT_SAMPLES: usize = 8;
pub const MIN_COMPARE_SAMPLES: usize = 32;
const ALPHA_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Tnig,
    StudentT,
    Laplace,
    Exponential,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Tnig,
        Family::StudentT,
        Family::Laplace,
        Family::Exponential,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Tnig => "tnig",
            Family::StudentT => "student_t",
            Family::Laplace => "laplace",
            Family::Exponential => "exponential",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown distribution family `{s}`")))
    }
}

/// Outcome of fitting one family. `params` layout per family:
///
/// * tnig: `[delta, gamma, alpha, beta]`
/// * student_t: `[location, scale, dof]`
/// * laplace: `[location, scale]`
/// * exponential: `[rate, shift]` (the rate applies to `x + shift`)
///
/// Moment errors that are undefined (Student-t with `dof <= 2`) are
/// reported as infinity, which serializes as JSON `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub family: Family,
    pub params: Vec<f64>,
    pub log_likelihood: f64,
    pub mean_err: f64,
    pub var_err: f64,
}

struct Moments {
    n: f64,
    mean: f64,
    /// Unbiased sample variance.
    var: f64,
    excess_kurtosis: f64,
}

fn moments(samples: &[f64]) -> Result<Moments> {
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateData("samples contain non-finite values".into()));
    }
    if samples.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::DegenerateData("sample variance is zero".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &x in samples {
        let c = (x - mean) * (x - mean);
        m2 += c;
        m4 += c * c;
    }
    if m2 <= 0.0 {
        return Err(Error::DegenerateData("sample variance is zero".into()));
    }
    let var = m2 / (n - 1.0);
    let (m2, m4) = (m2 / n, m4 / n);
    Ok(Moments {
        n,
        mean,
        var,
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
    })
}

/// Moment-matched NIG fit with `gamma = 1`.
///
/// Treating the data as a scale mixture of normals, the mean `m` and
/// variance `v` of the latent `sigma2` satisfy `m = var` and
/// `v = var^2 * kurtosis / 3`; the inverse-gamma shape that reproduces them
/// is `alpha = 2 + m^2 / v = 2 + 3 / kurtosis`. `beta` is then chosen so that
/// `beta / (alpha - 1)` equals the sample variance.
pub fn nig_fit(samples: &[f64]) -> Result<NigParams> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::DegenerateData(format!(
            "need at least {MIN_FIT_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let m = moments(samples)?;
    let alpha = if m.excess_kurtosis > 0.0 {
        (2.0 + 3.0 / m.excess_kurtosis).clamp(1.0 + nig::PARAM_FLOOR, ALPHA_CAP)
    } else {
        ALPHA_CAP
    };
    NigParams::new(m.mean, 1.0, alpha, (alpha - 1.0) * m.var)
}

fn student_t_loglik(samples: &[f64], loc: f64, scale: f64, dof: f64) -> f64 {
    let n = samples.len() as f64;
    let norm = ln_gamma((dof + 1.0) / 2.0)
        - ln_gamma(dof / 2.0)
        - 0.5 * (dof * PI).ln()
        - scale.ln();
    let tail: f64 = samples
        .iter()
        .map(|x| {
            let z = (x - loc) / scale;
            (1.0 + z * z / dof).ln()
        })
        .sum();
    n * norm - 0.5 * (dof + 1.0) * tail
}

/// Location/scale MLE for a fixed number of degrees of freedom
/// (iteratively reweighted EM).
fn student_t_fixed_dof(samples: &[f64], dof: f64, mut loc: f64, mut scale2: f64) -> (f64, f64) {
    let n = samples.len() as f64;
    for _ in 0..200 {
        let (mut sw, mut swx) = (0.0, 0.0);
        let weights: Vec<f64> = samples
            .iter()
            .map(|x| (dof + 1.0) / (dof + (x - loc).powi(2) / scale2))
            .collect();
        for (w, x) in weights.iter().zip(samples) {
            sw += w;
            swx += w * x;
        }
        let new_loc = swx / sw;
        let new_scale2 = weights
            .iter()
            .zip(samples)
            .map(|(w, x)| w * (x - new_loc).powi(2))
            .sum::<f64>()
            / n;
        let converged = (new_loc - loc).abs() <= 1e-12 * (1.0 + loc.abs())
            && (new_scale2 - scale2).abs() <= 1e-12 * scale2;
        loc = new_loc;
        scale2 = new_scale2.max(f64::MIN_POSITIVE);
        if converged {
            break;
        }
    }
    (loc, scale2.sqrt())
}

fn median(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn fit_tnig(samples: &[f64], m: &Moments) -> Result<FitReport> {
    let p = nig_fit(samples)?;
    let u = nig::uncertainty(&p);
    // Predictive: Student-t with 2*alpha degrees of freedom, mean d and
    // variance al.
    let dof = 2.0 * p.alpha();
    let scale2 = if dof > 2.0 { u.al * (dof - 2.0) / dof } else { u.al };
    Ok(FitReport {
        family: Family::Tnig,
        params: p.to_array().to_vec(),
        log_likelihood: student_t_loglik(samples, u.d, scale2.sqrt(), dof),
        mean_err: (u.d - m.mean).abs(),
        var_err: (u.al - m.var).abs(),
    })
}

fn fit_student_t(samples: &[f64], m: &Moments) -> FitReport {
    let med = median(samples);
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for dof in 1..=30 {
        let dof = dof as f64;
        let (loc, scale) = student_t_fixed_dof(samples, dof, med, m.var);
        let ll = student_t_loglik(samples, loc, scale, dof);
        if best.is_none_or(|b| ll > b.3) {
            best = Some((loc, scale, dof, ll));
        }
    }
    let (loc, scale, dof, ll) = best.expect("grid is non-empty");
    let var = if dof > 2.0 {
        scale * scale * dof / (dof - 2.0)
    } else {
        f64::INFINITY
    };
    FitReport {
        family: Family::StudentT,
        params: vec![loc, scale, dof],
        log_likelihood: ll,
        mean_err: (loc - m.mean).abs(),
        var_err: (var - m.var).abs(),
    }
}

fn fit_laplace(samples: &[f64], m: &Moments) -> Result<FitReport> {
    let loc = median(samples);
    let scale = samples.iter().map(|x| (x - loc).abs()).sum::<f64>() / m.n;
    if scale <= 0.0 {
        return Err(Error::DegenerateData(
            "laplace scale is zero (more than half the samples equal the median)".into(),
        ));
    }
    let ll = -m.n * (2.0 * scale).ln() - m.n;
    Ok(FitReport {
        family: Family::Laplace,
        params: vec![loc, scale],
        log_likelihood: ll,
        mean_err: (loc - m.mean).abs(),
        var_err: (2.0 * scale * scale - m.var).abs(),
    })
}

fn fit_exponential(samples: &[f64], m: &Moments) -> FitReport {
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = if min < 0.0 { -min } else { 0.0 };
    let shifted_mean = m.mean + shift;
    let rate = 1.0 / shifted_mean;
    let ll = m.n * rate.ln() - rate * shifted_mean * m.n;
    FitReport {
        family: Family::Exponential,
        params: vec![rate, shift],
        log_likelihood: ll,
        mean_err: (shifted_mean - shift - m.mean).abs(),
        var_err: (shifted_mean * shifted_mean - m.var).abs(),
    }
}

/// Fits each requested family and reports log-likelihoods and moment
/// errors, in `Family` order.
pub fn fit_compare(samples: &[f64], families: &BTreeSet<Family>) -> Result<Vec<FitReport>> {
    if samples.len() < MIN_COMPARE_SAMPLES {
        return Err(Error::DegenerateData(format!(
            "need at least {MIN_COMPARE_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let m = moments(samples)?;
    families
        .iter()
        .map(|family| match family {
            Family::Tnig => fit_tnig(samples, &m),
            Family::StudentT => Ok(fit_student_t(samples, &m)),
            Family::Laplace => fit_laplace(samples, &m),
            Family::Exponential => Ok(fit_exponential(samples, &m)),
        })
        .collect()
}
