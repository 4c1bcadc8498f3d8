//! Normal-Inverse-Gamma parameter algebra.
//!
//! A `NigParams` value `(delta, gamma, alpha, beta)` describes the joint prior
//!
//! ```text
//! sigma2 ~ InvGamma(alpha, beta)
//! mu     ~ Normal(delta, sigma2 / gamma)
//! d      ~ Normal(mu, sigma2)
//! ```
//!
//! Time-conditioned parameter sets are ordinary `NigParams`; whether a value
//! is local, global or fused is a matter of where it came from.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Lower bound applied to `gamma`, `beta` and `alpha - 1` after a learned head.
pub const PARAM_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NigParams {
    delta: f64,
    gamma: f64,
    alpha: f64,
    beta: f64,
}

impl NigParams {
    pub fn new(delta: f64, gamma: f64, alpha: f64, beta: f64) -> Result<Self> {
        if !(delta.is_finite() && gamma.is_finite() && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::Domain(format!(
                "NIG parameters must be finite; got ({delta}, {gamma}, {alpha}, {beta})"
            )));
        }
        if gamma <= 0.0 {
            return Err(Error::Domain(format!("gamma must be > 0; got {gamma}")));
        }
        if alpha <= 1.0 {
            return Err(Error::Domain(format!("alpha must be > 1; got {alpha}")));
        }
        if beta <= 0.0 {
            return Err(Error::Domain(format!("beta must be > 0; got {beta}")));
        }
        Ok(Self {
            delta,
            gamma,
            alpha,
            beta,
        })
    }

    /// Builds parameters from values already known to satisfy the
    /// constraints (e.g. outputs of floored activations).
    pub(crate) fn new_unchecked(delta: f64, gamma: f64, alpha: f64, beta: f64) -> Self {
        debug_assert!(gamma > 0.0 && alpha > 1.0 && beta > 0.0);
        Self {
            delta,
            gamma,
            alpha,
            beta,
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.delta, self.gamma, self.alpha, self.beta]
    }
}

/// Expected change plus the aleatoric / epistemic split of a parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyTriple {
    pub d: f64,
    pub al: f64,
    pub ep: f64,
}

/// Which coefficient weights the second quadratic term of the mixture
/// `beta` update.
///
/// `Verbatim` uses `gamma_1` in both terms; `Symmetric` uses `gamma_2` in the
/// second term, which makes the operator commutative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixtureMode {
    Verbatim,
    #[default]
    Symmetric,
}

impl std::str::FromStr for MixtureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verbatim" => Ok(MixtureMode::Verbatim),
            "symmetric" => Ok(MixtureMode::Symmetric),
            other => Err(Error::Config(format!("unknown mixture mode `{other}`"))),
        }
    }
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2.is_finite() && sigma2 > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("sigma2 must be finite and > 0; got {sigma2}")))
    }
}

/// Density with the `-beta/alpha` exponent term, as the tNIG density is
/// usually written down. This does not integrate to one; use
/// [`pdf_standard`] where a proper density is needed.
pub fn pdf_beta_over_alpha(p: &NigParams, mu: f64, sigma2: f64) -> Result<f64> {
    check_sigma2(sigma2)?;
    let log = 0.5 * (p.gamma / (2.0 * PI * sigma2)).ln() + p.alpha * p.beta.ln()
        - ln_gamma(p.alpha)
        - (p.alpha + 1.0) * sigma2.ln()
        - p.gamma * (mu - p.delta).powi(2) / (2.0 * sigma2)
        - p.beta / p.alpha;
    Ok(log.exp())
}

/// Textbook normal-inverse-gamma joint density over `(mu, sigma2)`.
pub fn pdf_standard(p: &NigParams, mu: f64, sigma2: f64) -> Result<f64> {
    check_sigma2(sigma2)?;
    let log = 0.5 * (p.gamma / (2.0 * PI * sigma2)).ln() + p.alpha * p.beta.ln()
        - ln_gamma(p.alpha)
        - (p.alpha + 1.0) * sigma2.ln()
        - (2.0 * p.beta + p.gamma * (mu - p.delta).powi(2)) / (2.0 * sigma2);
    Ok(log.exp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HierarchySample {
    pub mu: f64,
    pub sigma2: f64,
    pub d: f64,
}

/// Draws `n` samples from the three-level hierarchy. Deterministic in `seed`.
pub fn sample(p: &NigParams, n: usize, seed: u64) -> Vec<HierarchySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Gamma(shape, scale); 1 / Gamma(alpha, 1/beta) ~ InvGamma(alpha, beta).
    let precision = Gamma::new(p.alpha, 1.0 / p.beta).expect("alpha, beta validated");
    (0..n)
        .map(|_| {
            let sigma2 = 1.0 / precision.sample(&mut rng);
            let z_mu: f64 = StandardNormal.sample(&mut rng);
            let mu = p.delta + (sigma2 / p.gamma).sqrt() * z_mu;
            let z_d: f64 = StandardNormal.sample(&mut rng);
            let d = mu + sigma2.sqrt() * z_d;
            HierarchySample { mu, sigma2, d }
        })
        .collect()
}

/// Combines two parameter sets into one (the `⊕` operator).
pub fn mix(p1: &NigParams, p2: &NigParams, mode: MixtureMode) -> NigParams {
    let gamma = p1.gamma + p2.gamma;
    let delta = (p1.gamma * p1.delta + p2.gamma * p2.delta) / gamma;
    let alpha = p1.alpha + p2.alpha + 0.5;
    let c = match mode {
        MixtureMode::Verbatim => p1.gamma,
        MixtureMode::Symmetric => p2.gamma,
    };
    // Grouped as (b1 + b2) + (q1 + q2) so swapping the inputs in symmetric
    // mode gives bit-identical output.
    let beta = (p1.beta + p2.beta)
        + 0.5 * (p1.gamma * (p1.delta - delta).powi(2) + c * (p2.delta - delta).powi(2));
    NigParams::new_unchecked(delta, gamma, alpha, beta)
}

/// Reverse-mode adjoint of [`mix`]: given the gradient of some scalar with
/// respect to the output fields, returns the gradients with respect to both
/// inputs, each as `[delta, gamma, alpha, beta]`.
pub fn mix_adjoint(
    p1: &NigParams,
    p2: &NigParams,
    mode: MixtureMode,
    g_out: [f64; 4],
) -> ([f64; 4], [f64; 4]) {
    let [g_delta, g_gamma, g_alpha, g_beta] = g_out;
    let sum = p1.gamma + p2.gamma;
    let delta = (p1.gamma * p1.delta + p2.gamma * p2.delta) / sum;
    let e1 = p1.delta - delta;
    let e2 = p2.delta - delta;
    let (c, verbatim) = match mode {
        MixtureMode::Verbatim => (p1.gamma, true),
        MixtureMode::Symmetric => (p2.gamma, false),
    };
    // beta depends on delta both directly and through the fused mean.
    let g_mean = g_delta + g_beta * (-p1.gamma * e1 - c * e2);
    let half_e2_sq = 0.5 * e2 * e2;
    let g1 = [
        g_mean * p1.gamma / sum + g_beta * p1.gamma * e1,
        g_mean * e1 / sum
            + g_gamma
            + g_beta * (0.5 * e1 * e1 + if verbatim { half_e2_sq } else { 0.0 }),
        g_alpha,
        g_beta,
    ];
    let g2 = [
        g_mean * p2.gamma / sum + g_beta * c * e2,
        g_mean * e2 / sum + g_gamma + if verbatim { 0.0 } else { g_beta * half_e2_sq },
        g_alpha,
        g_beta,
    ];
    (g1, g2)
}

/// Left fold of three local (per-scale) parameter sets.
pub fn fuse_local(
    p1: &NigParams,
    p2: &NigParams,
    p3: &NigParams,
    mode: MixtureMode,
) -> NigParams {
    mix(&mix(p1, p2, mode), p3, mode)
}

/// Combines the fused local parameters with the global (deformation) ones.
pub fn fuse_global(local: &NigParams, global: &NigParams, mode: MixtureMode) -> NigParams {
    mix(local, global, mode)
}

pub fn uncertainty(p: &NigParams) -> UncertaintyTriple {
    let al = p.beta / (p.alpha - 1.0);
    UncertaintyTriple {
        d: p.delta,
        al,
        ep: al / p.gamma,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(d: f64, g: f64, a: f64, b: f64) -> NigParams {
        NigParams::new(d, g, a, b).unwrap()
    }

    #[test]
    fn constructor_accepts_and_rejects() {
        assert_eq!(p(0.0, 1.0, 2.0, 1.0).to_array(), [0.0, 1.0, 2.0, 1.0]);
        assert!(matches!(NigParams::new(0.0, 0.0, 2.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(NigParams::new(0.0, 1.0, 1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(NigParams::new(0.0, 1.0, 2.0, 0.0), Err(Error::Domain(_))));
        assert!(NigParams::new(f64::NAN, 1.0, 2.0, 1.0).is_err());
        assert!(NigParams::new(0.0, f64::INFINITY, 2.0, 1.0).is_err());
    }

    #[test]
    fn beta_over_alpha_density_hand_value() {
        let v = pdf_beta_over_alpha(&p(0.0, 1.0, 2.0, 1.0), 0.0, 1.0).unwrap();
        let expected = (1.0 / (2.0 * PI).sqrt()) * (-0.5f64).exp();
        assert!((v - expected).abs() < 1e-14);
        assert!((v - 0.24197).abs() < 1e-5);
        assert!(pdf_beta_over_alpha(&p(0.0, 1.0, 2.0, 1.0), 0.0, 0.0).is_err());
    }

    #[test]
    fn beta_over_alpha_density_at_prior_mean() {
        let q = p(0.3, 2.5, 3.0, 1.5);
        let s2: f64 = 0.7;
        let v = pdf_beta_over_alpha(&q, q.delta(), s2).unwrap();
        let by_hand = (q.gamma() / (2.0 * PI * s2)).sqrt()
            * q.beta().powf(q.alpha())
            / 2.0 // Gamma(3) = 2
            * s2.powf(-(q.alpha() + 1.0))
            * (-q.beta() / q.alpha()).exp();
        assert!((v - by_hand).abs() < 1e-12 * by_hand);
    }

    #[test]
    fn standard_density_symmetry_and_mode() {
        let q = p(0.0, 1.0, 2.0, 1.0);
        for mu in [0.1, 0.5, 2.0, 7.0] {
            let a = pdf_standard(&q, mu, 0.8).unwrap();
            let b = pdf_standard(&q, -mu, 0.8).unwrap();
            assert_eq!(a, b);
            assert!(pdf_standard(&q, 0.0, 0.8).unwrap() > a);
        }
        assert!(pdf_standard(&q, 0.0, -1.0).is_err());
    }

    #[test]
    fn sample_is_deterministic() {
        let q = p(0.5, 2.0, 3.0, 4.0);
        assert_eq!(sample(&q, 1, 9), sample(&q, 1, 9));
        assert_ne!(sample(&q, 1, 9), sample(&q, 1, 10));
    }

    #[test]
    fn mix_worked_examples() {
        for mode in [MixtureMode::Verbatim, MixtureMode::Symmetric] {
            let m = mix(&p(0.0, 1.0, 2.0, 1.0), &p(0.0, 1.0, 2.0, 1.0), mode);
            assert_eq!(m.to_array(), [0.0, 2.0, 4.5, 2.0]);
        }
        let a = p(1.0, 1.0, 2.0, 1.0);
        let b = p(3.0, 3.0, 2.0, 1.0);
        let s = mix(&a, &b, MixtureMode::Symmetric);
        assert_eq!(s.to_array(), [2.5, 4.0, 4.5, 3.5]);
        let v = mix(&a, &b, MixtureMode::Verbatim);
        assert_eq!(v.to_array(), [2.5, 4.0, 4.5, 3.25]);
    }

    #[test]
    fn fusion_examples() {
        let unit = p(0.0, 1.0, 2.0, 1.0);
        let local = fuse_local(&unit, &unit, &unit, MixtureMode::Symmetric);
        assert_eq!(local.to_array(), [0.0, 3.0, 7.0, 3.0]);
        let g = fuse_global(&p(0.0, 2.0, 4.5, 2.0), &unit, MixtureMode::Symmetric);
        assert_eq!(g.to_array(), [0.0, 3.0, 7.0, 3.0]);

        // Verbatim mode is order dependent once the means differ.
        let a = p(0.0, 1.0, 2.0, 1.0);
        let b = p(1.0, 2.0, 2.0, 1.0);
        let c = p(-2.0, 0.5, 3.0, 2.0);
        let abc = fuse_local(&a, &b, &c, MixtureMode::Verbatim);
        let cba = fuse_local(&c, &b, &a, MixtureMode::Verbatim);
        assert_ne!(abc.beta(), cba.beta());
    }

    #[test]
    fn uncertainty_examples() {
        let u = uncertainty(&p(0.5, 2.0, 3.0, 4.0));
        assert_eq!((u.d, u.al, u.ep), (0.5, 2.0, 1.0));
        let u = uncertainty(&p(0.1, 1.0, 4.0, 0.6));
        assert_eq!(u.al, u.ep);
        let u = uncertainty(&p(0.0, 1.0, 2.0, 1e-9));
        assert!(u.al < 1e-8 && u.ep < 1e-8);
    }

    #[test]
    fn mix_adjoint_matches_central_differences() {
        let a = p(0.3, 1.7, 2.2, 0.9);
        let b = p(-0.8, 0.6, 3.1, 1.4);
        let weights = [0.7, -1.3, 0.4, 2.1];
        let objective = |x: &NigParams, y: &NigParams, mode| {
            let m = mix(x, y, mode).to_array();
            m.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>()
        };
        for mode in [MixtureMode::Verbatim, MixtureMode::Symmetric] {
            let (ga, gb) = mix_adjoint(&a, &b, mode, weights);
            for (which, analytic) in [(0, ga), (1, gb)] {
                for k in 0..4 {
                    let h = 1e-6;
                    let bump = |s: f64| {
                        let mut arr = if which == 0 { a.to_array() } else { b.to_array() };
                        arr[k] += s;
                        let q = NigParams::new(arr[0], arr[1], arr[2], arr[3]).unwrap();
                        if which == 0 {
                            objective(&q, &b, mode)
                        } else {
                            objective(&a, &q, mode)
                        }
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    assert!(
                        (fd - analytic[k]).abs() < 1e-7 * (1.0 + fd.abs()),
                        "{mode:?} input {which} field {k}: fd {fd} vs {}",
                        analytic[k]
                    );
                }
            }
        }
    }
}
