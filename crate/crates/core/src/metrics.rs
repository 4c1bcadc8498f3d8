//! MSE, PSNR and SSIM on single-channel images with unit dynamic range.

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check(a: &Tensor3, b: &Tensor3) -> Result<()> {
    if !a.same_shape(b) || a.channels() != 1 {
        return Err(Error::Shape(format!(
            "metric inputs must be matching single-channel images, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn mse(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    check(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data().len() as f64)
}

/// `10 log10(1 / mse)`, capped at 100 dB once `mse < 1e-10`.
pub fn psnr(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB)
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over the positions where the full window fits.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..SSIM_WINDOW).map(|k| g[k] * x[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(i + k) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity over all 11x11 windows that fit inside the
/// image (Gaussian weights, sigma 1.5, K1 = 0.01, K2 = 0.03, L = 1).
pub fn ssim(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    check(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let g = gaussian_window();
    let (x, y) = (a.data(), b.data());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(x, h, w, &g);
    let my = filter_valid(y, h, w, &g);
    let sxx = filter_valid(&xx, h, w, &g);
    let syy = filter_valid(&yy, h, w, &g);
    let sxy = filter_valid(&xy, h, w, &g);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ma, mb) = (mx[i], my[i]);
        let va = sxx[i] - ma * ma;
        let vb = syy[i] - mb * mb;
        let cov = sxy[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(v: f64) -> Tensor3 {
        Tensor3::filled(16, 16, 1, v)
    }

    #[test]
    fn mse_examples() {
        let a = filled(0.3);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&filled(0.0), &filled(1.0)).unwrap(), 1.0);
        assert_eq!(mse(&filled(0.0), &filled(0.5)).unwrap(), 0.25);
        assert!(matches!(mse(&a, &Tensor3::zeros(16, 15, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn psnr_examples() {
        let a = filled(0.3);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        assert!((psnr(&filled(0.0), &filled(0.1)).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&filled(0.0), &filled(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for k in 0..SSIM_WINDOW {
            assert_eq!(g[k], g[SSIM_WINDOW - 1 - k]);
        }
    }

    #[test]
    fn ssim_examples() {
        let a = Tensor3::from_fn(16, 16, 1, |i, j, _| ((i * 7 + j * 3) % 11) as f64 / 10.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let board = Tensor3::from_fn(16, 16, 1, |i, j, _| ((i + j) % 2) as f64);
        let inv = Tensor3::from_fn(16, 16, 1, |i, j, _| 1.0 - board.get(i, j, 0));
        assert!(ssim(&board, &inv).unwrap() < 0.0);
        assert!(matches!(ssim(&Tensor3::zeros(10, 16, 1), &Tensor3::zeros(10, 16, 1)), Err(Error::Size(_))));
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        // Single window position: compare against an explicit weighted sum.
        let a = Tensor3::from_fn(11, 11, 1, |i, j, _| ((i * 5 + j * 2) % 7) as f64 / 7.0);
        let b = Tensor3::from_fn(11, 11, 1, |i, j, _| ((i * 3 + j) % 5) as f64 / 5.0);
        let mut wts = [[0.0; 11]; 11];
        let mut z = 0.0;
        for (i, row) in wts.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (x, y) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(x * x + y * y) / 4.5).exp();
                z += *v;
            }
        }
        let e = |f: &dyn Fn(usize, usize) -> f64| {
            let mut s = 0.0;
            for i in 0..11 {
                for j in 0..11 {
                    s += wts[i][j] / z * f(i, j);
                }
            }
            s
        };
        let ma = e(&|i, j| a.get(i, j, 0));
        let mb = e(&|i, j| b.get(i, j, 0));
        let va = e(&|i, j| (a.get(i, j, 0) - ma).powi(2));
        let vb = e(&|i, j| (b.get(i, j, 0) - mb).powi(2));
        let cov = e(&|i, j| (a.get(i, j, 0) - ma) * (b.get(i, j, 0) - mb));
        let (c1, c2) = (1e-4, 9e-4);
        let want = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }
}
