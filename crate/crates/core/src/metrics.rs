//! SSIM (with its gradient), PSNR, watermark quality and a Fréchet
//! distance over seeded random features.
//!
//! All images are expected in `[0, 1]`; use [`Image::tanh_to_unit`] on raw
//! generator output first.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use gmk_nn::Tensor;

use crate::img::{Image, Region};

/// Scores at or above this count as a verified watermark.
pub const QWM_THRESHOLD: f64 = 0.75;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    TooSmall { height: usize, width: usize, window: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("need at least {need} samples per set, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub window_size: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window_size: 11, window_sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.window_size < 3 || self.window_size.is_multiple_of(2) {
            return Err(MetricError::Config(format!("window_size {} must be odd and >= 3", self.window_size)));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0 && self.window_sigma > 0.0) {
            return Err(MetricError::Config("k1, k2, window_sigma and dynamic_range must be positive".into()));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps.
    pub fn window(&self) -> Vec<f64> {
        let r = (self.window_size / 2) as f64;
        let mut w: Vec<f64> = (0..self.window_size)
            .map(|k| (-(k as f64 - r).powi(2) / (2.0 * self.window_sigma * self.window_sigma)).exp())
            .collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        w
    }

    fn c1c2(&self) -> (f64, f64) {
        ((self.k1 * self.dynamic_range).powi(2), (self.k2 * self.dynamic_range).powi(2))
    }
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            let src = &plane[r * w + c..r * w + c + k];
            rows[r * ow + c] = src.iter().zip(taps).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for (t, &tap) in taps.iter().enumerate() {
            let src = &rows[(r + t) * ow..(r + t + 1) * ow];
            for (o, s) in out[r * ow..(r + 1) * ow].iter_mut().zip(src) {
                *o += tap * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter`].
fn filter_adjoint(g: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for r in 0..oh {
        for (t, &tap) in taps.iter().enumerate() {
            let dst = &mut rows[(r + t) * ow..(r + t + 1) * ow];
            for (d, s) in dst.iter_mut().zip(&g[r * ow..(r + 1) * ow]) {
                *d += tap * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..ow {
            let v = rows[r * ow + c];
            for (t, &tap) in taps.iter().enumerate() {
                out[r * w + c + t] += tap * v;
            }
        }
    }
    out
}

/// SSIM of two HWC `f64` images, averaged over channels and window
/// positions, optionally with the gradient with respect to `a`.
pub fn ssim_f64(
    shape: (usize, usize, usize),
    a: &[f64],
    b: &[f64],
    cfg: &SsimConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>), MetricError> {
    cfg.validate()?;
    let (h, w, ch) = shape;
    if a.len() != h * w * ch || b.len() != a.len() {
        return Err(MetricError::ShapeMismatch { a: vec![a.len()], b: vec![b.len()] });
    }
    if h < cfg.window_size || w < cfg.window_size {
        return Err(MetricError::TooSmall { height: h, width: w, window: cfg.window_size });
    }
    let taps = cfg.window();
    let (c1, c2) = cfg.c1c2();
    let n_out = (h + 1 - cfg.window_size) * (w + 1 - cfg.window_size);
    let norm = 1.0 / (n_out * ch) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; a.len()]);
    for c in 0..ch {
        let x: Vec<f64> = a.iter().skip(c).step_by(ch).copied().collect();
        let y: Vec<f64> = b.iter().skip(c).step_by(ch).copied().collect();
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter(&x, h, w, &taps);
        let my = filter(&y, h, w, &taps);
        let exx = filter(&sq(&x, &x), h, w, &taps);
        let eyy = filter(&sq(&y, &y), h, w, &taps);
        let exy = filter(&sq(&x, &y), h, w, &taps);
        let mut g_mx = vec![0.0; n_out];
        let mut g_exx = vec![0.0; n_out];
        let mut g_exy = vec![0.0; n_out];
        for i in 0..n_out {
            let (ux, uy) = (mx[i], my[i]);
            let a1 = 2.0 * ux * uy + c1;
            let a2 = 2.0 * (exy[i] - ux * uy) + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = (exx[i] - ux * ux) + (eyy[i] - uy * uy) + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let d_a1 = a2 / (b1 * b2);
                let d_a2 = a1 / (b1 * b2);
                let d_b1 = -s / b1;
                let d_b2 = -s / b2;
                g_mx[i] = norm * (2.0 * uy * (d_a1 - d_a2) + 2.0 * ux * (d_b1 - d_b2));
                g_exx[i] = norm * d_b2;
                g_exy[i] = norm * 2.0 * d_a2;
            }
        }
        if let Some(grad) = grad.as_mut() {
            let t_mx = filter_adjoint(&g_mx, h, w, &taps);
            let t_exx = filter_adjoint(&g_exx, h, w, &taps);
            let t_exy = filter_adjoint(&g_exy, h, w, &taps);
            for p in 0..h * w {
                grad[p * ch + c] = t_mx[p] + 2.0 * x[p] * t_exx[p] + y[p] * t_exy[p];
            }
        }
    }
    Ok((total * norm, grad))
}

fn check_same(a: &Image, b: &Image) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        let (p, q) = (a.shape(), b.shape());
        return Err(MetricError::ShapeMismatch { a: vec![p.0, p.1, p.2], b: vec![q.0, q.1, q.2] });
    }
    Ok(())
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn ssim(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<f64, MetricError> {
    check_same(a, b)?;
    Ok(ssim_f64(a.shape(), &widen(&a.data), &widen(&b.data), cfg, false)?.0)
}

/// `1 − mean SSIM` over NHWC batches in `[0, 1]`, with the gradient with
/// respect to `gen`.
pub fn reconstructive_loss(gen: &Tensor, target: &Tensor, cfg: &SsimConfig) -> Result<(f64, Tensor), MetricError> {
    if gen.shape() != target.shape() || gen.shape().len() != 4 {
        return Err(MetricError::ShapeMismatch { a: gen.shape().to_vec(), b: target.shape().to_vec() });
    }
    let s = gen.shape();
    let n = s[0];
    if n == 0 {
        return Err(MetricError::TooFewSamples { need: 1, got: 0 });
    }
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(gen.len());
    for i in 0..n {
        let (v, g) = ssim_f64((s[1], s[2], s[3]), &widen(gen.item(i)), &widen(target.item(i)), cfg, true)?;
        sum += v;
        grad.extend(g.unwrap_or_default().into_iter().map(|d| (-d / n as f64) as f32));
    }
    Ok((1.0 - sum / n as f64, Tensor::new(s.to_vec(), grad)))
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64, MetricError> {
    check_same(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>()
        / a.data.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QwmResult {
    pub full_image: f64,
    pub region_only: Option<f64>,
}

impl QwmResult {
    pub fn verified(&self) -> bool {
        self.full_image >= QWM_THRESHOLD
    }
}

/// Watermark quality of one trigger output.
///
/// `expected` is the full target image. When `region` and `logo` are
/// given, `region_only` compares the crop of `output` with the raw logo;
/// it is omitted (with a warning) when the region is missing or smaller
/// than the SSIM window.
pub fn qwm(
    output: &Image,
    expected: &Image,
    region: Option<(&Region, &Image)>,
    cfg: &SsimConfig,
) -> Result<QwmResult, MetricError> {
    let full_image = ssim(output, expected, cfg)?;
    let region_only = match region {
        None => {
            log::warn!("no watermark region given; region-only score omitted");
            None
        }
        Some((r, logo)) => {
            if !r.fits_in(output.height, output.width) {
                return Err(MetricError::ShapeMismatch {
                    a: vec![output.height, output.width],
                    b: vec![r.row + r.height, r.col + r.width],
                });
            }
            if r.height < cfg.window_size || r.width < cfg.window_size {
                log::warn!("watermark region {r:?} is smaller than the SSIM window; region-only score omitted");
                None
            } else {
                Some(ssim(&output.crop(r), logo, cfg)?)
            }
        }
    };
    Ok(QwmResult { full_image, region_only })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrechetProxyConfig {
    pub projection_seed: u64,
    pub feature_dim: usize,
    pub eps: f64,
}

impl Default for FrechetProxyConfig {
    fn default() -> Self {
        Self { projection_seed: 0x5eed, feature_dim: 64, eps: 1e-6 }
    }
}

/// Seeded random features: `relu(P x)` with `P ~ N(0, 1/d)`.
pub fn proxy_features(images: &Tensor, cfg: &FrechetProxyConfig) -> DMatrix<f64> {
    let d = images.item_len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.projection_seed);
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
    let p = DMatrix::<f64>::from_fn(d, cfg.feature_dim, |_, _| normal.sample(&mut rng));
    let x = DMatrix::<f64>::from_row_iterator(images.batch(), d, images.data().iter().map(|&v| v as f64));
    (x * p).map(|v| v.max(0.0))
}

fn gaussian_fit(f: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = f.nrows() as f64;
    let mu = f.row_mean().transpose();
    let mut centered = f.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between `N(mu1, s1)` and `N(mu2, s2)`.
pub fn frechet_gaussians(
    mu1: &DVector<f64>,
    s1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    s2: &DMatrix<f64>,
    eps: f64,
) -> Result<f64, MetricError> {
    let k = s1.nrows();
    let jitter = DMatrix::<f64>::identity(k, k) * eps;
    let r = sym_sqrt(&(s1 + &jitter));
    let mut inner = &r * (s2 + &jitter) * &r;
    inner = (&inner + inner.transpose()) * 0.5;
    let eig = inner.symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite(format!(
            "covariance root eigenvalues (trace s1 {:.3e}, trace s2 {:.3e})",
            s1.trace(),
            s2.trace()
        )));
    }
    let tr_root: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_root;
    if !d.is_finite() {
        return Err(MetricError::NonFinite("fréchet distance".into()));
    }
    Ok(d.max(0.0))
}

/// Fréchet distance between Gaussians fitted to two feature sets (rows
/// are samples).
pub fn frechet_features(a: &DMatrix<f64>, b: &DMatrix<f64>, eps: f64) -> Result<f64, MetricError> {
    let need = a.ncols() + 1;
    let got = a.nrows().min(b.nrows());
    if got < need {
        return Err(MetricError::TooFewSamples { need, got });
    }
    if a.ncols() != b.ncols() {
        return Err(MetricError::ShapeMismatch { a: vec![a.ncols()], b: vec![b.ncols()] });
    }
    let (m1, s1) = gaussian_fit(a);
    let (m2, s2) = gaussian_fit(b);
    frechet_gaussians(&m1, &s1, &m2, &s2, eps)
}

/// Fréchet distance over seeded random features of two image batches.
pub fn frechet_proxy(real: &Tensor, gen: &Tensor, cfg: &FrechetProxyConfig) -> Result<f64, MetricError> {
    if cfg.feature_dim < 2 {
        return Err(MetricError::Config("feature_dim must be >= 2".into()));
    }
    if real.item_len() != gen.item_len() {
        return Err(MetricError::ShapeMismatch { a: real.shape().to_vec(), b: gen.shape().to_vec() });
    }
    let need = cfg.feature_dim + 1;
    let got = real.batch().min(gen.batch());
    if got < need {
        return Err(MetricError::TooFewSamples { need, got });
    }
    frechet_features(&proxy_features(real, cfg), &proxy_features(gen, cfg), cfg.eps)
}

/// One line of a metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl MetricRow {
    pub const HEADER: &'static str = "run_id,metric,value,n_samples,seed";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.run_id, self.metric, self.value, self.n_samples, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f32>()).collect())
    }

    /// Direct per-window evaluation with 2-D weights.
    fn naive_ssim(a: &Image, b: &Image, cfg: &SsimConfig) -> f64 {
        let t = cfg.window();
        let k = t.len();
        let (c1, c2) = cfg.c1c2();
        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..a.channels {
            for r in 0..=a.height - k {
                for c in 0..=a.width - k {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let wt = t[i] * t[j];
                            let x = a.at(r + i, c + j, ch) as f64;
                            let y = b.at(r + i, c + j, ch) as f64;
                            mx += wt * x;
                            my += wt * y;
                            xx += wt * x * x;
                            yy += wt * y * y;
                            xy += wt * x * y;
                        }
                    }
                    let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                    total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn identity_and_symmetry() {
        let cfg = SsimConfig::default();
        let a = noise(32, 32, 3, 1);
        let b = noise(32, 32, 3, 2);
        assert!((ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b, &cfg).unwrap(), ssim(&b, &a, &cfg).unwrap());
    }

    #[test]
    fn matches_naive_reference() {
        let cfg = SsimConfig::default();
        let v = ssim(&noise(32, 32, 1, 11), &noise(32, 32, 1, 12), &cfg).unwrap();
        assert!((v - naive_ssim(&noise(32, 32, 1, 11), &noise(32, 32, 1, 12), &cfg)).abs() < 1e-6);
        for s in 0..50 {
            let (a, b) = (noise(14, 13, 2, 100 + s), noise(14, 13, 2, 200 + s));
            let v = ssim(&a, &b, &cfg).unwrap();
            assert!((v - naive_ssim(&a, &b, &cfg)).abs() < 1e-6);
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn constant_images_closed_form() {
        let cfg = SsimConfig::default();
        let v = ssim(&Image::filled(16, 16, 1, 0.2), &Image::filled(16, 16, 1, 0.8), &cfg).unwrap();
        let c1 = 1e-4;
        let want = (2.0 * 0.2 * 0.8 + c1) / (0.04 + 0.64 + c1);
        assert!((v - want).abs() < 1e-6, "{v} vs {want}");
    }

    #[test]
    fn errors() {
        let cfg = SsimConfig::default();
        assert!(matches!(
            ssim(&Image::filled(8, 8, 1, 0.0), &Image::filled(8, 8, 1, 0.0), &cfg),
            Err(MetricError::TooSmall { .. })
        ));
        assert!(matches!(
            ssim(&Image::filled(16, 16, 1, 0.0), &Image::filled(16, 16, 3, 0.0), &cfg),
            Err(MetricError::ShapeMismatch { .. })
        ));
        let bad = SsimConfig { window_size: 4, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = SsimConfig { window_size: 5, ..SsimConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let a: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
            let (_, g) = ssim_f64((8, 8, 1), &a, &b, &cfg, true).unwrap();
            let g = g.unwrap();
            let h = 1e-6;
            for i in 0..64 {
                let mut p = a.clone();
                p[i] += h;
                let mut m = a.clone();
                m[i] -= h;
                let fd = (ssim_f64((8, 8, 1), &p, &b, &cfg, false).unwrap().0
                    - ssim_f64((8, 8, 1), &m, &b, &cfg, false).unwrap().0)
                    / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn reconstructive_loss_values() {
        let cfg = SsimConfig::default();
        let a = crate::img::tensor_from_images(&[noise(16, 16, 3, 1), noise(16, 16, 3, 2)]);
        let (l, g) = reconstructive_loss(&a, &a, &cfg).unwrap();
        assert!(l.abs() < 1e-12);
        assert_eq!(g.shape(), a.shape());
        let b = crate::img::tensor_from_images(&[noise(16, 16, 3, 3), noise(16, 16, 3, 4)]);
        let (l, _) = reconstructive_loss(&a, &b, &cfg).unwrap();
        let s0 = ssim(&noise(16, 16, 3, 1), &noise(16, 16, 3, 3), &cfg).unwrap();
        let s1 = ssim(&noise(16, 16, 3, 2), &noise(16, 16, 3, 4), &cfg).unwrap();
        assert!((l - (1.0 - (s0 + s1) / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn psnr_values() {
        let a = noise(8, 8, 3, 5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
        let c = noise(8, 8, 3, 6);
        let mse: f64 =
            a.data.iter().zip(&c.data).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.data.len() as f64;
        assert!((psnr(&a, &c, 1.0).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
    }

    #[test]
    fn qwm_perfect_and_region() {
        let cfg = SsimConfig::default();
        let asset = crate::triggers::WatermarkAsset::builtin("ring", Region::top_left(16, 16)).unwrap();
        let y = crate::triggers::paste_watermark(&noise(32, 32, 3, 9), &asset).unwrap();
        let q = qwm(&y, &y, Some((&asset.region, &asset.image)), &cfg).unwrap();
        assert!((q.full_image - 1.0).abs() < 1e-12);
        assert!((q.region_only.unwrap() - 1.0).abs() < 1e-12);
        assert!(q.verified());
        assert_eq!(qwm(&y, &y, None, &cfg).unwrap().region_only, None);
        let small = Region::top_left(8, 8);
        assert_eq!(qwm(&y, &y, Some((&small, &y.crop(&small))), &cfg).unwrap().region_only, None);
    }

    fn whitened(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::<f64>::from_fn(n, d, |_, _| Normal::new(0.0, 1.0).unwrap().sample(&mut rng));
        let (mu, cov) = gaussian_fit(&x);
        let mut c = x.clone();
        for mut row in c.row_iter_mut() {
            row -= mu.transpose();
        }
        let inv_root = sym_sqrt(&cov).try_inverse().unwrap();
        c * inv_root
    }

    #[test]
    fn frechet_equal_covariance_closed_form() {
        let x = whitened(200, 8, 3);
        let shift = DVector::<f64>::from_fn(8, |i, _| i as f64 * 0.25 - 0.5);
        let mut y = x.clone();
        for mut row in y.row_iter_mut() {
            row += shift.transpose();
        }
        let d = frechet_features(&x, &y, 1e-6).unwrap();
        assert!((d - shift.norm_squared()).abs() < 1e-3, "{d} vs {}", shift.norm_squared());
        let eye = DMatrix::<f64>::identity(8, 8);
        let z = DVector::<f64>::zeros(8);
        let d = frechet_gaussians(&z, &eye, &shift, &eye, 1e-6).unwrap();
        assert!((d - shift.norm_squared()).abs() < 1e-3);
    }

    #[test]
    fn frechet_proxy_properties() {
        let cfg = FrechetProxyConfig { feature_dim: 8, ..Default::default() };
        let imgs = |seed: u64| {
            let v: Vec<Image> = (0..20).map(|i| noise(6, 6, 3, seed * 100 + i)).collect();
            crate::img::tensor_from_images(&v)
        };
        let (a, b) = (imgs(1), imgs(2));
        assert!(frechet_proxy(&a, &a, &cfg).unwrap().abs() < 1e-6);
        let ab = frechet_proxy(&a, &b, &cfg).unwrap();
        assert!((ab - frechet_proxy(&b, &a, &cfg).unwrap()).abs() < 1e-6);
        assert!(ab >= 0.0);
        let mut items: Vec<Vec<f32>> = (0..20).map(|i| a.item(i).to_vec()).collect();
        items.reverse();
        let rev = Tensor::new(a.shape().to_vec(), items.concat());
        assert!((frechet_proxy(&rev, &b, &cfg).unwrap() - ab).abs() < 1e-6);
        let few = a.slice_batch(0, 5);
        assert!(matches!(frechet_proxy(&few, &b, &cfg), Err(MetricError::TooFewSamples { .. })));
    }

    #[test]
    fn csv_row() {
        let r = MetricRow { run_id: "r1".into(), metric: "psnr".into(), value: 20.5, n_samples: 64, seed: 3 };
        assert_eq!(r.to_csv(), "r1,psnr,20.5,64,3");
    }
}
