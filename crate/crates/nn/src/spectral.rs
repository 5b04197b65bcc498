//! Spectral normalization by one-step power iteration.
//!
//! A weight matrix `W` (rows × cols) is replaced by `W / σ(W)`, where the
//! largest singular value is estimated as `σ ≈ uᵀ W v` from a persistent
//! left vector `u` refined once per training forward pass.

use crate::Param;

fn normalize(v: &mut [f32]) -> f32 {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt() as f32;
    if norm > 0.0 {
        let inv = 1.0 / (norm + 1e-12);
        v.iter_mut().for_each(|x| *x *= inv);
    }
    norm
}

/// `Mᵀ u` for a row-major `rows × cols` matrix.
fn mat_t_vec(m: &[f32], rows: usize, cols: usize, u: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; cols];
    for r in 0..rows {
        let ur = u[r];
        let row = &m[r * cols..(r + 1) * cols];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += ur * w;
        }
    }
    out
}

fn mat_vec(m: &[f32], rows: usize, cols: usize, v: &[f32]) -> Vec<f32> {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Result of one normalization step.
#[derive(Clone, Debug)]
pub struct SnStep {
    pub normalized: Vec<f32>,
    pub sigma: f32,
    pub v: Vec<f32>,
}

/// One power-iteration step on `weight` (rows × cols), updating `u` in
/// place, and the weight divided by the resulting singular-value estimate.
///
/// A zero matrix has no direction to estimate; the weight is returned
/// unchanged with `sigma = 0`.
pub fn spectral_normalize(weight: &[f32], rows: usize, cols: usize, u: &mut [f32]) -> SnStep {
    assert_eq!(weight.len(), rows * cols);
    assert_eq!(u.len(), rows);
    let mut v = mat_t_vec(weight, rows, cols, u);
    if normalize(&mut v) == 0.0 {
        log::warn!("spectral_normalize: zero matrix or degenerate u; weight left unchanged");
        return SnStep { normalized: weight.to_vec(), sigma: 0.0, v };
    }
    let mut wu = mat_vec(weight, rows, cols, &v);
    normalize(&mut wu);
    u.copy_from_slice(&wu);
    let sigma = estimate_sigma(weight, rows, cols, u, &v);
    let normalized = weight.iter().map(|w| w / sigma).collect();
    SnStep { normalized, sigma, v }
}

/// `uᵀ W v`.
pub fn estimate_sigma(weight: &[f32], rows: usize, cols: usize, u: &[f32], v: &[f32]) -> f32 {
    mat_vec(weight, rows, cols, v).iter().zip(u).map(|(a, b)| a * b).sum()
}

/// Persistent spectral-normalization state attached to a weight.
#[derive(Clone, Debug)]
pub struct SpectralNorm {
    pub u: Param,
    rows: usize,
    cols: usize,
    sigma: f32,
    v: Vec<f32>,
}

impl SpectralNorm {
    /// `u0` must be a non-zero vector of length `rows`.
    pub fn new(rows: usize, cols: usize, mut u0: Vec<f32>) -> Self {
        assert_eq!(u0.len(), rows);
        normalize(&mut u0);
        Self { u: Param::buffer("sn_u", vec![rows], u0), rows, cols, sigma: 1.0, v: vec![0.0; cols] }
    }

    /// Normalized weight for a forward pass. Training passes refine `u`;
    /// evaluation passes reuse it.
    pub fn apply(&mut self, weight: &[f32], update: bool) -> Vec<f32> {
        if update {
            let step = spectral_normalize(weight, self.rows, self.cols, &mut self.u.value);
            self.sigma = step.sigma;
            self.v = step.v;
            if step.sigma == 0.0 {
                self.sigma = 1.0;
            }
            return step.normalized;
        }
        let mut v = mat_t_vec(weight, self.rows, self.cols, &self.u.value);
        normalize(&mut v);
        let sigma = estimate_sigma(weight, self.rows, self.cols, &self.u.value, &v);
        self.sigma = if sigma == 0.0 { 1.0 } else { sigma };
        self.v = v;
        weight.iter().map(|w| w / self.sigma).collect()
    }

    pub fn sigma(&self) -> f32 {
        self.sigma
    }

    /// Maps the gradient w.r.t. the normalized weight back to the raw
    /// weight, treating `u` and `v` as constants:
    /// `∂L/∂W = (G − ⟨G, W/σ⟩ u vᵀ) / σ`.
    pub fn backward(&self, normalized: &[f32], grad_normalized: &[f32]) -> Vec<f32> {
        let dot: f32 = grad_normalized.iter().zip(normalized).map(|(g, w)| g * w).sum();
        let inv = 1.0 / self.sigma;
        let mut out = Vec::with_capacity(grad_normalized.len());
        for r in 0..self.rows {
            let ur = self.u.value[r] * dot;
            for c in 0..self.cols {
                let i = r * self.cols + c;
                out.push((grad_normalized[i] - ur * self.v[c]) * inv);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    fn svd_max(w: &[f32], rows: usize, cols: usize) -> f64 {
        let m = DMatrix::from_row_slice(rows, cols, &w.iter().map(|&x| x as f64).collect::<Vec<_>>());
        m.singular_values().max()
    }

    #[test]
    fn fifty_iterations_match_svd() {
        let (rows, cols) = (64, 64);
        // Positive entries give a well-separated top singular value.
        let w: Vec<f32> = random_matrix(rows, cols, 7).iter().map(|x| (x + 1.0) / 2.0).collect();
        let mut u: Vec<f32> = random_matrix(rows, 1, 8);
        let mut sigma = 0.0;
        for _ in 0..50 {
            sigma = spectral_normalize(&w, rows, cols, &mut u).sigma;
        }
        let exact = svd_max(&w, rows, cols);
        assert!(((sigma as f64) - exact).abs() / exact < 1e-3, "{sigma} vs {exact}");
    }

    #[test]
    fn identity_is_unchanged() {
        let n = 6;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        let mut u = vec![1.0; n];
        let step = spectral_normalize(&w, n, n, &mut u);
        assert!((step.sigma - 1.0).abs() < 1e-6);
        for (a, b) in step.normalized.iter().zip(&w) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn scaling_is_absorbed() {
        let (rows, cols) = (8, 5);
        let w = random_matrix(rows, cols, 3);
        let w10: Vec<f32> = w.iter().map(|x| x * 10.0).collect();
        let mut u1 = random_matrix(rows, 1, 4);
        let mut u2 = u1.clone();
        let a = spectral_normalize(&w, rows, cols, &mut u1);
        let b = spectral_normalize(&w10, rows, cols, &mut u2);
        for (x, y) in a.normalized.iter().zip(&b.normalized) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_matrix_passes_through() {
        let w = vec![0.0; 12];
        let mut u = vec![1.0; 3];
        let step = spectral_normalize(&w, 3, 4, &mut u);
        assert_eq!(step.sigma, 0.0);
        assert_eq!(step.normalized, w);
    }

    #[test]
    fn normalized_sigma_near_one_after_warmup() {
        for seed in 0..5 {
            let (rows, cols) = (12, 20);
            let w = random_matrix(rows, cols, 100 + seed);
            let mut sn = SpectralNorm::new(rows, cols, random_matrix(rows, 1, 200 + seed));
            let mut normalized = Vec::new();
            for _ in 0..30 {
                normalized = sn.apply(&w, true);
            }
            let s = svd_max(&normalized, rows, cols);
            assert!((0.9..=1.1).contains(&s), "seed {seed}: {s}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Loss = Σ c ⊙ (W/σ(W)) with σ = uᵀWv, u and v frozen.
        let (rows, cols) = (4, 3);
        let w: Vec<f32> = random_matrix(rows, cols, 11);
        let coeff = random_matrix(rows, cols, 12);
        let mut sn = SpectralNorm::new(rows, cols, random_matrix(rows, 1, 13));
        for _ in 0..20 {
            sn.apply(&w, true);
        }
        let normalized = sn.apply(&w, false);
        let grad = sn.backward(&normalized, &coeff);
        let u: Vec<f64> = sn.u.value.iter().map(|&x| x as f64).collect();
        let v: Vec<f64> = sn.v.iter().map(|&x| x as f64).collect();
        let loss = |w: &[f64]| {
            let mut s = 0.0;
            for r in 0..rows {
                for c in 0..cols {
                    s += u[r] * w[r * cols + c] * v[c];
                }
            }
            w.iter().zip(&coeff).map(|(a, b)| a / s * (*b as f64)).sum::<f64>()
        };
        let w64: Vec<f64> = w.iter().map(|&x| x as f64).collect();
        for i in 0..w.len() {
            let h = 1e-6;
            let mut p = w64.clone();
            p[i] += h;
            let mut m = w64.clone();
            m[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grad[i] as f64).abs() < 1e-3 * (1.0 + fd.abs()), "{i}: {fd} vs {}", grad[i]);
        }
    }
}
