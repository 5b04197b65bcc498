use rand::Rng;

use crate::gemm::gemm;
use crate::spectral::SpectralNorm;
use crate::{Layer, Mode, Param, Tensor};

/// Fully connected layer over the flattened item, weight `in × out`.
pub struct Dense {
    name: String,
    pub weight: Param,
    pub bias: Param,
    n_in: usize,
    n_out: usize,
    sn: Option<SpectralNorm>,
    effective: Vec<f32>,
    input: Vec<f32>,
    in_shape: Vec<usize>,
}

impl Dense {
    pub fn new(name: impl Into<String>, n_in: usize, n_out: usize, spectral: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (n_in as f32).sqrt();
        let w = (0..n_in * n_out).map(|_| rng.random_range(-bound..bound)).collect();
        let b = (0..n_out).map(|_| rng.random_range(-bound..bound)).collect();
        let sn = spectral.then(|| SpectralNorm::new(n_in, n_out, (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect()));
        Self {
            name: name.into(),
            weight: Param::new("weight", vec![n_in, n_out], w),
            bias: Param::new("bias", vec![n_out], b),
            n_in,
            n_out,
            sn,
            effective: Vec::new(),
            input: Vec::new(),
            in_shape: Vec::new(),
        }
    }
}

impl Layer for Dense {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let n = x.batch();
        assert_eq!(x.item_len(), self.n_in, "{}: input width mismatch", self.name);
        self.effective = match self.sn.as_mut() {
            Some(sn) => sn.apply(&self.weight.value, mode.is_train()),
            None => self.weight.value.clone(),
        };
        let mut out = Vec::with_capacity(n * self.n_out);
        for _ in 0..n {
            out.extend_from_slice(&self.bias.value);
        }
        gemm(n, self.n_in, self.n_out, x.data(), false, &self.effective, false, &mut out, 1.0);
        self.input = x.data().to_vec();
        self.in_shape = x.shape().to_vec();
        Tensor::new(vec![n, self.n_out], out)
    }

    fn backward(&mut self, grad: &Tensor, param_grads: bool) -> Tensor {
        let n = grad.batch();
        if param_grads {
            let mut gw = vec![0.0; self.n_in * self.n_out];
            gemm(self.n_in, n, self.n_out, &self.input, true, grad.data(), false, &mut gw, 0.0);
            if let Some(sn) = &self.sn {
                gw = sn.backward(&self.effective, &gw);
            }
            for (a, b) in self.weight.grad.iter_mut().zip(&gw) {
                *a += b;
            }
            for row in grad.data().chunks_exact(self.n_out) {
                for (o, v) in self.bias.grad.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let mut gx = vec![0.0; n * self.n_in];
        gemm(n, self.n_out, self.n_in, grad.data(), false, &self.effective, true, &mut gx, 0.0);
        Tensor::new(self.in_shape.clone(), gx)
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight, &self.bias];
        if let Some(sn) = &self.sn {
            v.push(&sn.u);
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight, &mut self.bias];
        if let Some(sn) = &mut self.sn {
            v.push(&mut sn.u);
        }
        v
    }
}

/// Batch normalization over the last (channel) axis: statistics are taken
/// across every other axis. Scale `gamma` and shift `beta` per channel.
pub struct BatchNorm {
    name: String,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    momentum: f32,
    eps: f32,
    channels: usize,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    /// Rows that produced the batch statistics of the last training pass.
    stat_rows: Option<usize>,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            gamma: Param::new("gamma", vec![channels], vec![1.0; channels]),
            beta: Param::new("beta", vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer("running_mean", vec![channels], vec![0.0; channels]),
            running_var: Param::buffer("running_var", vec![channels], vec![1.0; channels]),
            momentum: 0.1,
            eps: 1e-5,
            channels,
            xhat: Vec::new(),
            inv_std: Vec::new(),
            stat_rows: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

impl Layer for BatchNorm {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let c = self.channels;
        assert_eq!(x.shape().last(), Some(&c), "{}: channel mismatch", self.name);
        let rows = x.len() / c;
        let stat_rows = match mode {
            Mode::Train => Some(rows),
            Mode::TrainPrefix(n) => {
                assert!(n >= 1 && n <= x.batch(), "{}: prefix {n} outside batch {}", self.name, x.batch());
                Some(n * (rows / x.batch()))
            }
            Mode::Eval => None,
        };
        let (mean, inv_std): (Vec<f32>, Vec<f32>) = match stat_rows {
            Some(m) => {
                let stats = &x.data()[..m * c];
                let mut mean = vec![0.0f64; c];
                for row in stats.chunks_exact(c) {
                    for (s, v) in mean.iter_mut().zip(row) {
                        *s += *v as f64;
                    }
                }
                mean.iter_mut().for_each(|s| *s /= m as f64);
                let mut var = vec![0.0f64; c];
                for row in stats.chunks_exact(c) {
                    for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        let d = *v as f64 - mu;
                        *s += d * d;
                    }
                }
                let unbiased = m.max(2) as f64 - 1.0;
                for ch in 0..c {
                    let rm = &mut self.running_mean.value[ch];
                    *rm = (1.0 - self.momentum) * *rm + self.momentum * mean[ch] as f32;
                    let rv = &mut self.running_var.value[ch];
                    *rv = (1.0 - self.momentum) * *rv + self.momentum * (var[ch] / unbiased) as f32;
                }
                let inv = var.iter().map(|v| (1.0 / (v / m as f64 + self.eps as f64).sqrt()) as f32).collect();
                (mean.into_iter().map(|v| v as f32).collect(), inv)
            }
            None => (
                self.running_mean.value.clone(),
                self.running_var.value.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect(),
            ),
        };
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let (gamma, beta) = (&self.gamma.value, &self.beta.value);
        for ((row, hrow), orow) in x.data().chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c)) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                hrow[ch] = h;
                orow[ch] = gamma[ch] * h + beta[ch];
            }
        }
        self.xhat = xhat;
        self.inv_std = inv_std;
        self.stat_rows = stat_rows;
        Tensor::new(x.shape().to_vec(), out)
    }

    fn backward(&mut self, grad: &Tensor, param_grads: bool) -> Tensor {
        let c = self.channels;
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for (g, h) in grad.data().chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
            for ch in 0..c {
                sum_g[ch] += g[ch] as f64;
                sum_gx[ch] += (g[ch] * h[ch]) as f64;
            }
        }
        if param_grads {
            for ch in 0..c {
                self.gamma.grad[ch] += sum_gx[ch] as f32;
                self.beta.grad[ch] += sum_g[ch] as f32;
            }
        }
        let mut gx = vec![0.0; grad.len()];
        let scale: Vec<f32> = self.gamma.value.iter().zip(&self.inv_std).map(|(g, s)| g * s).collect();
        for (g, o) in grad.data().chunks_exact(c).zip(gx.chunks_exact_mut(c)) {
            for ch in 0..c {
                o[ch] = g[ch] * scale[ch];
            }
        }
        // the mean and variance depend on the statistic rows only
        if let Some(m) = self.stat_rows {
            let mean_g: Vec<f32> = sum_g.iter().map(|s| (*s / m as f64) as f32).collect();
            let mean_gx: Vec<f32> = sum_gx.iter().map(|s| (*s / m as f64) as f32).collect();
            for (h, o) in self.xhat.chunks_exact(c).zip(gx.chunks_exact_mut(c)).take(m) {
                for ch in 0..c {
                    o[ch] -= scale[ch] * (mean_g[ch] + h[ch] * mean_gx[ch]);
                }
            }
        }
        Tensor::new(grad.shape().to_vec(), gx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActivationKind {
    Relu,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
}

/// Pointwise nonlinearity.
pub struct Activation {
    name: String,
    kind: ActivationKind,
    cache: Vec<f32>,
}

impl Activation {
    pub fn new(name: impl Into<String>, kind: ActivationKind) -> Self {
        Self { name: name.into(), kind, cache: Vec::new() }
    }
}

impl Layer for Activation {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Tensor {
        let y = match self.kind {
            ActivationKind::Relu => x.map(|v| v.max(0.0)),
            ActivationKind::LeakyRelu(a) => x.map(|v| if v > 0.0 { v } else { a * v }),
            ActivationKind::Tanh => x.map(f32::tanh),
            ActivationKind::Sigmoid => x.map(|v| 1.0 / (1.0 + (-v).exp())),
        };
        // ReLU-family derivatives depend on the input sign, which the output
        // preserves; tanh/sigmoid derivatives are functions of the output.
        self.cache = y.data().to_vec();
        y
    }

    fn backward(&mut self, grad: &Tensor, _param_grads: bool) -> Tensor {
        let mut d = grad.data().to_vec();
        let y = &self.cache;
        match self.kind {
            ActivationKind::Relu => d.iter_mut().zip(y).for_each(|(g, y)| {
                if *y <= 0.0 {
                    *g = 0.0
                }
            }),
            ActivationKind::LeakyRelu(a) => d.iter_mut().zip(y).for_each(|(g, y)| {
                if *y <= 0.0 {
                    *g *= a
                }
            }),
            ActivationKind::Tanh => d.iter_mut().zip(y).for_each(|(g, y)| *g *= 1.0 - y * y),
            ActivationKind::Sigmoid => d.iter_mut().zip(y).for_each(|(g, y)| *g *= y * (1.0 - y)),
        }
        Tensor::new(grad.shape().to_vec(), d)
    }
}

/// Reinterprets each batch item with a new shape.
pub struct Reshape {
    name: String,
    item_shape: Vec<usize>,
    in_shape: Vec<usize>,
}

impl Reshape {
    pub fn new(name: impl Into<String>, item_shape: Vec<usize>) -> Self {
        Self { name: name.into(), item_shape, in_shape: Vec::new() }
    }
}

impl Layer for Reshape {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Tensor {
        self.in_shape = x.shape().to_vec();
        let mut shape = vec![x.batch()];
        shape.extend_from_slice(&self.item_shape);
        x.clone().reshape(shape)
    }

    fn backward(&mut self, grad: &Tensor, _param_grads: bool) -> Tensor {
        grad.clone().reshape(self.in_shape.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    /// Finite-difference probe through a training-mode forward (batch
    /// statistics participate in the gradient).
    fn fd_input_grad(layer: &mut dyn Layer, x: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) {
        let y = layer.forward(x, mode);
        let r = rand_tensor(y.shape().to_vec(), rng);
        let gx = layer.backward(&r, true);
        let h = 1e-2f32;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let lp = dot(layer.forward(&xp, mode).data(), r.data());
            let lm = dot(layer.forward(&xm, mode).data(), r.data());
            let fd = (lp - lm) / (2.0 * h as f64);
            assert!((fd - gx.data()[i] as f64).abs() < 3e-3 * (1.0 + fd.abs()), "{i}: {fd} vs {}", gx.data()[i]);
        }
    }

    #[test]
    fn batchnorm_train_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bn = BatchNorm::new("bn", 3);
        bn.gamma.value = vec![0.7, -1.3, 0.4];
        bn.beta.value = vec![0.1, 0.0, -0.2];
        let x = rand_tensor(vec![4, 2, 2, 3], &mut rng);
        fd_input_grad(&mut bn, &x, Mode::Train, &mut rng);
    }

    #[test]
    fn batchnorm_prefix_gradients_and_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut bn = BatchNorm::new("bn", 3);
        bn.gamma.value = vec![0.7, -1.3, 0.4];
        let x = rand_tensor(vec![5, 2, 2, 3], &mut rng);
        fd_input_grad(&mut bn, &x, Mode::TrainPrefix(3), &mut rng);

        let mut a = BatchNorm::new("a", 3);
        let mut b = BatchNorm::new("b", 3);
        let head = x.slice_batch(0, 3);
        let ya = a.forward(&head, Mode::Train);
        let yb = b.forward(&x, Mode::TrainPrefix(3));
        assert_eq!(ya.data(), &yb.data()[..ya.len()]);
        assert_eq!(a.running_mean.value, b.running_mean.value);
        assert_eq!(a.running_var.value, b.running_var.value);
        // tail rows are normalized with the head statistics
        for (i, (v, y)) in x.data().iter().zip(yb.data()).enumerate().skip(ya.len()) {
            let ch = i % 3;
            let mean = head.data().iter().skip(ch).step_by(3).sum::<f32>() / 12.0;
            assert!(((v - mean) * b.inv_std[ch] - y).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_normalizes_and_tracks_running_stats() {
        let mut bn = BatchNorm::new("bn", 1);
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = bn.forward(&x, Mode::Train);
        let mean: f32 = y.data().iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-6);
        // unbiased variance 5/3, blended with momentum 0.1
        assert!((bn.running_var.value[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
    }

    #[test]
    fn dense_and_activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut d = Dense::new("fc", 6, 4, false, &mut rng);
        let x = rand_tensor(vec![3, 6], &mut rng);
        fd_input_grad(&mut d, &x, Mode::Eval, &mut rng);
        for kind in [ActivationKind::Tanh, ActivationKind::Sigmoid, ActivationKind::LeakyRelu(0.1)] {
            let mut a = Activation::new("a", kind);
            let x = rand_tensor(vec![2, 5], &mut rng).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
            fd_input_grad(&mut a, &x, Mode::Eval, &mut rng);
        }
    }
}
