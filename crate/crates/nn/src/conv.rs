use rand::Rng;

use crate::gemm::gemm;
use crate::spectral::SpectralNorm;
use crate::{Layer, Mode, Param, Tensor};

/// Geometry of a square-kernel convolution over an NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Rows of the patch matrix.
    pub fn patches(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }

    /// Columns of the patch matrix, ordered `(ky, kx, c)`.
    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }
}

/// Unfolds `x` into a `patches × patch_len` matrix; padding reads as zero.
pub fn im2col(x: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    assert_eq!(x.len(), g.n * g.h * g.w * g.c);
    assert_eq!(out.len(), g.patches() * g.patch_len());
    let plen = g.patch_len();
    let mut row = 0;
    for n in 0..g.n {
        let img = &x[n * g.h * g.w * g.c..(n + 1) * g.h * g.w * g.c];
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut out[row * plen..(row + 1) * plen];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        let d = &mut dst[(ky * g.k + kx) * g.c..(ky * g.k + kx + 1) * g.c];
                        if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                            d.fill(0.0);
                        } else {
                            let s = (iy as usize * g.w + ix as usize) * g.c;
                            d.copy_from_slice(&img[s..s + g.c]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patches back into an NHWC buffer,
/// which is overwritten.
pub fn col2im(cols: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    assert_eq!(out.len(), g.n * g.h * g.w * g.c);
    assert_eq!(cols.len(), g.patches() * g.patch_len());
    out.fill(0.0);
    let plen = g.patch_len();
    let mut row = 0;
    for n in 0..g.n {
        let img = &mut out[n * g.h * g.w * g.c..(n + 1) * g.h * g.w * g.c];
        for oy in 0..oh {
            for ox in 0..ow {
                let src = &cols[row * plen..(row + 1) * plen];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let s = &src[(ky * g.k + kx) * g.c..(ky * g.k + kx + 1) * g.c];
                        let d = (iy as usize * g.w + ix as usize) * g.c;
                        for (o, v) in img[d..d + g.c].iter_mut().zip(s) {
                            *o += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn uniform(rng: &mut impl Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn sum_rows(m: &[f32], cols: usize, out: &mut [f32]) {
    for row in m.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Images per im2col chunk, sized so the patch buffer stays cache-resident.
fn chunk_images(g: &ConvGeom) -> usize {
    const TARGET: usize = 64 * 1024;
    let per_image = (g.out_h() * g.out_w() * g.patch_len()).max(1);
    (TARGET / per_image).clamp(1, g.n.max(1))
}

/// Square-kernel 2-D convolution, weight stored as `(k·k·c_in) × c_out`.
pub struct Conv2d {
    name: String,
    pub weight: Param,
    pub bias: Param,
    k: usize,
    stride: usize,
    pad: usize,
    c_in: usize,
    c_out: usize,
    sn: Option<SpectralNorm>,
    effective: Vec<f32>,
    input: Vec<f32>,
    geom: Option<ConvGeom>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        spectral: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = k * k * c_in;
        let bound = 1.0 / (fan_in as f32).sqrt();
        let weight = Param::new("weight", vec![fan_in, c_out], uniform(rng, fan_in * c_out, bound));
        let bias = Param::new("bias", vec![c_out], uniform(rng, c_out, bound));
        let sn = spectral.then(|| SpectralNorm::new(fan_in, c_out, uniform(rng, fan_in, 1.0)));
        Self {
            name: name.into(),
            weight,
            bias,
            k,
            stride,
            pad,
            c_in,
            c_out,
            sn,
            effective: Vec::new(),
            input: Vec::new(),
            geom: None,
        }
    }

    pub fn spectral(&self) -> Option<&SpectralNorm> {
        self.sn.as_ref()
    }
}

impl Layer for Conv2d {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let s = x.shape();
        assert_eq!(s.len(), 4, "{}: expected NHWC input", self.name);
        assert_eq!(s[3], self.c_in, "{}: channel mismatch", self.name);
        let g = ConvGeom { n: s[0], h: s[1], w: s[2], c: s[3], k: self.k, stride: self.stride, pad: self.pad };
        self.effective = match self.sn.as_mut() {
            Some(sn) => sn.apply(&self.weight.value, mode.is_train()),
            None => self.weight.value.clone(),
        };
        let mut out = Vec::with_capacity(g.patches() * self.c_out);
        for _ in 0..g.patches() {
            out.extend_from_slice(&self.bias.value);
        }
        let (in_len, out_len) = (g.h * g.w * g.c, g.out_h() * g.out_w() * self.c_out);
        let step = chunk_images(&g);
        let mut cols = Vec::new();
        for n0 in (0..g.n).step_by(step) {
            let cg = ConvGeom { n: step.min(g.n - n0), ..g };
            cols.resize(cg.patches() * cg.patch_len(), 0.0);
            im2col(&x.data()[n0 * in_len..(n0 + cg.n) * in_len], &cg, &mut cols);
            let dst = &mut out[n0 * out_len..(n0 + cg.n) * out_len];
            gemm(cg.patches(), cg.patch_len(), self.c_out, &cols, false, &self.effective, false, dst, 1.0);
        }
        self.input = x.data().to_vec();
        self.geom = Some(g);
        Tensor::new(vec![g.n, g.out_h(), g.out_w(), self.c_out], out)
    }

    fn backward(&mut self, grad: &Tensor, param_grads: bool) -> Tensor {
        let g = self.geom.expect("backward before forward");
        let plen = g.patch_len();
        assert_eq!(grad.len(), g.patches() * self.c_out);
        let (in_len, out_len) = (g.h * g.w * g.c, g.out_h() * g.out_w() * self.c_out);
        let step = chunk_images(&g);
        let mut gw = vec![0.0; plen * self.c_out];
        let mut gx = vec![0.0; g.n * in_len];
        let mut cols = Vec::new();
        let mut gcols = Vec::new();
        for n0 in (0..g.n).step_by(step) {
            let cg = ConvGeom { n: step.min(g.n - n0), ..g };
            let p = cg.patches();
            let gchunk = &grad.data()[n0 * out_len..(n0 + cg.n) * out_len];
            if param_grads {
                cols.resize(p * plen, 0.0);
                im2col(&self.input[n0 * in_len..(n0 + cg.n) * in_len], &cg, &mut cols);
                gemm(plen, p, self.c_out, &cols, true, gchunk, false, &mut gw, 1.0);
            }
            gcols.resize(p * plen, 0.0);
            gemm(p, self.c_out, plen, gchunk, false, &self.effective, true, &mut gcols, 0.0);
            col2im(&gcols, &cg, &mut gx[n0 * in_len..(n0 + cg.n) * in_len]);
        }
        if param_grads {
            if let Some(sn) = &self.sn {
                gw = sn.backward(&self.effective, &gw);
            }
            for (a, b) in self.weight.grad.iter_mut().zip(&gw) {
                *a += b;
            }
            sum_rows(grad.data(), self.c_out, &mut self.bias.grad);
        }
        Tensor::new(vec![g.n, g.h, g.w, g.c], gx)
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

/// Transposed convolution (fractionally strided), the adjoint of
/// [`Conv2d`]'s patch extraction. Weight stored as `c_in × (k·k·c_out)`.
///
/// Output size is `(h − 1)·stride − 2·pad + k`.
pub struct ConvTranspose2d {
    name: String,
    pub weight: Param,
    pub bias: Param,
    k: usize,
    stride: usize,
    pad: usize,
    c_in: usize,
    c_out: usize,
    input: Vec<f32>,
    geom: Option<ConvGeom>,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = k * k * c_in / (stride * stride).max(1);
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let weight = Param::new("weight", vec![c_in, k * k * c_out], uniform(rng, c_in * k * k * c_out, bound));
        let bias = Param::new("bias", vec![c_out], uniform(rng, c_out, bound));
        Self { name: name.into(), weight, bias, k, stride, pad, c_in, c_out, input: Vec::new(), geom: None }
    }
}

impl Layer for ConvTranspose2d {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Tensor {
        let s = x.shape();
        assert_eq!(s.len(), 4, "{}: expected NHWC input", self.name);
        assert_eq!(s[3], self.c_in, "{}: channel mismatch", self.name);
        let (n, h, w) = (s[0], s[1], s[2]);
        let oh = (h - 1) * self.stride + self.k - 2 * self.pad;
        let ow = (w - 1) * self.stride + self.k - 2 * self.pad;
        // The conv that maps the output grid back onto the input grid.
        let g = ConvGeom { n, h: oh, w: ow, c: self.c_out, k: self.k, stride: self.stride, pad: self.pad };
        debug_assert_eq!((g.out_h(), g.out_w()), (h, w));
        let plen = g.patch_len();
        let (in_len, out_len) = (h * w * self.c_in, oh * ow * self.c_out);
        let step = chunk_images(&g);
        let mut out = vec![0.0; n * out_len];
        let mut cols = Vec::new();
        for n0 in (0..n).step_by(step) {
            let cg = ConvGeom { n: step.min(n - n0), ..g };
            let rows = cg.patches();
            cols.resize(rows * plen, 0.0);
            let src = &x.data()[n0 * in_len..(n0 + cg.n) * in_len];
            gemm(rows, self.c_in, plen, src, false, &self.weight.value, false, &mut cols, 0.0);
            col2im(&cols, &cg, &mut out[n0 * out_len..(n0 + cg.n) * out_len]);
        }
        for px in out.chunks_exact_mut(self.c_out) {
            for (o, b) in px.iter_mut().zip(&self.bias.value) {
                *o += b;
            }
        }
        self.input = x.data().to_vec();
        self.geom = Some(g);
        Tensor::new(vec![n, oh, ow, self.c_out], out)
    }

    fn backward(&mut self, grad: &Tensor, param_grads: bool) -> Tensor {
        let g = self.geom.expect("backward before forward");
        let plen = g.patch_len();
        let (in_len, out_len) = (g.out_h() * g.out_w() * self.c_in, g.h * g.w * g.c);
        let step = chunk_images(&g);
        let mut gx = vec![0.0; g.n * in_len];
        let mut gcols = Vec::new();
        for n0 in (0..g.n).step_by(step) {
            let cg = ConvGeom { n: step.min(g.n - n0), ..g };
            let rows = cg.patches();
            gcols.resize(rows * plen, 0.0);
            im2col(&grad.data()[n0 * out_len..(n0 + cg.n) * out_len], &cg, &mut gcols);
            if param_grads {
                let src = &self.input[n0 * in_len..(n0 + cg.n) * in_len];
                gemm(self.c_in, rows, plen, src, true, &gcols, false, &mut self.weight.grad, 1.0);
            }
            let dst = &mut gx[n0 * in_len..(n0 + cg.n) * in_len];
            gemm(rows, plen, self.c_in, &gcols, false, &self.weight.value, true, dst, 0.0);
        }
        if param_grads {
            sum_rows(grad.data(), self.c_out, &mut self.bias.grad);
        }
        Tensor::new(vec![g.n, g.out_h(), g.out_w(), self.c_in], gx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
