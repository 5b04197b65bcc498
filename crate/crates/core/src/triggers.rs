//! Owner-secret trigger constructions and the watermark target transform.
//!
//! * latent triggers overwrite `n` masked latent coordinates with a
//!   constant `c`: `f(z) = z ⊙ b + c (1 − b)`;
//! * image triggers paste a fixed noise patch onto an input image;
//! * targets paste the owner's logo onto a generated image.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use gmk_nn::Tensor;

use crate::img::{Image, Region};

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("latent dimension {got} does not match trigger mask dimension {want}")]
    Dimension { got: usize, want: usize },
    #[error("masked count n={n} must satisfy 1 <= n < {dim}")]
    MaskCount { n: usize, dim: usize },
    #[error("region {region:?} does not fit in a {height}x{width} image")]
    OutOfBounds { region: Region, height: usize, width: usize },
    #[error("patch is {got:?} but region needs {want:?}")]
    PatchShape { got: (usize, usize, usize), want: (usize, usize, usize) },
    #[error("trigger input kind does not match a {0} trigger spec")]
    KindMismatch(&'static str),
    #[error("stored trigger data does not match regeneration from seed {0}")]
    SeedMismatch(u64),
    #[error("watermark image: {0}")]
    Asset(String),
}

/// Latent-vector trigger key. Mask position `i` is zero (masked) iff
/// `i ∈ mask_indices`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTriggerSpec {
    pub dim: usize,
    pub n: usize,
    pub c: f32,
    pub seed: u64,
    pub mask_indices: Vec<usize>,
}

impl LatentTriggerSpec {
    pub fn generate(dim: usize, n: usize, c: f32, seed: u64) -> Result<Self, TransformError> {
        if n == 0 || n >= dim {
            return Err(TransformError::MaskCount { n, dim });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask_indices = sample(&mut rng, dim, n).into_vec();
        mask_indices.sort_unstable();
        Ok(Self { dim, n, c, seed, mask_indices })
    }

    /// The binary mask `b ∈ {0,1}^dim`.
    pub fn mask(&self) -> Vec<u8> {
        let mut b = vec![1u8; self.dim];
        for &i in &self.mask_indices {
            b[i] = 0;
        }
        b
    }

    /// Checks the stored mask against regeneration from the seed.
    pub fn validate(&self) -> Result<(), TransformError> {
        let fresh = Self::generate(self.dim, self.n, self.c, self.seed)?;
        if fresh.mask_indices != self.mask_indices {
            return Err(TransformError::SeedMismatch(self.seed));
        }
        Ok(())
    }

    pub fn with_c(&self, c: f32) -> Self {
        Self { c, ..self.clone() }
    }
}

pub fn make_latent_trigger(z: &[f32], spec: &LatentTriggerSpec) -> Result<Vec<f32>, TransformError> {
    if z.len() != spec.dim {
        return Err(TransformError::Dimension { got: z.len(), want: spec.dim });
    }
    let mut out = z.to_vec();
    for &i in &spec.mask_indices {
        out[i] = spec.c;
    }
    Ok(out)
}

/// Applies the latent trigger to every row of a `[batch, dim]` tensor.
pub fn latent_trigger_tensor(z: &Tensor, spec: &LatentTriggerSpec) -> Result<Tensor, TransformError> {
    if z.item_len() != spec.dim {
        return Err(TransformError::Dimension { got: z.item_len(), want: spec.dim });
    }
    let mut out = z.clone();
    for row in out.data_mut().chunks_exact_mut(spec.dim) {
        for &i in &spec.mask_indices {
            row[i] = spec.c;
        }
    }
    Ok(out)
}

/// Image-input trigger key: a fixed noise patch and where it goes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTriggerSpec {
    pub seed: u64,
    pub region: Region,
    pub channels: usize,
    /// Model input range the noise is drawn from.
    pub low: f32,
    pub high: f32,
    pub patch: Vec<f32>,
}

impl ImageTriggerSpec {
    pub fn generate(region: Region, channels: usize, low: f32, high: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch = (0..region.area() * channels).map(|_| rng.random_range(low..=high)).collect();
        Self { seed, region, channels, low, high, patch }
    }

    pub fn patch_image(&self) -> Image {
        Image::new(self.region.height, self.region.width, self.channels, self.patch.clone())
    }

    pub fn validate(&self) -> Result<(), TransformError> {
        let fresh = Self::generate(self.region, self.channels, self.low, self.high, self.seed);
        if fresh.patch != self.patch {
            return Err(TransformError::SeedMismatch(self.seed));
        }
        Ok(())
    }
}

fn paste(base: &Image, patch: &Image, region: &Region) -> Result<Image, TransformError> {
    if !region.fits_in(base.height, base.width) {
        return Err(TransformError::OutOfBounds { region: *region, height: base.height, width: base.width });
    }
    let want = (region.height, region.width, base.channels);
    if patch.shape() != want {
        return Err(TransformError::PatchShape { got: patch.shape(), want });
    }
    let mut out = base.clone();
    let c = base.channels;
    for r in 0..region.height {
        let dst = ((region.row + r) * base.width + region.col) * c;
        let src = r * region.width * c;
        out.data[dst..dst + region.width * c].copy_from_slice(&patch.data[src..src + region.width * c]);
    }
    Ok(out)
}

pub fn make_image_trigger(x: &Image, spec: &ImageTriggerSpec) -> Result<Image, TransformError> {
    paste(x, &spec.patch_image(), &spec.region)
}

/// The owner's logo and where it is stamped on generated images.
#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkAsset {
    pub name: String,
    pub image: Image,
    pub region: Region,
}

impl WatermarkAsset {
    pub fn new(name: impl Into<String>, image: Image, region: Region) -> Result<Self, TransformError> {
        if (image.height, image.width) != (region.height, region.width) {
            return Err(TransformError::PatchShape {
                got: image.shape(),
                want: (region.height, region.width, image.channels),
            });
        }
        Ok(Self { name: name.into(), image, region })
    }

    /// Loads an RGB PNG, resampled nearest-neighbour to the region size and
    /// scaled to `[0, 1]`.
    pub fn from_png(path: &Path, name: impl Into<String>, region: Region) -> Result<Self, TransformError> {
        let img = image::open(path).map_err(|e| TransformError::Asset(format!("{}: {e}", path.display())))?;
        let rgb = img
            .resize_exact(region.width as u32, region.height as u32, image::imageops::FilterType::Nearest)
            .to_rgb8();
        let data = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(name, Image::new(region.height, region.width, 3, data), region)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), TransformError> {
        let bytes: Vec<u8> =
            self.image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let buf = image::RgbImage::from_raw(self.image.width as u32, self.image.height as u32, bytes)
            .ok_or_else(|| TransformError::Asset("logo must have 3 channels".into()))?;
        buf.save(path).map_err(|e| TransformError::Asset(format!("{}: {e}", path.display())))
    }

    /// Procedural logos for tests and default configs.
    ///
    /// `ring`: yellow ring and dot on navy. `cross`: red diagonal cross on
    /// white. `bars`: green/magenta vertical bars.
    pub fn builtin(kind: &str, region: Region) -> Result<Self, TransformError> {
        let (h, w) = (region.height, region.width);
        let mut img = Image::filled(h, w, 3, 0.0);
        let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
        let scale = h.min(w) as f32 / 2.0;
        for r in 0..h {
            for c in 0..w {
                let (dy, dx) = ((r as f32 - cy) / scale, (c as f32 - cx) / scale);
                let px: [f32; 3] = match kind {
                    "ring" => {
                        let d = (dy * dy + dx * dx).sqrt();
                        if (0.55..=0.9).contains(&d) || d < 0.22 {
                            [1.0, 0.85, 0.1]
                        } else {
                            [0.05, 0.1, 0.45]
                        }
                    }
                    "cross" => {
                        if (dy - dx).abs() < 0.3 || (dy + dx).abs() < 0.3 {
                            [0.9, 0.05, 0.05]
                        } else {
                            [0.97, 0.97, 0.97]
                        }
                    }
                    "bars" => {
                        if (c / 2.max(w / 8)) % 2 == 0 {
                            [0.1, 0.8, 0.2]
                        } else {
                            [0.8, 0.1, 0.7]
                        }
                    }
                    other => return Err(TransformError::Asset(format!("unknown builtin logo `{other}`"))),
                };
                for (ch, v) in px.iter().enumerate() {
                    img.set(r, c, ch, *v);
                }
            }
        }
        Self::new(kind, img, region)
    }
}

/// `g`: stamps the watermark onto a generated image.
pub fn paste_watermark(y: &Image, asset: &WatermarkAsset) -> Result<Image, TransformError> {
    paste(y, &asset.image, &asset.region)
}

/// Stamps the watermark onto every image of an NHWC batch in `[0, 1]`.
pub fn paste_watermark_tensor(y: &Tensor, asset: &WatermarkAsset) -> Result<Tensor, TransformError> {
    let s = y.shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    let r = asset.region;
    if !r.fits_in(h, w) {
        return Err(TransformError::OutOfBounds { region: r, height: h, width: w });
    }
    if asset.image.channels != c {
        return Err(TransformError::PatchShape { got: asset.image.shape(), want: (r.height, r.width, c) });
    }
    let mut out = y.clone();
    for item in out.data_mut().chunks_exact_mut(h * w * c) {
        for row in 0..r.height {
            let dst = ((r.row + row) * w + r.col) * c;
            let src = row * r.width * c;
            item[dst..dst + r.width * c].copy_from_slice(&asset.image.data[src..src + r.width * c]);
        }
    }
    Ok(out)
}

/// Either kind of owner trigger key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TriggerSpec {
    Latent(LatentTriggerSpec),
    Image(ImageTriggerSpec),
}

impl TriggerSpec {
    pub fn validate(&self) -> Result<(), TransformError> {
        match self {
            TriggerSpec::Latent(s) => s.validate(),
            TriggerSpec::Image(s) => s.validate(),
        }
    }

    pub fn as_latent(&self) -> Option<&LatentTriggerSpec> {
        match self {
            TriggerSpec::Latent(s) => Some(s),
            TriggerSpec::Image(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TriggerInput {
    Latent(Vec<f32>),
    Image(Image),
}

pub fn build_trigger_batch(inputs: &[TriggerInput], spec: &TriggerSpec) -> Result<Vec<TriggerInput>, TransformError> {
    inputs
        .iter()
        .map(|x| match (x, spec) {
            (TriggerInput::Latent(z), TriggerSpec::Latent(s)) => make_latent_trigger(z, s).map(TriggerInput::Latent),
            (TriggerInput::Image(im), TriggerSpec::Image(s)) => make_image_trigger(im, s).map(TriggerInput::Image),
            (_, TriggerSpec::Latent(_)) => Err(TransformError::KindMismatch("latent")),
            (_, TriggerSpec::Image(_)) => Err(TransformError::KindMismatch("image")),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn spec3() -> LatentTriggerSpec {
        LatentTriggerSpec { dim: 3, n: 1, c: -10.0, seed: 0, mask_indices: vec![1] }
    }

    #[test]
    fn latent_trigger_direct_evaluation() {
        let out = make_latent_trigger(&[0.2, -1.1, 0.7], &spec3()).unwrap();
        assert_eq!(out, vec![0.2, -10.0, 0.7]);
        assert_eq!(spec3().mask(), vec![1, 0, 1]);
        assert_eq!(
            make_latent_trigger(&[0.0; 4], &spec3()),
            Err(TransformError::Dimension { got: 4, want: 3 })
        );
    }

    #[test]
    fn unmasked_spec_is_identity() {
        let spec = LatentTriggerSpec { dim: 3, n: 0, c: 5.0, seed: 0, mask_indices: vec![] };
        assert_eq!(make_latent_trigger(&[0.2, -1.1, 0.7], &spec).unwrap(), vec![0.2, -1.1, 0.7]);
    }

    #[test]
    fn paper_default_masks_five_of_128() {
        let spec = LatentTriggerSpec::generate(128, 5, -10.0, 42).unwrap();
        assert_eq!(spec.mask().iter().filter(|b| **b == 0).count(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Vec<f32> = (0..128).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = make_latent_trigger(&z, &spec).unwrap();
        assert_eq!(x.iter().filter(|v| **v == -10.0).count(), 5);
        // regeneration reproduces the mask; a tampered mask is detected
        assert_eq!(LatentTriggerSpec::generate(128, 5, -10.0, 42).unwrap(), spec);
        spec.validate().unwrap();
        let mut bad = spec.clone();
        bad.mask_indices[0] = (bad.mask_indices[0] + 1) % 128;
        assert!(bad.validate().is_err());
        assert!(LatentTriggerSpec::generate(8, 8, 0.0, 0).is_err());
        assert!(LatentTriggerSpec::generate(8, 0, 0.0, 0).is_err());
    }

    #[test]
    fn triggers_separate_from_normal_latents() {
        let spec = LatentTriggerSpec::generate(128, 5, -10.0, 3).unwrap();
        let probe = spec.mask_indices[0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut correct = 0;
        for _ in 0..10_000 {
            let z: Vec<f32> = (0..128).map(|_| StandardNormal.sample(&mut rng)).collect();
            let x = make_latent_trigger(&z, &spec).unwrap();
            correct += (z[probe] > -5.0) as usize + (x[probe] <= -5.0) as usize;
        }
        assert_eq!(correct, 20_000);
    }

    #[test]
    fn image_trigger_replaces_region_only() {
        let region = Region::top_left(12, 12);
        let spec = ImageTriggerSpec::generate(region, 1, -1.0, 1.0, 9);
        let x = Image::filled(24, 24, 1, 0.5);
        let y = make_image_trigger(&x, &spec).unwrap();
        let mut replaced = 0;
        let mut unchanged = 0;
        for r in 0..24 {
            for c in 0..24 {
                if region.contains(r, c) {
                    assert_eq!(y.at(r, c, 0), spec.patch[r * 12 + c]);
                    replaced += 1;
                } else {
                    assert_eq!(y.at(r, c, 0).to_bits(), 0.5f32.to_bits());
                    unchanged += 1;
                }
            }
        }
        assert_eq!((replaced, unchanged), (144, 432));
        assert_eq!(make_image_trigger(&y, &spec).unwrap(), y);
        assert_eq!(ImageTriggerSpec::generate(region, 1, -1.0, 1.0, 9), spec);
    }

    #[test]
    fn zero_region_and_out_of_bounds() {
        let spec = ImageTriggerSpec::generate(Region::new(3, 3, 0, 0), 3, 0.0, 1.0, 1);
        let x = Image::filled(8, 8, 3, 0.25);
        assert_eq!(make_image_trigger(&x, &spec).unwrap(), x);
        let spec = ImageTriggerSpec::generate(Region::new(5, 5, 4, 4), 3, 0.0, 1.0, 1);
        assert!(matches!(make_image_trigger(&x, &spec), Err(TransformError::OutOfBounds { .. })));
    }

    #[test]
    fn watermark_paste_and_crop() {
        let asset = WatermarkAsset::builtin("ring", Region::top_left(16, 16)).unwrap();
        let y = Image::new(32, 32, 3, (0..32 * 32 * 3).map(|i| (i % 7) as f32 / 7.0).collect());
        let out = paste_watermark(&y, &asset).unwrap();
        assert_eq!(out.crop(&asset.region), asset.image);
        for r in 0..32 {
            for c in 0..32 {
                if !asset.region.contains(r, c) {
                    for ch in 0..3 {
                        assert_eq!(out.at(r, c, ch).to_bits(), y.at(r, c, ch).to_bits());
                    }
                }
            }
        }
        assert_eq!(paste_watermark(&out, &asset).unwrap(), out);
        let t = crate::img::tensor_from_images(&[y.clone(), y]);
        let stamped = paste_watermark_tensor(&t, &asset).unwrap();
        assert_eq!(stamped.item(1), out.data.as_slice());
        let tiny = Image::filled(8, 8, 3, 0.0);
        assert!(matches!(paste_watermark(&tiny, &asset), Err(TransformError::OutOfBounds { .. })));
    }

    #[test]
    fn png_roundtrip_is_exact_for_8bit_values() {
        let asset = WatermarkAsset::builtin("cross", Region::top_left(16, 16)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logo.png");
        asset.save_png(&path).unwrap();
        let back = WatermarkAsset::from_png(&path, "cross", asset.region).unwrap();
        for (a, b) in asset.image.data.iter().zip(&back.image.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        // nearest-neighbour downsample keeps only original colors
        let small = WatermarkAsset::from_png(&path, "cross", Region::top_left(8, 8)).unwrap();
        for px in small.image.data.chunks(3) {
            assert!(back.image.data.chunks(3).any(|q| q == px));
        }
    }

    #[test]
    fn trigger_batches() {
        let spec = TriggerSpec::Latent(LatentTriggerSpec::generate(16, 3, -10.0, 5).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs: Vec<TriggerInput> = (0..8)
            .map(|_| TriggerInput::Latent((0..16).map(|_| StandardNormal.sample(&mut rng)).collect()))
            .collect();
        let out = build_trigger_batch(&inputs, &spec).unwrap();
        assert_eq!(out.len(), 8);
        let masked = spec.as_latent().unwrap().mask_indices.clone();
        for &i in &masked {
            let vals: Vec<f32> = out
                .iter()
                .map(|t| match t {
                    TriggerInput::Latent(v) => v[i],
                    _ => unreachable!(),
                })
                .collect();
            let mean = vals.iter().sum::<f32>() / vals.len() as f32;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / vals.len() as f32;
            assert_eq!(var, 0.0);
        }
        assert!(build_trigger_batch(&[], &spec).unwrap().is_empty());
        let mixed = [TriggerInput::Image(Image::filled(4, 4, 3, 0.0))];
        assert_eq!(build_trigger_batch(&mixed, &spec), Err(TransformError::KindMismatch("latent")));
    }

    #[test]
    fn spec_json_carries_explicit_mask() {
        let spec = TriggerSpec::Latent(LatentTriggerSpec::generate(128, 5, -10.0, 7).unwrap());
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"latent\"") && json.contains("mask_indices"));
        let back: TriggerSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        back.validate().unwrap();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn latent_trigger_is_projection(z in proptest::collection::vec(-5.0f32..5.0, 32), seed in 0u64..1000) {
                let spec = LatentTriggerSpec::generate(32, 4, -10.0, seed).unwrap();
                let once = make_latent_trigger(&z, &spec).unwrap();
                prop_assert_eq!(make_latent_trigger(&once, &spec).unwrap(), once.clone());
                for (i, (a, b)) in z.iter().zip(&once).enumerate() {
                    if !spec.mask_indices.contains(&i) {
                        prop_assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
            }
        }
    }
}
