//! Procedural "shapes" dataset: one to three solid rectangles, circles or
//! triangles on a solid background.
//!
//! Geometry is rasterized with integer arithmetic on a 4×4 supersampling
//! grid, so a seed reproduces the same bytes on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use gmk_nn::Tensor;

use super::DataError;

const SS: i64 = 4;

/// Base palette; `palette_size` takes a prefix (cycled when larger).
const PALETTE: [[u8; 3]; 12] = [
    [230, 57, 70],
    [29, 53, 87],
    [241, 250, 238],
    [69, 123, 157],
    [255, 183, 3],
    [42, 157, 143],
    [38, 38, 38],
    [168, 218, 220],
    [244, 162, 97],
    [131, 56, 236],
    [106, 153, 78],
    [255, 0, 110],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Circle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticShapesSpec {
    pub resolution: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub palette_size: usize,
    pub kinds: Vec<ShapeKind>,
}

impl Default for SyntheticShapesSpec {
    fn default() -> Self {
        Self {
            resolution: 32,
            n_samples: 4096,
            seed: 0,
            palette_size: 8,
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Circle, ShapeKind::Triangle],
        }
    }
}

impl SyntheticShapesSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.resolution < 8 {
            return Err(DataError::Invalid { field: "dataset.resolution".into(), reason: "must be >= 8".into() });
        }
        if self.palette_size < 2 {
            return Err(DataError::Invalid { field: "dataset.palette_size".into(), reason: "must be >= 2".into() });
        }
        if self.kinds.is_empty() {
            return Err(DataError::Invalid { field: "dataset.kinds".into(), reason: "must not be empty".into() });
        }
        Ok(())
    }
}

enum Shape {
    Rect { x0: i64, y0: i64, x1: i64, y1: i64 },
    Circle { cx: i64, cy: i64, r2: i64 },
    Tri { p: [(i64, i64); 3] },
}

impl Shape {
    /// Whether the subsample centred at `(x, y)` (in half-subsample units)
    /// is covered.
    fn covers(&self, x: i64, y: i64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Circle { cx, cy, r2 } => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r2,
            Shape::Tri { p } => {
                let edge = |a: (i64, i64), b: (i64, i64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let (e0, e1, e2) = (edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0]));
                (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0)
            }
        }
    }
}

fn random_shape(kind: ShapeKind, size: i64, rng: &mut ChaCha8Rng) -> Shape {
    // coordinates are in half-subsample units: subsample centres are odd
    let span = 2 * size;
    let min_extent = span / 6;
    match kind {
        ShapeKind::Rectangle => {
            let w = rng.random_range(min_extent..=span / 2);
            let h = rng.random_range(min_extent..=span / 2);
            let x0 = rng.random_range(0..=span - w);
            let y0 = rng.random_range(0..=span - h);
            Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
        }
        ShapeKind::Circle => {
            let r = rng.random_range(min_extent / 2..=span / 5);
            let cx = rng.random_range(r..=span - r);
            let cy = rng.random_range(r..=span - r);
            Shape::Circle { cx, cy, r2: r * r }
        }
        ShapeKind::Triangle => {
            let cx = rng.random_range(span / 5..=4 * span / 5);
            let cy = rng.random_range(span / 5..=4 * span / 5);
            let reach = span / 4;
            let mut p = [(0, 0); 3];
            for v in &mut p {
                *v = (
                    (cx + rng.random_range(-reach..=reach)).clamp(0, span),
                    (cy + rng.random_range(-reach..=reach)).clamp(0, span),
                );
            }
            Shape::Tri { p }
        }
    }
}

fn render(spec: &SyntheticShapesSpec, index: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let res = spec.resolution;
    let color = |i: usize| PALETTE[i % PALETTE.len()];
    let bg = rng.random_range(0..spec.palette_size);
    let n_shapes = rng.random_range(1..=3);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
        let mut c = rng.random_range(0..spec.palette_size - 1);
        if c >= bg {
            c += 1;
        }
        shapes.push((random_shape(kind, res as i64 * SS, &mut rng), color(c)));
    }
    let bg = color(bg);
    let mut out = Vec::with_capacity(res * res * 3);
    for py in 0..res as i64 {
        for px in 0..res as i64 {
            let mut acc = [0u32; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = 2 * (px * SS + sx) + 1;
                    let y = 2 * (py * SS + sy) + 1;
                    // later shapes are painted on top
                    let c = shapes.iter().rev().find(|(s, _)| s.covers(x, y)).map(|(_, c)| *c).unwrap_or(bg);
                    for k in 0..3 {
                        acc[k] += c[k] as u32;
                    }
                }
            }
            let denom = (SS * SS) as f32 * 255.0;
            out.extend(acc.iter().map(|&a| a as f32 / denom));
        }
    }
    out
}

/// Renders `n_samples` images as an NHWC tensor in `[0, 1]`.
pub fn generate_shapes(spec: &SyntheticShapesSpec) -> Result<Tensor, DataError> {
    spec.validate()?;
    let r = spec.resolution;
    let mut data = Vec::with_capacity(spec.n_samples * r * r * 3);
    for i in 0..spec.n_samples {
        data.extend(render(spec, i as u64));
    }
    Ok(Tensor::new(vec![spec.n_samples, r, r, 3], data))
}
