//! Channel-last float images and the paste regions used by trigger and
//! watermark transforms.

use serde::{Deserialize, Serialize};

use gmk_nn::Tensor;

/// HWC image with `f32` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(height * width * channels, data.len(), "image buffer size");
        Self { height, width, channels, data }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }

    pub fn crop(&self, r: &Region) -> Image {
        let mut out = Vec::with_capacity(r.height * r.width * self.channels);
        for row in r.row..r.row + r.height {
            let s = (row * self.width + r.col) * self.channels;
            out.extend_from_slice(&self.data[s..s + r.width * self.channels]);
        }
        Image::new(r.height, r.width, self.channels, out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image::new(self.height, self.width, self.channels, self.data.iter().map(|&v| f(v)).collect())
    }

    /// `[-1, 1]` → `[0, 1]`.
    pub fn tanh_to_unit(&self) -> Image {
        self.map(|v| (v + 1.0) * 0.5)
    }
}

/// Splits an NHWC batch into images.
pub fn images_from_tensor(t: &Tensor) -> Vec<Image> {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected NHWC tensor");
    (0..s[0]).map(|i| Image::new(s[1], s[2], s[3], t.item(i).to_vec())).collect()
}

/// Stacks same-shaped images into an NHWC tensor.
pub fn tensor_from_images(images: &[Image]) -> Tensor {
    let (h, w, c) = images.first().map(Image::shape).unwrap_or((0, 0, 0));
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for im in images {
        assert_eq!(im.shape(), (h, w, c), "mixed image shapes");
        data.extend_from_slice(&im.data);
    }
    Tensor::new(vec![images.len(), h, w, c], data)
}

/// Axis-aligned rectangle `(row, col, height, width)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Self { row, col, height, width }
    }

    pub fn top_left(height: usize, width: usize) -> Self {
        Self::new(0, 0, height, width)
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.row + self.height <= height && self.col + self.width <= width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row && row < self.row + self.height && col >= self.col && col < self.col + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}
