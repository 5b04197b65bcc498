//! CIFAR-10 binary batches: each record is one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes (row-major 32×32 planes).

use std::path::Path;

use gmk_nn::Tensor;

use super::DataError;

pub const RECORD_LEN: usize = 3073;
const SIDE: usize = 32;

/// Images in `[0, 1]`, channel-last, with their labels.
#[derive(Clone, Debug)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

pub fn parse_cifar_binary(bytes: &[u8]) -> Result<LabeledImages, DataError> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(DataError::Format(format!(
            "CIFAR binary size {} is not a multiple of {RECORD_LEN}",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * SIDE * SIDE * 3);
    for rec in bytes.chunks_exact(RECORD_LEN) {
        labels.push(rec[0]);
        let planes = &rec[1..];
        for p in 0..SIDE * SIDE {
            for c in 0..3 {
                data.push(planes[c * SIDE * SIDE + p] as f32 / 255.0);
            }
        }
    }
    Ok(LabeledImages { images: Tensor::new(vec![n, SIDE, SIDE, 3], data), labels })
}

pub fn read_cifar_binary(path: &Path) -> Result<LabeledImages, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    parse_cifar_binary(&bytes)
}
