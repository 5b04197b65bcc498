//! Ownership text ⇄ ±1 bit signatures carried by the signs of
//! normalization scale factors, plus extraction and bit-error rate.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("signature text is empty")]
    EmptyText,
    #[error("character {ch:?} at index {index} is not printable ASCII")]
    NonAscii { index: usize, ch: char },
    #[error("bit length {0} is not a multiple of 8")]
    Length(usize),
    #[error("bit at index {index} is {value}, expected -1 or +1")]
    InvalidBit { index: usize, value: i8 },
    #[error("normalization layer `{0}` not found in checkpoint")]
    MissingLayer(String),
    #[error("requested {requested} bits but placement holds only {capacity}")]
    Capacity { requested: usize, capacity: usize },
    #[error("length mismatch: extracted {extracted} bits, reference {reference}")]
    LengthMismatch { extracted: usize, reference: usize },
    #[error("{0} erased bit(s) cannot form a signature")]
    Erasures(usize),
    #[error("io: {0}")]
    Io(String),
}

fn printable(b: u8) -> bool {
    (0x20..=0x7e).contains(&b)
}

/// A sequence of ±1 bits, optionally remembering the text it encodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitSignature {
    bits: Vec<i8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_text: Option<String>,
}

impl BitSignature {
    pub fn from_bits(bits: Vec<i8>) -> Result<Self, CodecError> {
        if let Some((index, &value)) = bits.iter().enumerate().find(|(_, b)| **b != 1 && **b != -1) {
            return Err(CodecError::InvalidBit { index, value });
        }
        Ok(Self { bits, source_text: None })
    }

    pub fn bits(&self) -> &[i8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn source_text(&self) -> Option<&str> {
        self.source_text.as_deref()
    }

    pub fn negate(&self) -> Self {
        Self { bits: self.bits.iter().map(|b| -b).collect(), source_text: None }
    }

    /// One `+1` / `-1` per line, for audit dumps.
    pub fn to_lines(&self) -> String {
        self.bits.iter().map(|b| format!("{:+}\n", b)).collect()
    }

    pub fn from_lines(text: &str) -> Result<Self, CodecError> {
        let bits = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(index, l)| match l {
                "+1" | "1" => Ok(1),
                "-1" => Ok(-1),
                _ => Err(CodecError::InvalidBit { index, value: 0 }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_bits(bits)
    }
}

/// Encodes printable ASCII text MSB-first, one byte per character, with
/// bit 0 ↦ −1 and bit 1 ↦ +1.
pub fn encode_text(text: &str) -> Result<BitSignature, CodecError> {
    if text.is_empty() {
        return Err(CodecError::EmptyText);
    }
    let mut bits = Vec::with_capacity(text.len() * 8);
    for (index, ch) in text.chars().enumerate() {
        if !ch.is_ascii() || !printable(ch as u8) {
            return Err(CodecError::NonAscii { index, ch });
        }
        let byte = ch as u8;
        for shift in (0..8).rev() {
            bits.push(if (byte >> shift) & 1 == 1 { 1 } else { -1 });
        }
    }
    Ok(BitSignature { bits, source_text: Some(text.to_string()) })
}

/// Text recovered from a signature. Bytes outside printable ASCII are
/// rendered as U+FFFD and their character indices listed in `flagged`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DecodedText {
    pub text: String,
    pub bytes: Vec<u8>,
    pub flagged: Vec<usize>,
}

impl DecodedText {
    pub fn is_clean(&self) -> bool {
        self.flagged.is_empty()
    }
}

impl fmt::Display for DecodedText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

pub fn decode_bits(bits: &BitSignature) -> Result<DecodedText, CodecError> {
    if !bits.len().is_multiple_of(8) {
        return Err(CodecError::Length(bits.len()));
    }
    let bytes: Vec<u8> = bits
        .bits
        .chunks_exact(8)
        .map(|chunk| chunk.iter().fold(0u8, |acc, &b| (acc << 1) | (b > 0) as u8))
        .collect();
    let mut flagged = Vec::new();
    let text = bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if printable(b) {
                b as char
            } else {
                flagged.push(i);
                char::REPLACEMENT_CHARACTER
            }
        })
        .collect();
    if !flagged.is_empty() {
        log::warn!("decoded signature has {} non-printable byte(s) at {:?}", flagged.len(), flagged);
    }
    Ok(DecodedText { text, bytes, flagged })
}

/// Ordered normalization layers whose scale-factor signs carry the
/// signature. Bits fill layers in order, channels ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignPlacement {
    pub layer_names: Vec<String>,
    pub channel_counts: Vec<usize>,
}

impl SignPlacement {
    pub fn new(layers: impl IntoIterator<Item = (String, usize)>) -> Self {
        let (layer_names, channel_counts) = layers.into_iter().unzip();
        Self { layer_names, channel_counts }
    }

    pub fn total_capacity_bits(&self) -> usize {
        self.channel_counts.iter().sum()
    }

    /// Name of the scale-factor tensor of a placement layer.
    pub fn gamma_tensor(layer: &str) -> String {
        format!("{layer}.gamma")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Capacity {
    pub bits: usize,
    pub bytes: usize,
}

pub fn capacity(placement: &SignPlacement) -> Capacity {
    let bits = placement.total_capacity_bits();
    Capacity { bits, bytes: bits / 8 }
}

/// Anything that can hand out a layer's scale factors by layer name.
pub trait GammaSource {
    fn gamma(&self, layer: &str) -> Option<&[f32]>;
}

/// Signs read from scale factors. `0` marks an erasure (γ exactly zero).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExtractedBits {
    pub values: Vec<i8>,
}

impl ExtractedBits {
    pub fn erasures(&self) -> Vec<usize> {
        self.values.iter().enumerate().filter(|(_, v)| **v == 0).map(|(i, _)| i).collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_signature(&self) -> Result<BitSignature, CodecError> {
        let e = self.erasures().len();
        if e > 0 {
            return Err(CodecError::Erasures(e));
        }
        BitSignature::from_bits(self.values.clone())
    }
}

/// Reads the first `n_bits` scale-factor signs in placement order.
pub fn extract_signs(
    source: &dyn GammaSource,
    placement: &SignPlacement,
    n_bits: usize,
) -> Result<ExtractedBits, CodecError> {
    let cap = placement.total_capacity_bits();
    if n_bits > cap {
        return Err(CodecError::Capacity { requested: n_bits, capacity: cap });
    }
    let mut values = Vec::with_capacity(n_bits);
    for (layer, &count) in placement.layer_names.iter().zip(&placement.channel_counts) {
        if values.len() == n_bits {
            break;
        }
        let gamma = source.gamma(layer).ok_or_else(|| CodecError::MissingLayer(layer.clone()))?;
        let take = count.min(gamma.len()).min(n_bits - values.len());
        values.extend(gamma[..take].iter().map(|&g| {
            if g > 0.0 {
                1
            } else if g < 0.0 {
                -1
            } else {
                0
            }
        }));
    }
    Ok(ExtractedBits { values })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerResult {
    pub mismatches: usize,
    pub total: usize,
    pub ber: f64,
}

/// Bit-error rate; erasures (0) in `extracted` always count as mismatches.
pub fn ber(extracted: &[i8], reference: &[i8]) -> Result<BerResult, CodecError> {
    if extracted.len() != reference.len() {
        return Err(CodecError::LengthMismatch { extracted: extracted.len(), reference: reference.len() });
    }
    let mismatches = extracted.iter().zip(reference).filter(|(a, b)| **a == 0 || a != b).count();
    let total = reference.len();
    let ber = if total == 0 { 0.0 } else { mismatches as f64 / total as f64 };
    Ok(BerResult { mismatches, total, ber })
}

/// Reads an owner signature file (UTF-8 text, surrounding whitespace
/// ignored).
pub fn read_signature_file(path: &Path) -> Result<BitSignature, CodecError> {
    let text = std::fs::read_to_string(path).map_err(|e| CodecError::Io(format!("{}: {e}", path.display())))?;
    encode_text(text.trim())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    struct Gammas(HashMap<String, Vec<f32>>);

    impl GammaSource for Gammas {
        fn gamma(&self, layer: &str) -> Option<&[f32]> {
            self.0.get(layer).map(Vec::as_slice)
        }
    }

    fn one_layer(g: Vec<f32>) -> (Gammas, SignPlacement) {
        let n = g.len();
        (Gammas(HashMap::from([("bn".to_string(), g)])), SignPlacement::new([("bn".to_string(), n)]))
    }

    #[test]
    fn encodes_e_and_x_msb_first() {
        assert_eq!(encode_text("E").unwrap().bits(), &[-1, 1, -1, -1, -1, 1, -1, 1]);
        assert_eq!(encode_text("X").unwrap().bits(), &[-1, 1, -1, 1, 1, -1, -1, -1]);
    }

    #[test]
    fn rejects_empty_and_non_ascii() {
        assert_eq!(encode_text(""), Err(CodecError::EmptyText));
        assert_eq!(encode_text("aé"), Err(CodecError::NonAscii { index: 1, ch: 'é' }));
        assert_eq!(encode_text("a\nb"), Err(CodecError::NonAscii { index: 1, ch: '\n' }));
    }

    #[test]
    fn decodes_e_and_roundtrips_example() {
        let e = BitSignature::from_bits(vec![-1, 1, -1, -1, -1, 1, -1, 1]).unwrap();
        assert_eq!(decode_bits(&e).unwrap().text, "E");
        let sig = encode_text("EXAMPLE").unwrap();
        assert_eq!(sig.len(), 56);
        assert_eq!(decode_bits(&sig).unwrap().text, "EXAMPLE");
    }

    #[test]
    fn decode_rejects_partial_bytes_and_flags_control_bytes() {
        let seven = BitSignature::from_bits(vec![1; 7]).unwrap();
        assert_eq!(decode_bits(&seven), Err(CodecError::Length(7)));
        // 0x01 then 'A'
        let mut bits = vec![-1, -1, -1, -1, -1, -1, -1, 1];
        bits.extend(encode_text("A").unwrap().bits());
        let d = decode_bits(&BitSignature::from_bits(bits).unwrap()).unwrap();
        assert_eq!(d.flagged, vec![0]);
        assert_eq!(d.text, "\u{FFFD}A");
        assert_eq!(d.bytes, vec![1, b'A']);
    }

    #[test]
    fn extracts_first_table_column_as_e() {
        let (src, placement) = one_layer(vec![-0.50, 0.46, -0.42, -0.64, -0.25, 0.25, -0.61, 0.57]);
        let bits = extract_signs(&src, &placement, 8).unwrap().to_signature().unwrap();
        assert_eq!(decode_bits(&bits).unwrap().text, "E");
    }

    #[test]
    fn uniform_positive_and_zero_erasure() {
        let (src, placement) = one_layer(vec![0.3; 6]);
        assert_eq!(extract_signs(&src, &placement, 4).unwrap().values, vec![1, 1, 1, 1]);
        let (src, placement) = one_layer(vec![0.3, 0.0, -0.2]);
        let ex = extract_signs(&src, &placement, 3).unwrap();
        assert_eq!(ex.erasures(), vec![1]);
        assert_eq!(ex.to_signature(), Err(CodecError::Erasures(1)));
        let r = ber(&ex.values, &[1, 1, -1]).unwrap();
        assert_eq!(r.mismatches, 1);
    }

    #[test]
    fn extraction_crosses_layers_in_order() {
        let src = Gammas(HashMap::from([
            ("a".to_string(), vec![0.1, -0.1]),
            ("b".to_string(), vec![-0.2, 0.2, 0.5]),
        ]));
        let placement = SignPlacement::new([("a".to_string(), 2), ("b".to_string(), 3)]);
        assert_eq!(extract_signs(&src, &placement, 4).unwrap().values, vec![1, -1, -1, 1]);
        assert_eq!(
            extract_signs(&src, &placement, 6),
            Err(CodecError::Capacity { requested: 6, capacity: 5 })
        );
        let missing = SignPlacement::new([("a".to_string(), 2), ("zz".to_string(), 3)]);
        assert_eq!(extract_signs(&src, &missing, 3), Err(CodecError::MissingLayer("zz".into())));
    }

    #[test]
    fn ber_cases() {
        let sig = encode_text(&"EXAMPLE".repeat(8)).unwrap();
        assert_eq!(sig.len(), 448);
        assert_eq!(ber(sig.bits(), sig.bits()).unwrap().ber, 0.0);
        assert_eq!(ber(sig.negate().bits(), sig.bits()).unwrap().ber, 1.0);
        let mut flipped = sig.bits().to_vec();
        for i in [0, 50, 100, 150, 200, 300, 447] {
            flipped[i] = -flipped[i];
        }
        // direct count oracle: 7 of 448 positions differ
        let direct = flipped.iter().zip(sig.bits()).filter(|(a, b)| a != b).count();
        assert_eq!(direct, 7);
        let r = ber(&flipped, sig.bits()).unwrap();
        assert_eq!(r.mismatches, 7);
        assert_eq!(r.ber, 0.015625);
        assert!(matches!(ber(&[1], &[1, 1]), Err(CodecError::LengthMismatch { .. })));
    }

    #[test]
    fn capacity_examples() {
        let dcgan = SignPlacement::new(
            [256, 128, 64].iter().enumerate().map(|(i, c)| (format!("bn{i}"), *c)),
        );
        assert_eq!(capacity(&dcgan), Capacity { bits: 448, bytes: 56 });
        assert_eq!(capacity(&SignPlacement::new([])), Capacity { bits: 0, bytes: 0 });
        // SRGAN-shaped: 16 residual blocks × 2 BN × 64 channels + one trailing BN of 64
        let srgan = SignPlacement::new((0..33).map(|i| (format!("bn{i}"), 64)));
        assert_eq!(capacity(&srgan), Capacity { bits: 2112, bytes: 264 });
    }

    #[test]
    fn audit_lines_roundtrip() {
        let sig = encode_text("Hi").unwrap();
        let text = sig.to_lines();
        assert!(text.starts_with("-1\n+1\n"));
        assert_eq!(BitSignature::from_lines(&text).unwrap().bits(), sig.bits());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn roundtrip_printable(s in "[ -~]{1,40}") {
                let sig = encode_text(&s).unwrap();
                prop_assert_eq!(sig.len(), 8 * s.len());
                prop_assert_eq!(decode_bits(&sig).unwrap().text, s);
            }

            #[test]
            fn ber_self_and_negation(bits in proptest::collection::vec(prop_oneof![Just(-1i8), Just(1i8)], 1..300)) {
                let sig = BitSignature::from_bits(bits).unwrap();
                prop_assert_eq!(ber(sig.bits(), sig.bits()).unwrap().ber, 0.0);
                prop_assert_eq!(ber(sig.negate().bits(), sig.bits()).unwrap().ber, 1.0);
            }

            #[test]
            fn extraction_invariant_to_positive_scaling(
                gammas in proptest::collection::vec(-1.0f32..1.0, 1..64),
                k in 0.01f32..100.0,
            ) {
                let n = gammas.len();
                let scaled: Vec<f32> = gammas.iter().map(|g| g * k).collect();
                let (a, placement) = one_layer(gammas);
                let (b, _) = one_layer(scaled);
                prop_assert_eq!(
                    extract_signs(&a, &placement, n).unwrap(),
                    extract_signs(&b, &placement, n).unwrap()
                );
            }

            #[test]
            fn capacity_is_sum(counts in proptest::collection::vec(0usize..600, 0..12)) {
                let placement = SignPlacement::new(counts.iter().enumerate().map(|(i, c)| (format!("l{i}"), *c)));
                let mut brute = 0;
                for c in &counts {
                    for _ in 0..*c {
                        brute += 1;
                    }
                }
                prop_assert_eq!(capacity(&placement).bits, brute);
                prop_assert_eq!(capacity(&placement).bytes, brute / 8);
            }
        }
    }
}
