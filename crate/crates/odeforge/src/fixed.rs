//! Signed fixed-point (Q-format) arithmetic with saturation.
//!
//! A [`FixedPointFormat`] describes a two's-complement word of `total_bits`
//! with `frac_bits` fractional bits; the represented value is
//! `word * 2^-frac_bits`. Conversions round to nearest even and saturate to
//! the representable range instead of wrapping. Multiply-accumulate runs in a
//! 64-bit accumulator holding the doubled-fraction domain, so no intermediate
//! result can overflow for the layer fan-ins in this model family.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Q-format descriptor: `total_bits` two's-complement word, `frac_bits` of
/// which sit below the binary point. Always signed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointFormat {
    total_bits: u8,
    frac_bits: u8,
}

/// 24-bit default for non-convolutional data: 8 integer bits (incl. sign),
/// 16 fractional bits.
pub const Q8_16: FixedPointFormat = FixedPointFormat {
    total_bits: 24,
    frac_bits: 16,
};

/// 20-bit default for convolution weights: 4 integer bits (incl. sign),
/// 16 fractional bits.
pub const Q4_16: FixedPointFormat = FixedPointFormat {
    total_bits: 20,
    frac_bits: 16,
};

impl FixedPointFormat {
    pub fn new(total_bits: u8, frac_bits: u8) -> Result<Self> {
        if !(8..=32).contains(&total_bits) {
            return Err(Error::InvalidFormat(format!(
                "total_bits must be in [8, 32], got {}",
                total_bits
            )));
        }
        if frac_bits >= total_bits {
            return Err(Error::InvalidFormat(format!(
                "frac_bits must be in [0, total_bits-1], got {} for {} total bits",
                frac_bits, total_bits
            )));
        }
        Ok(FixedPointFormat {
            total_bits,
            frac_bits,
        })
    }

    pub fn total_bits(&self) -> u8 {
        self.total_bits
    }

    pub fn frac_bits(&self) -> u8 {
        self.frac_bits
    }

    /// Largest representable raw word, `2^(total_bits-1) - 1`.
    pub fn max_word(&self) -> i32 {
        ((1i64 << (self.total_bits - 1)) - 1) as i32
    }

    /// Smallest representable raw word, `-2^(total_bits-1)`.
    pub fn min_word(&self) -> i32 {
        (-(1i64 << (self.total_bits - 1))) as i32
    }

    /// Value of one least-significant bit, `2^-frac_bits`.
    pub fn resolution(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    /// Format label such as `Q8.16` (integer bits include the sign bit).
    pub fn label(&self) -> String {
        format!("Q{}.{}", self.total_bits - self.frac_bits, self.frac_bits)
    }

    /// Round-to-nearest-even quantization of a real value, saturating to the
    /// representable range. Non-finite input is a contract violation.
    pub fn quantize(&self, x: f64) -> Result<i32> {
        if !x.is_finite() {
            return Err(Error::NonFinite {
                context: format!("quantize to {}", self.label()),
                index: 0,
                value: x,
            });
        }
        Ok(self.quantize_sat(x).0)
    }

    /// Infallible quantization of a finite value; the flag reports saturation.
    pub(crate) fn quantize_sat(&self, x: f64) -> (i32, bool) {
        debug_assert!(x.is_finite());
        let scaled = (x * (self.frac_bits as f64).exp2()).round_ties_even();
        // The float -> int cast saturates, and the range below is tighter.
        let raw = scaled as i64;
        self.saturate(raw)
    }

    /// Real value of a raw word. Words outside the representable range are
    /// rejected.
    pub fn dequantize(&self, word: i32) -> Result<f64> {
        if word > self.max_word() || word < self.min_word() {
            return Err(Error::WordOutOfRange {
                word: word as i64,
                fmt: self.label(),
            });
        }
        Ok(word as f64 * self.resolution())
    }

    /// Clamp a wide value into the representable word range.
    pub fn saturate(&self, v: i64) -> (i32, bool) {
        let max = self.max_word() as i64;
        let min = self.min_word() as i64;
        if v > max {
            (max as i32, true)
        } else if v < min {
            (min as i32, true)
        } else {
            (v as i32, false)
        }
    }

    /// Final store of a multiply-accumulate chain: rescale a wide accumulator
    /// from the doubled-fraction domain back to this format with
    /// round-to-nearest-even, then saturate.
    pub fn store(&self, acc: i64) -> i32 {
        self.store_from(acc, 2 * self.frac_bits as u32).0
    }

    /// Rescale a wide accumulator whose fractional resolution is
    /// `src_frac_bits` down (or up) to this format. Returns the stored word
    /// and whether saturation occurred.
    pub fn store_from(&self, acc: i64, src_frac_bits: u32) -> (i32, bool) {
        let dst = self.frac_bits as u32;
        let rescaled = if src_frac_bits >= dst {
            rne_shift_right(acc, src_frac_bits - dst)
        } else {
            acc << (dst - src_frac_bits)
        };
        self.saturate(rescaled)
    }
}

impl std::fmt::Display for FixedPointFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// One multiply-accumulate step in the doubled-fraction domain.
#[inline]
pub fn qmac(acc: i64, a: i32, b: i32) -> i64 {
    acc + (a as i64) * (b as i64)
}

/// Arithmetic shift right with round-to-nearest-even on the dropped bits.
pub fn rne_shift_right(v: i64, shift: u32) -> i64 {
    if shift == 0 {
        return v;
    }
    let floor = v >> shift;
    let rem = v & ((1i64 << shift) - 1);
    let half = 1i64 << (shift - 1);
    if rem > half || (rem == half && (floor & 1) == 1) {
        floor + 1
    } else {
        floor
    }
}

/// Round-to-nearest-even integer division by a positive divisor.
pub fn rne_div(v: i64, n: i64) -> i64 {
    debug_assert!(n > 0);
    let q = v.div_euclid(n);
    let r = v.rem_euclid(n);
    match (2 * r).cmp(&n) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
        std::cmp::Ordering::Less => q,
    }
}

/// Integer-word tensor quantized under a fixed-point format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    shape: Vec<usize>,
    words: Vec<i32>,
    fmt: FixedPointFormat,
}

impl QTensor {
    pub fn zeros(shape: &[usize], fmt: FixedPointFormat) -> Self {
        let len = shape.iter().product();
        QTensor {
            shape: shape.to_vec(),
            words: vec![0; len],
            fmt,
        }
    }

    /// Quantize a real tensor, returning the word tensor and the number of
    /// saturated elements.
    pub fn quantize_counting(t: &Tensor, fmt: FixedPointFormat) -> Result<(QTensor, u64)> {
        t.check_finite("QTensor::quantize")?;
        let mut saturated = 0u64;
        let words = t
            .data()
            .iter()
            .map(|&v| {
                let (w, sat) = fmt.quantize_sat(v);
                saturated += sat as u64;
                w
            })
            .collect();
        Ok((
            QTensor {
                shape: t.shape().to_vec(),
                words,
                fmt,
            },
            saturated,
        ))
    }

    pub fn quantize(t: &Tensor, fmt: FixedPointFormat) -> Result<QTensor> {
        Ok(Self::quantize_counting(t, fmt)?.0)
    }

    /// Build from raw words, validating the representable range.
    pub fn from_words(shape: Vec<usize>, words: Vec<i32>, fmt: FixedPointFormat) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != words.len() {
            return Err(Error::shape(
                "QTensor::from_words",
                format!("{} words for shape {:?}", expected, shape),
                format!("{} words", words.len()),
            ));
        }
        for &w in &words {
            if w > fmt.max_word() || w < fmt.min_word() {
                return Err(Error::WordOutOfRange {
                    word: w as i64,
                    fmt: fmt.label(),
                });
            }
        }
        Ok(QTensor { shape, words, fmt })
    }

    pub fn dequantize(&self) -> Tensor {
        let res = self.fmt.resolution();
        Tensor::from_vec_unchecked(
            self.shape.clone(),
            self.words.iter().map(|&w| w as f64 * res).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn words(&self) -> &[i32] {
        &self.words
    }

    pub fn words_mut(&mut self) -> &mut [i32] {
        &mut self.words
    }

    pub fn fmt(&self) -> FixedPointFormat {
        self.fmt
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::shape(
                "QTensor::dims3",
                "rank-3 tensor",
                format!("rank-{} shape {:?}", self.shape.len(), self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    /// Number of words currently pinned at either range bound.
    pub fn count_at_bounds(&self) -> u64 {
        let max = self.fmt.max_word();
        let min = self.fmt.min_word();
        self.words.iter().filter(|&&w| w == max || w == min).count() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_zero_is_zero() {
        assert_eq!(Q8_16.quantize(0.0).unwrap(), 0);
    }

    #[test]
    fn quantize_exact_value() {
        // 1.5 * 2^16 is exactly representable.
        assert_eq!(Q8_16.quantize(1.5).unwrap(), 98_304);
    }

    #[test]
    fn quantize_saturates_at_max() {
        assert_eq!(Q8_16.quantize(300.0).unwrap(), 8_388_607);
        assert_eq!(Q8_16.max_word(), 8_388_607);
    }

    #[test]
    fn quantize_rejects_nan() {
        assert!(Q8_16.quantize(f64::NAN).is_err());
    }

    #[test]
    fn dequantize_inverts_exact_quantize() {
        assert_eq!(Q8_16.dequantize(98_304).unwrap(), 1.5);
        let q4_16 = FixedPointFormat::new(20, 16).unwrap();
        assert_eq!(q4_16.dequantize(0).unwrap(), 0.0);
    }

    #[test]
    fn dequantize_one_lsb() {
        let v = Q8_16.dequantize(1).unwrap();
        assert_eq!(v, 2f64.powi(-16));
        assert!((v - 1.52587890625e-5).abs() < 1e-18);
    }

    #[test]
    fn dequantize_rejects_out_of_range() {
        assert!(Q4_16.dequantize(Q4_16.max_word() + 1).is_err());
    }

    #[test]
    fn qmac_small_integer_product_is_exact() {
        let a = Q8_16.quantize(2.0).unwrap();
        let b = Q8_16.quantize(3.0).unwrap();
        let acc = qmac(0, a, b);
        assert_eq!(Q8_16.store(acc), Q8_16.quantize(6.0).unwrap());
    }

    #[test]
    fn qmac_chain_of_64_ones() {
        // 64 terms of 1.0 * 1.0: representable, raw 64 * 2^16 = 4_194_304.
        let one = Q8_16.quantize(1.0).unwrap();
        let mut acc = 0i64;
        for _ in 0..64 {
            acc = qmac(acc, one, one);
        }
        assert_eq!(Q8_16.store(acc), 4_194_304);
    }

    #[test]
    fn store_saturates_large_accumulation() {
        // 200.0 in the doubled-fraction domain exceeds the Q8.16 range.
        let acc = (200.0 * 2f64.powi(32)) as i64;
        assert_eq!(Q8_16.store(acc), 8_388_607);
    }

    #[test]
    fn rne_shift_rounds_half_to_even() {
        assert_eq!(rne_shift_right(3, 1), 2); // 1.5 -> 2
        assert_eq!(rne_shift_right(5, 1), 2); // 2.5 -> 2
        assert_eq!(rne_shift_right(-3, 1), -2); // -1.5 -> -2
        assert_eq!(rne_shift_right(-5, 1), -2); // -2.5 -> -2
        assert_eq!(rne_shift_right(7, 1), 4); // 3.5 -> 4
    }

    #[test]
    fn rne_div_rounds_half_to_even() {
        assert_eq!(rne_div(3, 2), 2);
        assert_eq!(rne_div(5, 2), 2);
        assert_eq!(rne_div(-3, 2), -2);
        assert_eq!(rne_div(7, 4), 2);
        assert_eq!(rne_div(10, 4), 2); // 2.5 -> 2
        assert_eq!(rne_div(14, 4), 4); // 3.5 -> 4
    }

    #[test]
    fn saturation_idempotence() {
        let max = Q4_16.max_word();
        let x = Q4_16.dequantize(max).unwrap();
        assert_eq!(Q4_16.quantize(x).unwrap(), max);
    }

    #[test]
    fn format_bounds_validated() {
        assert!(FixedPointFormat::new(7, 0).is_err());
        assert!(FixedPointFormat::new(33, 0).is_err());
        assert!(FixedPointFormat::new(16, 16).is_err());
        assert!(FixedPointFormat::new(32, 31).is_ok());
    }
}
