//! Uniform and binary weight quantizers.
//!
//! A uniform quantizer maps `w` to `Δ · round(clip(w / Δ, l, u))`. Rounding is
//! half-away-from-zero (`f64::round`), so an input that lands exactly on a
//! boundary point goes to the code with the larger magnitude. Bin edges are
//! always derived from the code the quantizer actually assigns, which keeps
//! `boundary_points` consistent with `quantize` at ties.
//!
//! The binary quantizer is `sign(w)` with `sign(0) = +1`. It has a single
//! boundary point at zero and no representable range.

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerConfig {
    /// Quantization step Δ.
    pub delta: f64,
    /// Lowest clip code.
    pub l: i64,
    /// Highest clip code.
    pub u: i64,
    pub bits: u32,
    /// Sign quantizer. `delta` is kept only as the scale for PWL conventions.
    pub binary: bool,
}

/// Edges of the quantization bin containing a weight.
///
/// Outside the representable range one of the edges does not exist. The
/// binary quantizer reports neither edge and sets `sign_boundary` instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPair {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub sign_boundary: bool,
}

impl QuantizerConfig {
    pub fn uniform(delta: f64, l: i64, u: i64, bits: u32) -> Result<Self> {
        let cfg = Self {
            delta,
            l,
            u,
            bits,
            binary: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Symmetric `b`-bit quantizer: `l = -2^(b-1)`, `u = 2^(b-1) - 1`.
    pub fn symmetric(bits: u32, delta: f64) -> Result<Self> {
        if !(2..=62).contains(&bits) {
            return Err(Error::config(format!(
                "symmetric quantizer needs 2..=62 bits, got {bits}"
            )));
        }
        let half = 1i64 << (bits - 1);
        Self::uniform(delta, -half, half - 1, bits)
    }

    /// Sign quantizer. `delta` is only used as the PWL scale convention.
    pub fn binary(delta: f64) -> Result<Self> {
        let cfg = Self {
            delta,
            l: -1,
            u: 1,
            bits: 1,
            binary: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::config(format!(
                "quantizer delta must be positive and finite, got {}",
                self.delta
            )));
        }
        if self.bits == 0 {
            return Err(Error::config("quantizer bits must be positive"));
        }
        if self.binary {
            return Ok(());
        }
        if self.u <= self.l {
            return Err(Error::config(format!(
                "quantizer needs u > l, got l = {}, u = {}",
                self.l, self.u
            )));
        }
        let codes = (self.u as i128) - (self.l as i128) + 1;
        if self.bits < 127 && codes > (1i128 << self.bits) {
            return Err(Error::config(format!(
                "{codes} codes do not fit in {} bits",
                self.bits
            )));
        }
        Ok(())
    }

    /// Clipped integer code assigned to `w`. Binary: -1 or +1.
    pub fn code(&self, w: f64) -> Result<i64> {
        ensure_finite(w, "weight")?;
        Ok(self.code_unchecked(w))
    }

    #[inline]
    pub(crate) fn code_unchecked(&self, w: f64) -> i64 {
        if self.binary {
            if w >= 0.0 {
                1
            } else {
                -1
            }
        } else {
            (w / self.delta).clamp(self.l as f64, self.u as f64).round() as i64
        }
    }

    pub fn quantize(&self, w: f64) -> Result<f64> {
        ensure_finite(w, "weight")?;
        Ok(self.quantize_unchecked(w))
    }

    #[inline]
    pub(crate) fn quantize_unchecked(&self, w: f64) -> f64 {
        if self.binary {
            self.code_unchecked(w) as f64
        } else {
            self.delta * self.code_unchecked(w) as f64
        }
    }

    /// Center of the bin `w` falls in (its quantized value). Outside the
    /// representable range this is the outermost code value; binary is 0.
    #[inline]
    pub(crate) fn bin_center_unchecked(&self, w: f64) -> f64 {
        if self.binary {
            0.0
        } else {
            self.quantize_unchecked(w)
        }
    }

    pub fn boundary_points(&self, w: f64) -> Result<BoundaryPair> {
        ensure_finite(w, "weight")?;
        if self.binary {
            return Ok(BoundaryPair {
                lower: None,
                upper: None,
                sign_boundary: true,
            });
        }
        let c = self.code_unchecked(w);
        let lower = (c > self.l).then_some((c as f64 - 0.5) * self.delta);
        let upper = (c < self.u).then_some((c as f64 + 0.5) * self.delta);
        Ok(BoundaryPair {
            lower,
            upper,
            sign_boundary: false,
        })
    }

    pub fn representable_range(&self) -> Result<(f64, f64)> {
        if self.binary {
            return Err(Error::NoRepresentableRange);
        }
        Ok((self.delta * self.l as f64, self.delta * self.u as f64))
    }

    /// Length of the representable range; used to normalize alignment error.
    pub fn range_length(&self) -> Result<f64> {
        let (lo, hi) = self.representable_range()?;
        Ok(hi - lo)
    }

    /// All boundary points in increasing order. Binary: `[0.0]`.
    pub fn boundaries(&self) -> Vec<f64> {
        if self.binary {
            return vec![0.0];
        }
        (self.l..self.u)
            .map(|c| (c as f64 + 0.5) * self.delta)
            .collect()
    }

    /// Codes whose bins have finite length (both edges exist).
    pub fn finite_bin_codes(&self) -> std::ops::RangeInclusive<i64> {
        if self.binary {
            #[allow(clippy::reversed_empty_ranges)]
            return 1..=0;
        }
        (self.l + 1)..=(self.u - 1)
    }

    /// `[lower, upper]` edges of the finite bin with the given code.
    pub fn bin_edges(&self, code: i64) -> Option<(f64, f64)> {
        self.finite_bin_codes().contains(&code).then_some((
            (code as f64 - 0.5) * self.delta,
            (code as f64 + 0.5) * self.delta,
        ))
    }

    /// Every value the quantizer can output, in increasing order.
    pub fn code_values(&self) -> Vec<f64> {
        if self.binary {
            return vec![-1.0, 1.0];
        }
        (self.l..=self.u).map(|c| c as f64 * self.delta).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn two_bit() -> QuantizerConfig {
        QuantizerConfig::uniform(2.0 / 3.0, -2, 1, 2).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let q = two_bit();
        assert_eq!(q.quantize(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(q.quantize(0.4).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q.quantize(-10.0).unwrap(), -4.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_is_domain_error() {
        let q = two_bit();
        assert!(matches!(q.quantize(f64::NAN), Err(Error::Domain(_))));
        assert!(matches!(q.quantize(f64::INFINITY), Err(Error::Domain(_))));
        assert!(matches!(q.boundary_points(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn boundary_point_examples() {
        let q = two_bit();
        let b = q.boundary_points(0.1).unwrap();
        assert_abs_diff_eq!(b.lower.unwrap(), -1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.upper.unwrap(), 1.0 / 3.0, epsilon = 1e-15);

        let b = q.boundary_points(10.0).unwrap();
        assert_abs_diff_eq!(b.lower.unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(b.upper, None);

        let b = q.boundary_points(-10.0).unwrap();
        assert_eq!(b.lower, None);
        assert_abs_diff_eq!(b.upper.unwrap(), -1.0, epsilon = 1e-15);
    }

    #[test]
    fn ties_follow_rounding() {
        let q = two_bit();
        // -1/3 is exactly -Δ/2; half-away-from-zero sends it to code -1.
        let w = -0.5 * q.delta;
        assert_eq!(q.code(w).unwrap(), -1);
        let b = q.boundary_points(w).unwrap();
        assert_abs_diff_eq!(b.lower.unwrap(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.upper.unwrap(), -1.0 / 3.0, epsilon = 1e-15);
        // +Δ/2 goes to the bin above.
        let w = 0.5 * q.delta;
        assert_eq!(q.code(w).unwrap(), 1);
        assert_eq!(q.boundary_points(w).unwrap().lower, Some(w));
    }

    #[test]
    fn representable_range_examples() {
        let (lo, hi) = two_bit().representable_range().unwrap();
        assert_abs_diff_eq!(lo, -4.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(hi, 2.0 / 3.0, epsilon = 1e-15);
        let asym = QuantizerConfig::uniform(1.0, 0, 3, 2).unwrap();
        assert_eq!(asym.representable_range().unwrap(), (0.0, 3.0));
        let unit = QuantizerConfig::uniform(1.0, -1, 1, 2).unwrap();
        assert_eq!(unit.representable_range().unwrap(), (-1.0, 1.0));
        let bin = QuantizerConfig::binary(1.0).unwrap();
        assert!(matches!(
            bin.representable_range(),
            Err(Error::NoRepresentableRange)
        ));
    }

    #[test]
    fn binary_is_sign_with_positive_zero() {
        let q = QuantizerConfig::binary(1.0).unwrap();
        assert_eq!(q.quantize(0.0).unwrap(), 1.0);
        assert_eq!(q.quantize(-0.0).unwrap(), 1.0);
        assert_eq!(q.quantize(-1e-300).unwrap(), -1.0);
        assert_eq!(q.quantize(3.0).unwrap(), 1.0);
        let b = q.boundary_points(0.3).unwrap();
        assert!(b.sign_boundary && b.lower.is_none() && b.upper.is_none());
    }

    #[test]
    fn validation() {
        assert!(QuantizerConfig::uniform(0.0, -2, 1, 2).is_err());
        assert!(QuantizerConfig::uniform(-1.0, -2, 1, 2).is_err());
        assert!(QuantizerConfig::uniform(1.0, 1, 1, 2).is_err());
        // 5 codes do not fit in 2 bits.
        assert!(QuantizerConfig::uniform(1.0, -2, 2, 2).is_err());
        assert!(QuantizerConfig::symmetric(8, 0.1).is_ok());
    }

    #[test]
    fn outputs_are_code_values_exhaustively() {
        let q = two_bit();
        let codes = q.code_values();
        assert_eq!(codes.len(), 4);
        for i in -4000..=4000 {
            let w = i as f64 * 1e-3;
            let out = q.quantize(w).unwrap();
            assert!(codes.contains(&out), "{w} -> {out}");
        }
    }

    #[test]
    fn bin_consistency_on_uniform_samples() {
        let q = two_bit();
        let (lo, hi) = q.representable_range().unwrap();
        let n = 20_000;
        for i in 0..n {
            let w = lo + (hi - lo) * (i as f64 + 0.5) / n as f64;
            let b = q.boundary_points(w).unwrap();
            if let (Some(a), Some(c)) = (b.lower, b.upper) {
                assert!((c - a - q.delta).abs() < 1e-12);
                assert!(a <= w && w <= c);
            } else {
                // Only the half bins at the ends of the range lack an edge.
                assert!(w < lo + q.delta / 2.0 || w >= hi - q.delta / 2.0);
            }
        }
    }

    proptest! {
        #[test]
        fn idempotent(w in -10.0f64..10.0) {
            let q = two_bit();
            let once = q.quantize(w).unwrap();
            prop_assert_eq!(q.quantize(once).unwrap(), once);
        }

        #[test]
        fn monotone(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let q = two_bit();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(q.quantize(lo).unwrap() <= q.quantize(hi).unwrap());
        }
    }
}
