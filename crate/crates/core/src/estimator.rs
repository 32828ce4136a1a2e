//! Backward-pass gradient estimators and their Lipschitz constants.

use std::f64::consts::PI;

use crate::error::{ensure_finite, Error, Result};
use crate::quantizer::QuantizerConfig;

/// Which surrogate derivative the backward pass uses for a quantized weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorSpec {
    /// Straight-through: derivative 1 everywhere.
    Ste,
    /// Piecewise linear: indicator of `[w_min, w_max]`.
    Pwl { w_min: f64, w_max: f64 },
    /// Per-bin tanh surrogate `tanh(k (w - a)) + a` around the bin center `a`.
    Tanh { k: f64 },
    /// Derivative 1 on `[range_lo, range_hi]`, reciprocal decay `1 / (1 + d)^2`
    /// at distance `d` outside it.
    Mad { range_lo: f64, range_hi: f64 },
}

impl EstimatorSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EstimatorSpec::Ste => Ok(()),
            EstimatorSpec::Pwl { w_min, w_max } => {
                if w_min.is_finite() && w_max.is_finite() && w_min < w_max {
                    Ok(())
                } else {
                    Err(Error::config(format!(
                        "PWL estimator needs finite w_min < w_max, got [{w_min}, {w_max}]"
                    )))
                }
            }
            EstimatorSpec::Tanh { k } => {
                if k.is_finite() && k > 0.0 {
                    Ok(())
                } else {
                    Err(Error::config(format!(
                        "tanh estimator needs k > 0, got {k}"
                    )))
                }
            }
            EstimatorSpec::Mad { range_lo, range_hi } => {
                if range_lo.is_finite() && range_hi.is_finite() && range_lo < range_hi {
                    Ok(())
                } else {
                    Err(Error::config(format!(
                        "MAD estimator needs finite range_lo < range_hi, got [{range_lo}, {range_hi}]"
                    )))
                }
            }
        }
    }

    /// MAD over the quantizer's representable range.
    pub fn mad_for(cfg: &QuantizerConfig) -> Result<Self> {
        let (range_lo, range_hi) = cfg.representable_range()?;
        Ok(EstimatorSpec::Mad { range_lo, range_hi })
    }

    pub fn is_ste(&self) -> bool {
        matches!(self, EstimatorSpec::Ste)
    }

    /// True for kinds that are strictly positive everywhere.
    pub fn is_positive(&self) -> bool {
        !matches!(self, EstimatorSpec::Pwl { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorSpec::Ste => "ste",
            EstimatorSpec::Pwl { .. } => "pwl",
            EstimatorSpec::Tanh { .. } => "tanh",
            EstimatorSpec::Mad { .. } => "mad",
        }
    }

    pub fn bind(self, cfg: QuantizerConfig) -> Estimator {
        Estimator { spec: self, cfg }
    }
}

/// Anything that can act as `Q̂'` on the real line.
pub trait Surrogate {
    fn derivative(&self, w: f64) -> f64;

    /// Points where the derivative has a kink; quadrature splits there.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

impl<F: Fn(f64) -> f64> Surrogate for F {
    fn derivative(&self, w: f64) -> f64 {
        self(w)
    }
}

/// An estimator bound to the quantizer whose bins it follows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimator {
    pub spec: EstimatorSpec,
    pub cfg: QuantizerConfig,
}

impl Estimator {
    pub fn derivative_checked(&self, w: f64) -> Result<f64> {
        ensure_finite(w, "weight")?;
        Ok(self.derivative(w))
    }
}

impl Surrogate for Estimator {
    #[inline]
    fn derivative(&self, w: f64) -> f64 {
        match self.spec {
            EstimatorSpec::Ste => 1.0,
            EstimatorSpec::Pwl { w_min, w_max } => {
                if (w_min..=w_max).contains(&w) {
                    1.0
                } else {
                    0.0
                }
            }
            EstimatorSpec::Tanh { k } => {
                let a = self.cfg.bin_center_unchecked(w);
                let c = (k * (w - a)).cosh();
                k / (c * c)
            }
            EstimatorSpec::Mad { range_lo, range_hi } => {
                let d = if w < range_lo {
                    range_lo - w
                } else if w > range_hi {
                    w - range_hi
                } else {
                    return 1.0;
                };
                1.0 / ((1.0 + d) * (1.0 + d))
            }
        }
    }

    fn breakpoints(&self) -> Vec<f64> {
        match self.spec {
            EstimatorSpec::Ste => Vec::new(),
            EstimatorSpec::Pwl { w_min, w_max } => vec![w_min, w_max],
            EstimatorSpec::Tanh { .. } => self.cfg.boundaries(),
            EstimatorSpec::Mad { range_lo, range_hi } => vec![range_lo, range_hi],
        }
    }
}

/// `Q̂'(w)` for `spec` attached to `cfg`.
pub fn derivative(w: f64, spec: &EstimatorSpec, cfg: &QuantizerConfig) -> Result<f64> {
    spec.bind(*cfg).derivative_checked(w)
}

/// Lower/upper bounds of `Q̂'`, the Lipschitz constant of `Q̂'`, and optionally
/// the update-magnitude bound used for momentum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConstants {
    pub l_minus: f64,
    pub l_plus: f64,
    pub l_prime: f64,
    pub g_plus: Option<f64>,
}

impl EstimatorConstants {
    pub const STE: Self = Self {
        l_minus: 1.0,
        l_plus: 1.0,
        l_prime: 0.0,
        g_plus: None,
    };

    /// `L' L₊ / (2 L₋²)`, the factor in front of `η² ∇f²` in the convexity term.
    pub fn convexity_ratio(&self) -> f64 {
        self.l_prime * self.l_plus / (2.0 * self.l_minus * self.l_minus)
    }
}

/// Constants from sampling, with the grid spacing they were measured at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledConstants {
    pub constants: EstimatorConstants,
    pub grid_step: f64,
}

pub const NUMERIC_GRID_POINTS: usize = 100_000;

/// Closed form for STE and tanh; sampled for MAD. PWL has `L₋ = 0`.
pub fn lipschitz_constants(
    spec: &EstimatorSpec,
    cfg: &QuantizerConfig,
) -> Result<EstimatorConstants> {
    spec.validate()?;
    match *spec {
        EstimatorSpec::Ste => Ok(EstimatorConstants::STE),
        EstimatorSpec::Pwl { .. } => Err(Error::ConstantsUndefined("PWL")),
        EstimatorSpec::Tanh { k } if !cfg.binary => Ok(tanh_constants(k, cfg.delta)),
        EstimatorSpec::Tanh { .. } => Err(Error::ConstantsUndefined("tanh on a binary quantizer")),
        EstimatorSpec::Mad { .. } => {
            let (lo, hi) = cfg.representable_range()?;
            Ok(sampled_constants(&spec.bind(*cfg), lo, hi, NUMERIC_GRID_POINTS)?.constants)
        }
    }
}

/// Tanh estimator on bins of width `delta`:
/// `L₊ = k`, `L₋ = k / cosh²(kΔ/2)`, and `L' = 2k² tanh(k w*) / cosh²(k w*)`
/// with `w* = min(Δ/2, ln(2 + √3) / (2k))`.
pub fn tanh_constants(k: f64, delta: f64) -> EstimatorConstants {
    let half = 0.5 * k * delta;
    let ch = half.cosh();
    let w_star = (0.5 * delta).min((2.0 + 3f64.sqrt()).ln() / (2.0 * k));
    let x = k * w_star;
    let cx = x.cosh();
    EstimatorConstants {
        l_minus: k / (ch * ch),
        l_plus: k,
        l_prime: 2.0 * k * k * x.tanh() / (cx * cx),
        g_plus: None,
    }
}

/// Brute-force constants over `[lo, hi]` on an evenly spaced grid: min/max of
/// `|Q̂'|` and the largest finite-difference slope between neighbours.
pub fn sampled_constants(
    est: &impl Surrogate,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<SampledConstants> {
    if !(lo < hi) || points < 2 {
        return Err(Error::domain(format!(
            "sampling needs lo < hi and at least 2 points, got [{lo}, {hi}] with {points}"
        )));
    }
    let step = (hi - lo) / (points - 1) as f64;
    let mut l_minus = f64::INFINITY;
    let mut l_plus = 0.0f64;
    let mut l_prime = 0.0f64;
    let mut prev = est.derivative(lo);
    for i in 0..points {
        let w = if i + 1 == points {
            hi
        } else {
            lo + step * i as f64
        };
        let d = est.derivative(w);
        l_minus = l_minus.min(d.abs());
        l_plus = l_plus.max(d.abs());
        if i > 0 {
            l_prime = l_prime.max((d - prev).abs() / step);
        }
        prev = d;
    }
    if l_minus <= 0.0 {
        return Err(Error::ConstantsUndefined(
            "an estimator that vanishes on the grid",
        ));
    }
    Ok(SampledConstants {
        constants: EstimatorConstants {
            l_minus,
            l_plus,
            l_prime,
            g_plus: None,
        },
        grid_step: step,
    })
}

/// Checks `Q̂'(w) = Q̂'(w + Δ)` on a dense grid over the representable range,
/// using at least 1000 samples per bin.
pub fn check_cyclical(est: &impl Surrogate, cfg: &QuantizerConfig, tol: f64) -> Result<bool> {
    if cfg.binary {
        return Err(Error::domain(
            "cyclicity is only defined for multi-bit quantizers",
        ));
    }
    if cfg.u - cfg.l < 2 {
        return Err(Error::domain(
            "cyclicity check needs at least two finite quantization bins",
        ));
    }
    let (lo, hi) = cfg.representable_range()?;
    let span = hi - cfg.delta - lo;
    let per_bin = 1000usize;
    let n = per_bin * (cfg.u - cfg.l) as usize;
    // Irrational offset keeps samples off boundary points.
    let offset = (PI - 3.0) / 7.0;
    let mut worst = 0.0f64;
    for i in 0..n {
        let w = lo + span * ((i as f64 + offset) / n as f64);
        worst = worst.max((est.derivative(w) - est.derivative(w + cfg.delta)).abs());
    }
    Ok(worst <= tol)
}

/// DSQ bound `(1 - a) / (2a - a²)` on `L' L₊ / L₋²` for DSQ shape parameter `a`.
pub fn dsq_bound(a: f64) -> Result<f64> {
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::domain(format!(
            "DSQ shape parameter must lie in (0, 1], got {a}"
        )));
    }
    Ok((1.0 - a) / (2.0 * a - a * a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn two_bit() -> QuantizerConfig {
        QuantizerConfig::uniform(2.0 / 3.0, -2, 1, 2).unwrap()
    }

    fn pei_quantizer(bits: u32) -> QuantizerConfig {
        QuantizerConfig::symmetric(bits, 2.0 / ((1u64 << bits) - 1) as f64).unwrap()
    }

    #[test]
    fn derivative_examples() {
        let q = two_bit();
        for w in [-5.0, 0.0, 0.3, 17.0] {
            assert_eq!(derivative(w, &EstimatorSpec::Ste, &q).unwrap(), 1.0);
        }
        let tanh = EstimatorSpec::Tanh { k: 2.0 };
        assert_abs_diff_eq!(derivative(0.0, &tanh, &q).unwrap(), 2.0, epsilon = 1e-15);
        let edge = derivative(1.0 / 3.0 - 1e-15, &tanh, &q).unwrap();
        let expect = 2.0 / (2.0f64 / 3.0).cosh().powi(2);
        assert_abs_diff_eq!(edge, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(expect, 1.320_728, epsilon = 1e-6);
        // Same value as the closed-form lower bound.
        assert_abs_diff_eq!(
            expect,
            tanh_constants(2.0, 2.0 / 3.0).l_minus,
            epsilon = 1e-15
        );
        assert!(matches!(
            derivative(f64::NAN, &tanh, &q),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn tanh_tail_decays_outside_range() {
        let q = two_bit();
        let est = EstimatorSpec::Tanh { k: 2.0 }.bind(q);
        // Continues the outermost bin's shape around its center u·Δ = 2/3.
        assert_abs_diff_eq!(est.derivative(2.0 / 3.0), 2.0, epsilon = 1e-15);
        let far = est.derivative(3.0);
        assert!(far > 0.0 && far < 0.01);
        assert!(est.derivative(1.5) > far);
    }

    #[test]
    fn pwl_and_mad() {
        let q = two_bit();
        let pwl = EstimatorSpec::Pwl {
            w_min: -1.0,
            w_max: 0.5,
        };
        assert_eq!(derivative(-1.0, &pwl, &q).unwrap(), 1.0);
        assert_eq!(derivative(0.6, &pwl, &q).unwrap(), 0.0);
        let mad = EstimatorSpec::mad_for(&q).unwrap();
        assert_eq!(derivative(0.1, &mad, &q).unwrap(), 1.0);
        assert_abs_diff_eq!(
            derivative(2.0 / 3.0 + 1.0, &mad, &q).unwrap(),
            0.25,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            derivative(-4.0 / 3.0 - 3.0, &mad, &q).unwrap(),
            1.0 / 16.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        assert!(EstimatorSpec::Tanh { k: 0.0 }.validate().is_err());
        assert!(EstimatorSpec::Pwl {
            w_min: 1.0,
            w_max: 1.0
        }
        .validate()
        .is_err());
        assert!(EstimatorSpec::Mad {
            range_lo: 0.0,
            range_hi: f64::NAN
        }
        .validate()
        .is_err());
    }

    #[test]
    fn cyclical_examples() {
        let q = two_bit();
        assert!(check_cyclical(&EstimatorSpec::Ste.bind(q), &q, 1e-12).unwrap());
        assert!(check_cyclical(&EstimatorSpec::Tanh { k: 2.0 }.bind(q), &q, 1e-12).unwrap());
        let mad = EstimatorSpec::mad_for(&q).unwrap();
        assert!(check_cyclical(&mad.bind(q), &q, 1e-12).unwrap());
        let skewed = |w: f64| 1.0 + w;
        assert!(!check_cyclical(&skewed, &q, 1e-6).unwrap());
        let wide = QuantizerConfig::symmetric(4, 0.1).unwrap();
        assert!(check_cyclical(&EstimatorSpec::Tanh { k: 6.0 }.bind(wide), &wide, 1e-12).unwrap());
    }

    #[test]
    fn cyclical_needs_two_finite_bins() {
        let bin = QuantizerConfig::binary(1.0).unwrap();
        assert!(check_cyclical(&EstimatorSpec::Ste.bind(bin), &bin, 1e-9).is_err());
        let narrow = QuantizerConfig::uniform(1.0, 0, 1, 1).unwrap();
        assert!(check_cyclical(&EstimatorSpec::Ste.bind(narrow), &narrow, 1e-9).is_err());
    }

    #[test]
    fn constants_table() {
        // k and Δ = 2 / (2^b - 1) per bit width.
        let cases = [
            (8u32, 8.0, 0.25),
            (4, 6.0, 2.66),
            (3, 4.0, 2.82),
            (2, 2.0, 1.77),
        ];
        for (bits, k, expect) in cases {
            let q = pei_quantizer(bits);
            let c = lipschitz_constants(&EstimatorSpec::Tanh { k }, &q).unwrap();
            assert!(
                (c.convexity_ratio() - expect).abs() <= 0.02,
                "k = {k}: {} vs {expect}",
                c.convexity_ratio()
            );
            assert!(0.0 < c.l_minus && c.l_minus <= c.l_plus);
        }
        assert_eq!(
            lipschitz_constants(&EstimatorSpec::Ste, &two_bit()).unwrap(),
            EstimatorConstants::STE
        );
        assert!(matches!(
            lipschitz_constants(
                &EstimatorSpec::Pwl {
                    w_min: -1.0,
                    w_max: 1.0
                },
                &two_bit()
            ),
            Err(Error::ConstantsUndefined(_))
        ));
    }

    #[test]
    fn closed_form_matches_sampling() {
        for k in [2.0, 4.0, 6.0, 8.0] {
            for q in [
                two_bit(),
                QuantizerConfig::symmetric(4, 2.0 / 15.0).unwrap(),
            ] {
                let (lo, hi) = q.representable_range().unwrap();
                let closed = tanh_constants(k, q.delta);
                let sampled = sampled_constants(
                    &EstimatorSpec::Tanh { k }.bind(q),
                    lo,
                    hi,
                    NUMERIC_GRID_POINTS,
                )
                .unwrap();
                let s = sampled.constants;
                assert_relative_eq!(s.l_minus, closed.l_minus, max_relative = 0.01);
                assert_relative_eq!(s.l_plus, closed.l_plus, max_relative = 0.01);
                assert_relative_eq!(s.l_prime, closed.l_prime, max_relative = 0.01);
                assert!(sampled.grid_step > 0.0);
            }
        }
    }

    #[test]
    fn mad_constants_are_ste_like_in_range() {
        let q = two_bit();
        let c = lipschitz_constants(&EstimatorSpec::mad_for(&q).unwrap(), &q).unwrap();
        assert_eq!((c.l_minus, c.l_plus, c.l_prime), (1.0, 1.0, 0.0));
    }

    #[test]
    fn bounds_and_lipschitz_hold_on_samples() {
        let q = two_bit();
        let (lo, hi) = q.representable_range().unwrap();
        for spec in [
            EstimatorSpec::Ste,
            EstimatorSpec::Tanh { k: 2.0 },
            EstimatorSpec::Tanh { k: 5.0 },
        ] {
            let c = lipschitz_constants(&spec, &q).unwrap();
            let est = spec.bind(q);
            let n = 100_000;
            let mut prev: Option<(f64, f64)> = None;
            for i in 0..n {
                let w = lo + (hi - lo) * (i as f64 + 0.37) / n as f64;
                let d = est.derivative(w);
                assert!(d >= c.l_minus * (1.0 - 1e-12) && d <= c.l_plus * (1.0 + 1e-12));
                // Pairs a varying distance apart.
                if let Some((pw, pd)) = prev {
                    if i % 10 == 0 {
                        assert!(
                            (d - pd).abs() <= c.l_prime * (w - pw).abs() * (1.0 + 1e-9) + 1e-15
                        );
                    }
                }
                if i % 7 == 0 {
                    prev = Some((w, d));
                }
            }
        }
    }

    #[test]
    fn dsq_interval() {
        assert_abs_diff_eq!(dsq_bound(0.25).unwrap(), 1.71, epsilon = 0.01);
        assert_abs_diff_eq!(dsq_bound(0.11).unwrap(), 4.28, epsilon = 0.01);
        assert_eq!(dsq_bound(1.0).unwrap(), 0.0);
        assert!(dsq_bound(0.0).is_err());
        assert!(dsq_bound(1.5).is_err());
    }

    #[test]
    fn dsq_bound_in_tanh_terms() {
        // With a = 1 - tanh(h): (1 - a) / (2a - a²) = tanh(h) cosh²(h).
        for h in [0.1, 0.5, 1.0, 2.0] {
            let a = 1.0 - f64::tanh(h);
            assert_relative_eq!(
                dsq_bound(a).unwrap(),
                h.tanh() * h.cosh().powi(2),
                max_relative = 1e-12
            );
        }
    }
}
