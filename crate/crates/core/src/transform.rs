//! Learning-rate factor α and the weight warp `M`.
//!
//! For a cyclical, positive estimator on a uniform quantizer
//!
//! ```text
//! α    = Δ / ∫_{w₋}^{w₊} ds / Q̂'(s)
//! M(w) = w_b + α ∫_{w_b}^{w} ds / Q̂'(s)
//! ```
//!
//! where `w₋, w₊` are the edges of any finite bin and `w_b` is a boundary
//! point. `M` fixes every boundary point and maps each bin onto itself. For
//! binary quantizers α is 1 and the single boundary point is 0.
//!
//! STE and tanh have closed forms; everything else goes through adaptive
//! Simpson quadrature split at the estimator's kinks.

use crate::error::{ensure_finite, Error, Result};
use crate::estimator::{Estimator, EstimatorSpec, Surrogate};
use crate::quantizer::QuantizerConfig;

pub const DEFAULT_QUAD_TOL: f64 = 1e-10;

const MAX_DEPTH: u32 = 48;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WarpMethod {
    ClosedForm,
    Quadrature { tol: f64 },
}

/// Immutable α/M evaluator for one estimator on one quantizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpContext {
    pub estimator: Estimator,
    pub alpha: f64,
    pub method: WarpMethod,
}

impl WarpContext {
    /// Closed form for STE and tanh, quadrature at [`DEFAULT_QUAD_TOL`] otherwise.
    pub fn new(spec: EstimatorSpec, cfg: QuantizerConfig) -> Result<Self> {
        let method = match spec {
            EstimatorSpec::Ste | EstimatorSpec::Tanh { .. } => WarpMethod::ClosedForm,
            _ => WarpMethod::Quadrature {
                tol: DEFAULT_QUAD_TOL,
            },
        };
        Self::with_method(spec, cfg, method)
    }

    pub fn with_method(
        spec: EstimatorSpec,
        cfg: QuantizerConfig,
        method: WarpMethod,
    ) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        let estimator = spec.bind(cfg);
        if let WarpMethod::Quadrature { tol } = method {
            if !(tol > 0.0) {
                return Err(Error::config(format!(
                    "quadrature tolerance must be positive, got {tol}"
                )));
            }
        }
        if let EstimatorSpec::Pwl { w_min, .. } = spec {
            // Zero outside its clip range: no α or M exist.
            let probe = if w_min.is_finite() { w_min - 1.0 } else { 0.0 };
            return Err(Error::NonPositiveEstimator { at: probe });
        }
        let alpha = match method {
            WarpMethod::ClosedForm => closed_form_alpha(&estimator)?,
            WarpMethod::Quadrature { tol } => quadrature_alpha(&estimator, tol)?,
        };
        Ok(Self {
            estimator,
            alpha,
            method,
        })
    }

    pub fn identity(cfg: QuantizerConfig) -> Result<Self> {
        Self::new(EstimatorSpec::Ste, cfg)
    }

    pub fn cfg(&self) -> &QuantizerConfig {
        &self.estimator.cfg
    }

    /// `M(w)`. Outside the representable range the outermost bin's integrand
    /// is continued, so `M` stays continuous and increasing.
    pub fn warp(&self, w: f64) -> Result<f64> {
        ensure_finite(w, "weight")?;
        let w_b = anchor_boundary(self.cfg(), w);
        if self.estimator.spec.is_ste() {
            return Ok(w);
        }
        let integral = match self.method {
            WarpMethod::ClosedForm => closed_form_integral(&self.estimator, w_b, w)?,
            WarpMethod::Quadrature { tol } => signed_integral(&self.estimator, w_b, w, tol)?,
        };
        Ok(w_b + self.alpha * integral)
    }

    /// `M'(w) = α / Q̂'(w)`.
    pub fn warp_derivative(&self, w: f64) -> Result<f64> {
        let d = self.estimator.derivative_checked(w)?;
        if !(d > 0.0) {
            return Err(Error::NonPositiveEstimator { at: w });
        }
        Ok(self.alpha / d)
    }

    /// α measured on the finite bin with the given code. Equal across bins
    /// for cyclical estimators; used to test that claim.
    pub fn alpha_for_bin(&self, code: i64, tol: f64) -> Result<f64> {
        let (lo, hi) = self
            .cfg()
            .bin_edges(code)
            .ok_or_else(|| Error::domain(format!("code {code} has no finite bin")))?;
        let integral = match self.method {
            WarpMethod::ClosedForm => closed_form_integral(&self.estimator, lo, hi)?,
            WarpMethod::Quadrature { .. } => integrate_reciprocal(&self.estimator, lo, hi, tol)?,
        };
        Ok(self.cfg().delta / integral)
    }
}

/// Boundary point used as the base of `M(w)`: the nearest one at or below `w`,
/// or the lowest one when `w` lies below every boundary point.
fn anchor_boundary(cfg: &QuantizerConfig, w: f64) -> f64 {
    if cfg.binary {
        return 0.0;
    }
    let idx = (w / cfg.delta - 0.5).floor();
    let idx = idx.clamp(cfg.l as f64, (cfg.u - 1) as f64);
    (idx + 0.5) * cfg.delta
}

/// α for `spec` on `cfg`: 1 for binary quantizers and STE, closed form for
/// tanh, quadrature over one finite bin otherwise.
pub fn alpha(spec: &EstimatorSpec, cfg: &QuantizerConfig, tol: f64) -> Result<f64> {
    if cfg.binary {
        return Ok(1.0);
    }
    let method = match spec {
        EstimatorSpec::Ste | EstimatorSpec::Tanh { .. } => WarpMethod::ClosedForm,
        _ => WarpMethod::Quadrature { tol },
    };
    Ok(WarpContext::with_method(*spec, *cfg, method)?.alpha)
}

pub fn warp(w: f64, ctx: &WarpContext) -> Result<f64> {
    ctx.warp(w)
}

/// Clip bounds `(M(w_min), M(w_max))` for the PWL estimator that replaces the
/// STE when the original estimator is zero outside `[w_min, w_max]`.
pub fn warp_pwl_bounds(w_min: f64, w_max: f64, ctx: &WarpContext) -> Result<(f64, f64)> {
    if !(w_min < w_max) {
        return Err(Error::domain(format!(
            "PWL bounds need w_min < w_max, got [{w_min}, {w_max}]"
        )));
    }
    Ok((ctx.warp(w_min)?, ctx.warp(w_max)?))
}

fn closed_form_alpha(est: &Estimator) -> Result<f64> {
    let cfg = &est.cfg;
    if cfg.binary {
        return Ok(1.0);
    }
    match est.spec {
        EstimatorSpec::Ste => Ok(1.0),
        EstimatorSpec::Tanh { k } => {
            let d = cfg.delta;
            Ok(d * k / (0.5 * d + (k * d).sinh() / (2.0 * k)))
        }
        _ => Err(Error::domain(format!(
            "no closed form for the {} estimator",
            est.spec.name()
        ))),
    }
}

fn quadrature_alpha(est: &Estimator, tol: f64) -> Result<f64> {
    let cfg = &est.cfg;
    if cfg.binary {
        return Ok(1.0);
    }
    let mut codes = cfg.finite_bin_codes();
    let code = if codes.contains(&0) {
        Some(0)
    } else {
        codes.next()
    };
    match code {
        Some(c) => {
            let (lo, hi) = cfg.bin_edges(c).expect("finite bin");
            Ok(cfg.delta / integrate_reciprocal(est, lo, hi, tol)?)
        }
        None => {
            // No finite bin: the two half bins of the representable range make one.
            let (lo, hi) = cfg.representable_range()?;
            Ok((hi - lo) / integrate_reciprocal(est, lo, hi, tol)?)
        }
    }
}

/// Antiderivative-based `∫_a^b ds / Q̂'(s)` for STE and tanh, valid when
/// `[a, b]` does not straddle a boundary point.
fn closed_form_integral(est: &Estimator, a: f64, b: f64) -> Result<f64> {
    match est.spec {
        EstimatorSpec::Ste => Ok(b - a),
        EstimatorSpec::Tanh { k } => {
            let mid = 0.5 * (a + b);
            let center = est.cfg.bin_center_unchecked(mid);
            // 1/Q̂'(s) = cosh²(k(s - c)) / k integrates to
            // ((s - c)/2 + sinh(2k(s - c)) / (4k)) / k.
            let anti = |s: f64| {
                let x = s - center;
                (0.5 * x + (2.0 * k * x).sinh() / (4.0 * k)) / k
            };
            Ok(anti(b) - anti(a))
        }
        _ => Err(Error::domain(format!(
            "no closed form for the {} estimator",
            est.spec.name()
        ))),
    }
}

/// `∫_a^b ds / Q̂'(s)` with absolute error at most `tol`, by adaptive Simpson
/// split at the estimator's kinks. Requires `a <= b`.
pub fn integrate_reciprocal(est: &Estimator, a: f64, b: f64, tol: f64) -> Result<f64> {
    ensure_finite(a, "lower limit")?;
    ensure_finite(b, "upper limit")?;
    if a > b {
        return Err(Error::domain(format!(
            "integration limits must satisfy a <= b, got [{a}, {b}]"
        )));
    }
    if a == b {
        return Ok(0.0);
    }
    if est.spec.is_ste() {
        return Ok(b - a);
    }
    reciprocal_pieces(est, a, b, tol)
}

/// Signed version of [`integrate_reciprocal`].
pub(crate) fn signed_integral(est: &Estimator, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a <= b {
        integrate_reciprocal(est, a, b, tol)
    } else {
        Ok(-integrate_reciprocal(est, b, a, tol)?)
    }
}

fn reciprocal_pieces(est: &impl Surrogate, a: f64, b: f64, tol: f64) -> Result<f64> {
    let mut cuts: Vec<f64> = est
        .breakpoints()
        .into_iter()
        .filter(|&p| p > a && p < b)
        .collect();
    cuts.sort_by(f64::total_cmp);
    let mut edges = Vec::with_capacity(cuts.len() + 2);
    edges.push(a);
    edges.extend(cuts);
    edges.push(b);
    let piece_tol = tol / (edges.len() - 1) as f64;
    let mut total = 0.0;
    for pair in edges.windows(2) {
        total += adaptive_simpson(
            |s| {
                let d = est.derivative(s);
                if d > 0.0 {
                    Ok(1.0 / d)
                } else {
                    Err(Error::NonPositiveEstimator { at: s })
                }
            },
            pair[0],
            pair[1],
            piece_tol,
        )?;
    }
    Ok(total)
}

/// Adaptive Simpson with Richardson correction. `f` may fail, which aborts
/// the whole integral.
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, tol: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let fa = f(a)?;
    let fb = f(b)?;
    let m = 0.5 * (a + b);
    let fm = f(m)?;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(&f, a, b, fa, fm, fb, whole, tol, MAX_DEPTH)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm)?;
    let frm = f(rm)?;
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    Ok(
        simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
            + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?,
    )
}
