//! Lockstep training of an estimator net and its STE twin.
//!
//! The estimator net ("Q̂-net") trains with `∇f · Q̂'(w)`. Its twin starts
//! from `M(w)` with learning rate `α·η` (SGD, momentum) or from the same
//! weights and learning rate (Adam), and trains with the plain STE. Both
//! consume the same batch at every step. Each step records the alignment
//! error `E`, the two increment terms of the per-step bound, the bound's
//! slack, quantized-weight agreement and both losses.

use crate::error::{Error, Result};
use crate::estimator::{lipschitz_constants, EstimatorConstants, EstimatorSpec, Surrogate};
use crate::optim::{OptimizerKind, OptimizerState, Schedule};
use crate::quantizer::QuantizerConfig;
use crate::transform::WarpContext;

/// Read-only view of one parameter tensor. `quant` is `None` for tensors
/// that are never quantized (biases).
pub struct TensorView<'a> {
    pub values: &'a [f64],
    pub quant: Option<(&'a QuantizerConfig, &'a EstimatorSpec)>,
}

pub struct TensorViewMut<'a> {
    pub values: &'a mut [f64],
    pub estimator: Option<&'a mut EstimatorSpec>,
}

/// Loss and per-tensor gradients. For quantized tensors the gradient is
/// taken with respect to the quantized value `Q(w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

pub trait Model: Clone {
    type Batch;
    fn tensors(&self) -> Vec<TensorView<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>>;
    fn evaluate(&self, batch: &Self::Batch) -> Result<Evaluation>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BisimConfig {
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    /// Apply `M` to the twin's initial weights. `false` is the ablation that
    /// keeps the `α·η` learning rate but starts the twin from identical weights.
    pub adjusted: bool,
    /// Fraction of steps the Q̂-net trains alone before the twin is spawned.
    pub handoff_fraction: f64,
}

impl BisimConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if !(0.0..1.0).contains(&self.handoff_fraction) {
            return Err(Error::config(format!(
                "handoff fraction must lie in [0, 1), got {}",
                self.handoff_fraction
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.schedule.total_steps
    }

    pub fn handoff_step(&self) -> u64 {
        (self.handoff_fraction * self.steps() as f64).floor() as u64
    }

    fn is_adaptive(&self) -> bool {
        matches!(self.optimizer, OptimizerKind::Adam { .. })
    }
}

/// How one quantized tensor is paired.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorPlan {
    /// Warp used for the twin's weights and for `E`. Identity for PWL.
    pub warp: WarpContext,
    /// Learning-rate factor on the twin (1 under Adam).
    pub lr_factor: f64,
    /// Estimator the twin trains with: STE, or the warped PWL clip.
    pub twin_estimator: EstimatorSpec,
    /// `None` when the estimator has no positive lower bound.
    pub constants: Option<EstimatorConstants>,
    pub range: Option<(f64, f64)>,
    /// Divisor for normalized `E`: representable-range length, `2Δ` for binary.
    pub scale: f64,
}

pub fn plan_tensor(
    cfg: &BisimConfig,
    q: &QuantizerConfig,
    spec: &EstimatorSpec,
) -> Result<TensorPlan> {
    let (warp, twin_estimator) = if spec.is_positive() {
        (WarpContext::new(*spec, *q)?, EstimatorSpec::Ste)
    } else if let EstimatorSpec::Pwl { w_min, w_max } = *spec {
        // Positive part is the STE, so the warp is the identity and the
        // twin keeps the clip with warped (unchanged) bounds.
        let id = WarpContext::identity(*q)?;
        let (lo, hi) = crate::transform::warp_pwl_bounds(w_min, w_max, &id)?;
        (
            id,
            EstimatorSpec::Pwl {
                w_min: lo,
                w_max: hi,
            },
        )
    } else {
        return Err(Error::config(format!(
            "the {} estimator is not positive and has no PWL route",
            spec.name()
        )));
    };
    let lr_factor = if cfg.is_adaptive() { 1.0 } else { warp.alpha };
    let constants = lipschitz_constants(spec, q).ok();
    let (range, scale) = match q.representable_range() {
        Ok((lo, hi)) => (Some((lo, hi)), hi - lo),
        Err(_) => (None, 2.0 * q.delta),
    };
    Ok(TensorPlan {
        warp,
        lr_factor,
        twin_estimator,
        constants,
        range,
        scale,
    })
}

/// Both nets with their optimizer states, ready for lockstep training.
#[derive(Debug, Clone)]
pub struct Pair<M> {
    pub qhat: M,
    pub ste: M,
    pub qhat_opt: OptimizerState,
    pub ste_opt: OptimizerState,
    /// One entry per tensor; `None` for unquantized tensors.
    pub plans: Vec<Option<TensorPlan>>,
}

fn tensor_sizes<M: Model>(model: &M) -> Vec<usize> {
    model.tensors().iter().map(|t| t.values.len()).collect()
}

fn plans_for<M: Model>(model: &M, cfg: &BisimConfig) -> Result<Vec<Option<TensorPlan>>> {
    model
        .tensors()
        .iter()
        .map(|t| t.quant.map(|(q, s)| plan_tensor(cfg, q, s)).transpose())
        .collect()
}

/// Pair from a freshly initialized Q̂-net (no shared warmup).
pub fn build_pair<M: Model>(qhat: M, cfg: &BisimConfig) -> Result<Pair<M>> {
    cfg.validate()?;
    let opt = OptimizerState::new(cfg.optimizer, &tensor_sizes(&qhat))?;
    warmup_handoff(qhat, opt, cfg)
}

/// Spawns the twin from a (possibly pre-trained) Q̂-net and its optimizer
/// state: warps or copies the weights, rescales the optimizer buffers by
/// `1/Q̂'(w)`, and switches the twin's estimator.
pub fn warmup_handoff<M: Model>(
    qhat: M,
    qhat_opt: OptimizerState,
    cfg: &BisimConfig,
) -> Result<Pair<M>> {
    cfg.validate()?;
    let plans = plans_for(&qhat, cfg)?;
    let mut factors = Vec::with_capacity(plans.len());
    for (view, plan) in qhat.tensors().iter().zip(&plans) {
        let f = match (view.quant, plan) {
            (Some((q, s)), Some(p)) if p.twin_estimator.is_ste() && !s.is_ste() => view
                .values
                .iter()
                .map(|&w| {
                    let d = s.bind(*q).derivative_checked(w)?;
                    if d > 0.0 {
                        Ok(d)
                    } else {
                        Err(Error::NonPositiveEstimator { at: w })
                    }
                })
                .collect::<Result<Vec<_>>>()?,
            _ => vec![1.0; view.values.len()],
        };
        factors.push(f);
    }
    let ste_opt = qhat_opt.remap_for_ste(&factors)?;
    let mut ste = qhat.clone();
    let warp_weights = cfg.adjusted && !cfg.is_adaptive();
    for (view, plan) in ste.tensors_mut().into_iter().zip(&plans) {
        if let Some(p) = plan {
            if warp_weights {
                for w in view.values.iter_mut() {
                    *w = p.warp.warp(*w)?;
                }
            }
            if let Some(e) = view.estimator {
                *e = p.twin_estimator;
            }
        }
    }
    Ok(Pair {
        qhat,
        ste,
        qhat_opt,
        ste_opt,
        plans,
    })
}

/// Per-weight alignment error: `|M(w_Q̂) - w_STE|` for SGD and momentum,
/// `|w_Q̂ - w_STE|` for Adam.
pub fn alignment_error(
    w_qhat: &[f64],
    w_ste: &[f64],
    ctx: &WarpContext,
    optimizer: &OptimizerKind,
) -> Result<Vec<f64>> {
    if w_qhat.len() != w_ste.len() {
        return Err(Error::Shape("weight vectors differ in length".into()));
    }
    let adaptive = matches!(optimizer, OptimizerKind::Adam { .. });
    w_qhat
        .iter()
        .zip(w_ste)
        .map(|(&a, &b)| {
            Ok(if adaptive {
                (a - b).abs()
            } else {
                (ctx.warp(a)? - b).abs()
            })
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Fraction of quantized weights whose quantized values coincide.
pub fn quantized_agreement<M: Model>(a: &M, b: &M) -> Result<f64> {
    let (ta, tb) = (a.tensors(), b.tensors());
    if ta.len() != tb.len() {
        return Err(Error::Shape("models have different tensor counts".into()));
    }
    let (mut same, mut total) = (0usize, 0usize);
    for (x, y) in ta.iter().zip(&tb) {
        let (Some((qa, _)), Some((qb, _))) = (x.quant, y.quant) else {
            continue;
        };
        if qa != qb || x.values.len() != y.values.len() {
            return Err(Error::Shape(
                "quantized tensors differ in shape or quantizer".into(),
            ));
        }
        for (&wa, &wb) in x.values.iter().zip(y.values) {
            total += 1;
            if qa.quantize(wa)? == qb.quantize(wb)? {
                same += 1;
            }
        }
    }
    Ok(if total == 0 {
        1.0
    } else {
        same as f64 / total as f64
    })
}

/// Slack of the per-step SGD bound for one weight:
/// `E_cur + η·α·|∇f_Q̂ - ∇f_STE| + α·(L'/2)·(η·L₊·∇f_Q̂/L₋)² - E_next`.
///
/// The second-order term carries `α` because `M'' = -α Q̂''/Q̂'²`, so the
/// Lipschitz constant of `M'` is `α·L'/L₋²`.
pub fn sgd_bound_slack(
    e_next: f64,
    e_cur: f64,
    grad_qhat: f64,
    grad_ste: f64,
    lr: f64,
    alpha: f64,
    c: &EstimatorConstants,
) -> f64 {
    let (grad_term, conv_term) = sgd_bound_terms(grad_qhat, grad_ste, lr, alpha, c);
    e_cur + grad_term + conv_term - e_next
}

fn sgd_bound_terms(
    grad_qhat: f64,
    grad_ste: f64,
    lr: f64,
    alpha: f64,
    c: &EstimatorConstants,
) -> (f64, f64) {
    let grad_term = lr * alpha * (grad_qhat - grad_ste).abs();
    let conv_term = if c.l_prime == 0.0 {
        0.0
    } else {
        let step = lr * c.l_plus * grad_qhat / c.l_minus;
        alpha * 0.5 * c.l_prime * step * step
    };
    (grad_term, conv_term)
}

/// One row of a lockstep trace. `E` and agreement are measured after the
/// update at step `t`; losses come from the forward pass of step `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: u64,
    pub e_mean: f64,
    pub e_norm_mean: f64,
    /// Mean over quantized weights of the gradient-error increment.
    pub grad_err: f64,
    /// Mean over quantized weights of the second-order increment.
    pub conv_err: f64,
    /// Smallest per-weight bound slack over weights where the bound applies.
    pub slack_min: f64,
    pub agreement: f64,
    pub loss_qhat: f64,
    pub loss_ste: f64,
    pub lr: f64,
}

impl TraceRow {
    pub fn is_finite(&self) -> bool {
        [
            self.e_mean,
            self.e_norm_mean,
            self.grad_err,
            self.conv_err,
            self.slack_min,
            self.agreement,
            self.loss_qhat,
            self.loss_ste,
            self.lr,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct BisimRun<M> {
    pub rows: Vec<TraceRow>,
    /// Reason training stopped early, if it did.
    pub diverged: Option<String>,
    pub handoff_step: u64,
    /// Mean `E` right after the twin was spawned.
    pub e0: f64,
    /// Number of (step, weight) pairs the bound was evaluated on.
    pub bound_checks: u64,
    /// Largest `|m|` seen on the Q̂-net (momentum runs).
    pub g_plus: f64,
    pub plans: Vec<Option<TensorPlan>>,
    pub qhat: M,
    pub ste: M,
}

impl<M> BisimRun<M> {
    pub fn final_row(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

struct StepOutcome {
    loss_q: f64,
    loss_s: f64,
    dq: Vec<Vec<f64>>,
    ds: Vec<Vec<f64>>,
    raw_q: Vec<Vec<f64>>,
    raw_s: Vec<Vec<f64>>,
}

fn is_diverged(e: &Error) -> bool {
    matches!(e, Error::Diverged(_))
}

fn assemble(model_grads: &[Vec<f64>], views: &[TensorView<'_>]) -> Result<Vec<Vec<f64>>> {
    if model_grads.len() != views.len() {
        return Err(Error::Shape(
            "gradient count does not match tensor count".into(),
        ));
    }
    model_grads
        .iter()
        .zip(views)
        .map(|(g, v)| match v.quant {
            Some((q, s)) => g
                .iter()
                .zip(v.values)
                .map(|(&gi, &w)| Ok(gi * crate::estimator::derivative(w, s, q)?))
                .collect(),
            None => Ok(g.clone()),
        })
        .collect()
}

fn apply<M: Model>(model: &mut M, deltas: &[Vec<f64>]) -> Result<()> {
    for (view, d) in model.tensors_mut().into_iter().zip(deltas) {
        for (w, &dw) in view.values.iter_mut().zip(d) {
            *w += dw;
            if !w.is_finite() {
                return Err(Error::Diverged("non-finite weight after update".into()));
            }
        }
    }
    Ok(())
}

fn alignment_all<M: Model>(
    qhat: &M,
    ste: &M,
    plans: &[Option<TensorPlan>],
    adaptive: bool,
) -> Result<Vec<Vec<f64>>> {
    let (tq, ts) = (qhat.tensors(), ste.tensors());
    tq.iter()
        .zip(&ts)
        .zip(plans)
        .map(|((a, b), p)| match p {
            Some(p) => a
                .values
                .iter()
                .zip(b.values)
                .map(|(&x, &y)| {
                    Ok(if adaptive {
                        (x - y).abs()
                    } else {
                        (p.warp.warp(x)? - y).abs()
                    })
                })
                .collect(),
            None => Ok(Vec::new()),
        })
        .collect()
}

fn in_range(range: Option<(f64, f64)>, w: f64) -> bool {
    range.is_some_and(|(lo, hi)| w >= lo && w <= hi)
}

/// Trains `model` alone for the hand-off period, spawns the twin, then
/// trains both in lockstep. `next_batch(t)` is called exactly once per step.
pub fn lockstep_train<M, F>(model: M, cfg: &BisimConfig, mut next_batch: F) -> Result<BisimRun<M>>
where
    M: Model,
    F: FnMut(u64) -> Result<M::Batch>,
{
    cfg.validate()?;
    let steps = cfg.steps();
    let handoff = cfg.handoff_step();
    let adaptive = cfg.is_adaptive();
    let mut rows = Vec::with_capacity(steps as usize);
    let mut qhat = model;
    let mut qhat_opt = OptimizerState::new(cfg.optimizer, &tensor_sizes(&qhat))?;

    let placeholder_plans = plans_for(&qhat, cfg)?;
    let stopped =
        |rows: Vec<TraceRow>, reason: String, qhat: M, ste: M, plans, handoff_step| BisimRun {
            rows,
            diverged: Some(reason),
            handoff_step,
            e0: 0.0,
            bound_checks: 0,
            g_plus: 0.0,
            plans,
            qhat,
            ste,
        };

    for t in 0..handoff {
        let batch = next_batch(t)?;
        let lr = cfg.schedule.lr_at(t)?;
        let result = (|| -> Result<f64> {
            let eval = qhat.evaluate(&batch)?;
            let grads = assemble(&eval.grads, &qhat.tensors())?;
            let deltas = qhat_opt.step(&grads, lr)?;
            apply(&mut qhat, &deltas)?;
            Ok(eval.loss)
        })();
        match result {
            Ok(loss) => rows.push(TraceRow {
                t,
                e_mean: 0.0,
                e_norm_mean: 0.0,
                grad_err: 0.0,
                conv_err: 0.0,
                slack_min: 0.0,
                agreement: 1.0,
                loss_qhat: loss,
                loss_ste: loss,
                lr,
            }),
            Err(e) if is_diverged(&e) => {
                let ste = qhat.clone();
                return Ok(stopped(
                    rows,
                    e.to_string(),
                    qhat,
                    ste,
                    placeholder_plans,
                    handoff,
                ));
            }
            Err(e) => return Err(e),
        }
    }

    let Pair {
        mut qhat,
        mut ste,
        mut qhat_opt,
        mut ste_opt,
        plans,
    } = match warmup_handoff(qhat.clone(), qhat_opt, cfg) {
        Ok(pair) => pair,
        // Q̂' underflows to zero once a weight has run far outside the grid.
        Err(Error::NonPositiveEstimator { at }) => {
            let reason = format!("estimator underflow at hand-off (w = {at:e})");
            let ste = qhat.clone();
            return Ok(stopped(rows, reason, qhat, ste, placeholder_plans, handoff));
        }
        Err(e) => return Err(e),
    };

    let sizes = tensor_sizes(&qhat);
    let mut shadow = ste_opt.clone();
    let mut drift_opt = match cfg.optimizer {
        OptimizerKind::Momentum { beta } => Some(OptimizerState::new(
            OptimizerKind::Momentum { beta },
            &sizes,
        )?),
        _ => None,
    };
    let mut e_cur = alignment_all(&qhat, &ste, &plans, adaptive)?;
    let flat_mean = |e: &[Vec<f64>], scaled: bool| -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for (v, p) in e.iter().zip(&plans) {
            if let Some(p) = p {
                for &x in v {
                    sum += if scaled { x / p.scale } else { x };
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    };
    let e0 = flat_mean(&e_cur, false);
    let mut g_plus: f64 = 0.0;
    let mut bound_checks = 0u64;

    for t in handoff..steps {
        let batch = next_batch(t)?;
        let lr = cfg.schedule.lr_at(t)?;
        let step = (|| -> Result<StepOutcome> {
            let eq = qhat.evaluate(&batch)?;
            let es = ste.evaluate(&batch)?;
            let q_grads = assemble(&eq.grads, &qhat.tensors())?;
            let s_grads = assemble(&es.grads, &ste.tensors())?;
            let dq = qhat_opt.step(&q_grads, lr)?;
            let mut ds = ste_opt.step(&s_grads, lr)?;
            for (d, p) in ds.iter_mut().zip(&plans) {
                if let Some(p) = p {
                    d.iter_mut().for_each(|x| *x *= p.lr_factor);
                }
            }
            Ok(StepOutcome {
                loss_q: eq.loss,
                loss_s: es.loss,
                dq,
                ds,
                raw_q: eq.grads,
                raw_s: es.grads,
            })
        })();
        let StepOutcome {
            loss_q,
            loss_s,
            dq,
            ds,
            raw_q,
            raw_s,
        } = match step {
            Ok(v) => v,
            Err(e) if is_diverged(&e) => {
                let mut run = stopped(rows, e.to_string(), qhat, ste, plans, handoff);
                run.e0 = e0;
                return Ok(run);
            }
            Err(e) => return Err(e),
        };

        // Bound bookkeeping that needs pre-update weights.
        let pre_q: Vec<Vec<f64>> = qhat.tensors().iter().map(|v| v.values.to_vec()).collect();
        let pre_factor: Vec<Option<Vec<f64>>> = qhat
            .tensors()
            .iter()
            .map(|v| {
                v.quant
                    .map(|(q, s)| v.values.iter().map(|&w| s.bind(*q).derivative(w)).collect())
            })
            .collect();
        let shadow_delta = if adaptive {
            let s_views = ste.tensors();
            let fed: Vec<Vec<f64>> = raw_q
                .iter()
                .zip(&s_views)
                .map(|(g, v)| match v.quant {
                    Some((q, s)) => g
                        .iter()
                        .zip(v.values)
                        .map(|(&gi, &w)| gi * s.bind(*q).derivative(w))
                        .collect(),
                    None => g.clone(),
                })
                .collect();
            drop(s_views);
            Some(shadow.step(&fed, lr)?)
        } else {
            None
        };
        if let Some(d_opt) = drift_opt.as_mut() {
            let diff: Vec<Vec<f64>> = raw_q
                .iter()
                .zip(&raw_s)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect();
            d_opt.step(&diff, 1.0)?;
            for (m, p) in qhat_opt.m.iter().zip(&plans) {
                if p.is_some() {
                    g_plus = m.iter().fold(g_plus, |acc, x| acc.max(x.abs()));
                }
            }
        }

        let applied = apply(&mut qhat, &dq).and_then(|_| apply(&mut ste, &ds));
        if let Err(e) = applied {
            if is_diverged(&e) {
                let mut run = stopped(rows, e.to_string(), qhat, ste, plans, handoff);
                run.e0 = e0;
                return Ok(run);
            }
            return Err(e);
        }
        let e_next = alignment_all(&qhat, &ste, &plans, adaptive)?;

        let (mut grad_sum, mut conv_sum, mut n_weights) = (0.0, 0.0, 0usize);
        let mut slack_min = f64::INFINITY;
        for (ti, plan) in plans.iter().enumerate() {
            let Some(p) = plan else { continue };
            for i in 0..e_next[ti].len() {
                n_weights += 1;
                let (grad_term, conv_term, checkable) = match cfg.optimizer {
                    OptimizerKind::Adam { .. } => {
                        let sh = shadow_delta.as_ref().expect("shadow")[ti][i];
                        ((sh - ds[ti][i]).abs(), (dq[ti][i] - sh).abs(), true)
                    }
                    OptimizerKind::Sgd => match &p.constants {
                        Some(c) => {
                            let (g, v) =
                                sgd_bound_terms(raw_q[ti][i], raw_s[ti][i], lr, p.lr_factor, c);
                            let w_next = pre_q[ti][i] + dq[ti][i];
                            (
                                g,
                                v,
                                in_range(p.range, pre_q[ti][i]) && in_range(p.range, w_next),
                            )
                        }
                        None => (
                            lr * p.lr_factor * (raw_q[ti][i] - raw_s[ti][i]).abs(),
                            0.0,
                            false,
                        ),
                    },
                    OptimizerKind::Momentum { .. } => {
                        let d = drift_opt.as_ref().expect("drift").m[ti][i];
                        let alpha = p.lr_factor;
                        let grad_term = alpha * lr * d.abs();
                        let m_q = qhat_opt.m[ti][i];
                        let m_s = ste_opt.m[ti][i];
                        let factor = pre_factor[ti].as_ref().expect("quantized")[i];
                        let drift = m_q / factor - m_s - d;
                        match &p.constants {
                            Some(c) => {
                                let step = lr * g_plus / c.l_minus;
                                let conv = alpha * 0.5 * c.l_prime * step * step
                                    + alpha * lr * drift.abs();
                                let w_next = pre_q[ti][i] + dq[ti][i];
                                (
                                    grad_term,
                                    conv,
                                    in_range(p.range, pre_q[ti][i]) && in_range(p.range, w_next),
                                )
                            }
                            None => (grad_term, alpha * lr * drift.abs(), false),
                        }
                    }
                };
                grad_sum += grad_term;
                conv_sum += conv_term;
                if checkable && p.twin_estimator.is_ste() {
                    bound_checks += 1;
                    slack_min = slack_min.min(e_cur[ti][i] + grad_term + conv_term - e_next[ti][i]);
                }
            }
        }
        let denom = n_weights.max(1) as f64;
        let row = TraceRow {
            t,
            e_mean: flat_mean(&e_next, false),
            e_norm_mean: flat_mean(&e_next, true),
            grad_err: grad_sum / denom,
            conv_err: conv_sum / denom,
            slack_min: if slack_min.is_finite() {
                slack_min
            } else {
                0.0
            },
            agreement: quantized_agreement(&qhat, &ste)?,
            loss_qhat: loss_q,
            loss_ste: loss_s,
            lr,
        };
        rows.push(row);
        e_cur = e_next;
    }

    Ok(BisimRun {
        rows,
        diverged: None,
        handoff_step: handoff,
        e0,
        bound_checks,
        g_plus,
        plans,
        qhat,
        ste,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub eta: f64,
    pub final_e: f64,
    /// Lowest agreement seen during the run; below 1 the run is flagged.
    pub min_agreement: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Least-squares slope of `ln E` against `ln η`; `None` when any final
    /// `E` is zero.
    pub slope: Option<f64>,
}

/// Runs `run(η)` for every learning rate and fits the log-log slope of
/// final mean `E` against `η`.
pub fn eta_sweep<M, R>(etas: &[f64], mut run: R) -> Result<SweepResult>
where
    R: FnMut(f64) -> Result<BisimRun<M>>,
{
    if etas.len() < 4 {
        return Err(Error::config(format!(
            "need at least 4 learning rates, got {}",
            etas.len()
        )));
    }
    if etas.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::config("learning rates must be positive"));
    }
    let (lo, hi) = etas.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| {
        (lo.min(e), hi.max(e))
    });
    if (hi / lo).log10() < 1.5 {
        return Err(Error::config(
            "learning rates must span at least 1.5 decades",
        ));
    }
    let mut points = Vec::with_capacity(etas.len());
    for &eta in etas {
        let r = run(eta)?;
        if let Some(reason) = &r.diverged {
            return Err(Error::Diverged(format!("eta {eta}: {reason}")));
        }
        let final_e = r.final_row().map_or(r.e0, |row| row.e_mean);
        let min_agreement = r.rows.iter().map(|row| row.agreement).fold(1.0, f64::min);
        points.push(SweepPoint {
            eta,
            final_e,
            min_agreement,
            flagged: min_agreement < 1.0,
        });
    }
    let slope = if points.iter().any(|p| !(p.final_e > 0.0)) {
        None
    } else {
        let xs: Vec<f64> = points.iter().map(|p| p.eta.ln()).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.final_e.ln()).collect();
        Some(least_squares_slope(&xs, &ys))
    };
    Ok(SweepResult { points, slope })
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}
