//! SGD, momentum and Adam update rules plus the learning-rate schedule.
//!
//! All rules return the weight *delta* for a gradient that the caller has
//! already assembled (`∇f · Q̂'(w)` for an estimator net, plain `∇f` for an
//! STE net).

use crate::error::{Error, Result};

pub const DEFAULT_ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    Constant,
    CosineWithWarmup,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub kind: ScheduleKind,
}

impl Schedule {
    pub fn constant(base_lr: f64, total_steps: u64) -> Result<Self> {
        let s = Self {
            base_lr,
            warmup_fraction: 0.0,
            total_steps,
            kind: ScheduleKind::Constant,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn cosine(base_lr: f64, warmup_fraction: f64, total_steps: u64) -> Result<Self> {
        let s = Self {
            base_lr,
            warmup_fraction,
            total_steps,
            kind: ScheduleKind::CosineWithWarmup,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config(format!(
                "warmup fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).floor() as u64
    }

    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t >= self.total_steps {
            return Err(Error::domain(format!(
                "step {t} is past the end of a {}-step schedule",
                self.total_steps
            )));
        }
        let eta = self.base_lr;
        match self.kind {
            ScheduleKind::Constant => Ok(eta),
            ScheduleKind::CosineWithWarmup => {
                let warm = self.warmup_steps();
                if t < warm {
                    return Ok(eta * (t + 1) as f64 / warm as f64);
                }
                let progress = (t - warm) as f64 / (self.total_steps - warm) as f64;
                Ok(eta * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
            }
        }
    }
}

pub fn lr_at(t: u64, sched: &Schedule) -> Result<f64> {
    sched.lr_at(t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(beta1: f64, beta2: f64) -> Self {
        OptimizerKind::Adam {
            beta1,
            beta2,
            eps: DEFAULT_ADAM_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, b: f64| {
            if (0.0..1.0).contains(&b) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in [0, 1), got {b}")))
            }
        };
        match *self {
            OptimizerKind::Sgd => Ok(()),
            OptimizerKind::Momentum { beta } => unit("beta", beta),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                if eps >= 0.0 && eps.is_finite() {
                    Ok(())
                } else {
                    Err(Error::config(format!(
                        "eps must be non-negative, got {eps}"
                    )))
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum { .. } => "momentum",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

fn check_grad(grad: f64) -> Result<()> {
    if grad.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("non-finite gradient {grad}")))
    }
}

pub fn sgd_step(grad: f64, lr: f64) -> Result<f64> {
    check_grad(grad)?;
    Ok(-lr * grad)
}

/// Updates the first moment `m` in place and returns the delta.
pub fn momentum_step(grad: f64, lr: f64, beta: f64, m: &mut f64) -> Result<f64> {
    check_grad(grad)?;
    *m = beta * *m + (1.0 - beta) * grad;
    Ok(-lr * *m)
}

/// One Adam update for a single weight. `step` is the number of completed
/// updates; bias correction uses `step + 1`. The caller advances `step`.
pub fn adam_step(
    grad: f64,
    lr: f64,
    (beta1, beta2, eps): (f64, f64, f64),
    m: &mut f64,
    v: &mut f64,
    step: u64,
) -> Result<f64> {
    check_grad(grad)?;
    *m = beta1 * *m + (1.0 - beta1) * grad;
    *v = beta2 * *v + (1.0 - beta2) * grad * grad;
    let n = (step + 1).min(i32::MAX as u64) as i32;
    let m_hat = *m / (1.0 - beta1.powi(n));
    let v_hat = *v / (1.0 - beta2.powi(n));
    let denom = v_hat.sqrt() + eps;
    if denom == 0.0 {
        // Only reachable with eps = 0 and an all-zero history, where m is 0 too.
        return Ok(0.0);
    }
    Ok(-lr * m_hat / denom)
}

/// `max{1, (1 - β₁)/√(1 - β₂)}`, the commonly quoted per-step Adam bound
/// (in units of the learning rate).
pub fn adam_nominal_bound(beta1: f64, beta2: f64) -> f64 {
    1f64.max((1.0 - beta1) / (1.0 - beta2).sqrt())
}

/// Sharp bound on `|m̂ / √v̂|` after `steps` updates with `eps = 0`, from
/// Cauchy-Schwarz on the two moment sums. Unlike [`adam_nominal_bound`] it
/// holds for every `β₁, β₂`; it is attained by gradients proportional to
/// `(β₁/β₂)^(age)`.
pub fn adam_sharp_bound(beta1: f64, beta2: f64, steps: u64) -> f64 {
    let n = steps.max(1).min(i32::MAX as u64) as i32;
    let ratio = beta1 * beta1 / beta2;
    let geometric = if (ratio - 1.0).abs() < 1e-15 {
        n as f64
    } else {
        (1.0 - ratio.powi(n)) / (1.0 - ratio)
    };
    (1.0 - beta1) / (1.0 - beta1.powi(n))
        * ((1.0 - beta2.powi(n)) / (1.0 - beta2)).sqrt()
        * geometric.sqrt()
}

/// Per-tensor optimizer buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// First moment per tensor (empty for SGD).
    pub m: Vec<Vec<f64>>,
    /// Second moment per tensor (Adam only).
    pub v: Vec<Vec<f64>>,
    /// Completed updates (Adam bias correction).
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Result<Self> {
        kind.validate()?;
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Momentum { .. } => (zeros(), Vec::new()),
            OptimizerKind::Adam { .. } => (zeros(), zeros()),
        };
        Ok(Self {
            kind,
            m,
            v,
            step: 0,
        })
    }

    /// Applies one update to every tensor and returns the deltas.
    pub fn step(&mut self, grads: &[Vec<f64>], lr: f64) -> Result<Vec<Vec<f64>>> {
        if let OptimizerKind::Sgd = self.kind {
            return grads
                .iter()
                .map(|g| g.iter().map(|&x| sgd_step(x, lr)).collect())
                .collect();
        }
        if grads.len() != self.m.len() || grads.iter().zip(&self.m).any(|(g, m)| g.len() != m.len())
        {
            return Err(Error::Shape(
                "gradient shapes do not match optimizer state".into(),
            ));
        }
        let out = match self.kind {
            OptimizerKind::Sgd => unreachable!(),
            OptimizerKind::Momentum { beta } => grads
                .iter()
                .zip(self.m.iter_mut())
                .map(|(g, m)| {
                    g.iter()
                        .zip(m.iter_mut())
                        .map(|(&x, mi)| momentum_step(x, lr, beta, mi))
                        .collect()
                })
                .collect::<Result<Vec<Vec<f64>>>>()?,
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let step = self.step;
                grads
                    .iter()
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                    .map(|(g, (m, v))| {
                        g.iter()
                            .zip(m.iter_mut().zip(v.iter_mut()))
                            .map(|(&x, (mi, vi))| {
                                adam_step(x, lr, (beta1, beta2, eps), mi, vi, step)
                            })
                            .collect()
                    })
                    .collect::<Result<Vec<Vec<f64>>>>()?
            }
        };
        self.step += 1;
        Ok(out)
    }

    /// Rescales the buffers for hand-off to an STE net: `m /= Q̂'(w)` and
    /// `v /= Q̂'(w)²` per weight. `factors` holds `Q̂'(w)` at the hand-off
    /// weights (1 for tensors without an estimator). The Adam step counter
    /// is preserved.
    pub fn remap_for_ste(&self, factors: &[Vec<f64>]) -> Result<Self> {
        let mut out = self.clone();
        if matches!(self.kind, OptimizerKind::Sgd) {
            return Ok(out);
        }
        if factors.len() != self.m.len()
            || factors.iter().zip(&self.m).any(|(f, m)| f.len() != m.len())
        {
            return Err(Error::Shape(
                "estimator factors do not match optimizer state".into(),
            ));
        }
        for (t, f) in factors.iter().enumerate() {
            for (i, &d) in f.iter().enumerate() {
                if !(d > 0.0) {
                    return Err(Error::NonPositiveEstimator { at: f64::NAN });
                }
                out.m[t][i] /= d;
                if let OptimizerKind::Adam { .. } = self.kind {
                    out.v[t][i] /= d * d;
                }
            }
        }
        Ok(out)
    }
}

/// Functional form of [`OptimizerState::remap_for_ste`].
pub fn remap_state_for_ste(state: &OptimizerState, factors: &[Vec<f64>]) -> Result<OptimizerState> {
    state.remap_for_ste(factors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_examples() {
        let c = Schedule::constant(0.1, 100).unwrap();
        for t in [0, 50, 99] {
            assert_eq!(c.lr_at(t).unwrap(), 0.1);
        }
        assert!(matches!(c.lr_at(100), Err(Error::Domain(_))));

        let s = Schedule::cosine(0.2, 0.1, 1000).unwrap();
        assert_eq!(s.warmup_steps(), 100);
        assert_abs_diff_eq!(s.lr_at(0).unwrap(), 0.2 / 100.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.lr_at(100).unwrap(), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(s.lr_at(550).unwrap(), 0.1, epsilon = 1e-15);
        assert!(s.lr_at(999).unwrap() > 0.0);
        assert!(Schedule::cosine(0.1, 1.0, 10).is_err());
        assert!(Schedule::constant(0.0, 10).is_err());
    }

    #[test]
    fn schedule_is_continuous_at_warmup_junction() {
        for (wf, total) in [(0.02, 5000), (0.1, 1000), (0.5, 7)] {
            let s = Schedule::cosine(1e-3, wf, total).unwrap();
            let w = s.warmup_steps();
            let last_ramp = s.lr_at(w - 1).unwrap();
            let first_decay = s.lr_at(w).unwrap();
            assert!((last_ramp - first_decay).abs() <= 1e-12);
        }
    }

    #[test]
    fn schedule_stays_positive_and_below_base() {
        let s = Schedule::cosine(0.3, 0.05, 2000).unwrap();
        for t in 0..2000 {
            let lr = s.lr_at(t).unwrap();
            assert!(lr > 0.0 && lr <= 0.3);
        }
    }

    #[test]
    fn sgd_examples() {
        assert_eq!(sgd_step(0.0, 0.5).unwrap(), 0.0);
        assert_abs_diff_eq!(sgd_step(2.0, 0.1).unwrap(), -0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(sgd_step(-1.0, 0.001).unwrap(), 0.001, epsilon = 1e-18);
        assert!(matches!(sgd_step(f64::NAN, 0.1), Err(Error::Diverged(_))));
    }

    #[test]
    fn momentum_examples() {
        let mut m = 0.0;
        assert_abs_diff_eq!(
            momentum_step(1.0, 1.0, 0.9, &mut m).unwrap(),
            -0.1,
            epsilon = 1e-15
        );
        let prev = momentum_step(0.0, 1.0, 0.9, &mut m).unwrap();
        let next = momentum_step(0.0, 1.0, 0.9, &mut m).unwrap();
        assert_abs_diff_eq!(next, 0.9 * prev, epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = 0.0;
        for _ in 0..100 {
            let g: f64 = rng.random_range(-3.0..3.0);
            assert_eq!(
                momentum_step(g, 0.01, 0.0, &mut m).unwrap(),
                sgd_step(g, 0.01).unwrap()
            );
        }
    }

    #[test]
    fn momentum_matches_expanded_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let beta = 0.9;
        let grads: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut m = 0.0;
        for (t, &g) in grads.iter().enumerate() {
            momentum_step(g, 1.0, beta, &mut m).unwrap();
            let expanded: f64 = (1.0 - beta)
                * grads[..=t]
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| beta.powi((t - i) as i32) * gi)
                    .sum::<f64>();
            assert!((m - expanded).abs() <= 1e-12);
        }
    }

    #[test]
    fn adam_first_step_is_sign() {
        for g in [1e-6, 0.3, -7.0] {
            let (mut m, mut v) = (0.0, 0.0);
            let d = adam_step(g, 0.01, (0.9, 0.95, 0.0), &mut m, &mut v, 0).unwrap();
            assert_abs_diff_eq!(d, -0.01 * g.signum(), epsilon = 1e-15);
        }
        let (mut m, mut v) = (0.0, 0.0);
        assert_eq!(
            adam_step(0.0, 0.01, (0.9, 0.999, 1e-8), &mut m, &mut v, 0).unwrap(),
            0.0
        );
        assert_eq!(
            adam_step(0.0, 0.01, (0.9, 0.999, 0.0), &mut m, &mut v, 0).unwrap(),
            0.0
        );
    }

    #[test]
    fn adam_state_advances_once_per_update() {
        let kind = OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.95,
            eps: 0.0,
        };
        let mut s = OptimizerState::new(kind, &[3, 2]).unwrap();
        for i in 0..5 {
            s.step(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0]], 1e-3)
                .unwrap();
            assert_eq!(s.step, i + 1);
            assert!(s.v.iter().flatten().all(|&x| x >= 0.0));
        }
        assert!(s.step(&[vec![1.0]], 1e-3).is_err());
    }

    #[test]
    fn adam_nominal_bound_holds_for_standard_betas() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (b1, b2) = (0.9, 0.999);
        let bound = adam_nominal_bound(b1, b2);
        for _ in 0..10_000 {
            let (mut m, mut v) = (0.0, 0.0);
            let scale: f64 = 10f64.powf(rng.random_range(-3.0..3.0));
            for step in 0..20 {
                let g = scale * rng.random_range(-1.0..1.0);
                let d = adam_step(g, 1.0, (b1, b2, 0.0), &mut m, &mut v, step).unwrap();
                assert!(d.abs() <= bound * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn adam_nominal_bound_can_be_exceeded_for_fast_second_moment() {
        // β₂ = 0.95 puts the nominal bound at 1 while the sharp bound is larger.
        let (b1, b2) = (0.9, 0.95);
        assert_eq!(adam_nominal_bound(b1, b2), 1.0);
        let steps = 10;
        let (mut m, mut v) = (0.0, 0.0);
        let mut last = 0.0;
        for step in 0..steps {
            let age = (steps - 1 - step) as i32;
            let g = (b1 / b2).powi(age);
            last = adam_step(g, 1.0, (b1, b2, 0.0), &mut m, &mut v, step).unwrap();
        }
        let sharp = adam_sharp_bound(b1, b2, steps);
        assert!(last.abs() > 1.0);
        assert_abs_diff_eq!(last.abs(), sharp, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn adam_sharp_bound_holds(
            b1 in 0.0f64..0.99,
            b2 in 0.5f64..0.9999,
            grads in prop::collection::vec(-100.0f64..100.0, 1..40),
        ) {
            let (mut m, mut v) = (0.0, 0.0);
            for (step, &g) in grads.iter().enumerate() {
                let d = adam_step(g, 1.0, (b1, b2, 0.0), &mut m, &mut v, step as u64).unwrap();
                let bound = adam_sharp_bound(b1, b2, step as u64 + 1);
                prop_assert!(d.abs() <= bound * (1.0 + 1e-9), "{d} > {bound}");
            }
        }

        #[test]
        fn momentum_with_zero_beta_is_sgd(grads in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let mut s = OptimizerState::new(OptimizerKind::Momentum { beta: 0.0 }, &[grads.len()]).unwrap();
            let d = s.step(std::slice::from_ref(&grads), 0.3).unwrap();
            for (x, g) in d[0].iter().zip(&grads) {
                prop_assert_eq!(*x, sgd_step(*g, 0.3).unwrap());
            }
        }
    }

    #[test]
    fn remap_examples() {
        let mut s = OptimizerState::new(OptimizerKind::Momentum { beta: 0.9 }, &[2]).unwrap();
        s.m[0] = vec![0.5, -0.3];
        let r = s.remap_for_ste(&[vec![2.0, 1.0]]).unwrap();
        assert_eq!(r.m[0], vec![0.25, -0.3]);

        let unchanged = s.remap_for_ste(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(unchanged, s);

        let z = OptimizerState::new(OptimizerKind::adam(0.9, 0.95), &[3]).unwrap();
        let mut z2 = z.clone();
        z2.step = 17;
        let r = z2.remap_for_ste(&[vec![0.5, 2.0, 3.0]]).unwrap();
        assert_eq!(r.m, z.m);
        assert_eq!(r.v, z.v);
        assert_eq!(r.step, 17);

        let mut a = OptimizerState::new(OptimizerKind::adam(0.9, 0.95), &[1]).unwrap();
        a.m[0][0] = 1.0;
        a.v[0][0] = 1.0;
        let r = a.remap_for_ste(&[vec![2.0]]).unwrap();
        assert_eq!((r.m[0][0], r.v[0][0]), (0.5, 0.25));

        assert!(matches!(
            s.remap_for_ste(&[vec![0.0, 1.0]]),
            Err(Error::NonPositiveEstimator { .. })
        ));
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        assert!(OptimizerState::new(OptimizerKind::Momentum { beta: 1.0 }, &[1]).is_err());
        assert!(OptimizerState::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.95,
                eps: -1.0
            },
            &[1]
        )
        .is_err());
    }
}
