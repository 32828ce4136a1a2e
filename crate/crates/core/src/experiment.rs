//! Builds a model and data stream from an [`ExperimentConfig`] and runs the
//! lockstep pair, producing a trace and the final weight pairs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bisim::{eta_sweep, lockstep_train, BisimConfig, BisimRun, Model, SweepResult};
use crate::data::{BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::io::config::{DataSource, ExperimentConfig};
use crate::io::idx::load_idx;
use crate::io::synthetic::gen_synthetic;
use crate::io::trace::{write_trace, TraceFile};
use crate::net::{init_weights, NetworkState};
use crate::toy::ScalarToy;

pub const TRACE_FILE: &str = "trace.csv";
pub const WEIGHTS_FILE: &str = "weights.csv";

/// Init bound the toy's automatic step size is derived from.
const TOY_INIT_BOUND: f64 = 1.0;

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;

/// Seed for one of the independent ChaCha8 streams derived from a run seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

// Built once per run; boxing the large variant buys nothing.
#[allow(clippy::large_enum_variant)]
enum Prepared {
    Toy(ScalarToy),
    Net {
        model: NetworkState,
        data: Dataset,
        stream: BatchStream,
    },
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Option<Dataset>> {
    Ok(match &cfg.data {
        DataSource::Synthetic { params, seed } => {
            Some(gen_synthetic(params, stream_seed(*seed, DATA_STREAM))?)
        }
        DataSource::Idx {
            images,
            labels,
            subset,
        } => {
            let d = load_idx(images, labels)?;
            Some(match subset {
                Some(n) => d.truncate(*n)?,
                None => d,
            })
        }
        DataSource::Toy { .. } => None,
    })
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    if let DataSource::Toy { w0, target } = cfg.data {
        let q = cfg.quant.quantizer_for_bound(TOY_INIT_BOUND)?;
        let est = cfg.quant.estimator_for(&q)?;
        return Ok(Prepared::Toy(ScalarToy::quadratic(w0, target, q, est)?));
    }
    let data = load_dataset(cfg)?.expect("non-toy source has data");
    let mut shapes = vec![data.n_features];
    shapes.extend(&cfg.hidden);
    shapes.push(data.n_classes);
    let model = init_weights(&shapes, stream_seed(cfg.seed, INIT_STREAM), &cfg.quant)?;
    let stream = BatchStream::new(
        data.len(),
        cfg.batch_size,
        stream_seed(cfg.seed, BATCH_STREAM),
    )?;
    Ok(Prepared::Net {
        model,
        data,
        stream,
    })
}

/// Final latent weight of one quantized parameter in both nets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightPair {
    pub tensor: usize,
    pub index: usize,
    pub qhat: f64,
    pub ste: f64,
    /// `M(w_Q̂)`, where the STE weight would sit under perfect alignment.
    pub warped: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trace: TraceFile,
    pub weights: Vec<WeightPair>,
    pub diverged: Option<String>,
    /// Losses of both nets on the full training set after the last step.
    pub full_loss_qhat: f64,
    pub full_loss_ste: f64,
}

impl RunOutput {
    pub fn final_agreement(&self) -> Option<f64> {
        self.trace.rows.last().map(|r| r.agreement)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let trace_path = dir.join(TRACE_FILE);
        write_trace(&trace_path, &self.trace)?;
        let weights_path = dir.join(WEIGHTS_FILE);
        std::fs::write(&weights_path, weights_csv(&self.weights))
            .map_err(|e| Error::io(&weights_path, e))?;
        Ok(trace_path)
    }
}

pub fn weights_csv(weights: &[WeightPair]) -> String {
    let mut out = String::from("tensor,index,w_qhat,w_ste,warped\n");
    for w in weights {
        let _ = writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e}",
            w.tensor, w.index, w.qhat, w.ste, w.warped
        );
    }
    out
}

fn real(x: f64) -> String {
    format!("{x:.16e}")
}

fn finish<M: Model>(
    cfg: &ExperimentConfig,
    run: BisimRun<M>,
    full_batch: &M::Batch,
) -> Result<RunOutput> {
    let mut header = vec![("version".to_string(), env!("CARGO_PKG_VERSION").to_string())];
    header.extend(
        cfg.echo
            .iter()
            .map(|(k, v)| (format!("config.{k}"), v.clone())),
    );
    header.push(("biases_quantized".into(), "false".into()));

    let mut weights = Vec::new();
    let (qt, st) = (run.qhat.tensors(), run.ste.tensors());
    for (i, plan) in run.plans.iter().enumerate() {
        let Some(plan) = plan else { continue };
        let q = plan.warp.cfg();
        let key = |name: &str| format!("tensor{i}.{name}");
        header.push((key("alpha"), real(plan.warp.alpha)));
        header.push((key("lr_factor"), real(plan.lr_factor)));
        header.push((key("delta"), real(q.delta)));
        header.push((
            key("codes"),
            if q.binary {
                "binary".into()
            } else {
                format!("{}..{}", q.l, q.u)
            },
        ));
        if let Some((lo, hi)) = plan.range {
            header.push((key("range"), format!("{},{}", real(lo), real(hi))));
        }
        if let Some(c) = plan.constants {
            header.push((key("l_minus"), real(c.l_minus)));
            header.push((key("l_plus"), real(c.l_plus)));
            header.push((key("l_prime"), real(c.l_prime)));
        }
        for (index, (&wq, &ws)) in qt[i].values.iter().zip(st[i].values).enumerate() {
            weights.push(WeightPair {
                tensor: i,
                index,
                qhat: wq,
                ste: ws,
                warped: plan.warp.warp(wq)?,
            });
        }
    }

    let full = |m: &M| m.evaluate(full_batch).map(|e| e.loss).unwrap_or(f64::NAN);
    let (full_loss_qhat, full_loss_ste) = (full(&run.qhat), full(&run.ste));
    header.push(("steps_completed".into(), run.rows.len().to_string()));
    header.push(("handoff_step".into(), run.handoff_step.to_string()));
    header.push(("e0".into(), real(run.e0)));
    header.push(("bound_checks".into(), run.bound_checks.to_string()));
    header.push(("g_plus".into(), real(run.g_plus)));
    header.push((
        "diverged".into(),
        run.diverged.clone().unwrap_or_else(|| "false".into()),
    ));
    header.push(("final_full_loss_qhat".into(), real(full_loss_qhat)));
    header.push(("final_full_loss_ste".into(), real(full_loss_ste)));
    if let Some(r) = run.final_row() {
        header.push(("final_agreement".into(), real(r.agreement)));
    }

    Ok(RunOutput {
        trace: TraceFile {
            header,
            rows: run.rows,
        },
        weights,
        diverged: run.diverged,
        full_loss_qhat,
        full_loss_ste,
    })
}

/// One lockstep experiment. Divergence is reported in the output, not as an
/// error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    match prepare(cfg)? {
        Prepared::Toy(toy) => {
            let run = lockstep_train(toy, &cfg.bisim, |_| Ok(()))?;
            finish(cfg, run, &())
        }
        Prepared::Net {
            model,
            data,
            mut stream,
        } => {
            let run = lockstep_train(model, &cfg.bisim, |_| Ok(stream.next_batch(&data)))?;
            finish(cfg, run, &data.as_batch())
        }
    }
}

fn with_lr(bisim: &BisimConfig, eta: f64) -> BisimConfig {
    let mut b = *bisim;
    b.schedule.base_lr = eta;
    b
}

/// Repeats the experiment with each base learning rate in `etas`; all runs
/// share the initial weights and batch order.
pub fn sweep_experiment(cfg: &ExperimentConfig, etas: &[f64]) -> Result<SweepResult> {
    match prepare(cfg)? {
        Prepared::Toy(toy) => eta_sweep(etas, |eta| {
            lockstep_train(toy.clone(), &with_lr(&cfg.bisim, eta), |_| Ok(()))
        }),
        Prepared::Net {
            model,
            data,
            stream,
        } => eta_sweep(etas, |eta| {
            let mut s = stream.clone();
            lockstep_train(model.clone(), &with_lr(&cfg.bisim, eta), |_| {
                Ok(s.next_batch(&data))
            })
        }),
    }
}
