//! Line-oriented `key = value` experiment configuration.
//!
//! Blank lines and text after `#` are ignored. Every key is dotted
//! (`section.name`); unknown keys are rejected. See the README for the full
//! key list and defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::bisim::BisimConfig;
use crate::error::{Error, Result};
use crate::estimator::EstimatorSpec;
use crate::io::synthetic::SyntheticParams;
use crate::net::{QuantSetup, StepSize};
use crate::optim::{OptimizerKind, Schedule, ScheduleKind, DEFAULT_ADAM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        params: SyntheticParams,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        subset: Option<usize>,
    },
    /// Single-weight lookup loss `½(Q(w) - target)²`.
    Toy {
        w0: f64,
        target: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub bisim: BisimConfig,
    pub quant: QuantSetup,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub data: DataSource,
    pub batch_size: usize,
    pub output_dir: PathBuf,
    /// Every recognised key with its effective value, for the trace header.
    pub echo: Vec<(String, String)>,
}

const KEYS: &[&str] = &[
    "run.seed",
    "run.steps",
    "run.adjusted",
    "run.handoff_fraction",
    "optimizer.kind",
    "optimizer.beta",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.eps",
    "schedule.kind",
    "schedule.lr",
    "schedule.warmup_fraction",
    "estimator.kind",
    "estimator.k",
    "estimator.w_min",
    "estimator.w_max",
    "quantizer.bits",
    "quantizer.binary",
    "quantizer.delta",
    "quantizer.l",
    "quantizer.u",
    "model.hidden",
    "data.kind",
    "data.n_samples",
    "data.n_features",
    "data.n_classes",
    "data.spread",
    "data.seed",
    "data.images",
    "data.labels",
    "data.subset",
    "train.batch_size",
    "toy.w0",
    "toy.target",
    "output.dir",
];

struct Entries {
    path: PathBuf,
    map: BTreeMap<String, (String, usize)>,
    echo: Vec<(String, String)>,
}

impl Entries {
    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if key.is_empty() || !key.contains('.') || key.contains(char::is_whitespace) {
                return Err(parse_err(format!("keys must be dotted names, got `{key}`")));
            }
            if !KEYS.contains(&key) {
                return Err(Error::UnknownKey(key.to_string()));
            }
            if map
                .insert(key.to_string(), (value.trim().to_string(), line_no))
                .is_some()
            {
                return Err(parse_err(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            map,
            echo: Vec::new(),
        })
    }

    fn raw(&self, key: &str) -> Option<&(String, usize)> {
        self.map.get(key)
    }

    fn get<T: std::str::FromStr + std::fmt::Display>(
        &mut self,
        key: &str,
        default: T,
    ) -> Result<T> {
        let value = match self.raw(key) {
            Some((v, line)) => v.parse::<T>().map_err(|_| Error::Parse {
                path: self.path.clone(),
                line: *line,
                msg: format!("invalid value `{v}` for `{key}`"),
            })?,
            None => default,
        };
        self.echo.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    fn get_opt<T: std::str::FromStr + std::fmt::Display>(
        &mut self,
        key: &str,
    ) -> Result<Option<T>> {
        match self.raw(key) {
            Some((v, line)) => {
                let parsed = v.parse::<T>().map_err(|_| Error::Parse {
                    path: self.path.clone(),
                    line: *line,
                    msg: format!("invalid value `{v}` for `{key}`"),
                })?;
                self.echo.push((key.to_string(), parsed.to_string()));
                Ok(Some(parsed))
            }
            None => Ok(None),
        }
    }

    fn word(&mut self, key: &str, default: &str, allowed: &[&str]) -> Result<String> {
        let value = self.get::<String>(key, default.to_string())?;
        if allowed.contains(&value.as_str()) {
            Ok(value)
        } else {
            Err(Error::config(format!(
                "`{key}` must be one of {}, got `{value}`",
                allowed.join(", ")
            )))
        }
    }
}

fn widths_to_string(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses config text; `path` is used for error messages and to resolve
    /// relative IDX paths.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut e = Entries::parse(text, path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();

        let seed = e.get("run.seed", 1u64)?;
        let steps = e.get("run.steps", 5000u64)?;
        let adjusted = e.get("run.adjusted", true)?;
        let handoff_fraction = e.get("run.handoff_fraction", 0.1f64)?;

        let optimizer = match e
            .word("optimizer.kind", "momentum", &["sgd", "momentum", "adam"])?
            .as_str()
        {
            "sgd" => OptimizerKind::Sgd,
            "momentum" => OptimizerKind::Momentum {
                beta: e.get("optimizer.beta", 0.9)?,
            },
            _ => OptimizerKind::Adam {
                beta1: e.get("optimizer.beta1", 0.9)?,
                beta2: e.get("optimizer.beta2", 0.95)?,
                eps: e.get("optimizer.eps", DEFAULT_ADAM_EPS)?,
            },
        };

        let kind = match e
            .word("schedule.kind", "cosine", &["cosine", "constant"])?
            .as_str()
        {
            "cosine" => ScheduleKind::CosineWithWarmup,
            _ => ScheduleKind::Constant,
        };
        let schedule = Schedule {
            base_lr: e.get("schedule.lr", 1e-3)?,
            warmup_fraction: match kind {
                ScheduleKind::CosineWithWarmup => e.get("schedule.warmup_fraction", 0.02)?,
                ScheduleKind::Constant => 0.0,
            },
            total_steps: steps,
            kind,
        };

        let estimator = match e
            .word("estimator.kind", "tanh", &["ste", "pwl", "tanh", "mad"])?
            .as_str()
        {
            "ste" => EstimatorSpec::Ste,
            "tanh" => EstimatorSpec::Tanh {
                k: e.get("estimator.k", 2.0)?,
            },
            "pwl" => EstimatorSpec::Pwl {
                w_min: e.get("estimator.w_min", -1.0)?,
                w_max: e.get("estimator.w_max", 1.0)?,
            },
            // Bound to each layer's representable range at init.
            _ => EstimatorSpec::Mad {
                range_lo: -1.0,
                range_hi: 1.0,
            },
        };
        estimator.validate()?;

        let binary = e.get("quantizer.binary", false)?;
        let bits = e.get("quantizer.bits", if binary { 1 } else { 2 })?;
        let step = match e.get::<String>("quantizer.delta", "auto".into())?.as_str() {
            "auto" => StepSize::Auto,
            other => StepSize::Fixed(other.parse::<f64>().map_err(|_| {
                Error::config(format!(
                    "`quantizer.delta` must be `auto` or a number, got `{other}`"
                ))
            })?),
        };
        let clip = match (
            e.get_opt::<i64>("quantizer.l")?,
            e.get_opt::<i64>("quantizer.u")?,
        ) {
            (Some(l), Some(u)) => Some((l, u)),
            (None, None) => None,
            _ => {
                return Err(Error::config(
                    "`quantizer.l` and `quantizer.u` must be given together",
                ))
            }
        };
        let quant = QuantSetup {
            bits,
            binary,
            step,
            clip,
            estimator,
        };

        let hidden_raw = e.get::<String>("model.hidden", "16,16".into())?;
        let hidden = if hidden_raw.trim().is_empty() {
            Vec::new()
        } else {
            hidden_raw
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .ok()
                        .filter(|&n| n > 0)
                        .ok_or_else(|| {
                            Error::config(format!(
                                "`model.hidden` must list positive widths, got `{hidden_raw}`"
                            ))
                        })
                })
                .collect::<Result<Vec<_>>>()?
        };

        let data = match e
            .word("data.kind", "synthetic", &["synthetic", "idx", "toy"])?
            .as_str()
        {
            "synthetic" => {
                let params = SyntheticParams {
                    n_samples: e.get("data.n_samples", 4000)?,
                    n_features: e.get("data.n_features", 2)?,
                    n_classes: e.get("data.n_classes", 2)?,
                    spread: e.get("data.spread", 1.0)?,
                };
                params.validate()?;
                DataSource::Synthetic {
                    params,
                    seed: e.get("data.seed", seed)?,
                }
            }
            "idx" => {
                let resolve = |p: String| {
                    let p = PathBuf::from(p);
                    if p.is_relative() {
                        base.join(p)
                    } else {
                        p
                    }
                };
                let images = e
                    .get_opt::<String>("data.images")?
                    .ok_or_else(|| Error::config("`data.images` is required for idx data"))?;
                let labels = e
                    .get_opt::<String>("data.labels")?
                    .ok_or_else(|| Error::config("`data.labels` is required for idx data"))?;
                let (images, labels) = (resolve(images), resolve(labels));
                for p in [&images, &labels] {
                    if !p.exists() {
                        return Err(Error::io(
                            p.clone(),
                            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
                        ));
                    }
                }
                DataSource::Idx {
                    images,
                    labels,
                    subset: e.get_opt("data.subset")?,
                }
            }
            _ => DataSource::Toy {
                w0: e.get("toy.w0", 0.2)?,
                target: e.get("toy.target", -0.25)?,
            },
        };

        let batch_size = e.get("train.batch_size", 32usize)?;
        if batch_size == 0 {
            return Err(Error::config("`train.batch_size` must be at least 1"));
        }
        let output_dir = PathBuf::from(e.get::<String>("output.dir", "out".into())?);

        let bisim = BisimConfig {
            optimizer,
            schedule,
            adjusted,
            handoff_fraction,
        };
        bisim.validate()?;
        let mut echo = e.echo;
        echo.sort();
        echo.dedup();
        if !hidden.is_empty() {
            // Normalize the list formatting in the echo.
            if let Some(entry) = echo.iter_mut().find(|(k, _)| k == "model.hidden") {
                entry.1 = widths_to_string(&hidden);
            }
        }
        Ok(Self {
            bisim,
            quant,
            seed,
            hidden,
            data,
            batch_size,
            output_dir,
            echo,
        })
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}
