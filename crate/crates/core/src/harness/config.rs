//! Line-based `key = value` scenario configuration.
//!
//! Keys are dotted (`defense.kind`), `#` starts a comment, lists are comma
//! separated. `sweep.<key> = a, b, c` declares a sweep axis over an existing
//! key; values of a list-valued key are separated by `;` inside an axis.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::attack::{AttackConfig, Optimizer};
use crate::autodiff::Padding;
use crate::defenses::{Defense, Noise, Precision};
use crate::error::{Error, Result};
use crate::models::{ConvLayer, ModelSpec};

/// Keys accepted in a config file, in the order they are documented.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed; every other seed derives from it"),
    ("model.kind", "mlp | convnet | embed"),
    ("model.input", "mlp input width"),
    ("model.image", "convnet input as channels, height, width"),
    ("model.conv.channels", "output channels per conv layer (list)"),
    ("model.conv.kernel", "square kernel size"),
    ("model.conv.padding", "same | valid"),
    ("model.hidden", "hidden widths (list, may be empty)"),
    ("model.classes", "number of classes"),
    ("model.vocab", "embedding vocabulary size"),
    ("model.embed_dim", "embedding width"),
    ("model.seq_len", "tokens per sentence"),
    ("data.source", "synthetic | idx | ppm | tokens"),
    ("data.size", "synthetic dataset size"),
    ("data.images", "IDX image file"),
    ("data.labels", "IDX label file"),
    ("data.dir", "directory of PGM/PPM images"),
    ("data.tokens", "token file: one `label<TAB>id id ..` per line"),
    ("workers", "number of workers"),
    ("topology", "centralized | ring"),
    ("observe", "per-worker | average (centralized vantage)"),
    ("batch", "samples per worker per round"),
    ("target", "index of the observed gradient that is attacked"),
    ("train.steps", "training rounds of a full run"),
    ("train.stage", "fraction of train.steps completed before the attack"),
    ("train.lr", "server learning rate"),
    ("defense.kind", "none | gaussian | laplacian | fp16 | bf16 | int8 | prune | accumulate"),
    ("defense.variance", "noise variance"),
    ("defense.sparsity", "fraction of entries zeroed"),
    ("defense.per_layer", "prune each tensor separately"),
    ("defense.steps", "local steps for accumulation"),
    ("defense.lr", "local learning rate for accumulation"),
    ("attack.optimizer", "lbfgs | gd"),
    ("attack.schedule", "joint | cyclic"),
    ("attack.iterations", "attack iterations"),
    ("attack.lr", "optimizer learning rate"),
    ("attack.history", "L-BFGS history size"),
    ("attack.max_inner", "L-BFGS inner iterations per attack iteration"),
    ("attack.epsilon", "stop once the gradient distance falls below this"),
    ("attack.grad_scale", "scale applied to both gradient sets"),
    ("metrics.threshold", "MSE below which a run counts as leaked"),
    ("metrics.reach", "MSE level for the iterations_to_reach column"),
    ("output.dir", "output directory"),
    ("output.images", "write recovered and true images"),
    ("output.timing", "emit the elapsed_ms column"),
];

const SWEEP: &str = "sweep.";

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: String,
    /// 1-based source line; 0 for command-line overrides.
    line: usize,
}

/// A parsed but not yet typed config: base values plus sweep axes, both in
/// file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    values: IndexMap<String, Entry>,
    axes: IndexMap<String, (Vec<String>, usize)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = RawConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config {
                    line,
                    msg: format!("expected `key = value`, got `{content}`"),
                });
            };
            out.set_at(key.trim(), value.trim(), line)?;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply a `key=value` override; it is reported as line 0 on error.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| Error::Config {
            line: 0,
            msg: format!("override `{assignment}` is not `key=value`"),
        })?;
        self.set_at(k.trim(), v.trim(), 0)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_at(key, value, 0)
    }

    fn set_at(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        if let Some(field) = key.strip_prefix(SWEEP) {
            if !is_known(field) {
                return Err(Error::Config {
                    line,
                    msg: format!("sweep axis over unknown key `{field}`"),
                });
            }
            let sep = if value.contains(';') { ';' } else { ',' };
            let vals: Vec<String> = value.split(sep).map(|v| v.trim().to_string()).collect();
            if vals.iter().any(String::is_empty) {
                return Err(Error::Config {
                    line,
                    msg: format!("empty value in sweep axis `{field}`"),
                });
            }
            self.axes.insert(field.to_string(), (vals, line));
        } else if is_known(key) {
            self.values.insert(
                key.to_string(),
                Entry {
                    value: value.to_string(),
                    line,
                },
            );
        } else {
            return Err(Error::Config {
                line,
                msg: format!("unknown key `{key}`"),
            });
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|e| e.value.as_str())
    }

    /// Sweep axes in declaration order.
    pub fn axes(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.axes.iter().map(|(k, (v, _))| (k.as_str(), v.as_slice()))
    }

    pub fn clear_axes(&mut self) {
        self.axes.clear();
    }

    /// Every point of the cartesian product of the axes, first axis
    /// slowest, as a config with the axis values filled in. No axes gives
    /// one point.
    pub fn expand(&self) -> Vec<(Vec<(String, String)>, RawConfig)> {
        let axes: Vec<(&String, &(Vec<String>, usize))> = self.axes.iter().collect();
        let total: usize = axes.iter().map(|(_, (v, _))| v.len()).product();
        let mut out = Vec::with_capacity(total);
        for mut index in 0..total {
            let mut cfg = RawConfig {
                values: self.values.clone(),
                axes: IndexMap::new(),
            };
            let mut point = vec![(String::new(), String::new()); axes.len()];
            for (a, (key, (vals, line))) in axes.iter().enumerate().rev() {
                let v = &vals[index % vals.len()];
                index /= vals.len();
                cfg.values.insert(
                    (*key).clone(),
                    Entry {
                        value: v.clone(),
                        line: *line,
                    },
                );
                point[a] = ((*key).clone(), v.clone());
            }
            out.push((point, cfg));
        }
        out
    }

    fn line_of(&self, key: &str) -> usize {
        self.values.get(key).map_or(0, |e| e.line)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config {
                line: self.line_of(key),
                msg: format!("`{key}`: cannot parse `{v}`"),
            }),
        }
    }

    fn list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|_| Error::Config {
                        line: self.line_of(key),
                        msg: format!("`{key}`: cannot parse `{s}`"),
                    })
                })
                .collect(),
        }
    }

    fn choice<'a>(&'a self, key: &str, default: &'a str, allowed: &[&str]) -> Result<&'a str> {
        let v = self.get(key).unwrap_or(default);
        if allowed.contains(&v) {
            Ok(v)
        } else {
            Err(Error::Config {
                line: self.line_of(key),
                msg: format!("`{key}` must be one of {allowed:?}, got `{v}`"),
            })
        }
    }

    fn fail(&self, key: &str, msg: String) -> Error {
        Error::Config {
            line: self.line_of(key),
            msg,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Smooth random blobs with uniform labels.
    Synthetic { size: usize },
    Idx { images: PathBuf, labels: PathBuf },
    Ppm { dir: PathBuf },
    Tokens { path: Option<PathBuf> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    Centralized,
    Ring,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Vantage {
    PerWorker,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Joint,
    Cyclic,
}

/// A fully typed single scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub data: DataSource,
    pub workers: usize,
    pub topology: Topology,
    pub vantage: Vantage,
    pub batch: usize,
    pub target: usize,
    pub train_steps: usize,
    pub train_stage: f64,
    pub train_lr: f64,
    pub defense: Defense,
    pub attack: AttackConfig,
    pub schedule: Schedule,
    pub threshold: f64,
    pub reach: f64,
    pub out_dir: PathBuf,
    pub write_images: bool,
    pub timing: bool,
}

impl ScenarioConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let kind = raw.choice("model.kind", "mlp", &["mlp", "convnet", "embed"])?;
        let hidden = raw.list("model.hidden", &[32])?;
        let classes = raw.parsed("model.classes", 4usize)?;
        let model = match kind {
            "mlp" => ModelSpec::mlp(raw.parsed("model.input", 64usize)?, &hidden, classes),
            "convnet" => {
                let image = raw.list("model.image", &[1, 16, 16])?;
                let [c, h, w] = image[..] else {
                    return Err(raw.fail("model.image", format!("expected 3 extents, got {image:?}")));
                };
                let kernel = raw.parsed("model.conv.kernel", 3usize)?;
                let padding = match raw.choice("model.conv.padding", "same", &["same", "valid"])? {
                    "same" => Padding::Same,
                    _ => Padding::Valid,
                };
                let conv = raw
                    .list("model.conv.channels", &[4])?
                    .into_iter()
                    .map(|channels| ConvLayer {
                        channels,
                        kernel,
                        padding,
                    })
                    .collect();
                ModelSpec::convnet([c, h, w], conv, &hidden, classes)
            }
            _ => ModelSpec::embed_classifier(
                raw.parsed("model.vocab", 50usize)?,
                raw.parsed("model.embed_dim", 8usize)?,
                raw.parsed("model.seq_len", 5usize)?,
                &hidden,
                classes,
            ),
        };
        model.validate().map_err(|e| raw.fail("model.kind", e.to_string()))?;

        let default_source = if kind == "embed" { "tokens" } else { "synthetic" };
        let path = |key: &str| -> Result<PathBuf> {
            raw.get(key)
                .map(PathBuf::from)
                .ok_or_else(|| raw.fail("data.source", format!("`{key}` is required for this data source")))
        };
        let data = match raw.choice("data.source", default_source, &["synthetic", "idx", "ppm", "tokens"])? {
            "synthetic" => DataSource::Synthetic {
                size: raw.parsed("data.size", 64usize)?,
            },
            "idx" => DataSource::Idx {
                images: path("data.images")?,
                labels: path("data.labels")?,
            },
            "ppm" => DataSource::Ppm { dir: path("data.dir")? },
            _ => DataSource::Tokens {
                path: raw.get("data.tokens").map(PathBuf::from),
            },
        };
        if (kind == "embed") != matches!(data, DataSource::Tokens { .. }) {
            return Err(raw.fail("data.source", "token data goes with model.kind = embed and only with it".into()));
        }

        let variance = raw.parsed("defense.variance", 1e-3f64)?;
        let defense = match raw.choice(
            "defense.kind",
            "none",
            &["none", "gaussian", "laplacian", "fp16", "bf16", "int8", "prune", "accumulate"],
        )? {
            "none" => Defense::None,
            "gaussian" => Defense::Noise {
                kind: Noise::Gaussian,
                variance,
            },
            "laplacian" => Defense::Noise {
                kind: Noise::Laplacian,
                variance,
            },
            "fp16" => Defense::Quantize(Precision::Fp16),
            "bf16" => Defense::Quantize(Precision::Bf16),
            "int8" => Defense::Quantize(Precision::Int8),
            "prune" => Defense::Prune {
                sparsity: raw.parsed("defense.sparsity", 0.1f64)?,
                per_layer: raw.parsed("defense.per_layer", false)?,
            },
            _ => Defense::Accumulate {
                steps: raw.parsed("defense.steps", 1usize)?,
                lr: raw.parsed("defense.lr", 0.1f64)?,
            },
        };
        defense.validate().map_err(|e| raw.fail("defense.kind", e.to_string()))?;

        let seed = raw.parsed("seed", 0u64)?;
        let defaults = AttackConfig::default();
        let attack = AttackConfig {
            optimizer: match raw.choice("attack.optimizer", "lbfgs", &["lbfgs", "gd"])? {
                "lbfgs" => Optimizer::Lbfgs,
                _ => Optimizer::Gd,
            },
            iterations: raw.parsed("attack.iterations", defaults.iterations)?,
            lr: raw.parsed("attack.lr", defaults.lr)?,
            history: raw.parsed("attack.history", defaults.history)?,
            max_inner: raw.parsed("attack.max_inner", defaults.max_inner)?,
            epsilon: raw.parsed("attack.epsilon", defaults.epsilon)?,
            grad_scale: raw.parsed("attack.grad_scale", defaults.grad_scale)?,
            seed: 0,
        };
        attack.validate().map_err(|e| raw.fail("attack.iterations", e.to_string()))?;

        let cfg = ScenarioConfig {
            seed,
            model,
            data,
            workers: raw.parsed("workers", 1usize)?,
            topology: match raw.choice("topology", "centralized", &["centralized", "ring"])? {
                "centralized" => Topology::Centralized,
                _ => Topology::Ring,
            },
            vantage: match raw.choice("observe", "per-worker", &["per-worker", "average"])? {
                "per-worker" => Vantage::PerWorker,
                _ => Vantage::Average,
            },
            batch: raw.parsed("batch", 1usize)?,
            target: raw.parsed("target", 0usize)?,
            train_steps: raw.parsed("train.steps", 0usize)?,
            train_stage: raw.parsed("train.stage", 1.0f64)?,
            train_lr: raw.parsed("train.lr", 0.1f64)?,
            defense,
            attack,
            schedule: match raw.choice("attack.schedule", "joint", &["joint", "cyclic"])? {
                "joint" => Schedule::Joint,
                _ => Schedule::Cyclic,
            },
            threshold: raw.parsed("metrics.threshold", 0.05f64)?,
            reach: raw.parsed("metrics.reach", 1e-2f64)?,
            out_dir: PathBuf::from(raw.get("output.dir").unwrap_or("out")),
            write_images: raw.parsed("output.images", false)?,
            timing: raw.parsed("output.timing", true)?,
        };
        if cfg.workers == 0 {
            return Err(raw.fail("workers", "need at least one worker".into()));
        }
        if cfg.batch == 0 {
            return Err(raw.fail("batch", "batch must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&cfg.train_stage) {
            return Err(raw.fail("train.stage", format!("{} is not in [0, 1]", cfg.train_stage)));
        }
        if !(cfg.train_lr > 0.0) {
            return Err(raw.fail("train.lr", "must be > 0".into()));
        }
        Ok(cfg)
    }

    /// Training rounds completed before the attacked round.
    pub fn attack_round(&self) -> usize {
        (self.train_stage * self.train_steps as f64).round() as usize
    }
}

/// SplitMix64 finalizer over `seed` and a stream tag, so every consumer of
/// randomness gets an independent, reproducible stream.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in tag.bytes().chain(index.to_le_bytes()) {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
