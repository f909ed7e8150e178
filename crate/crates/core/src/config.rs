//! Run configuration, the flat `key = value` config format and the shipped
//! experiment presets.
//!
//! ```text
//! # comments start with '#'
//! clients = 10
//! alpha = 0.5
//! tau = 0.5
//! arch = mlp-s          # mlp-s | mlp-m | mlp-l | cycle
//! width.distilled_data = 1
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cache::SamplingMode;
use crate::distill::LambdaPolicy;
use crate::error::{Error, Result};
use crate::model::Preset;
use crate::transport::{default_byte_widths, ByteWidths, PayloadKind};

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
    },
    Csv {
        path: PathBuf,
        skip_header: bool,
    },
}

/// Which architecture each client gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchAssignment {
    Uniform(Preset),
    /// Client `k` gets `[mlp-s, mlp-m, mlp-l][k mod 3]`.
    Cycle,
}

impl ArchAssignment {
    pub fn for_client(self, k: usize) -> Preset {
        match self {
            ArchAssignment::Uniform(p) => p,
            ArchAssignment::Cycle => Preset::ALL[k % 3],
        }
    }

    pub fn is_homogeneous(self) -> bool {
        matches!(self, ArchAssignment::Uniform(_))
    }
}

impl fmt::Display for ArchAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchAssignment::Uniform(p) => write!(f, "{p}"),
            ArchAssignment::Cycle => f.write_str("cycle"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Algorithm {
    FedCache2,
    LogitsCache,
    ParamAvg,
    LocalOnly,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::FedCache2,
        Algorithm::LogitsCache,
        Algorithm::ParamAvg,
        Algorithm::LocalOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedCache2 => "fedcache2",
            Algorithm::LogitsCache => "logits_cache",
            Algorithm::ParamAvg => "param_avg",
            Algorithm::LocalOnly => "local_only",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("algorithms", format!("unknown algorithm `{s}`")))
    }
}

/// Everything needed to reproduce one run of one algorithm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub clients: usize,
    pub alpha: f64,
    pub test_fraction: f64,
    pub tau: f64,
    pub lambda: LambdaPolicy,
    pub local_epochs: usize,
    pub rounds: usize,
    pub lr: f64,
    pub distill_lr: f64,
    pub distill_steps: usize,
    pub batch: usize,
    pub augment_sigma: f64,
    pub arch: ArchAssignment,
    pub participation_rate: f64,
    /// Rounds between redraws of the replacement function.
    pub sigma_period: usize,
    pub sampling: SamplingMode,
    pub byte_widths: ByteWidths,
    pub beta: f64,
    pub related: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Synthetic {
                classes: 4,
                dim: 16,
                per_class: 150,
                spread: 0.6,
            },
            clients: 10,
            alpha: 0.5,
            test_fraction: 0.2,
            tau: 0.5,
            lambda: LambdaPolicy::Relative,
            local_epochs: 5,
            rounds: 15,
            lr: 0.01,
            distill_lr: 0.001,
            distill_steps: 100,
            batch: 64,
            augment_sigma: 0.05,
            arch: ArchAssignment::Uniform(Preset::MlpS),
            participation_rate: 1.0,
            sigma_period: 1,
            sampling: SamplingMode::ExactCount,
            byte_widths: default_byte_widths(),
            beta: 1.5,
            related: 16,
            seed: 0,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true/false, got `{value}`"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => match &self.dataset {
                        s @ DatasetSpec::Synthetic { .. } => s.clone(),
                        DatasetSpec::Csv { .. } => RunConfig::default().dataset,
                    },
                    "csv" => match &self.dataset {
                        c @ DatasetSpec::Csv { .. } => c.clone(),
                        DatasetSpec::Synthetic { .. } => DatasetSpec::Csv {
                            path: PathBuf::new(),
                            skip_header: false,
                        },
                    },
                    other => return Err(Error::config(key, format!("expected synthetic or csv, got `{other}`"))),
                }
            }
            "classes" | "dim" | "per_class" | "spread" => {
                let DatasetSpec::Synthetic {
                    classes,
                    dim,
                    per_class,
                    spread,
                } = &mut self.dataset
                else {
                    return Err(Error::config(key, "only valid with dataset = synthetic"));
                };
                match key {
                    "classes" => *classes = parse_num(key, value)?,
                    "dim" => *dim = parse_num(key, value)?,
                    "per_class" => *per_class = parse_num(key, value)?,
                    _ => *spread = parse_num(key, value)?,
                }
            }
            "csv_path" | "csv_header" => {
                let DatasetSpec::Csv { path, skip_header } = &mut self.dataset else {
                    return Err(Error::config(key, "only valid with dataset = csv"));
                };
                if key == "csv_path" {
                    *path = PathBuf::from(value);
                } else {
                    *skip_header = parse_bool(key, value)?;
                }
            }
            "clients" => self.clients = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "test_fraction" => self.test_fraction = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "lambda" => {
                self.lambda = if value == "auto" {
                    LambdaPolicy::Relative
                } else {
                    LambdaPolicy::Fixed(parse_num(key, value)?)
                }
            }
            "local_epochs" => self.local_epochs = parse_num(key, value)?,
            "rounds" => self.rounds = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "distill_lr" => self.distill_lr = parse_num(key, value)?,
            "distill_steps" => self.distill_steps = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "augment_sigma" => self.augment_sigma = parse_num(key, value)?,
            "arch" => {
                self.arch = if value == "cycle" {
                    ArchAssignment::Cycle
                } else {
                    ArchAssignment::Uniform(value.parse().map_err(|_| {
                        Error::config(key, format!("expected mlp-s, mlp-m, mlp-l or cycle, got `{value}`"))
                    })?)
                }
            }
            "participation_rate" => self.participation_rate = parse_num(key, value)?,
            "sigma_period" => self.sigma_period = parse_num(key, value)?,
            "sampling" => {
                self.sampling = match value {
                    "count" => SamplingMode::ExactCount,
                    "bernoulli" => SamplingMode::Bernoulli,
                    other => return Err(Error::config(key, format!("expected count or bernoulli, got `{other}`"))),
                }
            }
            "beta" => self.beta = parse_num(key, value)?,
            "related" => self.related = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => {
                if let Some(kind) = key.strip_prefix("width.") {
                    let kind: PayloadKind = kind
                        .parse()
                        .map_err(|_| Error::config(key, format!("unknown payload kind `{kind}`")))?;
                    self.byte_widths.insert(kind, parse_num(key, value)?);
                } else {
                    return Err(Error::config(key, "unknown key"));
                }
            }
        }
        Ok(())
    }

    /// Every setting as `(key, value)` pairs, in a stable order. Feeding the
    /// pairs back through [`RunConfig::set`] reproduces the config exactly.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                dim,
                per_class,
                spread,
            } => {
                push("dataset", "synthetic".into());
                push("classes", classes.to_string());
                push("dim", dim.to_string());
                push("per_class", per_class.to_string());
                push("spread", spread.to_string());
            }
            DatasetSpec::Csv { path, skip_header } => {
                push("dataset", "csv".into());
                push("csv_path", path.display().to_string());
                push("csv_header", skip_header.to_string());
            }
        }
        push("clients", self.clients.to_string());
        push("alpha", self.alpha.to_string());
        push("test_fraction", self.test_fraction.to_string());
        push("tau", self.tau.to_string());
        push(
            "lambda",
            match self.lambda {
                LambdaPolicy::Relative => "auto".into(),
                LambdaPolicy::Fixed(v) => v.to_string(),
            },
        );
        push("local_epochs", self.local_epochs.to_string());
        push("rounds", self.rounds.to_string());
        push("lr", self.lr.to_string());
        push("distill_lr", self.distill_lr.to_string());
        push("distill_steps", self.distill_steps.to_string());
        push("batch", self.batch.to_string());
        push("augment_sigma", self.augment_sigma.to_string());
        push("arch", self.arch.to_string());
        push("participation_rate", self.participation_rate.to_string());
        push("sigma_period", self.sigma_period.to_string());
        push(
            "sampling",
            match self.sampling {
                SamplingMode::ExactCount => "count".into(),
                SamplingMode::Bernoulli => "bernoulli".into(),
            },
        );
        for (kind, w) in &self.byte_widths {
            push(&format!("width.{kind}"), w.to_string());
        }
        push("beta", self.beta.to_string());
        push("related", self.related.to_string());
        push("seed", self.seed.to_string());
        out
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn num_classes_hint(&self) -> Option<usize> {
        match self.dataset {
            DatasetSpec::Synthetic { classes, .. } => Some(classes),
            DatasetSpec::Csv { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, key: &str, msg: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, msg))
            }
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                dim,
                per_class,
                spread,
            } => {
                check(*classes >= 2, "classes", "must be >= 2")?;
                check(*dim >= 2, "dim", "must be >= 2")?;
                check(*per_class >= 1, "per_class", "must be >= 1")?;
                check(*spread >= 0.0 && spread.is_finite(), "spread", "must be a finite value >= 0")?;
            }
            DatasetSpec::Csv { path, .. } => {
                check(!path.as_os_str().is_empty(), "csv_path", "must be set when dataset = csv")?;
            }
        }
        check(self.clients >= 1, "clients", "must be >= 1")?;
        check(self.alpha > 0.0 && self.alpha.is_finite(), "alpha", "must be > 0")?;
        check((0.0..1.0).contains(&self.test_fraction), "test_fraction", "must be in [0, 1)")?;
        check((0.0..=1.0).contains(&self.tau), "tau", "must be in [0, 1]")?;
        if let LambdaPolicy::Fixed(v) = self.lambda {
            check(v >= 0.0 && v.is_finite(), "lambda", "must be `auto` or a value >= 0")?;
        }
        check(self.local_epochs >= 1, "local_epochs", "must be >= 1")?;
        check(self.rounds >= 1, "rounds", "must be >= 1")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be > 0")?;
        check(self.distill_lr > 0.0 && self.distill_lr.is_finite(), "distill_lr", "must be > 0")?;
        check(self.batch >= 1, "batch", "must be >= 1")?;
        check(self.augment_sigma >= 0.0 && self.augment_sigma.is_finite(), "augment_sigma", "must be >= 0")?;
        check(
            self.participation_rate > 0.0 && self.participation_rate <= 1.0,
            "participation_rate",
            "must be in (0, 1]",
        )?;
        check(self.sigma_period >= 1, "sigma_period", "must be >= 1")?;
        check(self.beta >= 0.0 && self.beta.is_finite(), "beta", "must be >= 0")?;
        check(self.related >= 1, "related", "must be >= 1")?;
        for kind in PayloadKind::ALL {
            check(
                self.byte_widths.contains_key(&kind),
                &format!("width.{kind}"),
                "missing byte width",
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// A one-dimensional sweep over a config key.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<String>,
}

/// A grid of runs: every algorithm × seed × sweep value.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPreset {
    pub name: String,
    pub cfg: RunConfig,
    pub algorithms: Vec<Algorithm>,
    pub seeds: Vec<u64>,
    pub sweep: Option<Sweep>,
}

/// One cell of an experiment grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    /// Directory-safe label, e.g. `tau=0.5_seed1`.
    pub label: String,
    pub cfg: RunConfig,
    pub algorithms: Vec<Algorithm>,
}

impl ExperimentPreset {
    pub fn new(name: &str, cfg: RunConfig, algorithms: Vec<Algorithm>) -> Self {
        Self {
            name: name.into(),
            seeds: vec![cfg.seed],
            cfg,
            algorithms,
            sweep: None,
        }
    }

    /// Applies an experiment-level or run-level `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "name" => self.name = value.trim().to_string(),
            "algorithms" => {
                self.algorithms = value
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<Vec<_>>>()?;
            }
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| parse_num("seeds", s.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "sweep" => {
                let (k, vals) = value
                    .split_once(':')
                    .ok_or_else(|| Error::config("sweep", "expected `key:v1,v2,...`"))?;
                let mut probe = self.cfg.clone();
                let values: Vec<String> = vals.split(',').map(|s| s.trim().to_string()).collect();
                for v in &values {
                    probe.set(k.trim(), v)?;
                }
                self.sweep = Some(Sweep {
                    key: k.trim().to_string(),
                    values,
                });
            }
            "seed" => {
                self.cfg.set(key, value)?;
                self.seeds = vec![self.cfg.seed];
            }
            _ => self.cfg.set(key, value)?,
        }
        Ok(())
    }

    /// Parses config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.algorithms.is_empty() {
            return Err(Error::config("algorithms", "at least one algorithm is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        for cell in self.cells()? {
            cell.cfg.validate()?;
            if cell.algorithms.contains(&Algorithm::ParamAvg) && !cell.cfg.arch.is_homogeneous() {
                return Err(Error::config(
                    "algorithms",
                    "param_avg needs every client on the same architecture (arch must not be `cycle`)",
                ));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Result<Vec<Cell>> {
        let variants: Vec<(String, RunConfig)> = match &self.sweep {
            None => vec![(String::new(), self.cfg.clone())],
            Some(s) => s
                .values
                .iter()
                .map(|v| {
                    let mut c = self.cfg.clone();
                    c.set(&s.key, v)?;
                    Ok((format!("{}={v}_", s.key), c))
                })
                .collect::<Result<_>>()?,
        };
        let mut cells = Vec::new();
        for (prefix, cfg) in variants {
            for &seed in &self.seeds {
                let mut cfg = cfg.clone();
                cfg.seed = seed;
                cells.push(Cell {
                    label: format!("{prefix}seed{seed}"),
                    cfg,
                    algorithms: self.algorithms.clone(),
                });
            }
        }
        Ok(cells)
    }

    /// Experiment echo as ordered pairs, including the grid keys.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut pairs = vec![("name".to_string(), self.name.clone())];
        pairs.push((
            "algorithms".into(),
            self.algorithms.iter().map(|a| a.name()).collect::<Vec<_>>().join(","),
        ));
        pairs.extend(self.cfg.to_pairs());
        pairs.push((
            "seeds".into(),
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        ));
        if let Some(s) = &self.sweep {
            pairs.push(("sweep".into(), format!("{}:{}", s.key, s.values.join(","))));
        }
        pairs
    }
}

pub const PRESET_NAMES: [&str; 6] = [
    "desk-default",
    "desk-hetero",
    "alpha-sweep",
    "tau-sweep",
    "model-hetero",
    "availability",
];

/// Shipped experiment grids.
pub fn preset(name: &str) -> Result<ExperimentPreset> {
    let base = RunConfig::default();
    let all = Algorithm::ALL.to_vec();
    let p = match name {
        "desk-default" => ExperimentPreset {
            seeds: vec![0, 1, 2],
            ..ExperimentPreset::new(name, base, all)
        },
        "desk-hetero" => ExperimentPreset {
            seeds: vec![0, 1, 2],
            ..ExperimentPreset::new(
                name,
                RunConfig {
                    arch: ArchAssignment::Cycle,
                    ..base
                },
                vec![Algorithm::FedCache2, Algorithm::LogitsCache, Algorithm::LocalOnly],
            )
        },
        "alpha-sweep" => ExperimentPreset {
            sweep: Some(Sweep {
                key: "alpha".into(),
                values: vec!["0.5".into(), "2".into()],
            }),
            ..ExperimentPreset::new(name, base, all)
        },
        "tau-sweep" => ExperimentPreset {
            sweep: Some(Sweep {
                key: "tau".into(),
                values: ["0", "0.3", "0.5", "0.7", "1"].map(String::from).to_vec(),
            }),
            ..ExperimentPreset::new(name, base, vec![Algorithm::FedCache2])
        },
        "model-hetero" => ExperimentPreset {
            seeds: vec![0, 1, 2],
            ..ExperimentPreset::new(
                name,
                RunConfig {
                    arch: ArchAssignment::Cycle,
                    ..base
                },
                vec![Algorithm::FedCache2],
            )
        },
        "availability" => ExperimentPreset::new(
            name,
            RunConfig {
                participation_rate: 0.6,
                ..base
            },
            vec![Algorithm::FedCache2, Algorithm::LogitsCache, Algorithm::LocalOnly],
        ),
        other => {
            return Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (available: {})", PRESET_NAMES.join(", ")),
            ))
        }
    };
    Ok(p)
}

/// Config echo as a JSON-friendly map.
pub fn pairs_to_map(pairs: &[(String, String)]) -> BTreeMap<String, String> {
    pairs.iter().cloned().collect()
}
