//! Experiment configuration and its flat `key = value` text form.

use std::fmt;
use std::str::FromStr;

use crate::adapter::InitScheme;
use crate::baselines::SchemeId;
use crate::error::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TaskKind {
    /// Least-squares recovery of a planted low-rank perturbation.
    #[default]
    MatrixRecovery,
    /// Linear softmax classifier with cross-entropy loss.
    SoftmaxClassify,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::MatrixRecovery => "matrix_recovery",
            TaskKind::SoftmaxClassify => "softmax",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "matrix_recovery" | "regression" => Ok(TaskKind::MatrixRecovery),
            "softmax" | "softmax_classify" | "classification" => Ok(TaskKind::SoftmaxClassify),
            other => Err(format!(
                "unknown task `{other}` (expected matrix_recovery or softmax)"
            )),
        }
    }
}

/// How client contributions are weighted at the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    #[default]
    Uniform,
    /// Proportional to shard size.
    DataSize,
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weighting::Uniform => "uniform",
            Weighting::DataSize => "data_size",
        })
    }
}

impl FromStr for Weighting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "data_size" | "size" => Ok(Weighting::DataSize),
            other => Err(format!(
                "unknown weighting `{other}` (expected uniform or data_size)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub d_out: usize,
    pub d_in: usize,
    /// Training samples, split across clients.
    pub num_samples: usize,
    /// Held-out samples for the global loss.
    pub eval_samples: usize,
    pub true_rank: usize,
    pub noise_std: f64,
    /// Label count; for regression these are feature clusters used by the
    /// Dirichlet split.
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::MatrixRecovery,
            d_out: 32,
            d_in: 32,
            num_samples: 512,
            eval_samples: 256,
            true_rank: 2,
            noise_std: 0.0,
            num_classes: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub scheme: SchemeId,
    pub num_clients: usize,
    pub rounds: usize,
    pub eta: f64,
    pub rank: usize,
    pub alpha: f64,
    pub dirichlet_rho: f64,
    pub participation_ratio: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub align: bool,
    pub init_scheme: InitScheme,
    pub seed: u64,
    pub weighting: Weighting,
    /// Independent adapted layers, each with its own task.
    pub layers: usize,
    /// Loss ratio against the loss at `W⁰` that counts as reaching target.
    pub target_ratio: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskSpec::default(),
            scheme: SchemeId::Florg,
            num_clients: 20,
            rounds: 100,
            eta: 5e-5,
            rank: 4,
            alpha: 16.0,
            dirichlet_rho: 0.5,
            participation_ratio: 1.0,
            batch_size: 4,
            local_epochs: 1,
            align: true,
            init_scheme: InitScheme::SemiOrthogonal,
            seed: 0,
            weighting: Weighting::Uniform,
            layers: 1,
            target_ratio: 0.01,
        }
    }
}

/// Every accepted key, in the order `to_text` writes them.
pub const KEYS: [&str; 24] = [
    "task",
    "d_out",
    "d_in",
    "num_samples",
    "eval_samples",
    "true_rank",
    "noise_std",
    "num_classes",
    "scheme",
    "num_clients",
    "rounds",
    "eta",
    "rank",
    "alpha",
    "rho",
    "participation_ratio",
    "batch_size",
    "local_epochs",
    "align",
    "init_scheme",
    "seed",
    "weighting",
    "layers",
    "target_ratio",
];

impl ExperimentConfig {
    /// Clients sampled per round, `⌈ratio·N⌉`.
    pub fn participants_per_round(&self) -> usize {
        ((self.participation_ratio * self.num_clients as f64).ceil() as usize)
            .clamp(1, self.num_clients)
    }

    pub fn k(&self) -> usize {
        self.task.d_out.min(self.task.d_in)
    }

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |msg: String| ConfigError::for_key(key, msg);
        let t = &mut self.task;
        match key {
            "task" => t.kind = value.parse().map_err(bad)?,
            "d_out" => t.d_out = parse_num(key, value)?,
            "d_in" => t.d_in = parse_num(key, value)?,
            "num_samples" => t.num_samples = parse_num(key, value)?,
            "eval_samples" => t.eval_samples = parse_num(key, value)?,
            "true_rank" => t.true_rank = parse_num(key, value)?,
            "noise_std" => t.noise_std = parse_num(key, value)?,
            "num_classes" => t.num_classes = parse_num(key, value)?,
            "scheme" => self.scheme = value.parse().map_err(bad)?,
            "num_clients" => self.num_clients = parse_num(key, value)?,
            "rounds" => self.rounds = parse_num(key, value)?,
            "eta" => self.eta = parse_num(key, value)?,
            "rank" => self.rank = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "rho" => self.dirichlet_rho = parse_num(key, value)?,
            "participation_ratio" => self.participation_ratio = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "local_epochs" => self.local_epochs = parse_num(key, value)?,
            "align" => self.align = parse_bool(key, value)?,
            "init_scheme" => self.init_scheme = value.parse().map_err(bad)?,
            "seed" => self.seed = parse_num(key, value)?,
            "weighting" => self.weighting = value.parse().map_err(bad)?,
            "layers" => self.layers = parse_num(key, value)?,
            "target_ratio" => self.target_ratio = parse_num(key, value)?,
            _ => return Err(ConfigError::for_key(key, "unknown key")),
        }
        Ok(())
    }

    /// Range checks; the first violation names its key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.task;
        let fail = |key: &str, msg: String| Err(ConfigError::for_key(key, msg));
        if t.d_out == 0 {
            return fail("d_out", "must be at least 1".into());
        }
        if t.d_in == 0 {
            return fail("d_in", "must be at least 1".into());
        }
        let k = self.k();
        if self.rank == 0 || self.rank > k {
            return fail("rank", format!("must lie in 1..={k}, got {}", self.rank));
        }
        if t.true_rank > k {
            return fail(
                "true_rank",
                format!("must lie in 0..={k}, got {}", t.true_rank),
            );
        }
        if !(t.noise_std >= 0.0 && t.noise_std.is_finite()) {
            return fail(
                "noise_std",
                format!("must be non-negative, got {}", t.noise_std),
            );
        }
        if t.num_classes == 0 {
            return fail("num_classes", "must be at least 1".into());
        }
        if t.kind == TaskKind::SoftmaxClassify && t.num_classes != t.d_out {
            return fail(
                "num_classes",
                format!(
                    "classification needs num_classes = d_out = {}, got {}",
                    t.d_out, t.num_classes
                ),
            );
        }
        if t.kind == TaskKind::SoftmaxClassify && t.num_classes < 2 {
            return fail(
                "num_classes",
                "classification needs at least 2 classes".into(),
            );
        }
        if t.eval_samples == 0 {
            return fail("eval_samples", "must be at least 1".into());
        }
        if self.num_clients == 0 {
            return fail("num_clients", "must be at least 1".into());
        }
        if t.num_samples < self.num_clients {
            return fail(
                "num_samples",
                format!(
                    "{} samples cannot cover {} clients",
                    t.num_samples, self.num_clients
                ),
            );
        }
        if self.rounds == 0 {
            return fail("rounds", "must be at least 1".into());
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return fail(
                "eta",
                format!("must be non-negative and finite, got {}", self.eta),
            );
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail("alpha", format!("must be positive, got {}", self.alpha));
        }
        if !(self.dirichlet_rho > 0.0 && self.dirichlet_rho.is_finite()) {
            return fail(
                "rho",
                format!("must be positive, got {}", self.dirichlet_rho),
            );
        }
        if !(self.participation_ratio > 0.0 && self.participation_ratio <= 1.0) {
            return fail(
                "participation_ratio",
                format!("must lie in (0, 1], got {}", self.participation_ratio),
            );
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1".into());
        }
        if self.local_epochs == 0 {
            return fail("local_epochs", "must be at least 1".into());
        }
        if self.layers == 0 {
            return fail("layers", "must be at least 1".into());
        }
        if !(self.target_ratio > 0.0 && self.target_ratio.is_finite()) {
            return fail(
                "target_ratio",
                format!("must be positive, got {}", self.target_ratio),
            );
        }
        Ok(())
    }

    /// Canonical text form; `parse_config_str(cfg.to_text())` gives back `cfg`
    /// exactly.
    pub fn to_text(&self) -> String {
        let t = &self.task;
        let values: [String; 24] = [
            t.kind.to_string(),
            t.d_out.to_string(),
            t.d_in.to_string(),
            t.num_samples.to_string(),
            t.eval_samples.to_string(),
            t.true_rank.to_string(),
            format!("{:?}", t.noise_std),
            t.num_classes.to_string(),
            self.scheme.to_string(),
            self.num_clients.to_string(),
            self.rounds.to_string(),
            format!("{:?}", self.eta),
            self.rank.to_string(),
            format!("{:?}", self.alpha),
            format!("{:?}", self.dirichlet_rho),
            format!("{:?}", self.participation_ratio),
            self.batch_size.to_string(),
            self.local_epochs.to_string(),
            self.align.to_string(),
            self.init_scheme.to_string(),
            self.seed.to_string(),
            self.weighting.to_string(),
            self.layers.to_string(),
            format!("{:?}", self.target_ratio),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| ConfigError::for_key(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        other => Err(ConfigError::for_key(
            key,
            format!("expected true or false, got `{other}`"),
        )),
    }
}

/// Parse `key = value` lines over the defaults. `#` starts a comment; blank
/// lines are ignored; a key may appear once.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    let mut seen: Vec<String> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            ConfigError::at_line(
                line_no,
                None,
                format!("expected `key = value`, got `{line}`"),
            )
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError::at_line(
                line_no,
                None,
                "missing key before `=`",
            ));
        }
        if seen.iter().any(|k| k == key) {
            return Err(ConfigError::at_line(line_no, Some(key), "duplicate key"));
        }
        cfg.set(key, value).map_err(|e| ConfigError {
            line: Some(line_no),
            ..e
        })?;
        seen.push(key.to_owned());
    }
    cfg.validate()?;
    Ok(cfg)
}
