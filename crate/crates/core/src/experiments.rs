//! Sweeps, ablations, covariance diagnostics and the oracle verification suite.
//!
//! Configuration is a line-oriented `key = value` text. A preset supplies every field; without one
//! the fields `experiment` and `seeds` (plus the swept values) must be given.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::constructions::{
    build_copy_block_with, build_interaction_head_report, build_linear_spline_oracle,
    build_poly_oracle, build_quadratic_spline_oracle, build_vector_valued_oracle,
    ConstructionError, FeatureLayout, InteractionSpec, KnotGrid, OracleParams,
};
use crate::linalg::{invert, Matrix};
use crate::regression::{
    bernstein_diagnostic, reference_predict_vector, reference_predict_xy, sigma_closed_form,
    BernsteinReport, FeatureSpec, RegressionError, Uniform,
};
use crate::tasks::{generate_dataset, splitmix64, Dataset, Prompt, SeededRng, TaskSampler};
use crate::training::{
    evaluate, init_model, train, Architecture, HeadPolicy, TrainOutcome, TrainSettings,
    TrainableModelConfig, TrainingError,
};
use crate::transformer::{
    attention_forward, block_forward, embed_prompt, embed_prompt_vector, forward_trace, ActivationKind,
    TransformerError, TransformerNetwork,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{at}: expected `key = value`")]
    Syntax { at: String },
    #[error("{at}: unknown key `{key}`")]
    UnknownKey { at: String, key: String },
    #[error("{at}: invalid value `{value}` for `{key}`: {reason}")]
    BadValue {
        at: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("{at}: missing required field `{key}`")]
    Missing { at: String, key: &'static str },
    #[error("unknown preset `{0}` (expected paper-fig1 or desk)")]
    UnknownPreset(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error(transparent)]
    Construction(#[from] ConstructionError),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error(transparent)]
    Training(#[from] TrainingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    ScaleN,
    ScaleL,
    Ablation,
    Spline,
    VerifyOracle,
    Bernstein,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::ScaleN => "scale_n",
            ExperimentKind::ScaleL => "scale_L",
            ExperimentKind::Ablation => "ablation",
            ExperimentKind::Spline => "spline",
            ExperimentKind::VerifyOracle => "verify_oracle",
            ExperimentKind::Bernstein => "bernstein",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "scale_n" => Some(ExperimentKind::ScaleN),
            "scale_L" | "scale_l" => Some(ExperimentKind::ScaleL),
            "ablation" => Some(ExperimentKind::Ablation),
            "spline" => Some(ExperimentKind::Spline),
            "verify_oracle" => Some(ExperimentKind::VerifyOracle),
            "bernstein" => Some(ExperimentKind::Bernstein),
            _ => None,
        }
    }
}

/// A trained architecture, or the constructed predictor evaluated in closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchChoice {
    Trained(Architecture),
    Oracle,
}

impl ArchChoice {
    pub fn name(&self) -> &'static str {
        match self {
            ArchChoice::Trained(a) => a.name(),
            ArchChoice::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "oracle" {
            return Some(ArchChoice::Oracle);
        }
        Architecture::parse(s).map(ArchChoice::Trained)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Heads4,
    Heads1,
    Deep16x1,
    NoFfn,
}

impl Ablation {
    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Heads4 => "heads4",
            Ablation::Heads1 => "heads1",
            Ablation::Deep16x1 => "deep16x1",
            Ablation::NoFfn => "no_ffn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "heads4" => Some(Ablation::Heads4),
            "heads1" => Some(Ablation::Heads1),
            "deep16x1" => Some(Ablation::Deep16x1),
            "no_ffn" => Some(Ablation::NoFfn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    N,
    L,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub architectures: Vec<ArchChoice>,
    pub n_values: Vec<usize>,
    pub l_values: Vec<usize>,
    /// Context length held fixed while `L` is swept.
    pub n: usize,
    /// Training set size held fixed while `n` is swept.
    pub l: usize,
    pub degree: usize,
    /// Knot count on `[-1, 1]`; the grid has `knots - 1` bins.
    pub knots: usize,
    pub spline_range: (f64, f64),
    pub heads: HeadPolicy,
    /// `None` picks the experiment default.
    pub blocks: Option<usize>,
    pub ffn: Option<bool>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub test_size: usize,
    pub ablation: Option<Ablation>,
    pub sweep: Sweep,
    pub trials: usize,
    pub jobs: usize,
    pub out: PathBuf,
}

const KEYS: &[&str] = &[
    "experiment",
    "architectures",
    "n_values",
    "l_values",
    "n",
    "l",
    "degree",
    "knots",
    "spline_range",
    "heads",
    "blocks",
    "ffn",
    "seeds",
    "epochs",
    "batch",
    "lr",
    "test_size",
    "ablation",
    "sweep",
    "trials",
    "jobs",
    "out",
];

/// One `key = value` assignment and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigEntry {
    pub at: String,
    pub key: String,
    pub value: String,
}

impl ConfigEntry {
    pub fn flag(key: &str, value: impl Into<String>) -> Self {
        Self {
            at: format!("flag --{key}"),
            key: key.to_string(),
            value: value.into(),
        }
    }
}

impl ExperimentConfig {
    /// Full-scale hyperparameters and grids; `experiment` is a placeholder.
    fn base() -> Self {
        Self {
            experiment: ExperimentKind::ScaleN,
            architectures: vec![
                ArchChoice::Trained(Architecture::Theory),
                ArchChoice::Trained(Architecture::AllLinear),
                ArchChoice::Trained(Architecture::AllSoftmax),
            ],
            n_values: vec![16, 32, 64, 128, 256, 512, 1024],
            l_values: vec![1000, 2000, 4000, 8000, 16000, 32000],
            n: 128,
            l: 32000,
            degree: 4,
            knots: 5,
            spline_range: (-1.0, 1.0),
            heads: HeadPolicy::Scaling,
            blocks: None,
            ffn: None,
            seeds: vec![0, 1, 2],
            epochs: 50,
            batch: 512,
            lr: 1e-3,
            test_size: 1000,
            ablation: None,
            sweep: Sweep::N,
            trials: 50,
            jobs: 1,
            out: PathBuf::from("results"),
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "paper-fig1" | "paper" => Ok(Self::base()),
            "desk" => Ok(Self {
                n_values: vec![16, 32, 64],
                l_values: vec![1000, 4000, 16000],
                n: 32,
                l: 8000,
                epochs: 20,
                ..Self::base()
            }),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    /// Axis swept by this experiment.
    pub fn sweep_axis(&self) -> Sweep {
        match self.experiment {
            ExperimentKind::ScaleN => Sweep::N,
            ExperimentKind::ScaleL => Sweep::L,
            _ => self.sweep,
        }
    }

    pub fn grid(&self) -> Result<KnotGrid, ConstructionError> {
        KnotGrid::new(-1.0, 1.0, self.knots.saturating_sub(1), 1)
    }

    pub fn task_sampler(&self) -> Result<TaskSampler, ConstructionError> {
        Ok(match self.experiment {
            ExperimentKind::Spline => TaskSampler::LinearSpline {
                grid: self.grid()?,
                coeff_range: self.spline_range,
            },
            _ => TaskSampler::Poly { d: self.degree },
        })
    }

    /// Model shape for one trained architecture at context length `n`.
    pub fn model_config(&self, arch: Architecture, n: usize) -> TrainableModelConfig {
        let mut m = TrainableModelConfig::polynomial(arch, self.degree, n);
        m.heads = self.heads;
        if self.experiment == ExperimentKind::Spline {
            m.num_blocks = 2;
            m.ffn = false;
            m.d_embed = FeatureLayout::linear_spline(self.knots.saturating_sub(1)).d_embed;
        }
        if let Some(b) = self.blocks {
            m.num_blocks = b;
        }
        if let Some(f) = self.ffn {
            m.ffn = f;
        }
        if self.experiment == ExperimentKind::Ablation {
            match self.ablation {
                Some(Ablation::Heads4) => m.heads = HeadPolicy::Fixed(4),
                Some(Ablation::Heads1) => m.heads = HeadPolicy::Fixed(1),
                Some(Ablation::Deep16x1) => {
                    m.num_blocks = 16;
                    m.heads = HeadPolicy::Fixed(1);
                }
                Some(Ablation::NoFfn) => {
                    m.ffn = false;
                    m.heads = HeadPolicy::Fixed(4);
                }
                None => {}
            }
        }
        m
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            ..TrainSettings::default()
        }
    }

    fn set(&mut self, e: &ConfigEntry) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::BadValue {
            at: e.at.clone(),
            key: e.key.clone(),
            value: e.value.clone(),
            reason: reason.to_string(),
        };
        let v = e.value.trim();
        match e.key.to_ascii_lowercase().as_str() {
            "experiment" => {
                self.experiment = ExperimentKind::parse(v).ok_or_else(|| bad("unknown experiment"))?
            }
            "architectures" => {
                self.architectures = list(v)
                    .map(|s| ArchChoice::parse(s).ok_or_else(|| bad("unknown architecture")))
                    .collect::<Result<_, _>>()?
            }
            "n_values" => self.n_values = parse_list(v).map_err(|r| bad(&r))?,
            "l_values" => self.l_values = parse_list(v).map_err(|r| bad(&r))?,
            "n" => self.n = parse_one(v).map_err(|r| bad(&r))?,
            "l" => self.l = parse_one(v).map_err(|r| bad(&r))?,
            "degree" => self.degree = parse_one(v).map_err(|r| bad(&r))?,
            "knots" => self.knots = parse_one(v).map_err(|r| bad(&r))?,
            "spline_range" => {
                let r: Vec<f64> = parse_list(v).map_err(|r| bad(&r))?;
                if r.len() != 2 || !(r[0] <= r[1]) {
                    return Err(bad("expected `lo, hi` with lo <= hi"));
                }
                self.spline_range = (r[0], r[1]);
            }
            "heads" => {
                self.heads = if v == "scaling" {
                    HeadPolicy::Scaling
                } else {
                    let k = v.strip_prefix("fixed:").unwrap_or(v);
                    HeadPolicy::Fixed(parse_one(k).map_err(|r| bad(&r))?)
                }
            }
            "blocks" => {
                self.blocks = match v {
                    "auto" => None,
                    _ => Some(parse_one(v).map_err(|r| bad(&r))?),
                }
            }
            "ffn" => {
                self.ffn = match v {
                    "auto" => None,
                    "true" | "on" | "yes" => Some(true),
                    "false" | "off" | "no" => Some(false),
                    _ => return Err(bad("expected true, false or auto")),
                }
            }
            "seeds" => self.seeds = parse_list(v).map_err(|r| bad(&r))?,
            "epochs" => self.epochs = parse_one(v).map_err(|r| bad(&r))?,
            "batch" => self.batch = parse_one(v).map_err(|r| bad(&r))?,
            "lr" => {
                let lr: f64 = parse_one(v).map_err(|r| bad(&r))?;
                if !(lr >= 0.0) || !lr.is_finite() {
                    return Err(bad("learning rate must be finite and non-negative"));
                }
                self.lr = lr;
            }
            "test_size" => self.test_size = parse_one(v).map_err(|r| bad(&r))?,
            "ablation" => {
                self.ablation = match v {
                    "none" => None,
                    _ => Some(Ablation::parse(v).ok_or_else(|| {
                        bad("expected heads4, heads1, deep16x1 or no_ffn")
                    })?),
                }
            }
            "sweep" => {
                self.sweep = match v {
                    "n" => Sweep::N,
                    "L" | "l" => Sweep::L,
                    _ => return Err(bad("expected n or L")),
                }
            }
            "trials" => self.trials = parse_one(v).map_err(|r| bad(&r))?,
            "jobs" => self.jobs = parse_one(v).map_err(|r| bad(&r))?,
            "out" => self.out = PathBuf::from(v),
            _ => {
                return Err(ConfigError::UnknownKey {
                    at: e.at.clone(),
                    key: e.key.clone(),
                })
            }
        }
        Ok(())
    }

    /// Sorts the swept values and checks ranges.
    pub fn validate(mut self) -> Result<Self, ConfigError> {
        let invalid = |s: String| Err(ConfigError::Invalid(s));
        self.n_values.sort_unstable();
        self.n_values.dedup();
        self.l_values.sort_unstable();
        self.l_values.dedup();
        if self.seeds.is_empty() {
            return invalid("at least one seed is required".into());
        }
        if self.n_values.contains(&0) || self.l_values.contains(&0) || self.n == 0 || self.l == 0 {
            return invalid("context lengths and training sizes must be positive".into());
        }
        if self.degree == 0 {
            return invalid("degree must be at least 1".into());
        }
        if self.knots < 2 {
            return invalid("a spline grid needs at least two knots".into());
        }
        if self.batch == 0 || self.test_size == 0 || self.jobs == 0 || self.trials == 0 {
            return invalid("batch, test_size, trials and jobs must be positive".into());
        }
        if matches!(self.heads, HeadPolicy::Fixed(0)) || self.blocks == Some(0) {
            return invalid("heads and blocks must be positive".into());
        }
        let sweeps = !matches!(
            self.experiment,
            ExperimentKind::VerifyOracle | ExperimentKind::Bernstein
        );
        if sweeps && self.architectures.is_empty() {
            return invalid("no architectures given".into());
        }
        match self.sweep_axis() {
            Sweep::N if sweeps && self.n_values.len() < 2 => {
                return invalid(format!(
                    "{} sweeps n and needs at least two n values",
                    self.experiment.name()
                ))
            }
            Sweep::L if sweeps && self.l_values.len() < 2 => {
                return invalid(format!(
                    "{} sweeps L and needs at least two L values",
                    self.experiment.name()
                ))
            }
            _ => {}
        }
        if self.experiment == ExperimentKind::Bernstein && self.n_values.len() < 2 {
            return invalid("bernstein needs at least two n values".into());
        }
        if self.experiment == ExperimentKind::Ablation && self.ablation.is_none() {
            return invalid("ablation experiment without `ablation` name".into());
        }
        Ok(self)
    }

    /// Round-trips through [`parse_config`].
    pub fn to_text(&self) -> String {
        let join = |v: &[String]| v.join(", ");
        let nums = |v: &[usize]| join(&v.iter().map(|x| x.to_string()).collect::<Vec<_>>());
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("experiment", self.experiment.name().to_string());
        put(
            "architectures",
            join(&self.architectures.iter().map(|a| a.name().to_string()).collect::<Vec<_>>()),
        );
        put("n_values", nums(&self.n_values));
        put("L_values", nums(&self.l_values));
        put("n", self.n.to_string());
        put("L", self.l.to_string());
        put("degree", self.degree.to_string());
        put("knots", self.knots.to_string());
        put(
            "spline_range",
            format!("{:?}, {:?}", self.spline_range.0, self.spline_range.1),
        );
        put(
            "heads",
            match self.heads {
                HeadPolicy::Scaling => "scaling".to_string(),
                HeadPolicy::Fixed(k) => format!("fixed:{k}"),
            },
        );
        put("blocks", self.blocks.map_or("auto".into(), |b| b.to_string()));
        put("ffn", self.ffn.map_or("auto".into(), |f| f.to_string()));
        put(
            "seeds",
            join(&self.seeds.iter().map(|x| x.to_string()).collect::<Vec<_>>()),
        );
        put("epochs", self.epochs.to_string());
        put("batch", self.batch.to_string());
        put("lr", format!("{:?}", self.lr));
        put("test_size", self.test_size.to_string());
        put("ablation", self.ablation.map_or("none", |a| a.name()).to_string());
        put(
            "sweep",
            match self.sweep {
                Sweep::N => "n",
                Sweep::L => "L",
            }
            .to_string(),
        );
        put("trials", self.trials.to_string());
        put("jobs", self.jobs.to_string());
        put("out", self.out.display().to_string());
        s
    }
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_one<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.trim()
        .parse()
        .map_err(|_| format!("cannot parse `{}`", v.trim()))
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    list(v).map(parse_one).collect()
}

/// Splits a config text into entries, skipping blanks and `#` comments.
pub fn parse_config_entries(text: &str) -> Result<Vec<ConfigEntry>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = format!("line {}", i + 1);
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { at: at.clone() })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax { at });
        }
        if !KEYS.contains(&key.to_ascii_lowercase().as_str()) {
            return Err(ConfigError::UnknownKey {
                at,
                key: key.to_string(),
            });
        }
        out.push(ConfigEntry {
            at,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

/// File text, then `overrides` in order, on top of `preset` (or the bare defaults).
pub fn parse_config(
    text: &str,
    preset: Option<&str>,
    overrides: &[ConfigEntry],
) -> Result<ExperimentConfig, ConfigError> {
    let mut entries = parse_config_entries(text)?;
    entries.extend(overrides.iter().cloned());
    let mut cfg = match preset {
        Some(p) => ExperimentConfig::preset(p)?,
        None => ExperimentConfig::base(),
    };
    let mut seen: BTreeMap<String, ()> = BTreeMap::new();
    for e in &entries {
        if !KEYS.contains(&e.key.to_ascii_lowercase().as_str()) {
            return Err(ConfigError::UnknownKey {
                at: e.at.clone(),
                key: e.key.clone(),
            });
        }
        cfg.set(e)?;
        seen.insert(e.key.to_ascii_lowercase(), ());
    }
    // full-scale spline runs use n = 64 and L = 16000
    if preset == Some("paper-fig1") && cfg.experiment == ExperimentKind::Spline {
        if !seen.contains_key("n") {
            cfg.n = 64;
        }
        if !seen.contains_key("l") {
            cfg.l = 16000;
        }
    }
    if preset.is_none() {
        let end = format!("line {} (end of input)", text.lines().count() + 1);
        let mut required: Vec<&'static str> = vec!["experiment", "seeds"];
        if seen.contains_key("experiment") {
            match cfg.sweep_axis() {
                _ if cfg.experiment == ExperimentKind::VerifyOracle => {}
                Sweep::N => required.push("n_values"),
                Sweep::L => required.push("l_values"),
            }
        }
        for key in required {
            if !seen.contains_key(key) {
                return Err(ConfigError::Missing {
                    at: end.clone(),
                    key,
                });
            }
        }
    }
    cfg.validate()
}

/// Seed mixer for per-cell streams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;
const SHUFFLE_STREAM: u64 = 4;

/// One point of a sweep for one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub arch: ArchChoice,
    pub n: usize,
    pub l: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub test_mse: f64,
    /// Test MSE of the freshly initialized model; the zero predictor's for the oracle.
    pub init_mse: f64,
    pub final_train_mse: Option<f64>,
    pub status: CellStatus,
}

/// Seed-averaged value at one sweep position.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub architecture: ArchChoice,
    pub n: usize,
    pub l: usize,
    pub x: usize,
    pub mean: f64,
    /// Sample standard deviation, present with at least two finished seeds.
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveFit {
    pub architecture: ArchChoice,
    pub slope: Option<f64>,
    /// `1.96 sd / √k` over the per-seed slopes.
    pub slope_ci: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub points: Vec<CurvePoint>,
    pub fits: Vec<CurveFit>,
}

pub const RESULTS_HEADER: &str = "experiment,architecture,n,L,seed,test_mse,status";
pub const CURVE_HEADER: &str = "experiment,architecture,n,L,x,mean,sd,slope,slope_ci";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl RunResult {
    pub fn results_csv(&self) -> String {
        let mut s = format!("{RESULTS_HEADER}\n");
        for c in &self.cells {
            let status = match c.status {
                CellStatus::Ok => "ok",
                CellStatus::Failed(_) => "failed",
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:e},{}",
                self.experiment_label(),
                c.cell.arch.name(),
                c.cell.n,
                c.cell.l,
                c.cell.seed,
                c.test_mse,
                status
            );
        }
        s
    }

    pub fn curve_csv(&self) -> String {
        let mut s = format!("{CURVE_HEADER}\n");
        for p in &self.points {
            let fit = self.fit(p.architecture);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:e},{},{},{}",
                self.experiment_label(),
                p.architecture.name(),
                p.n,
                p.l,
                p.x,
                p.mean,
                fmt_opt(p.sd),
                fmt_opt(fit.and_then(|f| f.slope)),
                fmt_opt(fit.and_then(|f| f.slope_ci)),
            );
        }
        s
    }

    /// `ablation:no_ffn` for ablations, the experiment name otherwise.
    pub fn experiment_label(&self) -> String {
        match (self.config.experiment, self.config.ablation) {
            (ExperimentKind::Ablation, Some(a)) => format!("ablation:{}", a.name()),
            (k, _) => k.name().to_string(),
        }
    }

    pub fn fit(&self, arch: ArchChoice) -> Option<&CurveFit> {
        self.fits.iter().find(|f| f.architecture == arch)
    }

    pub fn point(&self, arch: ArchChoice, x: usize) -> Option<&CurvePoint> {
        self.points
            .iter()
            .find(|p| p.architecture == arch && p.x == x)
    }

    pub fn failures(&self) -> impl Iterator<Item = (&Cell, &str)> {
        self.cells.iter().filter_map(|c| match &c.status {
            CellStatus::Failed(msg) => Some((&c.cell, msg.as_str())),
            CellStatus::Ok => None,
        })
    }

    pub fn manifest(&self) -> String {
        let mut s = manifest_header(&self.config);
        for (cell, msg) in self.failures() {
            let _ = writeln!(
                s,
                "# failed: architecture={} n={} L={} seed={}: {msg}",
                cell.arch.name(),
                cell.n,
                cell.l,
                cell.seed
            );
        }
        s
    }

    /// Writes `results.csv`, `curve.csv` and `manifest.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), std::io::Error> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.csv"), self.results_csv())?;
        std::fs::write(dir.join("curve.csv"), self.curve_csv())?;
        std::fs::write(dir.join("manifest.txt"), self.manifest())
    }
}

fn manifest_header(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# icreg {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(
        s,
        "# formats: network {}, dataset {}, checkpoint {}",
        crate::transformer::codec::NETWORK_VERSION,
        crate::tasks::DATASET_VERSION,
        crate::training::CHECKPOINT_VERSION
    );
    s.push_str(&cfg.to_text());
    s
}

/// Slope of `log₂ y` against `log₂ x` by least squares; `None` with fewer than two usable points.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.log2(), y.log2()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

fn mean_sd(v: &[f64]) -> (f64, Option<f64>) {
    if v.is_empty() {
        return (f64::NAN, None);
    }
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    let sd = (v.len() >= 2)
        .then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt());
    (mean, sd)
}

/// Runs `f` over `items` on `jobs` threads and returns results in input order.
pub fn run_pool<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("collector poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("collector poisoned")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

/// Cells in output order: architecture, swept value, seed.
pub fn plan_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &arch in &cfg.architectures {
        let xs = match cfg.sweep_axis() {
            Sweep::N => &cfg.n_values,
            Sweep::L => &cfg.l_values,
        };
        for &x in xs {
            for &seed in &cfg.seeds {
                let (n, l) = match cfg.sweep_axis() {
                    Sweep::N => (x, cfg.l),
                    Sweep::L => (cfg.n, x),
                };
                cells.push(Cell { arch, n, l, seed });
            }
        }
    }
    cells
}

/// Feature map and `Σ⁻¹` of the constructed predictor for this experiment's tasks.
fn oracle_features(cfg: &ExperimentConfig) -> Result<(FeatureSpec, Matrix), ExperimentError> {
    let spec = match cfg.experiment {
        ExperimentKind::Spline => FeatureSpec::Spline(cfg.grid()?),
        _ => FeatureSpec::Monomial(cfg.degree),
    };
    let sigma = sigma_closed_form(&spec, &Uniform::symmetric())?;
    let inv = invert(&sigma).map_err(|_| RegressionError::RankDeficient {
        samples: 0,
        features: spec.dim(),
    })?;
    Ok((spec, inv))
}

/// Test set shared by every architecture and training size at `(seed, n)`.
pub fn test_dataset(cfg: &ExperimentConfig, n: usize, seed: u64) -> Result<Dataset, ExperimentError> {
    let sampler = cfg.task_sampler()?;
    Ok(generate_dataset(&sampler, n, cfg.test_size, mix_seed(&[seed, n as u64, TEST_STREAM])))
}

/// Training set at `(seed, n)`; smaller `L` gives a prefix of larger ones.
pub fn train_dataset(
    cfg: &ExperimentConfig,
    n: usize,
    l: usize,
    seed: u64,
) -> Result<Dataset, ExperimentError> {
    let sampler = cfg.task_sampler()?;
    Ok(generate_dataset(&sampler, n, l, mix_seed(&[seed, n as u64, TRAIN_STREAM])))
}

pub fn test_prompts(cfg: &ExperimentConfig, n: usize, seed: u64) -> Result<Vec<Prompt>, ExperimentError> {
    Ok(test_dataset(cfg, n, seed)?.prompts)
}

/// A trained cell with its data.
#[derive(Debug, Clone)]
pub struct TrainedCell {
    pub outcome: TrainOutcome,
    pub init_mse: f64,
    pub test_mse: f64,
    pub train: Dataset,
    pub test: Dataset,
}

/// Trains one architecture on the cell's data; `track_test` records test MSE after every epoch.
pub fn train_single(
    cfg: &ExperimentConfig,
    arch: Architecture,
    n: usize,
    l: usize,
    seed: u64,
    track_test: bool,
) -> Result<TrainedCell, ExperimentError> {
    let train_set = train_dataset(cfg, n, l, seed)?;
    let test_set = test_dataset(cfg, n, seed)?;
    let mcfg = cfg.model_config(arch, n);
    let net = init_model(&mcfg, &mut SeededRng::derive(seed, INIT_STREAM))?;
    let init_mse = evaluate(&net, &test_set.prompts)?;
    let outcome = train(
        net,
        &train_set.prompts,
        &cfg.train_settings(),
        &mut SeededRng::derive(seed, SHUFFLE_STREAM),
        track_test.then_some(test_set.prompts.as_slice()),
    )?;
    let test_mse = evaluate(&outcome.net, &test_set.prompts)?;
    Ok(TrainedCell {
        outcome,
        init_mse,
        test_mse,
        train: train_set,
        test: test_set,
    })
}

fn oracle_mse(
    prompts: &[Prompt],
    spec: &FeatureSpec,
    sigma_inv: &Matrix,
) -> Result<(f64, f64), ExperimentError> {
    let mut err = 0.0;
    let mut zero = 0.0;
    for p in prompts {
        let y = reference_predict_xy(&p.xs, &p.ys, p.query, spec, sigma_inv)?;
        err += (y - p.target).powi(2);
        zero += p.target * p.target;
    }
    let k = prompts.len() as f64;
    Ok((err / k, zero / k))
}

/// Trains (or evaluates the oracle for) one cell.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> CellResult {
    let attempt = || -> Result<CellResult, ExperimentError> {
        let test = test_prompts(cfg, cell.n, cell.seed)?;
        match cell.arch {
            ArchChoice::Oracle => {
                let (spec, inv) = oracle_features(cfg)?;
                let (mse, zero) = oracle_mse(&test, &spec, &inv)?;
                Ok(CellResult {
                    cell: *cell,
                    test_mse: mse,
                    init_mse: zero,
                    final_train_mse: None,
                    status: CellStatus::Ok,
                })
            }
            ArchChoice::Trained(arch) => {
                let t = train_single(cfg, arch, cell.n, cell.l, cell.seed, false)?;
                Ok(CellResult {
                    cell: *cell,
                    test_mse: t.test_mse,
                    init_mse: t.init_mse,
                    final_train_mse: t.outcome.history.last().map(|h| h.train_mse),
                    status: CellStatus::Ok,
                })
            }
        }
    };
    attempt().unwrap_or_else(|e| CellResult {
        cell: *cell,
        test_mse: f64::NAN,
        init_mse: f64::NAN,
        final_train_mse: None,
        status: CellStatus::Failed(e.to_string()),
    })
}

/// Collapses cells into seed means and log-log fits.
pub fn summarize(cfg: &ExperimentConfig, cells: Vec<CellResult>) -> RunResult {
    let axis = cfg.sweep_axis();
    let x_of = |c: &Cell| match axis {
        Sweep::N => c.n,
        Sweep::L => c.l,
    };
    let mut points = Vec::new();
    let mut fits = Vec::new();
    for &arch in &cfg.architectures {
        let mine: Vec<&CellResult> = cells.iter().filter(|c| c.cell.arch == arch).collect();
        let mut xs: Vec<usize> = mine.iter().map(|c| x_of(&c.cell)).collect();
        xs.dedup();
        for &x in &xs {
            let at: Vec<&&CellResult> = mine.iter().filter(|c| x_of(&c.cell) == x).collect();
            let vals: Vec<f64> = at
                .iter()
                .filter(|c| c.status == CellStatus::Ok)
                .map(|c| c.test_mse)
                .collect();
            let (mean, sd) = mean_sd(&vals);
            let first = at[0].cell;
            points.push(CurvePoint {
                architecture: arch,
                n: first.n,
                l: first.l,
                x,
                mean,
                sd,
            });
        }
        let px: Vec<f64> = points
            .iter()
            .filter(|p| p.architecture == arch)
            .map(|p| p.x as f64)
            .collect();
        let py: Vec<f64> = points
            .iter()
            .filter(|p| p.architecture == arch)
            .map(|p| p.mean)
            .collect();
        let slope = loglog_slope(&px, &py);
        let per_seed: Vec<f64> = cfg
            .seeds
            .iter()
            .filter_map(|&s| {
                let (sx, sy): (Vec<f64>, Vec<f64>) = mine
                    .iter()
                    .filter(|c| c.cell.seed == s && c.status == CellStatus::Ok)
                    .map(|c| (x_of(&c.cell) as f64, c.test_mse))
                    .unzip();
                loglog_slope(&sx, &sy)
            })
            .collect();
        let slope_ci = match mean_sd(&per_seed) {
            (_, Some(sd)) => Some(1.96 * sd / (per_seed.len() as f64).sqrt()),
            _ => None,
        };
        fits.push(CurveFit {
            architecture: arch,
            slope,
            slope_ci,
        });
    }
    RunResult {
        config: cfg.clone(),
        cells,
        points,
        fits,
    }
}

/// Runs every cell of a sweep experiment; `progress` sees each cell as it finishes.
pub fn run_sweep_with(
    cfg: &ExperimentConfig,
    progress: &(dyn Fn(&CellResult) + Sync),
) -> RunResult {
    let cells = plan_cells(cfg);
    let results = run_pool(&cells, cfg.jobs, |c| {
        let r = run_cell(cfg, c);
        progress(&r);
        r
    });
    summarize(cfg, results)
}

pub fn run_sweep(cfg: &ExperimentConfig) -> RunResult {
    run_sweep_with(cfg, &|_| {})
}

fn expect_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<(), ExperimentError> {
    if cfg.experiment != kind {
        return Err(ConfigError::Invalid(format!(
            "expected a {} configuration, got {}",
            kind.name(),
            cfg.experiment.name()
        ))
        .into());
    }
    Ok(())
}

pub fn run_scale_n(cfg: &ExperimentConfig) -> Result<RunResult, ExperimentError> {
    expect_kind(cfg, ExperimentKind::ScaleN)?;
    Ok(run_sweep(cfg))
}

pub fn run_scale_l(cfg: &ExperimentConfig) -> Result<RunResult, ExperimentError> {
    expect_kind(cfg, ExperimentKind::ScaleL)?;
    Ok(run_sweep(cfg))
}

pub fn run_ablation(cfg: &ExperimentConfig) -> Result<RunResult, ExperimentError> {
    expect_kind(cfg, ExperimentKind::Ablation)?;
    Ok(run_sweep(cfg))
}

pub fn run_spline(cfg: &ExperimentConfig) -> Result<RunResult, ExperimentError> {
    expect_kind(cfg, ExperimentKind::Spline)?;
    Ok(run_sweep(cfg))
}

/// Covariance concentration over `n_values` at the configured degree.
#[derive(Debug, Clone, PartialEq)]
pub struct BernsteinRun {
    pub config: ExperimentConfig,
    pub reports: Vec<BernsteinReport>,
    /// Log-log slope of the mean norm against `n`.
    pub slope: Option<f64>,
}

impl BernsteinRun {
    pub fn csv(&self) -> String {
        let mut s = format!("{}\n", BernsteinReport::CSV_HEADER);
        for r in &self.reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), std::io::Error> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("bernstein.csv"), self.csv())?;
        let mut m = manifest_header(&self.config);
        let _ = writeln!(m, "# slope = {}", fmt_opt(self.slope));
        std::fs::write(dir.join("manifest.txt"), m)
    }
}

pub fn run_bernstein(cfg: &ExperimentConfig) -> Result<BernsteinRun, ExperimentError> {
    expect_kind(cfg, ExperimentKind::Bernstein)?;
    let spec = FeatureSpec::Monomial(cfg.degree);
    let seed = cfg.seeds[0];
    let reports = run_pool(&cfg.n_values, cfg.jobs, |&n| {
        bernstein_diagnostic(
            n,
            &spec,
            &Uniform::symmetric(),
            cfg.trials,
            mix_seed(&[seed, n as u64]),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let xs: Vec<f64> = reports.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = reports.iter().map(|r| r.mean_norm).collect();
    Ok(BernsteinRun {
        config: cfg.clone(),
        slope: loglog_slope(&xs, &ys),
        reports,
    })
}

/// One line of the verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    /// Where the worst deviation occurred.
    pub detail: String,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tolerance
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(Check::passed)
    }

    pub fn max_deviation(&self, prefix: &str) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.name.starts_with(prefix))
            .map(|c| c.max_deviation)
            .fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = write!(
                s,
                "{} {}: max deviation {:e} (tolerance {:e})",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.max_deviation,
                c.tolerance
            );
            if !c.passed() && !c.detail.is_empty() {
                let _ = write!(s, " at {}", c.detail);
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "{}",
            if self.passed() { "all checks passed" } else { "verification FAILED" }
        );
        s
    }
}

/// Tracks the largest deviation and where it happened.
struct Worst {
    dev: f64,
    at: String,
}

impl Worst {
    fn new() -> Self {
        Self {
            dev: 0.0,
            at: String::new(),
        }
    }

    fn see(&mut self, dev: f64, at: impl FnOnce() -> String) {
        if dev > self.dev || dev.is_nan() && !self.dev.is_nan() {
            self.dev = dev;
            self.at = at();
        }
    }

    fn matrices(&mut self, got: &Matrix, want: &Matrix, label: &str) {
        for r in 0..want.rows() {
            for c in 0..want.cols() {
                let dev = (got[(r, c)] - want[(r, c)]).abs();
                self.see(dev, || format!("{label}, row {r}, column {c}"));
            }
        }
    }

    fn check(self, name: String, tolerance: f64) -> Check {
        Check {
            name,
            max_deviation: self.dev,
            tolerance,
            detail: self.at,
        }
    }
}

fn random_prompt(n: usize, rng: &mut SeededRng) -> (Vec<f64>, Vec<f64>, f64) {
    let xs = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let ys = (0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
    (xs, ys, rng.uniform_in(-1.0, 1.0))
}

/// Kind of constructed network, read from its metadata.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleKind {
    Poly { d: usize },
    Vector { d: usize, out_dim: usize },
    LinearSpline { m: usize },
    QuadraticSpline { m: usize },
}

impl OracleKind {
    pub fn feature_spec(&self) -> Result<FeatureSpec, ConstructionError> {
        Ok(match *self {
            OracleKind::Poly { d } | OracleKind::Vector { d, .. } => FeatureSpec::Monomial(d),
            OracleKind::LinearSpline { m } => FeatureSpec::Spline(KnotGrid::new(-1.0, 1.0, m, 1)?),
            OracleKind::QuadraticSpline { m } => {
                FeatureSpec::Spline(KnotGrid::new(-1.0, 1.0, m, 2)?)
            }
        })
    }

    pub fn layout(&self) -> FeatureLayout {
        match *self {
            OracleKind::Poly { d } => FeatureLayout::polynomial(d, 1),
            OracleKind::Vector { d, out_dim } => FeatureLayout::polynomial(d, out_dim),
            OracleKind::LinearSpline { m } => FeatureLayout::linear_spline(m),
            OracleKind::QuadraticSpline { m } => FeatureLayout::quadratic_spline(m),
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            OracleKind::Vector { out_dim, .. } => out_dim,
            _ => 1,
        }
    }
}

/// Parses `kind=poly;d=4;n=16` style metadata into the kind and `n`.
pub fn parse_oracle_metadata(meta: &str) -> Option<(OracleKind, usize)> {
    let fields: BTreeMap<&str, &str> = meta
        .split(';')
        .filter_map(|kv| kv.split_once('='))
        .collect();
    let num = |k: &str| fields.get(k).and_then(|v| v.parse::<usize>().ok());
    let n = num("n")?;
    let kind = match *fields.get("kind")? {
        "poly" => OracleKind::Poly { d: num("d")? },
        "vector" => OracleKind::Vector {
            d: num("d")?,
            out_dim: num("out_dim")?,
        },
        "linear_spline" => OracleKind::LinearSpline { m: num("m")? },
        "quadratic_spline" => OracleKind::QuadraticSpline { m: num("m")? },
        _ => return None,
    };
    Some((kind, n))
}

/// Builds the oracle for `kind` at context length `n` with the uniform `[-1, 1]` covariance.
pub fn build_oracle(kind: OracleKind, n: usize) -> Result<TransformerNetwork, ExperimentError> {
    let spec = kind.feature_spec()?;
    let inv = invert(&sigma_closed_form(&spec, &Uniform::symmetric())?).map_err(|_| {
        RegressionError::RankDeficient {
            samples: 0,
            features: spec.dim(),
        }
    })?;
    Ok(match kind {
        OracleKind::Poly { d } => build_poly_oracle(d, n, &inv)?,
        OracleKind::Vector { d, out_dim } => build_vector_valued_oracle(d, n, out_dim, &inv)?,
        OracleKind::LinearSpline { m } => {
            build_linear_spline_oracle(&KnotGrid::new(-1.0, 1.0, m, 1)?, n, &inv)?
        }
        OracleKind::QuadraticSpline { m } => {
            build_quadratic_spline_oracle(&KnotGrid::new(-1.0, 1.0, m, 2)?, n, &inv)?
        }
    })
}

/// Expected state after every block of the oracle for `kind`, computed without the network.
///
/// The featurizer stages fill feature rows with directly evaluated features; the final stage adds the
/// closed-form prediction at every column to the output rows.
pub fn expected_states(
    kind: OracleKind,
    h0: &Matrix,
    ys: &[Vec<f64>],
) -> Result<Vec<Matrix>, ExperimentError> {
    let spec = kind.feature_spec()?;
    let inv = invert(&sigma_closed_form(&spec, &Uniform::symmetric())?).map_err(|_| {
        RegressionError::RankDeficient {
            samples: 0,
            features: spec.dim(),
        }
    })?;
    let layout = kind.layout();
    let ell = h0.cols();
    let n = ell - 1;
    let fill = |m: &mut Matrix, upto: usize| {
        for t in 0..ell {
            let x = h0[(0, t)];
            let f = spec.features(x);
            for (k, v) in f.iter().enumerate().take(upto) {
                m[(layout.features.start + k, t)] = *v;
            }
        }
    };
    let mut states = vec![h0.clone()];
    match kind {
        OracleKind::Poly { d } | OracleKind::Vector { d, .. } => {
            let mut m = h0.clone();
            fill(&mut m, 2);
            states.push(m.clone());
            let mut top = 1;
            while top < d {
                top = (2 * top).min(d);
                fill(&mut m, top + 1);
                states.push(m.clone());
            }
        }
        OracleKind::LinearSpline { .. } => {
            let mut m = h0.clone();
            fill(&mut m, spec.dim());
            states.push(m);
        }
        OracleKind::QuadraticSpline { m: bins } => {
            let grid = KnotGrid::new(-1.0, 1.0, bins, 2)?;
            let h = grid.spacing();
            let mut m = h0.clone();
            for (slot, j) in grid.basis_indices().enumerate() {
                for k in 0..4 {
                    for t in 0..ell {
                        let x = h0[(0, t)];
                        m[(1 + 4 * slot + k, t)] = (x - grid.knot(j) - k as f64 * h).max(0.0);
                    }
                }
            }
            states.push(m.clone());
            fill(&mut m, spec.dim());
            states.push(m);
        }
    }
    let mut last = states.last().expect("nonempty").clone();
    let xs: Vec<f64> = (0..n).map(|t| h0[(0, t)]).collect();
    for (k, r) in layout.outputs.clone().enumerate() {
        let yk: Vec<f64> = ys.iter().map(|y| y[k]).collect();
        for t in 0..ell {
            last[(r, t)] += reference_predict_xy(&xs, &yk, h0[(0, t)], &spec, &inv)?;
        }
    }
    states.push(last);
    Ok(states)
}

/// Compares every block output of `net` against [`expected_states`] on seeded prompts.
pub fn verify_network_stages(
    net: &TransformerNetwork,
    kind: OracleKind,
    n: usize,
    prompts: usize,
    seed: u64,
    tolerance: f64,
) -> Result<Check, ExperimentError> {
    let mut rng = SeededRng::new(seed);
    let mut worst = Worst::new();
    let out_dim = kind.out_dim();
    for p in 0..prompts {
        let (xs, _, q) = random_prompt(n, &mut rng);
        let ys: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..out_dim).map(|_| rng.uniform_in(-2.0, 2.0)).collect())
            .collect();
        let emb = embed_prompt_vector(&xs, &ys, q, net.d_embed)?;
        let want = expected_states(kind, &emb.matrix, &ys)?;
        let got = forward_trace(net, &emb)?;
        if got.len() != want.len() {
            return Ok(Check {
                name: format!("stages {kind:?} n={n}"),
                max_deviation: f64::INFINITY,
                tolerance,
                detail: format!("{} blocks, expected {}", got.len() - 1, want.len() - 1),
            });
        }
        for (b, (g, w)) in got.iter().zip(&want).enumerate().skip(1) {
            worst.matrices(g, w, &format!("prompt {p}, block {}", b - 1));
        }
    }
    Ok(worst.check(format!("stages {kind:?} n={n}"), tolerance))
}

/// First parameter where `got` differs from `want`, as a readable location.
pub fn locate_weight_difference(got: &TransformerNetwork, want: &TransformerNetwork) -> Option<String> {
    if got.blocks.len() != want.blocks.len() || got.d_embed != want.d_embed {
        return Some("network shape".into());
    }
    for (b, (gb, wb)) in got.blocks.iter().zip(&want.blocks).enumerate() {
        if gb.heads.len() != wb.heads.len() || gb.activation != wb.activation {
            return Some(format!("block {b} attention shape"));
        }
        for (h, (gh, wh)) in gb.heads.iter().zip(&wb.heads).enumerate() {
            let mats = [
                ("Q", Some(&gh.q), Some(&wh.q)),
                ("K", gh.k.as_ref(), wh.k.as_ref()),
                ("V", Some(&gh.v), Some(&wh.v)),
            ];
            for (name, g, w) in mats {
                match (g, w) {
                    (Some(g), Some(w)) => {
                        if let Some(i) = g
                            .as_slice()
                            .iter()
                            .zip(w.as_slice())
                            .position(|(a, b)| a.to_bits() != b.to_bits())
                        {
                            let (r, c) = (i / g.cols(), i % g.cols());
                            return Some(format!("block {b}, head {h}, {name}[{r},{c}]"));
                        }
                    }
                    (None, None) => {}
                    _ => return Some(format!("block {b}, head {h}, {name} presence")),
                }
            }
        }
        match (&gb.ffn, &wb.ffn) {
            (Some(gf), Some(wf)) => {
                for (l, (gl, wl)) in gf.layers.iter().zip(&wf.layers).enumerate() {
                    let same = |a: &[f64], b: &[f64]| {
                        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                    };
                    if !same(gl.weight.as_slice(), wl.weight.as_slice()) {
                        return Some(format!("block {b}, FFN layer {l} weight"));
                    }
                    if !same(&gl.bias, &wl.bias) {
                        return Some(format!("block {b}, FFN layer {l} bias"));
                    }
                }
                if gf.layers.len() != wf.layers.len() {
                    return Some(format!("block {b}, FFN depth"));
                }
            }
            (None, None) => {}
            _ => return Some(format!("block {b}, FFN presence")),
        }
    }
    None
}

/// Checks a stored oracle: its weights against a fresh build and its block outputs against the
/// expected matrices.
pub fn verify_network(
    net: &TransformerNetwork,
    prompts: usize,
    seed: u64,
) -> Result<VerifyReport, ExperimentError> {
    let Some((kind, n)) = parse_oracle_metadata(&net.metadata) else {
        return Ok(VerifyReport {
            checks: vec![Check {
                name: "metadata".into(),
                max_deviation: f64::INFINITY,
                tolerance: 0.0,
                detail: format!("unrecognized metadata `{}`", net.metadata),
            }],
        });
    };
    let fresh = build_oracle(kind, n)?;
    let diff = locate_weight_difference(net, &fresh);
    let mut checks = vec![Check {
        name: format!("weights match construction {kind:?} n={n}"),
        max_deviation: if diff.is_some() { f64::INFINITY } else { 0.0 },
        tolerance: 0.0,
        detail: diff.unwrap_or_default(),
    }];
    checks.push(verify_network_stages(net, kind, n, prompts, seed, 1e-8)?);
    Ok(VerifyReport { checks })
}

fn random_interaction_check(count: usize, seed: u64) -> Result<Check, ExperimentError> {
    let mut rng = SeededRng::new(seed);
    let de = 9;
    let mut worst = Worst::new();
    for trial in 0..count {
        let n = 1 + rng.below(6);
        let ell = n + 1;
        let (xs, ys, q) = random_prompt(n, &mut rng);
        let ctx: Vec<(f64, f64)> = xs.into_iter().zip(ys).collect();
        let mut h = embed_prompt(&ctx, q, de)?.matrix;
        for r in 1..4 {
            for t in 0..ell {
                h[(r, t)] = rng.uniform_in(-1.5, 1.5);
            }
        }
        let mut qd = Matrix::zeros(de - 3, de);
        let mut kd = Matrix::zeros(de - 3, de);
        for r in 0..de - 3 {
            for c in 0..de {
                if rng.uniform() < 0.3 {
                    qd[(r, c)] = rng.uniform_in(-1.0, 1.0);
                }
                if rng.uniform() < 0.3 {
                    kd[(r, c)] = rng.uniform_in(-1.0, 1.0);
                }
            }
        }
        let spec = InteractionSpec {
            t1: rng.below(ell),
            t2: rng.below(ell),
            out_row: rng.below(de),
            q_data: qd,
            k_data: kd,
            scale: rng.uniform_in(-2.0, 2.0),
            shift: if rng.uniform() < 0.5 { 0.0 } else { rng.uniform_in(0.0, 5.0) },
        };
        let built = build_interaction_head_report(&spec, ell, de, 2.0)?;
        let out = attention_forward(&built.weights, &h, ActivationKind::relu())?;
        let want = spec.contract_output(&h);
        for r in 0..de {
            for t in 0..ell {
                let on_target = (r, t) == (spec.out_row, spec.t1);
                let dev = if on_target {
                    (out[(r, t)] - want[(r, t)]).abs()
                } else if out[(r, t)] == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                };
                worst.see(dev, || format!("trial {trial}, row {r}, column {t}"));
            }
        }
        if built.max_weight > built.weight_bound {
            worst.see(f64::INFINITY, || format!("trial {trial}, weight bound"));
        }
    }
    Ok(worst.check(format!("interaction contract ({count} heads)"), 1e-10))
}

fn decrement_round_trip_check(seed: u64) -> Result<Vec<Check>, ExperimentError> {
    let mut rng = SeededRng::new(seed);
    let mut checks = Vec::new();
    for shift in [10.0, 1e3, 1e6] {
        let params = OracleParams {
            input_bound: 1.0,
            shift: Some(shift),
        };
        let layout = FeatureLayout::polynomial(2, 1);
        let mut worst = Worst::new();
        for p in 0..20 {
            let (xs, ys, q) = random_prompt(5, &mut rng);
            let ctx: Vec<(f64, f64)> = xs.into_iter().zip(ys).collect();
            let emb = embed_prompt(&ctx, q, layout.d_embed)?;
            let block = build_copy_block_with(&layout, 2, 5, &params)?;
            let got = block_forward(&block, &emb.matrix)?;
            let mut want = emb.matrix.clone();
            for t in 0..emb.ell() {
                want[(1, t)] = 1.0;
                want[(2, t)] = emb.matrix[(0, t)];
            }
            worst.matrices(&got, &want, &format!("prompt {p}"));
        }
        checks.push(worst.check(format!("decrement round trip M={shift:e}"), 1e-10));
    }
    Ok(checks)
}

fn formula_check(kind: OracleKind, n: usize, prompts: usize, seed: u64) -> Result<Check, ExperimentError> {
    let net = build_oracle(kind, n)?;
    let spec = kind.feature_spec()?;
    let inv = invert(&sigma_closed_form(&spec, &Uniform::symmetric())?).map_err(|_| {
        RegressionError::RankDeficient {
            samples: 0,
            features: spec.dim(),
        }
    })?;
    let mut rng = SeededRng::new(seed);
    let mut worst = Worst::new();
    let out_dim = kind.out_dim();
    for p in 0..prompts {
        let (xs, _, q) = random_prompt(n, &mut rng);
        let ys: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..out_dim).map(|_| rng.uniform_in(-2.0, 2.0)).collect())
            .collect();
        let emb = embed_prompt_vector(&xs, &ys, q, net.d_embed)?;
        let got = crate::transformer::network_forward(&net, &emb)?;
        let want = reference_predict_vector(&xs, &ys, q, &spec, &inv)?;
        for (k, (g, w)) in got.iter().zip(&want).enumerate() {
            worst.see((g - w).abs(), || format!("prompt {p}, output {k}"));
        }
    }
    Ok(worst.check(format!("oracle = formula {kind:?} n={n}"), 1e-8))
}

fn featurization_check(d: usize, n: usize, prompts: usize, seed: u64) -> Result<Check, ExperimentError> {
    let net = build_oracle(OracleKind::Poly { d }, n)?;
    let feature_blocks = net.blocks.len() - 1;
    let mut rng = SeededRng::new(seed);
    let mut worst = Worst::new();
    for p in 0..prompts {
        let (xs, ys, q) = random_prompt(n, &mut rng);
        let ctx: Vec<(f64, f64)> = xs.into_iter().zip(ys).collect();
        let emb = embed_prompt(&ctx, q, net.d_embed)?;
        let mut h = emb.matrix.clone();
        for b in &net.blocks[..feature_blocks] {
            h = block_forward(b, &h)?;
        }
        let mut want = emb.matrix.clone();
        for t in 0..emb.ell() {
            let x = want[(0, t)];
            for k in 0..=d {
                want[(1 + k, t)] = x.powi(k as i32);
            }
        }
        worst.matrices(&h, &want, &format!("prompt {p}"));
    }
    Ok(worst.check(format!("featurization d={d} n={n}"), 1e-9))
}

/// The exactness suite: featurization, oracle against formula, head contracts, decrement round trips.
///
/// Degrees run over `1..=degree`; context lengths are the configured `n_values` up to 64.
pub fn run_verify_oracle(cfg: &ExperimentConfig) -> Result<VerifyReport, ExperimentError> {
    let seed = cfg.seeds[0];
    let mut ns: Vec<usize> = cfg.n_values.iter().copied().filter(|&n| n <= 64).collect();
    if ns.is_empty() {
        ns.push(4);
    }
    let prompts = 5;
    let mut jobs: Vec<(usize, OracleKind, usize)> = Vec::new();
    for d in 1..=cfg.degree {
        for &n in &ns {
            jobs.push((0, OracleKind::Poly { d }, n));
        }
    }
    for &n in &ns {
        jobs.push((1, OracleKind::Poly { d: cfg.degree }, n));
        jobs.push((1, OracleKind::LinearSpline { m: 5 }, n));
        jobs.push((1, OracleKind::QuadraticSpline { m: 4 }, n));
        jobs.push((1, OracleKind::Vector { d: cfg.degree, out_dim: 2 }, n));
    }
    let results = run_pool(&jobs, cfg.jobs, |&(what, kind, n)| {
        let s = mix_seed(&[seed, what as u64, n as u64]);
        match (what, kind) {
            (0, OracleKind::Poly { d }) => featurization_check(d, n, prompts, s),
            _ => formula_check(kind, n, prompts, s),
        }
    });
    let mut checks = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    checks.push(random_interaction_check(200, mix_seed(&[seed, 2]))?);
    checks.extend(decrement_round_trip_check(mix_seed(&[seed, 3]))?);
    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_preset_defaults() {
        let c = parse_config("experiment = scale_n\n", Some("paper-fig1"), &[]).unwrap();
        assert_eq!(c.l, 32000);
        assert_eq!(c.n, 128);
        assert_eq!(c.degree, 4);
        assert_eq!(c.seeds.len(), 3);
        assert_eq!(c.knots, 5);
        assert_eq!((c.epochs, c.batch, c.lr, c.test_size), (50, 512, 1e-3, 1000));
    }

    #[test]
    fn full_spline_preset_context() {
        let c = parse_config("experiment = spline\n", Some("paper-fig1"), &[]).unwrap();
        assert_eq!((c.n, c.l, c.knots), (64, 16000, 5));
        assert_eq!(c.grid().unwrap().m, 4);
        let m = c.model_config(Architecture::AllLinear, 64);
        assert_eq!((m.num_blocks, m.ffn), (2, false));
        let c = parse_config("experiment = spline\nn = 16\n", Some("paper-fig1"), &[]).unwrap();
        assert_eq!(c.n, 16);
    }

    #[test]
    fn malformed_value_reports_line() {
        let e = parse_config("experiment = scale_L\n\nepochs = banana\n", Some("desk"), &[]).unwrap_err();
        assert!(e.to_string().starts_with("line 3:"), "{e}");
        let e = parse_config("# comment\nbogus = 1\n", Some("desk"), &[]).unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey { ref at, .. } if at == "line 2"));
        let e = parse_config("no equals sign\n", None, &[]).unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { .. }));
    }

    #[test]
    fn missing_required_field() {
        let e = parse_config("seeds = 1\nn_values = 4, 8\n", None, &[]).unwrap_err();
        assert!(matches!(e, ConfigError::Missing { key: "experiment", .. }), "{e}");
        let e = parse_config("experiment = scale_n\nseeds = 1\n", None, &[]).unwrap_err();
        assert!(matches!(e, ConfigError::Missing { key: "n_values", .. }), "{e}");
        let c = parse_config("experiment = scale_n\nseeds = 1\nn_values = 8, 4\n", None, &[]).unwrap();
        assert_eq!(c.n_values, vec![4, 8]);
    }

    #[test]
    fn flags_override_file() {
        let c = parse_config(
            "experiment = scale_L\nepochs = 50\n",
            Some("desk"),
            &[ConfigEntry::flag("epochs", "10")],
        )
        .unwrap();
        assert_eq!(c.epochs, 10);
    }

    #[test]
    fn single_swept_value_is_rejected() {
        let e = parse_config("experiment = scale_n\nn_values = 16\n", Some("desk"), &[]).unwrap_err();
        assert!(matches!(e, ConfigError::Invalid(_)));
    }

    #[test]
    fn unsorted_l_values_are_sorted() {
        let c = parse_config("experiment = scale_L\nL_values = 4000, 1000, 2000\n", Some("desk"), &[])
            .unwrap();
        assert_eq!(c.l_values, vec![1000, 2000, 4000]);
    }

    #[test]
    fn text_round_trip() {
        let c = parse_config(
            "experiment = ablation\nablation = deep16x1\nheads = fixed:3\nffn = false\nlr = 0.0025\n",
            Some("desk"),
            &[],
        )
        .unwrap();
        let again = parse_config(&c.to_text(), None, &[]).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn deep_ablation_shape() {
        let c = parse_config("experiment = ablation\nablation = deep16x1\n", Some("desk"), &[]).unwrap();
        let m = c.model_config(Architecture::Theory, 32);
        assert_eq!(m.num_blocks, 16);
        assert_eq!(m.heads, HeadPolicy::Fixed(1));
        let net = init_model(&m, &mut SeededRng::new(0)).unwrap();
        assert_eq!(net.blocks.len(), 16);
        assert!(net.blocks.iter().all(|b| b.heads.len() == 1));
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [16.0, 32.0, 64.0, 128.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.75)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() + 0.75).abs() < 1e-12);
        assert_eq!(loglog_slope(&[4.0], &[1.0]), None);
    }

    #[test]
    fn pool_preserves_order() {
        let items: Vec<u64> = (0..50).collect();
        let out = run_pool(&items, 4, |&i| splitmix64(i));
        let serial: Vec<u64> = items.iter().map(|&i| splitmix64(i)).collect();
        assert_eq!(out, serial);
    }

    #[test]
    fn metadata_round_trip() {
        assert_eq!(
            parse_oracle_metadata("kind=poly;d=4;n=16"),
            Some((OracleKind::Poly { d: 4 }, 16))
        );
        assert_eq!(
            parse_oracle_metadata("kind=vector;d=2;n=3;out_dim=2"),
            Some((OracleKind::Vector { d: 2, out_dim: 2 }, 3))
        );
        assert_eq!(parse_oracle_metadata("kind=poly;n=3"), None);
    }

    #[test]
    fn expected_states_track_every_block() {
        for kind in [
            OracleKind::Poly { d: 1 },
            OracleKind::Poly { d: 5 },
            OracleKind::LinearSpline { m: 3 },
            OracleKind::QuadraticSpline { m: 2 },
            OracleKind::Vector { d: 2, out_dim: 2 },
        ] {
            let net = build_oracle(kind, 3).unwrap();
            let c = verify_network_stages(&net, kind, 3, 3, 11, 1e-8).unwrap();
            assert!(c.passed(), "{kind:?}: {c:?}");
        }
    }
}
