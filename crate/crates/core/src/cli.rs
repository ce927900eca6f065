//! Command-line front end: `init-config`, `gen`, `train`, `eval`, `export`.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cgame::{
    load_model, save_model, train, train_ablation, CGameModel, CgameError, GateAggregation,
    LossKind, MatcherHyper, ModelConfig, NormPolicy, TrainConfig,
};
use crate::evalkit::{
    evaluate, export_curve, export_heatmap, EvalError, MetricsReport, SplitKind,
};
use crate::netgen::DemandProfile;
use crate::numcore::{Matrix, DEFAULT_SLOPE};
use crate::simkit::{
    generate_dataset, load_dataset, save_dataset, Dataset, NetworkConfig, SimConfig, SimError,
    TravelTimeModel,
};
use crate::storage::write_file_atomically;

/// Share of items used for training; the rest validate.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn field(path: &str, msg: impl std::fmt::Display) -> Self {
        CliError::Config(format!("{path}: {msg}"))
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(_) | SimError::Net(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CgameError> for CliError {
    fn from(e: CgameError) -> Self {
        match e {
            CgameError::InvalidConfig(_) => CliError::Config(e.to_string()),
            CgameError::NonFinite { .. } | CgameError::Num(_) => CliError::Numeric(e.to_string()),
            CgameError::Sim(inner) => inner.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(inner) => inner.into(),
            EvalError::Undefined(_) | EvalError::NonFinite => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub n_items: usize,
    pub n_t: usize,
    pub slice_s: f64,
    pub period_s: f64,
    pub trips_min: usize,
    pub trips_max: usize,
    pub route_cap: usize,
    pub concentration: f64,
    pub hotspot_fraction: f64,
    pub hotspot_boost: f64,
    pub speed_mean: f64,
    pub speed_sd: f64,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        let sim = SimConfig::default();
        let DemandProfile::Heterogeneous { concentration, hotspot_fraction, hotspot_boost } =
            DemandProfile::default()
        else {
            unreachable!("default demand is heterogeneous")
        };
        Self {
            n_items: sim.n_items,
            n_t: sim.n_t,
            slice_s: sim.slice_s,
            period_s: sim.period_s,
            trips_min: sim.trips_min,
            trips_max: sim.trips_max,
            route_cap: sim.route_cap,
            concentration,
            hotspot_fraction,
            hotspot_boost,
            speed_mean: sim.travel.speed_mean_mps,
            speed_sd: sim.travel.speed_sd_mps,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_f: usize,
    pub n_h: usize,
    pub n_s: usize,
    pub p: usize,
    pub q: usize,
    pub lambda: f64,
    pub update_interval: usize,
    pub slope: f64,
    pub aggregation: GateAggregation,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            n_f: m.n_f,
            n_h: m.n_h,
            n_s: m.matcher.n_s,
            p: m.matcher.p,
            q: m.matcher.q,
            lambda: m.matcher.lambda,
            update_interval: m.matcher.update_interval,
            slope: DEFAULT_SLOPE,
            aggregation: GateAggregation::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub loss_kind: LossKind,
    pub norm_policy: NormPolicy,
    pub eval_interval: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            momentum: t.momentum,
            batch_size: t.batch_size,
            max_iters: t.max_iters,
            loss_kind: t.loss_kind,
            norm_policy: t.norm_policy,
            eval_interval: t.eval_interval,
            seeds: vec![0, 1, 2],
        }
    }
}

/// Default locations, used when the matching flag is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data: PathBuf,
    pub models: PathBuf,
    pub report: PathBuf,
    pub export: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data: "data".into(),
            models: "runs".into(),
            report: "report.json".into(),
            export: "heatmaps".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub sim: SimSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::field(if path == "." { "config" } else { &path }, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |path: &str, v: usize| {
            if v == 0 {
                Err(CliError::field(path, "must be positive"))
            } else {
                Ok(())
            }
        };
        let positive_f = |path: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::field(path, format!("must be positive, got {v}")))
            }
        };
        let n = &self.network;
        if n.rows < 2 {
            return Err(CliError::field("network.rows", format!("must be at least 2, got {}", n.rows)));
        }
        if n.cols < 2 {
            return Err(CliError::field("network.cols", format!("must be at least 2, got {}", n.cols)));
        }
        positive_f("network.link_length_m", n.link_length_m)?;

        let s = &self.sim;
        positive("sim.n_items", s.n_items)?;
        positive("sim.n_t", s.n_t)?;
        positive_f("sim.slice_s", s.slice_s)?;
        positive_f("sim.period_s", s.period_s)?;
        if s.trips_min > s.trips_max {
            return Err(CliError::field("sim.trips_min", "exceeds sim.trips_max"));
        }
        positive("sim.route_cap", s.route_cap)?;
        positive_f("sim.concentration", s.concentration)?;
        if !(0.0..=1.0).contains(&s.hotspot_fraction) {
            return Err(CliError::field("sim.hotspot_fraction", "must lie in [0, 1]"));
        }
        if !(s.hotspot_boost >= 1.0 && s.hotspot_boost.is_finite()) {
            return Err(CliError::field("sim.hotspot_boost", "must be at least 1"));
        }
        positive_f("sim.speed_mean", s.speed_mean)?;
        if !(s.speed_sd >= 0.0 && s.speed_sd.is_finite()) {
            return Err(CliError::field("sim.speed_sd", "must be nonnegative"));
        }

        let m = &self.model;
        positive("model.n_f", m.n_f)?;
        positive("model.n_h", m.n_h)?;
        positive("model.n_s", m.n_s)?;
        positive("model.p", m.p)?;
        positive("model.q", m.q)?;
        positive("model.update_interval", m.update_interval)?;
        if m.p >= m.n_s {
            return Err(CliError::field("model.p", format!("must be below model.n_s = {}", m.n_s)));
        }
        if !(0.0..1.0).contains(&m.lambda) {
            return Err(CliError::field("model.lambda", format!("must lie in [0, 1), got {}", m.lambda)));
        }
        if !(m.slope > 0.0 && m.slope < 1.0) {
            return Err(CliError::field("model.slope", "must lie in (0, 1)"));
        }

        let t = &self.train;
        positive_f("train.lr", t.lr)?;
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(CliError::field("train.momentum", "must lie in [0, 1)"));
        }
        if t.batch_size < 2 {
            return Err(CliError::field("train.batch_size", "must be at least 2"));
        }
        positive("train.max_iters", t.max_iters)?;
        positive("train.eval_interval", t.eval_interval)?;
        if t.seeds.is_empty() {
            return Err(CliError::field("train.seeds", "must list at least one seed"));
        }

        self.sim_config().validate()?;
        self.model_config().validate()?;
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.sim;
        SimConfig {
            network: self.network,
            n_items: s.n_items,
            n_t: s.n_t,
            slice_s: s.slice_s,
            period_s: s.period_s,
            trips_min: s.trips_min,
            trips_max: s.trips_max,
            route_cap: s.route_cap,
            train_fraction: TRAIN_FRACTION,
            demand: DemandProfile::Heterogeneous {
                concentration: s.concentration,
                hotspot_fraction: s.hotspot_fraction,
                hotspot_boost: s.hotspot_boost,
            },
            travel: TravelTimeModel {
                speed_mean_mps: s.speed_mean,
                speed_sd_mps: s.speed_sd,
                ..TravelTimeModel::default()
            },
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_f: m.n_f,
            n_h: m.n_h,
            slope: m.slope,
            matcher: MatcherHyper {
                n_s: m.n_s,
                p: m.p,
                q: m.q,
                lambda: m.lambda,
                update_interval: m.update_interval,
                aggregation: m.aggregation,
                ..MatcherHyper::default()
            },
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            momentum: t.momentum,
            batch_size: t.batch_size,
            max_iters: t.max_iters,
            loss_kind: t.loss_kind,
            norm_policy: t.norm_policy,
            eval_interval: t.eval_interval,
            seed,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cgame", version, about = "OD matrix estimation from link traffic counts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the default configuration.
    InitConfig {
        /// Destination file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `sim.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model per seed.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `train.seeds` with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Keep the matcher frozen at all-ones.
        #[arg(long)]
        ablation: bool,
    },
    /// Evaluate models on the validation split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model directory; repeat for multiple seeds.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export true, predicted and absolute-difference OD heatmaps of one item.
    Export {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        item: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config_or_default(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Accepts either a model directory or a training run directory holding one.
fn resolve_model_dir(dir: &Path) -> PathBuf {
    if dir.join("model.json").exists() {
        dir.to_path_buf()
    } else {
        dir.join("model")
    }
}

fn check_dims(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let n = &cfg.network;
    let expected = (n.n_links(), cfg.sim.n_t, n.n_spots());
    let found = (ds.meta.n_l, ds.meta.n_t, ds.meta.n_p);
    if expected != found {
        return Err(CliError::Data(format!(
            "dataset has (n_l, n_t, n_p) = {found:?}, config implies {expected:?}"
        )));
    }
    Ok(())
}

fn check_model(model: &CGameModel, ds: &Dataset) -> Result<()> {
    let d = model.dims;
    if (d.n_l, d.n_t, d.n_p) != (ds.meta.n_l, ds.meta.n_t, ds.meta.n_p) {
        return Err(CliError::Data(format!(
            "model expects (n_l, n_t, n_p) = {:?}, dataset has {:?}",
            (d.n_l, d.n_t, d.n_p),
            (ds.meta.n_l, ds.meta.n_t, ds.meta.n_p)
        )));
    }
    Ok(())
}

pub fn cmd_init_config(out: Option<&Path>) -> Result<String> {
    let text = RunConfig::default().to_json();
    if let Some(path) = out {
        write_file_atomically(path, text.as_bytes()).map_err(|e| io_err(path, e))?;
    }
    Ok(text)
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path, seed: Option<u64>) -> Result<String> {
    let seed = seed.unwrap_or(cfg.sim.seed);
    let ds = generate_dataset(&cfg.sim_config(), seed)?;
    let checksum = save_dataset(&ds, out)?;
    Ok(format!(
        "items {} (train {}, validation {})\nF {}x{}\nD {}x{}\nsha256 {checksum}",
        ds.items.len(),
        ds.split.train.len(),
        ds.split.validation.len(),
        ds.meta.n_l,
        ds.meta.n_t,
        ds.meta.n_p,
        ds.meta.n_p
    ))
}

pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    ablation: bool,
) -> Result<String> {
    let ds = load_dataset(data)?;
    check_dims(cfg, &ds)?;
    let seeds = seed.map_or_else(|| cfg.train.seeds.clone(), |s| vec![s]);
    let model_cfg = cfg.model_config();
    let mut lines = Vec::new();
    for s in seeds {
        let tc = cfg.train_config(s);
        let outcome = if ablation {
            train_ablation(&ds, &model_cfg, &tc)?
        } else {
            train(&ds, &model_cfg, &tc)?
        };
        let run = out.join(format!("seed_{s}"));
        save_model(&outcome.model, &run.join("model"))?;
        let curve = &outcome.curve;
        let train_series: Vec<(usize, f64)> =
            curve.train.iter().enumerate().map(|(i, v)| (i + 1, *v)).collect();
        export_curve(&train_series, &run.join("train_loss.csv"))?;
        export_curve(&curve.validation, &run.join("validation_loss.csv"))?;
        let last = curve.validation.last().map_or(f64::NAN, |v| v.1);
        lines.push(format!(
            "seed {s}: {} iterations, {} matcher steps, best validation loss at {} (final {last})",
            curve.train.len(),
            curve.matcher_steps,
            curve.best_iter
        ));
    }
    Ok(lines.join("\n"))
}

pub fn cmd_eval(data: &Path, models: &[PathBuf], report: &Path) -> Result<String> {
    let ds = load_dataset(data)?;
    let mut per_model = Vec::new();
    let mut labels = Vec::new();
    for dir in models {
        let model = load_model(&resolve_model_dir(dir))?;
        check_model(&model, &ds)?;
        per_model.push(evaluate(&model, &ds, SplitKind::Validation)?);
        labels.push(dir.display().to_string());
    }
    let report_data = MetricsReport::aggregate(SplitKind::Validation, &labels, &per_model)?;
    report_data.write(report)?;
    let lines: Vec<String> = report_data
        .metrics
        .iter()
        .map(|(k, s)| format!("{k} {:.6} ± {:.6}", s.mean, s.std))
        .collect();
    Ok(lines.join("\n"))
}

pub fn cmd_export(data: &Path, model_dir: &Path, item: usize, out: &Path) -> Result<String> {
    let ds = load_dataset(data)?;
    let model = load_model(&resolve_model_dir(model_dir))?;
    check_model(&model, &ds)?;
    let it = ds.items.get(item).ok_or_else(|| {
        CliError::Config(format!("--item {item} out of range for {} items", ds.items.len()))
    })?;
    let pred = model.predict_od(&it.counts)?;
    let n = ds.meta.n_p;
    let truth = Matrix::from_vec(n, n, it.od.as_slice().to_vec()).map_err(CgameError::from)?;
    let est = Matrix::from_vec(n, n, pred.as_slice().to_vec()).map_err(CgameError::from)?;
    let diff = Matrix::from_vec(
        n,
        n,
        truth.as_slice().iter().zip(est.as_slice()).map(|(a, b)| (a - b).abs()).collect(),
    )
    .map_err(CgameError::from)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut written = Vec::new();
    for (name, m) in [("true_od", &truth), ("predicted_od", &est), ("abs_diff", &diff)] {
        let files = export_heatmap(m, &out.join(name))?;
        written.push(files.csv.display().to_string());
        written.push(files.pgm.display().to_string());
    }
    Ok(written.join("\n"))
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::InitConfig { out } => cmd_init_config(out.as_deref()),
        Command::Gen { config, out, seed } => {
            let cfg = config_or_default(config.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.paths.data.clone());
            cmd_gen(&cfg, &out, seed)
        }
        Command::Train { config, data, out, seed, ablation } => {
            let cfg = config_or_default(config.as_deref())?;
            let data = data.unwrap_or_else(|| cfg.paths.data.clone());
            let out = out.unwrap_or_else(|| cfg.paths.models.clone());
            cmd_train(&cfg, &data, &out, seed, ablation)
        }
        Command::Eval { config, data, models, out } => {
            let cfg = config_or_default(config.as_deref())?;
            let data = data.unwrap_or_else(|| cfg.paths.data.clone());
            let out = out.unwrap_or_else(|| cfg.paths.report.clone());
            cmd_eval(&data, &models, &out)
        }
        Command::Export { config, data, model, item, out } => {
            let cfg = config_or_default(config.as_deref())?;
            let data = data.unwrap_or_else(|| cfg.paths.data.clone());
            let out = out.unwrap_or_else(|| cfg.paths.export.clone());
            cmd_export(&data, &model, item, &out)
        }
    }
}
