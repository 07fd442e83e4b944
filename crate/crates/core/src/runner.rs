//! Experiment orchestration: config files, the multi-round loop, CSV
//! output and plot tables.
//!
//! Each seed writes its own set of files next to `output`:
//!
//! - `<stem>_seed<S>.csv`: one row per round
//! - `<stem>_seed<S>_energy.csv`: per-device transmit energy per round
//! - `<stem>_seed<S>_hist_{estimate,truth}.txt`: aggregate-update
//!   densities at the first round whose accuracy reaches
//!   `histogram_accuracy`

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::airchan::ThresholdOn;
use crate::error::{Error, Result};
use crate::fedcore::{
    load_mnist, partition_iid, partition_noniid, synthetic_blobs, Dataset, Mlp, ModelParams, SgdConfig,
};
use crate::iht::IhtConfig;
use crate::linmap::{generate_matrix, MeasurementMatrix};
use crate::numcore::{baseband_len, RngStream};
use crate::pipelines::{
    linear_edges, run_round, update_histogram, ChannelConfig, DesignKind, DesignSpec, Federation, MaskMode,
    RoundMetrics,
};

/// Environment variable naming the MNIST directory.
pub const DATA_DIR_ENV: &str = "OTAFL_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

pub const CSV_HEADER: [&str; 10] = [
    "round",
    "channel_uses",
    "cum_channel_uses",
    "accuracy",
    "agg_nmse",
    "eta",
    "iht_iters",
    "converged",
    "skipped",
    "seed",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Noniid,
    Iid,
}

/// Flat experiment description. Only `design` and `output` are required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub design: DesignKind,
    pub output: PathBuf,

    #[serde(default = "d::sparsity")]
    pub sparsity: usize,
    #[serde(default = "d::compressed_len")]
    pub compressed_len: usize,
    /// Defaults to `uniform_identical` for case 2 and `top_l` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_mode: Option<MaskMode>,
    #[serde(default)]
    pub debias_uniform: bool,
    #[serde(default = "d::iht_epsilon")]
    pub iht_epsilon: f64,
    #[serde(default = "d::iht_max_iters")]
    pub iht_max_iters: usize,
    #[serde(default = "d::yes")]
    pub iht_scale_epsilon: bool,
    /// `c` in `A = A' / (c ||A'||_op)`.
    #[serde(default = "d::matrix_scale")]
    pub matrix_scale: f64,
    /// Draw a fresh matrix every round instead of one per seed.
    #[serde(default)]
    pub resample_matrix: bool,

    #[serde(default = "d::total_users")]
    pub total_users: usize,
    #[serde(default = "d::users_per_round")]
    pub users_per_round: usize,
    #[serde(default = "d::total_power")]
    pub total_power: f64,
    #[serde(default = "d::noise_var")]
    pub noise_var: f64,
    #[serde(default = "d::gain_threshold")]
    pub gain_threshold: f64,
    #[serde(default)]
    pub threshold_on: ThresholdOn,
    #[serde(default)]
    pub renormalize_truncated: bool,

    #[serde(default = "d::rounds")]
    pub rounds: usize,
    #[serde(default = "d::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d::yes")]
    pub parallel_seeds: bool,

    #[serde(default = "d::hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d::dataset")]
    pub dataset: DatasetKind,
    /// MNIST directory; falls back to `$OTAFL_DATA_DIR`, then `data/mnist`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_samples: Option<usize>,
    #[serde(default = "d::synthetic_dim")]
    pub synthetic_dim: usize,
    #[serde(default = "d::synthetic_classes")]
    pub synthetic_classes: usize,
    #[serde(default = "d::synthetic_train")]
    pub synthetic_train: usize,
    #[serde(default = "d::synthetic_test")]
    pub synthetic_test: usize,
    #[serde(default = "d::synthetic_separation")]
    pub synthetic_separation: f64,
    #[serde(default = "d::partition")]
    pub partition: PartitionKind,
    #[serde(default = "d::shards_per_device")]
    pub shards_per_device: usize,

    #[serde(default = "d::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    #[serde(default = "d::local_epochs")]
    pub local_epochs: usize,

    #[serde(default = "d::histogram_accuracy")]
    pub histogram_accuracy: f64,
    /// Histogram covers `[-histogram_range, histogram_range]`.
    #[serde(default = "d::histogram_range")]
    pub histogram_range: f64,
    #[serde(default = "d::histogram_bins")]
    pub histogram_bins: usize,
}

mod d {
    use super::*;
    pub fn sparsity() -> usize {
        500
    }
    pub fn compressed_len() -> usize {
        1000
    }
    pub fn iht_epsilon() -> f64 {
        1e-8
    }
    pub fn iht_max_iters() -> usize {
        500
    }
    pub fn yes() -> bool {
        true
    }
    pub fn matrix_scale() -> f64 {
        1.01
    }
    pub fn total_users() -> usize {
        100
    }
    pub fn users_per_round() -> usize {
        10
    }
    pub fn total_power() -> f64 {
        1e3
    }
    pub fn noise_var() -> f64 {
        1.0
    }
    pub fn gain_threshold() -> f64 {
        0.01
    }
    pub fn rounds() -> usize {
        400
    }
    pub fn seeds() -> Vec<u64> {
        vec![0, 1, 2]
    }
    pub fn hidden() -> Vec<usize> {
        vec![26]
    }
    pub fn dataset() -> DatasetKind {
        DatasetKind::Mnist
    }
    pub fn synthetic_dim() -> usize {
        16
    }
    pub fn synthetic_classes() -> usize {
        10
    }
    pub fn synthetic_train() -> usize {
        1000
    }
    pub fn synthetic_test() -> usize {
        500
    }
    pub fn synthetic_separation() -> f64 {
        3.0
    }
    pub fn partition() -> PartitionKind {
        PartitionKind::Noniid
    }
    pub fn shards_per_device() -> usize {
        2
    }
    pub fn learning_rate() -> f64 {
        0.01
    }
    pub fn batch_size() -> usize {
        100
    }
    pub fn local_epochs() -> usize {
        1
    }
    pub fn histogram_accuracy() -> f64 {
        0.5
    }
    pub fn histogram_range() -> f64 {
        0.01
    }
    pub fn histogram_bins() -> usize {
        200
    }
}

impl ExperimentConfig {
    /// Config with every optional key at its default.
    pub fn with_defaults(design: DesignKind, output: impl Into<PathBuf>) -> Self {
        let text = toml::to_string(&Minimal {
            design,
            output: output.into(),
        })
        .expect("minimal config serializes");
        toml::from_str(&text).expect("minimal config parses")
    }

    pub fn input_dim(&self) -> usize {
        match self.dataset {
            DatasetKind::Mnist => 784,
            DatasetKind::Synthetic => self.synthetic_dim,
        }
    }

    pub fn classes(&self) -> usize {
        match self.dataset {
            DatasetKind::Mnist => 10,
            DatasetKind::Synthetic => self.synthetic_classes,
        }
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut l = vec![self.input_dim()];
        l.extend(&self.hidden);
        l.push(self.classes());
        l
    }

    /// Model dimension `d`.
    pub fn param_count(&self) -> usize {
        Mlp::param_count(&self.layers())
    }

    /// Baseband length `N = ceil(d / 2)`.
    pub fn baseband_len(&self) -> usize {
        baseband_len(self.param_count())
    }

    pub fn design_spec(&self) -> DesignSpec {
        let mut spec = DesignSpec::new(self.design, self.sparsity, self.compressed_len);
        if let Some(m) = self.mask_mode {
            spec.mask_mode = m;
        }
        spec.debias_uniform = self.debias_uniform;
        spec.iht = IhtConfig {
            sparsity: self.sparsity,
            epsilon: self.iht_epsilon,
            max_iters: self.iht_max_iters,
            scale_epsilon: self.iht_scale_epsilon,
        };
        spec
    }

    pub fn channel(&self) -> ChannelConfig {
        ChannelConfig {
            total_power: self.total_power,
            noise_var: self.noise_var,
            gain_threshold: self.gain_threshold,
            threshold_on: self.threshold_on,
            renormalize_truncated: self.renormalize_truncated,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("{key}: {why}")));
        let layers = self.layers();
        if layers.iter().any(|&w| w == 0) {
            return bad("hidden", "layer widths must be positive".into());
        }
        let n = self.baseband_len();
        self.design_spec()
            .validate(n)
            .map_err(|e| Error::Config(format!("design (N = {n}): {e}")))?;
        if self.design.uses_matrix() && !(self.matrix_scale > 1.0) {
            return bad("matrix_scale", format!("must exceed 1, got {}", self.matrix_scale));
        }
        if self.total_users == 0 {
            return bad("total_users", "must be positive".into());
        }
        if self.users_per_round == 0 || self.users_per_round > self.total_users {
            return bad(
                "users_per_round",
                format!("need 1 <= K <= total_users = {}, got {}", self.total_users, self.users_per_round),
            );
        }
        if !(self.total_power > 0.0) || !self.total_power.is_finite() {
            return bad("total_power", "must be positive and finite".into());
        }
        if !(self.noise_var >= 0.0) || !self.noise_var.is_finite() {
            return bad("noise_var", "must be non-negative and finite".into());
        }
        if !(self.gain_threshold >= 0.0) {
            return bad("gain_threshold", "must be non-negative".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds", "need at least one seed".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds", "seeds must be distinct".into());
        }
        if self.partition == PartitionKind::Noniid && self.shards_per_device == 0 {
            return bad("shards_per_device", "must be positive".into());
        }
        if self.dataset == DatasetKind::Synthetic && (self.synthetic_dim == 0 || self.synthetic_classes == 0) {
            return bad("synthetic_dim", "synthetic dimensions must be positive".into());
        }
        self.sgd().validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.histogram_range > 0.0) {
            return bad("histogram_range", "must be positive".into());
        }
        if self.histogram_bins == 0 {
            return bad("histogram_bins", "must be positive".into());
        }
        if self.output.file_stem().is_none() {
            return bad("output", "needs a file name".into());
        }
        Ok(())
    }

    /// Path of the per-seed CSV, e.g. `runs/case1_seed0.csv`.
    pub fn seed_path(&self, seed: u64, suffix: &str) -> PathBuf {
        let stem = self.output.file_stem().unwrap_or_default().to_string_lossy();
        let ext = self.output.extension().map_or("csv".into(), |e| e.to_string_lossy());
        let name = if suffix.is_empty() {
            format!("{stem}_seed{seed}.{ext}")
        } else {
            format!("{stem}_seed{seed}_{suffix}")
        };
        self.output.with_file_name(name)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
    }
}

#[derive(Serialize)]
struct Minimal {
    design: DesignKind,
    output: PathBuf,
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn config_to_string(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

pub fn save_config(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    fs::write(path, config_to_string(cfg)?).map_err(|e| Error::io(path, e))
}

/// Train and test sets for one seed (synthetic data depends on the seed).
pub fn load_datasets(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => {
            let dir = cfg.data_dir();
            (load_mnist(&dir, true)?, load_mnist(&dir, false)?)
        }
        DatasetKind::Synthetic => {
            // one draw so train and test share blob centers
            let total = cfg.synthetic_train + cfg.synthetic_test;
            let all = synthetic_blobs(
                &mut RngStream::new(seed, "synthetic"),
                total,
                cfg.synthetic_dim,
                cfg.synthetic_classes,
                cfg.synthetic_separation,
            )?;
            let dim = all.dim();
            let split = |range: std::ops::Range<usize>| {
                let feats = range.clone().flat_map(|i| all.features(i).to_vec()).collect();
                let labels = range.map(|i| all.label(i)).collect();
                Dataset::new(feats, labels, dim, all.classes())
            };
            (split(0..cfg.synthetic_train)?, split(cfg.synthetic_train..total)?)
        }
    };
    let train = match cfg.train_samples {
        Some(n) => train.take(n),
        None => train,
    };
    let test = match cfg.test_samples {
        Some(n) => test.take(n),
        None => test,
    };
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if train.dim() != cfg.input_dim() {
        return Err(Error::Config(format!(
            "dataset has {} features, model expects {}",
            train.dim(),
            cfg.input_dim()
        )));
    }
    Ok((train, test))
}

/// Builds the federation and initial model of one seed.
pub fn setup(cfg: &ExperimentConfig, seed: u64) -> Result<(Federation, ModelParams)> {
    let (train, test) = load_datasets(cfg, seed)?;
    let mut part_rng = RngStream::new(seed, "partition");
    let partitions = match cfg.partition {
        PartitionKind::Noniid => partition_noniid(&train, cfg.total_users, cfg.shards_per_device, &mut part_rng)?,
        PartitionKind::Iid => partition_iid(&train, cfg.total_users, &mut part_rng)?,
    };
    let model = Mlp::new(cfg.layers())?;
    let theta = model.init(&mut RngStream::new(seed, "init"));
    Ok((
        Federation {
            model,
            train,
            test,
            partitions,
            users_per_round: cfg.users_per_round,
            sgd: cfg.sgd(),
            channel: cfg.channel(),
        },
        theta,
    ))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn csv_record(m: &RoundMetrics) -> [String; 10] {
    [
        m.round.to_string(),
        m.channel_uses.to_string(),
        m.cum_channel_uses.to_string(),
        m.test_accuracy.to_string(),
        opt(m.agg_nmse),
        opt(m.eta),
        opt(m.iht_iterations),
        opt(m.converged),
        m.skipped.to_string(),
        m.seed.to_string(),
    ]
}

fn create_csv(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub csv: PathBuf,
    pub rows: Vec<RoundMetrics>,
    /// Round at which the histogram snapshot was taken, if any.
    pub histogram_round: Option<usize>,
    pub final_params: ModelParams,
}

fn seed_matrix(cfg: &ExperimentConfig, seed: u64, round: usize) -> Result<Option<MeasurementMatrix>> {
    if !cfg.design.uses_matrix() {
        return Ok(None);
    }
    let label = if cfg.resample_matrix {
        format!("matrix/{round}")
    } else {
        "matrix".to_string()
    };
    generate_matrix(
        &mut RngStream::new(seed, label),
        cfg.compressed_len,
        cfg.baseband_len(),
        cfg.matrix_scale,
    )
    .map(Some)
}

/// Runs all rounds of one seed, flushing a CSV row after every round.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let design = cfg.design_spec();
    let csv_path = cfg.seed_path(seed, "");
    let mut out = create_csv(&csv_path)?;
    out.write_record(CSV_HEADER)?;
    out.flush().map_err(|e| Error::io(&csv_path, e))?;
    let energy_path = cfg.seed_path(seed, "energy.csv");
    let mut energy = create_csv(&energy_path)?;
    energy.write_record(["round", "device", "gain_abs", "energy", "budget"])?;
    energy.flush().map_err(|e| Error::io(&energy_path, e))?;

    let mut rows = Vec::with_capacity(cfg.rounds);
    let mut histogram_round = None;
    let (fed, mut theta) = setup(cfg, seed)?;
    let mut matrix = if cfg.rounds > 0 { seed_matrix(cfg, seed, 1)? } else { None };
    let edges = linear_edges(-cfg.histogram_range, cfg.histogram_range, cfg.histogram_bins);
    let mut cum = 0;
    for round in 1..=cfg.rounds {
        if cfg.resample_matrix && round > 1 {
            matrix = seed_matrix(cfg, seed, round)?;
        }
        let r = run_round(&design, &fed, &theta, matrix.as_ref(), seed, round).map_err(|e| e.at_round(round))?;
        let mut m = r.metrics;
        cum += m.channel_uses;
        m.cum_channel_uses = cum;
        out.write_record(csv_record(&m))?;
        out.flush().map_err(|e| Error::io(&csv_path, e))?;
        if let (Some(ch), Some(rep)) = (&r.transmission.channel, &r.transmission.report) {
            for ((&pos, h), e) in ch.active_set.iter().zip(&ch.gains).zip(&rep.per_device_energy) {
                energy.write_record([
                    round.to_string(),
                    r.selected[pos].to_string(),
                    h.norm().to_string(),
                    e.to_string(),
                    rep.budget.to_string(),
                ])?;
            }
            energy.flush().map_err(|e| Error::io(&energy_path, e))?;
        }
        if histogram_round.is_none() && m.test_accuracy >= cfg.histogram_accuracy {
            if let Some(est) = &r.transmission.estimate {
                update_histogram(est, &edges)?.write_text(&cfg.seed_path(seed, "hist_estimate.txt"))?;
                update_histogram(&r.transmission.truth, &edges)?
                    .write_text(&cfg.seed_path(seed, "hist_truth.txt"))?;
                histogram_round = Some(round);
            }
        }
        log::info!(
            "seed {seed} round {round}/{}: accuracy {:.4}, nmse {}",
            cfg.rounds,
            m.test_accuracy,
            opt(m.agg_nmse)
        );
        rows.push(m);
        theta = r.params;
    }
    Ok(SeedRun {
        seed,
        csv: csv_path,
        rows,
        histogram_round,
        final_params: theta,
    })
}

/// Runs every seed of `cfg`, in parallel threads if `parallel_seeds`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    if !cfg.parallel_seeds || cfg.seeds.len() == 1 {
        return cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = cfg.seeds.iter().map(|&s| scope.spawn(move || run_seed(cfg, s))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed worker panicked"))
            .collect()
    })
}

/// One parsed row of a run CSV.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CsvRow {
    pub round: usize,
    pub channel_uses: usize,
    pub cum_channel_uses: usize,
    pub accuracy: f64,
    pub agg_nmse: Option<f64>,
    pub eta: Option<f64>,
    pub iht_iters: Option<usize>,
    pub converged: Option<bool>,
    pub skipped: bool,
    pub seed: u64,
}

pub fn read_run_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unexpected columns {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotMode {
    VsRound,
    VsChannelUses,
    Histogram,
}

impl std::str::FromStr for PlotMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vs_round" => Ok(PlotMode::VsRound),
            "vs_channel_uses" => Ok(PlotMode::VsChannelUses),
            "histogram" => Ok(PlotMode::Histogram),
            other => Err(Error::invalid(
                "mode",
                format!("unknown plot mode {other:?} (vs_round, vs_channel_uses, histogram)"),
            )),
        }
    }
}

/// Row of a reduced plot table: x value, then mean, min and max over inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandRow {
    pub x: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

fn band(x: f64, ys: &[f64]) -> BandRow {
    BandRow {
        x,
        mean: ys.iter().sum::<f64>() / ys.len() as f64,
        min: ys.iter().copied().fold(f64::INFINITY, f64::min),
        max: ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

fn read_hist(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(x)), Some(Ok(y)), None) => Ok((x, y)),
                _ => Err(bad(format!("bad histogram line {l:?}"))),
            }
        })
        .collect()
}

/// Reduces several runs (or histogram dumps) to a mean/min/max table.
///
/// Rows are aligned by position; inputs must have the same length and the
/// same round numbers (or bin centers).
pub fn emit_plotdata(paths: &[PathBuf], mode: PlotMode) -> Result<(String, Vec<BandRow>)> {
    if paths.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mismatch = |p: &Path, why: &str| Error::Format {
        path: p.to_path_buf(),
        reason: why.to_string(),
    };
    let series: Vec<Vec<(f64, f64)>> = match mode {
        PlotMode::Histogram => paths.iter().map(|p| read_hist(p)).collect::<Result<_>>()?,
        PlotMode::VsRound | PlotMode::VsChannelUses => paths
            .iter()
            .map(|p| {
                Ok(read_run_csv(p)?
                    .into_iter()
                    .map(|r| {
                        let x = match mode {
                            PlotMode::VsRound => r.round as f64,
                            _ => r.cum_channel_uses as f64,
                        };
                        (x, r.accuracy)
                    })
                    .collect())
            })
            .collect::<Result<_>>()?,
    };
    let first = &series[0];
    for (s, p) in series.iter().zip(paths).skip(1) {
        if s.len() != first.len() {
            return Err(mismatch(p, "row count differs from the first input"));
        }
        if mode != PlotMode::VsChannelUses && s.iter().zip(first).any(|(a, b)| a.0 != b.0) {
            return Err(mismatch(p, "x column differs from the first input"));
        }
    }
    let rows: Vec<BandRow> = (0..first.len())
        .map(|i| {
            let xs: Vec<f64> = series.iter().map(|s| s[i].0).collect();
            let ys: Vec<f64> = series.iter().map(|s| s[i].1).collect();
            // channel-use axes agree unless some seeds skipped rounds
            band(xs.iter().sum::<f64>() / xs.len() as f64, &ys)
        })
        .collect();
    let (xname, yname) = match mode {
        PlotMode::VsRound => ("round", "accuracy"),
        PlotMode::VsChannelUses => ("cum_channel_uses", "accuracy"),
        PlotMode::Histogram => ("bin_center", "density"),
    };
    let mut text = format!("{xname},{yname}_mean,{yname}_min,{yname}_max\n");
    for r in &rows {
        text.push_str(&format!("{},{},{},{}\n", r.x, r.mean, r.min, r.max));
    }
    Ok((text, rows))
}

/// Writes `text` to `path`, or stdout when `path` is `None`.
pub fn write_table(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?);
            w.write_all(text.as_bytes()).map_err(|e| Error::io(p, e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
