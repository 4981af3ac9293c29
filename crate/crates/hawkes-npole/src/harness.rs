//! Experiment harness behind the `hawkes-npole` binary: TOML experiment
//! configs, deterministic seeded orchestration, and artifact output.
//!
//! Every experiment writes its artifacts into `out_dir`: a `manifest.json`
//! holding the config hash, package version and wall-clock, plus the
//! kind-specific files (event CSVs, function curves, metric JSON). All
//! metric files are byte-identical across reruns of the same config;
//! wall-clock readings live in the manifest only. Kinds with pass/fail
//! gates print one line per gate and, with `check` set, fail with exit
//! code 3 when a gate does not hold.

use crate::baselines::ogd_exp_fit;
use crate::discretize::{
    build_grid, discretized_nll, discretized_nll_with, exponential_model_tails, prop1_bound,
    UpdateGrid,
};
use crate::extensions::{
    fit_marked, shp_fit, tile_to_spatial, write_marked_csv, MarkTransform, MarkedMode,
    MarkedOptions, ShpOptions, SpaceCells, UpdateOrder,
};
use crate::kernels::Kernel;
use crate::metrics::{
    aggregate, exp_l1_errors, stability_probe, state_l1_errors, write_hyper_table_csv,
    StabilityProbe, TrialMetrics,
};
use crate::npole::{fit, regret_trace, HyperParams, ProjectionMode, RegretTrace};
use crate::process::{
    benchmark_model, read_stream_csv, simulate, tiled_benchmark_model, write_stream_csv,
    EventStream, GroundTruthFn, HawkesModel, IngestSummary, TriggerFn,
};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Process exit code for an error: 2 for invalid input or config, 3 for a
/// failed `check` gate, 1 for anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::CheckFailed(_) => 3,
        Error::InvalidInput(_)
        | Error::Parse { .. }
        | Error::UnsupportedModel(_)
        | Error::UnsupportedKernel(_) => 2,
        _ => 1,
    }
}

// ======================= configuration =======================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Simulate,
    Fit,
    Evaluate,
    Table1,
    Prop1Check,
    Regret,
    Mismatch,
    Marked,
    Spatial,
    Stability,
}

impl Kind {
    pub fn token(&self) -> &'static str {
        match self {
            Kind::Simulate => "simulate",
            Kind::Fit => "fit",
            Kind::Evaluate => "evaluate",
            Kind::Table1 => "table1",
            Kind::Prop1Check => "prop1-check",
            Kind::Regret => "regret",
            Kind::Mismatch => "mismatch",
            Kind::Marked => "marked",
            Kind::Spatial => "spatial",
            Kind::Stability => "stability",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSource {
    /// Five-dimensional synthetic reference model.
    Benchmark,
    /// Block-diagonal tiling of the reference model (`blocks` copies).
    Tiled,
    /// Homogeneous Poisson process with rate `mu`.
    Poisson,
    /// One-dimensional `alpha e^(-beta t)` self-excitation.
    Expdecay,
    /// Model deserialized from a JSON file at `path`.
    ModelFile,
    /// Events ingested from a CSV file at `path`; no generative model.
    EventsFile,
}

/// Where event data comes from: a generative model (simulated per trial
/// seed) or an event file on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub source: ModelSource,
    /// Tiling factor for `tiled`.
    pub blocks: usize,
    /// Baseline rate for `poisson` and `expdecay`.
    pub mu: f64,
    /// Amplitude for `expdecay`.
    pub alpha: f64,
    /// Decay rate for `expdecay`.
    pub beta: f64,
    /// Support cutoff of the synthetic model.
    pub window: f64,
    /// File for `model-file` / `events-file`.
    pub path: Option<PathBuf>,
    /// Sort out-of-order `events-file` rows instead of rejecting them.
    pub sort: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            source: ModelSource::Benchmark,
            blocks: 2,
            mu: 0.5,
            alpha: 0.5,
            beta: 2.0,
            window: 3.0,
            path: None,
            sort: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self.source {
            ModelSource::ModelFile | ModelSource::EventsFile => {
                let path = self.path.as_ref().ok_or_else(|| {
                    Error::InvalidInput("model.path is required for file sources".into())
                })?;
                if !path.exists() {
                    return Err(Error::InvalidInput(format!(
                        "model.path {} does not exist",
                        path.display()
                    )));
                }
            }
            ModelSource::Tiled => {
                if self.blocks == 0 {
                    return Err(Error::InvalidInput("model.blocks must be at least 1".into()));
                }
            }
            ModelSource::Poisson | ModelSource::Expdecay => {
                if !(self.mu > 0.0) || !(self.beta > 0.0) || self.alpha < 0.0 {
                    return Err(Error::InvalidInput(
                        "model rates must be positive (mu, beta) and alpha nonnegative".into(),
                    ));
                }
                if !(self.window > 0.0) {
                    return Err(Error::InvalidInput("model.window must be positive".into()));
                }
            }
            ModelSource::Benchmark => {}
        }
        Ok(())
    }

    /// The generative model, for kinds that need one.
    pub fn ground_truth(&self) -> Result<HawkesModel> {
        match self.source {
            ModelSource::Benchmark => Ok(benchmark_model()),
            ModelSource::Tiled => Ok(tiled_benchmark_model(self.blocks)),
            ModelSource::Poisson => HawkesModel::new(
                vec![self.mu],
                vec![TriggerFn::Ground(GroundTruthFn::Zero)],
                self.window,
            ),
            ModelSource::Expdecay => HawkesModel::new(
                vec![self.mu],
                vec![TriggerFn::Ground(GroundTruthFn::ExpDecay {
                    alpha: self.alpha,
                    beta: self.beta,
                })],
                self.window,
            ),
            ModelSource::ModelFile => {
                let path = self.path.as_ref().expect("validated");
                let text = fs::read_to_string(path).map_err(|e| {
                    Error::InvalidInput(format!("cannot read {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    Error::InvalidInput(format!("model file {}: {e}", path.display()))
                })
            }
            ModelSource::EventsFile => Err(Error::InvalidInput(
                "an events file carries no generative model; this experiment needs one".into(),
            )),
        }
    }
}

/// Estimator knobs in config form; `resolve` turns them into
/// [`HyperParams`] once the dimension is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    pub delta: f64,
    pub z: f64,
    /// Uniform RKHS shrinkage for every pair.
    pub zeta: f64,
    /// Uniform baseline shrinkage for every dimension.
    pub omega: f64,
    pub mu_min: f64,
    /// Step schedule `eta_k = 1/(step_zeta k + step_b)`; unset keeps
    /// `delta/20`.
    pub step_zeta: Option<f64>,
    /// Unset keeps 100.
    pub step_b: Option<f64>,
    /// Switch to the reference-table schedule `1/(k/2000 + 10)`.
    pub table_schedule: bool,
    /// `gaussian`, `laplacian`, or `polynomial`.
    pub kernel: String,
    pub bandwidth: f64,
    /// Polynomial kernel shape (used only with `kernel = "polynomial"`).
    pub degree: u32,
    pub scale: f64,
    pub offset: f64,
    pub budget: usize,
    /// `grid-clip`, `square-transform`, or `poly-sdp`.
    pub projection: String,
    /// Unset keeps the default pitch `0.02 z / 3`.
    pub snap_pitch: Option<f64>,
    pub snapshot_stride: usize,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            delta: 0.05,
            z: 3.0,
            zeta: 1e-8,
            omega: 1e-8,
            mu_min: 0.01,
            step_zeta: None,
            step_b: None,
            table_schedule: false,
            kernel: "gaussian".into(),
            bandwidth: 0.2,
            degree: 2,
            scale: 1.0,
            offset: 1.0,
            budget: 256,
            projection: "grid-clip".into(),
            snap_pitch: None,
            snapshot_stride: 1000,
        }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !(self.z > 0.0) {
            return Err(Error::InvalidInput("hyper.delta and hyper.z must be positive".into()));
        }
        self.time_kernel()?;
        ProjectionMode::parse_token(&self.projection)?;
        Ok(())
    }

    fn time_kernel(&self) -> Result<Kernel> {
        match self.kernel.as_str() {
            "gaussian" => Ok(Kernel::Gaussian { bandwidth: self.bandwidth }),
            "laplacian" => Ok(Kernel::Laplacian { bandwidth: self.bandwidth }),
            "polynomial" => Ok(Kernel::Polynomial {
                degree: self.degree,
                scale: self.scale,
                offset: self.offset,
            }),
            other => Err(Error::InvalidInput(format!("unknown kernel {other:?}"))),
        }
    }

    pub fn resolve(&self, p: usize) -> Result<HyperParams> {
        let mut h = HyperParams::new(p, self.delta, self.z);
        if self.table_schedule {
            h = h.with_table1_schedule();
        }
        if let Some(v) = self.step_zeta {
            h.step_zeta = v;
        }
        if let Some(v) = self.step_b {
            h.step_b = v;
        }
        h.set_uniform_zeta(self.zeta);
        h.omega = vec![self.omega; p];
        h.mu_min = self.mu_min;
        h.kernel = self.time_kernel()?;
        h.budget = self.budget;
        h.projection = ProjectionMode::parse_token(&self.projection)?;
        if let Some(g) = self.snap_pitch {
            h.snap_pitch = g;
        }
        h.snapshot_stride = self.snapshot_stride.max(1);
        h.validate()?;
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// `npole` (nonparametric) or `exp` (parametric online baseline).
    pub estimator: String,
    /// Uniform known decay of the parametric baseline.
    pub decay: f64,
    /// Sampling step of exported function curves.
    pub curve_step: f64,
    /// Attach the comparator regret trace to the fit summary (needs a
    /// generative model).
    pub with_regret: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { estimator: "npole".into(), decay: 2.0, curve_step: 0.01, with_regret: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Table1Config {
    /// Row per discretization step.
    pub deltas: Vec<f64>,
    /// Column per shrinkage level, as log10.
    pub log10_zetas: Vec<f64>,
}

impl Default for Table1Config {
    fn default() -> Self {
        Table1Config {
            deltas: vec![0.01, 0.05, 0.1, 0.5, 1.0],
            log10_zetas: vec![-8.0, -6.0, -4.0, -2.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prop1Config {
    /// Number of random exponential models to draw.
    pub models: usize,
    /// Horizon of each simulated check stream.
    pub t_end: f64,
    /// Dimensions drawn uniformly from `1..=max_dim`.
    pub max_dim: usize,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Prop1Config { models: 50, t_end: 200.0, max_dim: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegretConfig {
    /// Number of independent seeds.
    pub seeds: usize,
}

impl Default for RegretConfig {
    fn default() -> Self {
        RegretConfig { seeds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MismatchConfig {
    /// 1-based (receiver, source) pair whose errors are compared.
    pub pair: [usize; 2],
    /// Fraction of trials the nonparametric fit must win under `check`.
    pub win_fraction: f64,
}

impl Default for MismatchConfig {
    fn default() -> Self {
        MismatchConfig { pair: [1, 4], win_fraction: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkedConfig {
    /// `joint` or `separable`.
    pub mode: String,
    /// Mark lattice pitch in standardized units.
    pub mark_pitch: f64,
    pub mark_bandwidth: f64,
    /// `g-then-h` or `h-then-g` (separable mode update order).
    pub update_order: String,
    /// Synthetic marks are uniform on `[0, mark_range)` when the input
    /// stream carries none.
    pub mark_range: f64,
}

impl Default for MarkedConfig {
    fn default() -> Self {
        MarkedConfig {
            mode: "joint".into(),
            mark_pitch: 0.25,
            mark_bandwidth: 1.0,
            update_order: "g-then-h".into(),
            mark_range: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialConfig {
    /// Lower corner of the cell grid.
    pub origin: Vec<f64>,
    pub cell_size: f64,
    /// Cells per axis.
    pub cells: Vec<usize>,
    /// Decay rate of the synthetic separable truth.
    pub beta: f64,
    /// Displacement lattice pitch.
    pub disp_pitch: f64,
    /// Sup-norm truncation radius for spatial influence.
    pub space_radius: f64,
    pub space_bandwidth: f64,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig {
            origin: vec![0.0, 0.0],
            cell_size: 0.8,
            cells: vec![2, 2],
            beta: 2.0,
            disp_pitch: 0.4,
            space_radius: 3.0,
            space_bandwidth: std::f64::consts::FRAC_1_SQRT_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    /// Event to move; unset picks the middle event.
    pub event_index: Option<usize>,
    /// Time shift applied to it (clamped to keep the ordering).
    pub shift: f64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig { event_index: None, shift: 1e-6 }
    }
}

/// One experiment: what to run, at what scale, from which model, with
/// which estimator knobs. Serialized as TOML; `config --defaults` prints
/// the full schema with defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    /// Base seed; trial `t` uses `seed + t`. Always explicit, never drawn
    /// from the clock.
    pub seed: u64,
    pub trials: usize,
    pub t_end: f64,
    pub out_dir: PathBuf,
    /// Worker thread cap; 0 keeps the library default. The
    /// `HAWKES_NPOLE_THREADS` env var overrides this value.
    pub threads: usize,
    /// Enforce the kind's pass/fail gates; a failed gate exits 3.
    pub check: bool,
    pub model: ModelConfig,
    pub hyper: HyperConfig,
    pub fit: FitConfig,
    pub table1: Table1Config,
    pub prop1: Prop1Config,
    pub regret: RegretConfig,
    pub mismatch: MismatchConfig,
    pub marked: MarkedConfig,
    pub spatial: SpatialConfig,
    pub stability: StabilityConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: Kind::Fit,
            seed: 1,
            trials: 10,
            t_end: 1e4,
            out_dir: PathBuf::from("out"),
            threads: 0,
            check: false,
            model: ModelConfig::default(),
            hyper: HyperConfig::default(),
            fit: FitConfig::default(),
            table1: Table1Config::default(),
            prop1: Prop1Config::default(),
            regret: RegretConfig::default(),
            mismatch: MismatchConfig::default(),
            marked: MarkedConfig::default(),
            spatial: SpatialConfig::default(),
            stability: StabilityConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidInput("trials must be at least 1".into()));
        }
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return Err(Error::InvalidInput("t_end must be positive and finite".into()));
        }
        self.model.validate()?;
        self.hyper.validate()?;
        if !(self.fit.curve_step > 0.0) {
            return Err(Error::InvalidInput("fit.curve_step must be positive".into()));
        }
        match self.fit.estimator.as_str() {
            "npole" | "exp" => {}
            other => {
                return Err(Error::InvalidInput(format!("unknown estimator {other:?}")));
            }
        }
        if !(self.fit.decay > 0.0) {
            return Err(Error::InvalidInput("fit.decay must be positive".into()));
        }
        if self.table1.deltas.is_empty()
            || self.table1.log10_zetas.is_empty()
            || self.table1.deltas.iter().any(|d| !(*d > 0.0))
        {
            return Err(Error::InvalidInput(
                "table1 needs nonempty positive deltas and log10_zetas".into(),
            ));
        }
        if self.prop1.models == 0 || self.prop1.max_dim == 0 || !(self.prop1.t_end > 0.0) {
            return Err(Error::InvalidInput("prop1 settings must be positive".into()));
        }
        if self.regret.seeds == 0 {
            return Err(Error::InvalidInput("regret.seeds must be at least 1".into()));
        }
        if self.mismatch.pair.contains(&0) {
            return Err(Error::InvalidInput("mismatch.pair indices are 1-based".into()));
        }
        if !(self.mismatch.win_fraction > 0.0 && self.mismatch.win_fraction <= 1.0) {
            return Err(Error::InvalidInput("mismatch.win_fraction must be in (0, 1]".into()));
        }
        match self.marked.mode.as_str() {
            "joint" | "separable" => {}
            other => return Err(Error::InvalidInput(format!("unknown marked mode {other:?}"))),
        }
        match self.marked.update_order.as_str() {
            "g-then-h" | "h-then-g" => {}
            other => return Err(Error::InvalidInput(format!("unknown update order {other:?}"))),
        }
        if !(self.marked.mark_pitch > 0.0)
            || !(self.marked.mark_bandwidth > 0.0)
            || !(self.marked.mark_range > 0.0)
        {
            return Err(Error::InvalidInput("marked settings must be positive".into()));
        }
        if self.spatial.origin.len() != self.spatial.cells.len() || self.spatial.origin.is_empty()
        {
            return Err(Error::InvalidInput(
                "spatial.origin and spatial.cells must have the same nonzero length".into(),
            ));
        }
        if !(self.spatial.cell_size > 0.0)
            || !(self.spatial.beta > 0.0)
            || !(self.spatial.disp_pitch > 0.0)
            || !(self.spatial.space_radius > 0.0)
            || !(self.spatial.space_bandwidth > 0.0)
        {
            return Err(Error::InvalidInput("spatial settings must be positive".into()));
        }
        if !(self.stability.shift.is_finite()) {
            return Err(Error::InvalidInput("stability.shift must be finite".into()));
        }
        Ok(())
    }

    /// Hash of the resolved config; identical configs hash identically
    /// regardless of how they were assembled.
    pub fn sha256(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Default config rendered as TOML.
pub fn default_config_toml() -> String {
    toml::to_string_pretty(&ExperimentConfig::default()).expect("default config serializes")
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

// ======================= orchestration =======================

/// Written next to every experiment's artifacts. The only file allowed to
/// differ between reruns of one config (its wall-clock fields).
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub format: u32,
    pub version: String,
    pub kind: String,
    pub config_sha256: String,
    pub threads: usize,
    pub wall_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_per_1e4_epochs: Option<f64>,
}

impl Manifest {
    fn new(config: &ExperimentConfig, threads: usize) -> Self {
        Manifest {
            format: 1,
            version: env!("CARGO_PKG_VERSION").to_string(),
            kind: config.kind.token().to_string(),
            config_sha256: config.sha256(),
            threads,
            wall_seconds: 0.0,
            wall_per_1e4_epochs: None,
        }
    }
}

/// Thread cap: the env var wins, then the config value; 0 keeps the
/// library default pool.
fn effective_threads(config_threads: usize) -> Result<usize> {
    match std::env::var("HAWKES_NPOLE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidInput(format!("HAWKES_NPOLE_THREADS must be an integer, got {v:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(config_threads),
        Err(e) => Err(Error::InvalidInput(format!("HAWKES_NPOLE_THREADS: {e}"))),
    }
}

/// Run one experiment, mapping any error to its exit code (0 on success).
pub fn run(config: &ExperimentConfig) -> i32 {
    match execute(config) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Run one experiment, writing all artifacts into `config.out_dir`.
pub fn execute(config: &ExperimentConfig) -> Result<()> {
    config.validate()?;
    let threads = effective_threads(config.threads)?;
    if threads == 0 {
        execute_inner(config, threads)
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
        pool.install(|| execute_inner(config, threads))
    }
}

fn execute_inner(config: &ExperimentConfig, threads: usize) -> Result<()> {
    let wall = Instant::now();
    fs::create_dir_all(&config.out_dir)?;
    let mut manifest = Manifest::new(config, threads);
    match config.kind {
        Kind::Simulate => run_simulate(config)?,
        Kind::Fit => run_fit(config, &mut manifest)?,
        Kind::Evaluate => run_evaluate(config, &mut manifest)?,
        Kind::Table1 => run_table1(config)?,
        Kind::Prop1Check => run_prop1(config)?,
        Kind::Regret => run_regret(config)?,
        Kind::Mismatch => run_mismatch(config)?,
        Kind::Marked => run_marked(config, &mut manifest)?,
        Kind::Spatial => run_spatial(config, &mut manifest)?,
        Kind::Stability => run_stability(config)?,
    }
    manifest.wall_seconds = wall.elapsed().as_secs_f64();
    write_json(&config.out_dir.join("manifest.json"), &manifest)
}

// ======================= gates =======================

struct Gate {
    name: &'static str,
    pass: bool,
    detail: String,
}

/// Print one line per gate; with `enforce` set, any failed gate is an
/// error (exit code 3).
fn report_gates(gates: &[Gate], enforce: bool) -> Result<()> {
    for g in gates {
        println!("check {}: {} ({})", g.name, if g.pass { "pass" } else { "FAIL" }, g.detail);
    }
    let failed: Vec<&str> = gates.iter().filter(|g| !g.pass).map(|g| g.name).collect();
    if enforce && !failed.is_empty() {
        return Err(Error::CheckFailed(failed.join(", ")));
    }
    Ok(())
}

// ======================= data plumbing =======================

/// Event data for one run: simulated from the generative model at the base
/// seed, or ingested from the configured events file.
fn load_stream(config: &ExperimentConfig) -> Result<(EventStream, Option<HawkesModel>)> {
    match config.model.source {
        ModelSource::EventsFile => {
            let path = config.model.path.as_ref().expect("validated");
            let f = fs::File::open(path).map_err(|e| {
                Error::InvalidInput(format!("cannot open {}: {e}", path.display()))
            })?;
            let (stream, _) = read_stream_csv(BufReader::new(f), config.model.sort, None)?;
            Ok((stream, None))
        }
        _ => {
            let truth = config.model.ground_truth()?;
            let stream = simulate(&truth, config.t_end, config.seed)?;
            Ok((stream, Some(truth)))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::Domain(format!("serialize {}: {e}", path.display())))?;
    writeln!(w)?;
    Ok(())
}

/// One `t,value` CSV per (i, j) pair, sampled on `[0, z]` at `step`.
fn write_curves(
    out_dir: &Path,
    p: usize,
    z: f64,
    step: f64,
    eval: impl Fn(usize, usize, f64) -> f64,
) -> Result<()> {
    let n = (z / step).floor() as usize;
    for i in 0..p {
        for j in 0..p {
            let path = out_dir.join(format!("f_hat_{}_{}.csv", i + 1, j + 1));
            let mut w = BufWriter::new(fs::File::create(path)?);
            writeln!(w, "t,value")?;
            for s in 0..=n {
                let t = s as f64 * step;
                writeln!(w, "{t},{}", eval(i, j, t))?;
            }
        }
    }
    Ok(())
}

/// Per-dimension discretized negative log-likelihood of a fixed estimate
/// replayed over the grid, with the same per-event clamping the online
/// fits use.
fn replay_nll(
    p: usize,
    z: f64,
    mu: &[f64],
    trigger_at: &dyn Fn(usize, usize, f64) -> f64,
    grid: &UpdateGrid,
    stream: &EventStream,
) -> Result<Vec<f64>> {
    let per_dim = stream.per_dim_times();
    (0..p)
        .map(|i| {
            let mut lo = vec![0usize; p];
            let mut hi = vec![0usize; p];
            discretized_nll_with(
                |t, i| {
                    let mut lam = mu[i];
                    for j in 0..p {
                        let tj = &per_dim[j];
                        while hi[j] < tj.len() && tj[hi[j]] < t {
                            hi[j] += 1;
                        }
                        while lo[j] < hi[j] && tj[lo[j]] < t - z {
                            lo[j] += 1;
                        }
                        for idx in lo[j]..hi[j] {
                            lam += trigger_at(i, j, t - tj[idx]).max(0.0);
                        }
                    }
                    Ok(lam)
                },
                grid,
                i,
            )
        })
        .collect()
}

// ======================= simulate =======================

#[derive(Debug, Serialize)]
struct SimulateSummary {
    seed: u64,
    t_end: f64,
    p: usize,
    n_events: usize,
    per_dim: Vec<usize>,
    rate_per_dim: Vec<f64>,
    spectral_radius: f64,
    expected_rates: Vec<f64>,
}

fn run_simulate(config: &ExperimentConfig) -> Result<()> {
    let truth = config.model.ground_truth()?;
    let stream = simulate(&truth, config.t_end, config.seed)?;
    let f = BufWriter::new(fs::File::create(config.out_dir.join("events.csv"))?);
    write_stream_csv(&stream, f)?;
    let mut per_dim = vec![0usize; stream.p];
    for &d in &stream.dims {
        per_dim[d as usize] += 1;
    }
    let summary = SimulateSummary {
        seed: config.seed,
        t_end: config.t_end,
        p: stream.p,
        n_events: stream.n_events(),
        rate_per_dim: per_dim.iter().map(|&c| c as f64 / config.t_end).collect(),
        per_dim,
        spectral_radius: truth.spectral_radius(),
        expected_rates: truth.expected_rates()?,
    };
    write_json(&config.out_dir.join("summary.json"), &summary)
}

// ======================= fit =======================

#[derive(Debug, Serialize)]
#[serde(tag = "estimator", rename_all = "kebab-case")]
enum FitSummary {
    Npole {
        p: usize,
        epochs: usize,
        kappa_z: usize,
        n_snapshots: usize,
        mu_hat: Vec<f64>,
        /// Row-major squared RKHS norms.
        f_norms_sq: Vec<f64>,
        /// Per-dimension cumulative regularized risk along the trajectory.
        cum_risk: Vec<f64>,
        max_projection_residual: f64,
        unconverged_projections: usize,
        max_inline_residual: f64,
        truncated_inline_clamps: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        regret: Option<RegretTrace>,
    },
    Exp {
        p: usize,
        epochs: usize,
        kappa_z: usize,
        mu_hat: Vec<f64>,
        /// Row-major amplitudes.
        a_hat: Vec<f64>,
        /// Row-major known decays.
        decays: Vec<f64>,
        /// Per-dimension cumulative regularized risk along the trajectory.
        cum_risk: Vec<f64>,
    },
}

fn run_fit(config: &ExperimentConfig, manifest: &mut Manifest) -> Result<()> {
    let (stream, truth) = load_stream(config)?;
    let hyper = config.hyper.resolve(stream.p)?;
    let p = stream.p;
    match config.fit.estimator.as_str() {
        "npole" => {
            let res = fit(&stream, &hyper)?;
            let state = res.final_state();
            write_curves(&config.out_dir, p, hyper.z, config.fit.curve_step, |i, j, t| {
                state.eval_trigger(i, j, t)
            })?;
            let regret = match (&truth, config.fit.with_regret) {
                (Some(model), true) => {
                    let grid = build_grid(&stream, hyper.delta, stream.horizon)?;
                    Some(regret_trace(&res.snapshots, model, &grid, &stream)?)
                }
                (None, true) => {
                    return Err(Error::InvalidInput(
                        "regret trace needs a generative model to compare against".into(),
                    ))
                }
                _ => None,
            };
            let mut f_norms_sq = Vec::with_capacity(p * p);
            for i in 0..p {
                for j in 0..p {
                    f_norms_sq.push(state.f_norm_sq(i, j));
                }
            }
            let summary = FitSummary::Npole {
                p,
                epochs: res.epochs,
                kappa_z: res.kappa_z,
                n_snapshots: res.snapshots.len(),
                mu_hat: state.mu_hat.clone(),
                f_norms_sq,
                cum_risk: state.cum_risk.clone(),
                max_projection_residual: res.max_projection_residual,
                unconverged_projections: res.unconverged_projections,
                max_inline_residual: res.max_inline_residual,
                truncated_inline_clamps: res.truncated_inline_clamps,
                regret,
            };
            manifest.wall_per_1e4_epochs = Some(res.wall_per_1e4_epochs);
            write_json(&config.out_dir.join("summary.json"), &summary)
        }
        "exp" => {
            let decays = vec![config.fit.decay; p * p];
            let res = ogd_exp_fit(&stream, &hyper, &decays)?;
            let model = res.final_model();
            write_curves(&config.out_dir, p, hyper.z, config.fit.curve_step, |i, j, t| {
                model.eval_trigger(i, j, t)
            })?;
            let state = res.final_state();
            let summary = FitSummary::Exp {
                p,
                epochs: res.epochs,
                kappa_z: res.kappa_z,
                mu_hat: state.mu_hat.clone(),
                a_hat: state.a_hat.clone(),
                decays,
                cum_risk: state.cum_risk.clone(),
            };
            manifest.wall_per_1e4_epochs =
                Some(res.wall_seconds / res.epochs.max(1) as f64 * 1e4);
            write_json(&config.out_dir.join("summary.json"), &summary)
        }
        other => Err(Error::InvalidInput(format!("unknown estimator {other:?}"))),
    }
}

// ======================= evaluate =======================

fn trial_metrics(
    config: &ExperimentConfig,
    truth: &HawkesModel,
    seed: u64,
) -> Result<TrialMetrics> {
    let stream = simulate(truth, config.t_end, seed)?;
    let hyper = config.hyper.resolve(truth.p)?;
    let grid = build_grid(&stream, hyper.delta, stream.horizon)?;
    match config.fit.estimator.as_str() {
        "npole" => {
            let res = fit(&stream, &hyper)?;
            let state = res.final_state();
            let per_pair_l1 = state_l1_errors(truth, state)?;
            let nll = replay_nll(
                truth.p,
                hyper.z,
                &state.mu_hat,
                &|i, j, lag| state.eval_trigger(i, j, lag),
                &grid,
                &stream,
            )?;
            Ok(TrialMetrics {
                seed,
                per_pair_l1,
                nll,
                wall_seconds: res.wall_seconds,
                epochs: res.epochs,
            })
        }
        "exp" => {
            let decays = vec![config.fit.decay; truth.p * truth.p];
            let res = ogd_exp_fit(&stream, &hyper, &decays)?;
            let model = res.final_model();
            let per_pair_l1 = exp_l1_errors(truth, &model, hyper.z)?;
            let nll = replay_nll(
                truth.p,
                hyper.z,
                &model.mu,
                &|i, j, lag| model.eval_trigger(i, j, lag),
                &grid,
                &stream,
            )?;
            Ok(TrialMetrics {
                seed,
                per_pair_l1,
                nll,
                wall_seconds: res.wall_seconds,
                epochs: res.epochs,
            })
        }
        other => Err(Error::InvalidInput(format!("unknown estimator {other:?}"))),
    }
}

fn run_evaluate(config: &ExperimentConfig, manifest: &mut Manifest) -> Result<()> {
    let truth = config.model.ground_truth()?;
    let trials: Vec<TrialMetrics> = (0..config.trials)
        .into_par_iter()
        .map(|t| trial_metrics(config, &truth, config.seed + t as u64))
        .collect::<Result<_>>()?;
    let mut report = aggregate(&trials, &config.sha256(), None)?;
    manifest.wall_per_1e4_epochs = Some(report.wall_per_1e4_epochs);
    // metric files stay byte-identical across reruns; timings go to the
    // manifest
    report.wall_mean_seconds = 0.0;
    report.wall_per_1e4_epochs = 0.0;
    write_json(&config.out_dir.join("metrics.json"), &report)
}

// ======================= table1 =======================

#[derive(Debug, Serialize)]
struct TableReport {
    t_end: f64,
    trials: usize,
    seed: u64,
    deltas: Vec<f64>,
    log10_zetas: Vec<f64>,
    /// Row-major mean of the summed per-pair L1 errors.
    cells: Vec<f64>,
    cells_stderr: Vec<f64>,
}

fn table1_gates(deltas: &[f64], log10_zetas: &[f64], cells: &[f64]) -> Result<Vec<Gate>> {
    let ncols = log10_zetas.len();
    let col = log10_zetas
        .iter()
        .position(|&c| (c + 8.0).abs() < 1e-9)
        .ok_or_else(|| Error::InvalidInput("check needs a log10 zeta of -8".into()))?;
    let at = |target: f64| -> Option<f64> {
        deltas
            .iter()
            .position(|&d| (d - target).abs() < 1e-12)
            .map(|r| cells[r * ncols + col])
    };
    let fine = at(0.05)
        .ok_or_else(|| Error::InvalidInput("check needs a delta of 0.05".into()))?;
    let coarse =
        at(1.0).ok_or_else(|| Error::InvalidInput("check needs a delta of 1".into()))?;
    let mut gates = vec![
        Gate {
            name: "table1/fine-cell",
            pass: (1.5..=2.5).contains(&fine),
            detail: format!("avg L1 {fine:.3} at delta 0.05, target [1.5, 2.5]"),
        },
        Gate {
            name: "table1/coarse-ratio",
            pass: coarse >= 2.0 * fine,
            detail: format!("avg L1 {coarse:.3} at delta 1 vs 2x {:.3}", 2.0 * fine),
        },
    ];
    let trend: Vec<f64> =
        [0.05, 0.1, 0.5, 1.0].iter().filter_map(|&d| at(d)).collect();
    gates.push(Gate {
        name: "table1/monotone",
        pass: trend.windows(2).all(|w| w[1] >= w[0]),
        detail: format!(
            "avg L1 over increasing delta: {}",
            trend.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" <= ")
        ),
    });
    Ok(gates)
}

fn run_table1(config: &ExperimentConfig) -> Result<()> {
    let truth = benchmark_model();
    let streams: Vec<EventStream> = (0..config.trials)
        .into_par_iter()
        .map(|t| simulate(&truth, config.t_end, config.seed + t as u64))
        .collect::<Result<_>>()?;
    let deltas = &config.table1.deltas;
    let lzs = &config.table1.log10_zetas;
    let n_streams = streams.len();
    let jobs: Vec<(usize, usize, usize)> = (0..deltas.len())
        .flat_map(|r| (0..lzs.len()).flat_map(move |c| (0..n_streams).map(move |t| (r, c, t))))
        .collect();
    let errors: Vec<f64> = jobs
        .par_iter()
        .map(|&(r, c, t)| -> Result<f64> {
            let hyper = HyperParams::for_reference_table(deltas[r], 10f64.powf(lzs[c]));
            let res = fit(&streams[t], &hyper)?;
            Ok(state_l1_errors(&truth, res.final_state())?.iter().sum())
        })
        .collect::<Result<_>>()?;
    let mut cells = Vec::with_capacity(deltas.len() * lzs.len());
    let mut cells_stderr = Vec::with_capacity(deltas.len() * lzs.len());
    for cell in 0..deltas.len() * lzs.len() {
        let vals = &errors[cell * streams.len()..(cell + 1) * streams.len()];
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let stderr = if vals.len() < 2 {
            0.0
        } else {
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        cells.push(mean);
        cells_stderr.push(stderr);
    }
    let f = BufWriter::new(fs::File::create(config.out_dir.join("table.csv"))?);
    write_hyper_table_csv(deltas, lzs, &cells, f)?;
    let report = TableReport {
        t_end: config.t_end,
        trials: config.trials,
        seed: config.seed,
        deltas: deltas.clone(),
        log10_zetas: lzs.clone(),
        cells: cells.clone(),
        cells_stderr,
    };
    write_json(&config.out_dir.join("table.json"), &report)?;
    let gates = table1_gates(deltas, lzs, &cells)?;
    report_gates(&gates, config.check)
}

// ======================= prop1-check =======================

#[derive(Debug, Serialize)]
struct Prop1Row {
    seed: u64,
    p: usize,
    n_events: usize,
    /// Largest per-dimension |discretized - exact| likelihood gap.
    worst_gap: f64,
    bound: f64,
    ratio: f64,
}

#[derive(Debug, Serialize)]
struct Prop1Report {
    models: usize,
    t_end: f64,
    delta: f64,
    max_ratio: f64,
    violations: usize,
    rows: Vec<Prop1Row>,
}

/// Random stationary model with exponential or zero entries: rates in
/// [0.3, 1], decays in [1, 5], each row's branching mass rescaled under
/// 0.75 so the spectral radius stays below 1 (row sums bound it).
fn random_exponential_model(seed: u64, max_dim: usize, window: f64) -> Result<HawkesModel> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xd1b5_4a32_d192_ed03);
    let p = rng.gen_range(1..=max_dim);
    let mu: Vec<f64> = (0..p).map(|_| rng.gen_range(0.3..1.0)).collect();
    let mut alpha = vec![0.0f64; p * p];
    let mut beta = vec![1.0f64; p * p];
    for e in 0..p * p {
        if rng.gen_bool(0.7) {
            alpha[e] = rng.gen_range(0.2..1.0);
            beta[e] = rng.gen_range(1.0..5.0);
        }
    }
    if alpha.iter().all(|&a| a == 0.0) {
        alpha[0] = 0.3;
        beta[0] = 2.0;
    }
    for i in 0..p {
        let row_mass: f64 = (0..p).map(|j| alpha[i * p + j] / beta[i * p + j]).sum();
        if row_mass > 0.75 {
            for j in 0..p {
                alpha[i * p + j] *= 0.75 / row_mass;
            }
        }
    }
    let triggers = (0..p * p)
        .map(|e| {
            if alpha[e] == 0.0 {
                TriggerFn::Ground(GroundTruthFn::Zero)
            } else {
                TriggerFn::Ground(GroundTruthFn::ExpDecay { alpha: alpha[e], beta: beta[e] })
            }
        })
        .collect();
    HawkesModel::new(mu, triggers, window)
}

fn run_prop1(config: &ExperimentConfig) -> Result<()> {
    let delta = config.hyper.delta;
    let z = config.hyper.z;
    let rows: Vec<Prop1Row> = (0..config.prop1.models)
        .into_par_iter()
        .map(|m| -> Result<Prop1Row> {
            let seed = config.seed + m as u64;
            let model = random_exponential_model(seed, config.prop1.max_dim, z)?;
            let stream = simulate(&model, config.prop1.t_end, seed)?;
            let exact = crate::process::exact_nll_exponential(&model, &stream)?;
            let grid = build_grid(&stream, delta, stream.horizon)?;
            let (eps, eps_prime) = exponential_model_tails(&model, delta)?;
            let kappa_1 = stream.max_unit_window_count();
            let mu_min = model.mu.iter().copied().fold(f64::INFINITY, f64::min);
            let bound = prop1_bound(&stream, z, delta, mu_min, kappa_1, &eps, &eps_prime);
            let mut worst_gap = 0.0f64;
            for i in 0..model.p {
                let disc = discretized_nll(&model, &stream, &grid, z, i)?;
                worst_gap = worst_gap.max((disc - exact[i]).abs());
            }
            Ok(Prop1Row {
                seed,
                p: model.p,
                n_events: stream.n_events(),
                worst_gap,
                bound,
                ratio: if bound > 0.0 { worst_gap / bound } else { f64::INFINITY },
            })
        })
        .collect::<Result<_>>()?;
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let violations = rows.iter().filter(|r| r.worst_gap > r.bound).count();
    let report = Prop1Report {
        models: rows.len(),
        t_end: config.prop1.t_end,
        delta,
        max_ratio,
        violations,
        rows,
    };
    write_json(&config.out_dir.join("prop1.json"), &report)?;
    let gates = [Gate {
        name: "prop1/bound",
        pass: violations == 0,
        detail: format!(
            "{violations} violations over {} models, max gap/bound {max_ratio:.4}",
            report.models
        ),
    }];
    report_gates(&gates, config.check)
}

// ======================= regret =======================

#[derive(Debug, Serialize)]
struct RegretRow {
    seed: u64,
    epochs: Vec<usize>,
    times: Vec<f64>,
    /// Total (summed over dimensions) regret at each checkpoint.
    total: Vec<f64>,
    /// Total regret divided by `1 + log k`.
    normalized: Vec<f64>,
    /// Final normalized value over its running maximum.
    ratio: f64,
    c1: f64,
}

#[derive(Debug, Serialize)]
struct RegretReport {
    seeds: usize,
    t_end: f64,
    max_ratio: f64,
    rows: Vec<RegretRow>,
}

fn run_regret(config: &ExperimentConfig) -> Result<()> {
    let truth = config.model.ground_truth()?;
    let rows: Vec<RegretRow> = (0..config.regret.seeds)
        .into_par_iter()
        .map(|s| -> Result<RegretRow> {
            let seed = config.seed + s as u64;
            let stream = simulate(&truth, config.t_end, seed)?;
            let hyper = config.hyper.resolve(truth.p)?;
            let res = fit(&stream, &hyper)?;
            let grid = build_grid(&stream, hyper.delta, stream.horizon)?;
            let trace = regret_trace(&res.snapshots, &truth, &grid, &stream)?;
            let total: Vec<f64> =
                trace.regret.iter().map(|per_dim| per_dim.iter().sum()).collect();
            let normalized: Vec<f64> = total
                .iter()
                .zip(&trace.epochs)
                .map(|(&r, &k)| r / (1.0 + (k as f64).ln()))
                .collect();
            let peak = normalized.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ratio = if peak > 0.0 { normalized.last().copied().unwrap_or(0.0) / peak } else { 0.0 };
            Ok(RegretRow {
                seed,
                epochs: trace.epochs,
                times: trace.times,
                total,
                normalized,
                ratio,
                c1: trace.c1,
            })
        })
        .collect::<Result<_>>()?;
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let report = RegretReport { seeds: rows.len(), t_end: config.t_end, max_ratio, rows };
    write_json(&config.out_dir.join("regret.json"), &report)?;
    let gates = [Gate {
        name: "regret/log-flatness",
        pass: max_ratio < 2.0,
        detail: format!("worst final/max normalized regret {max_ratio:.4}, target < 2"),
    }];
    report_gates(&gates, config.check)
}

// ======================= mismatch =======================

#[derive(Debug, Serialize)]
struct MismatchRow {
    seed: u64,
    npole_l1: f64,
    exp_l1: f64,
    win: bool,
}

#[derive(Debug, Serialize)]
struct MismatchReport {
    pair: [usize; 2],
    trials: usize,
    wins: usize,
    needed: usize,
    rows: Vec<MismatchRow>,
}

fn run_mismatch(config: &ExperimentConfig) -> Result<()> {
    let truth = config.model.ground_truth()?;
    let p = truth.p;
    let [pi, pj] = config.mismatch.pair;
    if pi > p || pj > p {
        return Err(Error::InvalidInput(format!(
            "mismatch.pair ({pi}, {pj}) is outside a {p}-dimensional model"
        )));
    }
    let idx = (pi - 1) * p + (pj - 1);
    let rows: Vec<MismatchRow> = (0..config.trials)
        .into_par_iter()
        .map(|t| -> Result<MismatchRow> {
            let seed = config.seed + t as u64;
            let stream = simulate(&truth, config.t_end, seed)?;
            let hyper = config.hyper.resolve(p)?;
            let np = fit(&stream, &hyper)?;
            let npole_l1 = state_l1_errors(&truth, np.final_state())?[idx];
            let decays = vec![config.fit.decay; p * p];
            let ex = ogd_exp_fit(&stream, &hyper, &decays)?;
            let exp_l1 = exp_l1_errors(&truth, &ex.final_model(), hyper.z)?[idx];
            Ok(MismatchRow { seed, npole_l1, exp_l1, win: npole_l1 < exp_l1 })
        })
        .collect::<Result<_>>()?;
    let wins = rows.iter().filter(|r| r.win).count();
    let needed = (config.mismatch.win_fraction * rows.len() as f64).ceil() as usize;
    let report =
        MismatchReport { pair: config.mismatch.pair, trials: rows.len(), wins, needed, rows };
    write_json(&config.out_dir.join("mismatch.json"), &report)?;
    let gates = [Gate {
        name: "mismatch/pair-wins",
        pass: wins >= needed,
        detail: format!("nonparametric fit won {wins}/{} trials, needs {needed}", report.trials),
    }];
    report_gates(&gates, config.check)
}

// ======================= marked =======================

#[derive(Debug, Serialize)]
struct MarkedSummary {
    mode: String,
    p: usize,
    epochs: usize,
    kappa_z: usize,
    mu_hat: Vec<f64>,
    transform: MarkTransform,
    cum_risk: f64,
}

fn run_marked(config: &ExperimentConfig, manifest: &mut Manifest) -> Result<()> {
    let (mut stream, _) = load_stream(config)?;
    if stream.marks.is_none() {
        // independent synthetic marks; the fitted mark profile should come
        // out flat
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x6d61_726b);
        stream.marks =
            Some((0..stream.n_events()).map(|_| rng.gen_range(0.0..config.marked.mark_range)).collect());
    }
    let mut hyper = config.hyper.resolve(stream.p)?;
    let mark_kernel = Kernel::Gaussian { bandwidth: config.marked.mark_bandwidth };
    let mode = match config.marked.mode.as_str() {
        "joint" => MarkedMode::Joint,
        "separable" => MarkedMode::Separable,
        other => return Err(Error::InvalidInput(format!("unknown marked mode {other:?}"))),
    };
    if mode == MarkedMode::Joint {
        hyper.kernel = Kernel::Product2D {
            time: Box::new(hyper.kernel.clone()),
            mark: Box::new(mark_kernel.clone()),
        };
    }
    let update_order = match config.marked.update_order.as_str() {
        "g-then-h" => UpdateOrder::GThenH,
        "h-then-g" => UpdateOrder::HThenG,
        other => return Err(Error::InvalidInput(format!("unknown update order {other:?}"))),
    };
    let opts = MarkedOptions {
        mode,
        mark_pitch: config.marked.mark_pitch,
        mark_kernel,
        update_order,
    };
    let res = fit_marked(&stream, &hyper, &opts)?;
    let state = res.final_state();
    let p = stream.p;
    let t_step = config.fit.curve_step.max(0.01);
    let nt = (hyper.z / t_step).floor() as usize;
    let t_grid: Vec<f64> = (0..=nt).map(|s| s as f64 * t_step).collect();
    let nv = (4.0 / config.marked.mark_pitch).round() as usize;
    let v_grid: Vec<f64> =
        (0..=nv).map(|s| -2.0 + s as f64 * config.marked.mark_pitch).collect();
    for i in 0..p {
        for j in 0..p {
            let path = config.out_dir.join(format!("f_marked_{}_{}.csv", i + 1, j + 1));
            let w = BufWriter::new(fs::File::create(path)?);
            write_marked_csv(&state.f_hat[i * p + j], &t_grid, &v_grid, w)?;
        }
    }
    let summary = MarkedSummary {
        mode: config.marked.mode.clone(),
        p,
        epochs: res.epochs,
        kappa_z: res.kappa_z,
        mu_hat: state.mu_hat.clone(),
        transform: res.transform,
        cum_risk: state.cum_risk,
    };
    manifest.wall_per_1e4_epochs = Some(res.wall_seconds / res.epochs.max(1) as f64 * 1e4);
    write_json(&config.out_dir.join("summary.json"), &summary)
}

// ======================= spatial =======================

#[derive(Debug, Serialize)]
struct SpatialSummary {
    n_cells: usize,
    epochs: usize,
    kappa_z: usize,
    mu_hat: f64,
    cum_risk: f64,
}

fn run_spatial(config: &ExperimentConfig, manifest: &mut Manifest) -> Result<()> {
    let scfg = &config.spatial;
    let cells = SpaceCells::grid(scfg.origin.clone(), scfg.cell_size, scfg.cells.clone())?;
    let n = cells.n_cells();
    let area = cells.area();
    // separable synthetic truth over the cell graph:
    // f(t, x_c <- x_d) = area e^(-|x_c - x_d|^2) e^(-beta t)
    let centers: Vec<Vec<f64>> = (0..n).map(|c| cells.center(c)).collect();
    let mut triggers = Vec::with_capacity(n * n);
    for c in 0..n {
        for d in 0..n {
            let d2: f64 =
                centers[c].iter().zip(&centers[d]).map(|(a, b)| (a - b) * (a - b)).sum();
            triggers.push(TriggerFn::Ground(GroundTruthFn::ExpDecay {
                alpha: area * (-d2).exp(),
                beta: scfg.beta,
            }));
        }
    }
    let truth = HawkesModel::new(vec![0.3 * area; n], triggers, config.model.window)?;
    let tiled = simulate(&truth, config.t_end, config.seed)?;
    let located = tile_to_spatial(&tiled, &cells)?;
    let mut hyper = config.hyper.resolve(1)?;
    hyper.kernel = Kernel::Product2D {
        time: Box::new(hyper.kernel.clone()),
        mark: Box::new(Kernel::Gaussian { bandwidth: scfg.space_bandwidth }),
    };
    let opts = ShpOptions { disp_pitch: scfg.disp_pitch, space_radius: scfg.space_radius };
    let res = shp_fit(&located, &hyper, &cells, &opts)?;
    let state = res.final_state();

    let sdim = scfg.origin.len();
    let path = config.out_dir.join("f_spatial.csv");
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=sdim).map(|a| format!("x{a}")))
        .chain(std::iter::once("value".to_string()))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    let t_step = config.fit.curve_step.max(0.05);
    let nt = (hyper.z / t_step).floor() as usize;
    let nd = (2.0 * scfg.space_radius / scfg.disp_pitch).round() as usize;
    let axis: Vec<f64> =
        (0..=nd).map(|s| -scfg.space_radius + s as f64 * scfg.disp_pitch).collect();
    let mut point = vec![0.0f64; 1 + sdim];
    let mut disp_index = vec![0usize; sdim];
    for s in 0..=nt {
        point[0] = s as f64 * t_step;
        disp_index.iter_mut().for_each(|v| *v = 0);
        loop {
            for (a, &idx) in disp_index.iter().enumerate() {
                point[1 + a] = axis[idx];
            }
            let row: Vec<String> = point.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{}", row.join(","), state.f_hat.eval(&point))?;
            // odometer increment over the displacement axes
            let mut a = 0;
            loop {
                if a == sdim {
                    break;
                }
                disp_index[a] += 1;
                if disp_index[a] <= nd {
                    break;
                }
                disp_index[a] = 0;
                a += 1;
            }
            if a == sdim {
                break;
            }
        }
    }
    drop(w);

    let summary = SpatialSummary {
        n_cells: n,
        epochs: res.epochs,
        kappa_z: res.kappa_z,
        mu_hat: state.mu_hat,
        cum_risk: state.cum_risk,
    };
    manifest.wall_per_1e4_epochs = Some(res.wall_seconds / res.epochs.max(1) as f64 * 1e4);
    write_json(&config.out_dir.join("summary.json"), &summary)
}

// ======================= stability =======================

#[derive(Debug, Serialize)]
struct StabilityReport {
    event_index: usize,
    old_time: f64,
    new_time: f64,
    probe: StabilityProbe,
}

fn run_stability(config: &ExperimentConfig) -> Result<()> {
    let truth = config.model.ground_truth()?;
    let stream = simulate(&truth, config.t_end, config.seed)?;
    let n = stream.n_events();
    if n == 0 {
        return Err(Error::InvalidInput("stability probe needs at least one event".into()));
    }
    let idx = config.stability.event_index.unwrap_or(n / 2);
    if idx >= n {
        return Err(Error::InvalidInput(format!(
            "stability.event_index {idx} is outside the {n} simulated events"
        )));
    }
    let old_time = stream.times[idx];
    let lo = if idx == 0 { 0.0 } else { stream.times[idx - 1] };
    let hi = if idx + 1 < n { stream.times[idx + 1] } else { stream.horizon };
    let new_time = (old_time + config.stability.shift).clamp(lo, hi);
    let hyper = config.hyper.resolve(stream.p)?;
    let probe = stability_probe(&stream, &hyper, (idx, new_time))?;
    let report = StabilityReport { event_index: idx, old_time, new_time, probe };
    write_json(&config.out_dir.join("stability.json"), &report)
}

// ======================= ingest =======================

/// Parse an events CSV, print its summary stats as JSON, and optionally
/// write the normalized stream back out.
pub fn run_ingest(
    path: &Path,
    sort: bool,
    horizon: Option<f64>,
    out: Option<&Path>,
) -> Result<IngestSummary> {
    let f = fs::File::open(path)
        .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))?;
    let (stream, summary) = read_stream_csv(BufReader::new(f), sort, horizon)?;
    if let Some(o) = out {
        write_stream_csv(&stream, BufWriter::new(fs::File::create(o)?))?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Domain(format!("serialize summary: {e}")))?
    );
    Ok(summary)
}
