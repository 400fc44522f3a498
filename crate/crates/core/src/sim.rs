//! Scenario orchestration for the Actor-Sensor loop and its metrics.
//!
//! Each timestep runs, in order: target update, Actor sensing, Sensor sensing
//! and transmission (framework dependent), Actor decoding and replanning, and
//! one Actor move. The Sensor follows a lawnmower sweep for `horizon` steps
//! and then halts.

use std::fmt;
use std::path::{Path as FsPath, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstraction::{raw_window_operator, Codebook, ObservationOperator, OperatorSource};
use crate::channel::{add_gaussian_noise, stream_rng, transmit, Stream};
use crate::encoder::{select_abstraction, EncoderParams, WeightMode};
use crate::error::{arg, Error, Result};
use crate::estimator::{
    actor_decode_step, sensor_overlap_update, BeliefState, NoiseModel, SensedMap,
    DEFAULT_REG_EPSILON,
};
use crate::grid_map::{
    depth_to_inclination, load_raster, read_raster, window_at, Dims, GridMap, Neighborhood, Pos,
    RasterFormat,
};
use crate::oracle_qp::{solve_history_qp, HistoryStack};
use crate::planner::{plan, straight_line_path, PlannerParams};
use crate::relevance::path_weights;
use crate::synthetic::{synthetic_map, SyntheticParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Framework {
    /// No Sensor transmissions.
    #[serde(rename = "U", alias = "uninformed")]
    Uninformed,
    /// The Sensor sends the selected abstraction each step.
    #[serde(rename = "AS", alias = "abstraction-selection")]
    AbstractionSelection,
    /// The Sensor sends its whole raw window each step.
    #[serde(rename = "FI", alias = "fully-informed")]
    FullyInformed,
}

impl Framework {
    pub const ALL: [Framework; 3] = [
        Framework::Uninformed,
        Framework::AbstractionSelection,
        Framework::FullyInformed,
    ];

    pub fn short(self) -> &'static str {
        match self {
            Framework::Uninformed => "U",
            Framework::AbstractionSelection => "AS",
            Framework::FullyInformed => "FI",
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "U" | "UNINFORMED" => Ok(Framework::Uninformed),
            "AS" | "ABSTRACTION-SELECTION" | "ABSTRACTION_SELECTION" => {
                Ok(Framework::AbstractionSelection)
            }
            "FI" | "FULLY-INFORMED" | "FULLY_INFORMED" => Ok(Framework::FullyInformed),
            _ => arg(format!("unknown framework `{s}` (expected U, AS or FI)")),
        }
    }
}

/// Which estimator the Actor uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    /// Kalman recursion plus projection.
    #[default]
    Iterative,
    /// Box-constrained QP over the whole observation history.
    Qp,
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::Iterative => "iterative",
            DecoderKind::Qp => "qp",
        })
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iterative" | "kalman" => Ok(DecoderKind::Iterative),
            "qp" => Ok(DecoderKind::Qp),
            _ => arg(format!("unknown decoder `{s}` (expected iterative or qp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MapSource {
    /// A raster already holding traversability values; rescaled to `[0, 1]`.
    Raster {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        format: Option<RasterFormat>,
    },
    /// A depth raster converted to normalized inclination.
    Depth {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        format: Option<RasterFormat>,
        #[serde(default)]
        neighborhood: Neighborhood,
    },
    /// Seeded random obstacle field. Without a seed the run seed is used.
    Synthetic {
        rows: usize,
        cols: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default)]
        params: SyntheticParams,
    },
}

impl MapSource {
    pub fn load(&self, run_seed: u64) -> Result<GridMap> {
        match self {
            MapSource::Raster { path, format } => load_raster(
                path,
                format.unwrap_or_else(|| RasterFormat::from_path(path)),
            ),
            MapSource::Depth {
                path,
                format,
                neighborhood,
            } => {
                let raw = read_raster(
                    path,
                    format.unwrap_or_else(|| RasterFormat::from_path(path)),
                )?;
                Ok(depth_to_inclination(&raw, *neighborhood))
            }
            MapSource::Synthetic {
                rows,
                cols,
                seed,
                params,
            } => synthetic_map(Dims::new(*rows, *cols), seed.unwrap_or(run_seed), params),
        }
    }

    fn rebase(&mut self, base: &FsPath) {
        match self {
            MapSource::Raster { path, .. } | MapSource::Depth { path, .. }
                if path.is_relative() =>
            {
                *path = base.join(&*path);
            }
            _ => {}
        }
    }
}

/// How the Actor's iterative decoder stores its covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceStorage {
    /// Only correlated groups of observed cells; cost follows group size.
    #[default]
    Blocks,
    /// Full `N x N`; constant cost per update, memory `8 N²` bytes.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorConfig {
    pub start: Pos,
    /// `[width, height]` of the field of view.
    pub window: [usize; 2],
    pub noise_variance: f64,
    pub movement_penalty: f64,
    pub feasibility_threshold: f64,
    #[serde(default)]
    pub covariance: CovarianceStorage,
}

impl ActorConfig {
    pub fn planner(&self) -> PlannerParams {
        PlannerParams {
            movement_penalty: self.movement_penalty,
            feasibility_threshold: self.feasibility_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub start: Pos,
    pub window: [usize; 2],
    /// Codebook file; the built-in 16-template set when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codebook: Option<PathBuf>,
    /// Number of timesteps the Sensor senses and transmits.
    pub horizon: usize,
    pub noise_variance: f64,
    /// Rows between consecutive lawnmower passes.
    pub stripe_spacing: usize,
    /// Optional `[top-left, bottom-right]` (inclusive) sweep region.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<[Pos; 2]>,
}

impl SensorConfig {
    /// The configured region, or else the cells where the whole window fits
    /// inside the map (the full map when it is smaller than the window).
    /// The start cell is always included.
    pub fn sweep_region(&self, dims: Dims) -> [Pos; 2] {
        if let Some(r) = self.region {
            return r;
        }
        let inset = |len: usize, w: usize, at: usize| {
            let (lo, hi) = ((w - 1) / 2, len.saturating_sub(w / 2 + 1));
            if lo > hi {
                (0, len - 1)
            } else {
                (lo.min(at), hi.max(at))
            }
        };
        let (r0, r1) = inset(dims.rows, self.window[1], self.start.row);
        let (c0, c1) = inset(dims.cols, self.window[0], self.start.col);
        [Pos::new(r0, c0), Pos::new(r1, c1)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetConfig {
    Static {
        position: Pos,
    },
    /// Random walk moving on even timesteps. Without a seed the run seed is used.
    Moving {
        start: Pos,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub lambda_coefficient: f64,
    /// Width of the path proximity kernel, in cells.
    pub sigma: f64,
    pub weight_mode: WeightMode,
    pub allow_silence: bool,
    /// Truncate path weights beyond `6σ`.
    pub weight_cutoff: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            lambda_coefficient: 0.02,
            sigma: 20.0,
            weight_mode: WeightMode::Squared,
            allow_silence: false,
            weight_cutoff: false,
        }
    }
}

impl EncoderConfig {
    pub fn params(&self) -> EncoderParams {
        EncoderParams {
            lambda_coefficient: self.lambda_coefficient,
            weight_mode: self.weight_mode,
            allow_silence: self.allow_silence,
        }
    }
}

/// Everything needed to run one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub framework: Framework,
    #[serde(default)]
    pub decoder: DecoderKind,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to `20 (rows + cols)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_cap: Option<usize>,
    #[serde(default = "default_reg_epsilon")]
    pub reg_epsilon: f64,
    pub map: MapSource,
    pub actor: ActorConfig,
    pub sensor: SensorConfig,
    pub target: TargetConfig,
    pub prior: PriorConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
}

/// Largest map for dense covariance storage (about 1.3 GB).
pub const MAX_DENSE_CELLS: usize = 1 << 14;

fn default_reg_epsilon() -> f64 {
    DEFAULT_REG_EPSILON
}

impl Default for ScenarioConfig {
    /// Moving-target Earth-style setup on a synthetic 128x128 map.
    fn default() -> Self {
        Self {
            framework: Framework::AbstractionSelection,
            decoder: DecoderKind::Iterative,
            seed: 0,
            step_cap: None,
            reg_epsilon: DEFAULT_REG_EPSILON,
            map: MapSource::Synthetic {
                rows: 128,
                cols: 128,
                seed: None,
                params: SyntheticParams::default(),
            },
            actor: ActorConfig {
                start: Pos::new(12, 57),
                window: [5, 5],
                noise_variance: 1e-6,
                movement_penalty: 0.025,
                feasibility_threshold: 0.501,
                covariance: CovarianceStorage::Blocks,
            },
            sensor: SensorConfig {
                start: Pos::new(46, 62),
                window: [15, 15],
                codebook: None,
                horizon: 105,
                noise_variance: 1e-5,
                stripe_spacing: 15,
                region: None,
            },
            target: TargetConfig::Moving {
                start: Pos::new(90, 49),
                seed: None,
            },
            prior: PriorConfig {
                mean: 0.5,
                variance: 1.0,
            },
            encoder: EncoderConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn step_cap_for(&self, dims: Dims) -> usize {
        self.step_cap.unwrap_or(20 * (dims.rows + dims.cols))
    }

    /// Makes relative file paths relative to `base` (the config's directory).
    pub fn rebase_paths(&mut self, base: &FsPath) {
        self.map.rebase(base);
        if let Some(p) = &mut self.sensor.codebook {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Field-level checks that do not need the map.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| Error::Argument(format!("{name}: {e}"));
        self.actor
            .planner()
            .validate()
            .map_err(|e| field("actor", e))?;
        self.actor
            .planner()
            .check_against_prior(self.prior.mean)
            .map_err(|e| field("actor.feasibility_threshold", e))?;
        NoiseModel::new(self.actor.noise_variance).map_err(|e| field("actor.noise_variance", e))?;
        NoiseModel::new(self.sensor.noise_variance)
            .map_err(|e| field("sensor.noise_variance", e))?;
        if self.actor.window.contains(&0) {
            return arg("actor.window: must be at least 1x1");
        }
        if self.sensor.window.contains(&0) {
            return arg("sensor.window: must be at least 1x1");
        }
        if self.sensor.stripe_spacing == 0 {
            return arg("sensor.stripe_spacing: must be positive");
        }
        if !(self.prior.variance > 0.0) {
            return arg("prior.variance: must be positive");
        }
        if !(self.encoder.sigma > 0.0) {
            return arg("encoder.sigma: must be positive");
        }
        if !(self.encoder.lambda_coefficient >= 0.0) {
            return arg("encoder.lambda_coefficient: must be >= 0");
        }
        if !(self.reg_epsilon > 0.0) {
            return arg("reg_epsilon: must be positive");
        }
        if self.step_cap == Some(0) {
            return arg("step_cap: must be positive");
        }
        Ok(())
    }

    fn validate_against(&self, dims: Dims, codebook: &Codebook) -> Result<()> {
        if self.actor.covariance == CovarianceStorage::Dense
            && self.decoder == DecoderKind::Iterative
            && dims.len() > MAX_DENSE_CELLS
        {
            return arg(format!(
                "actor.covariance: dense storage is limited to {MAX_DENSE_CELLS} cells, map has {}",
                dims.len()
            ));
        }
        dims.check(self.actor.start, "actor.start")?;
        dims.check(self.sensor.start, "sensor.start")?;
        match &self.target {
            TargetConfig::Static { position } => dims.check(*position, "target.position")?,
            TargetConfig::Moving { start, .. } => dims.check(*start, "target.start")?,
        }
        if let Some([a, b]) = self.sensor.region {
            dims.check(a, "sensor.region")?;
            dims.check(b, "sensor.region")?;
            if a.row > b.row || a.col > b.col {
                return arg("sensor.region: corners must be [top-left, bottom-right]");
            }
        }
        if self.framework == Framework::AbstractionSelection {
            let want = (self.sensor.window[0], self.sensor.window[1]);
            if let Some(shape) = codebook.window_shape() {
                if shape != want {
                    return arg(format!(
                        "sensor.window {want:?} does not match the codebook window {shape:?}"
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn load_codebook(path: Option<&FsPath>) -> Result<Codebook> {
    match path {
        None => Ok(Codebook::builtin_16()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| Error::Io {
                path: p.to_path_buf(),
                source,
            })?;
            Codebook::parse(&text)
        }
    }
}

/// A validated configuration with its map and codebook loaded.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub map: GridMap,
    pub codebook: Codebook,
}

impl Scenario {
    pub fn load(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let map = config.map.load(config.seed)?;
        let codebook = load_codebook(config.sensor.codebook.as_deref())?;
        Self::from_parts(config, map, codebook)
    }

    pub fn from_parts(config: ScenarioConfig, map: GridMap, codebook: Codebook) -> Result<Self> {
        config.validate()?;
        config.validate_against(map.dims(), &codebook)?;
        Ok(Self {
            config,
            map,
            codebook,
        })
    }

    pub fn with_framework(&self, framework: Framework) -> Result<Self> {
        let mut config = self.config.clone();
        config.framework = framework;
        Self::from_parts(config, self.map.clone(), self.codebook.clone())
    }
}

/// One row of the step trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// Actor position at the start of the step.
    pub actor: Pos,
    pub sensor: Option<Pos>,
    pub target: Pos,
    /// `raw`, a template id, or `None` when nothing was sent.
    pub theta: Option<OperatorSource>,
    pub bits: u64,
    pub plan_cost: f64,
    pub decoder_ms: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str =
        "t,actor_pos,sensor_pos,target_pos,theta,bits_step,plan_cost,decoder_ms";

    /// CSV row; positions print as `row:col`, missing values as `-`. The
    /// timing column is left empty unless `with_timing`.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let opt = |p: Option<Pos>| p.map_or_else(|| "-".to_string(), |p| p.to_string());
        let theta = self
            .theta
            .map_or_else(|| "-".to_string(), |s| s.to_string());
        let timing = if with_timing {
            format!("{:.6}", self.decoder_ms)
        } else {
            String::new()
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.t,
            self.actor,
            opt(self.sensor),
            self.target,
            theta,
            self.bits,
            self.plan_cost,
            timing
        )
    }
}

/// Per-step encoder decision.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionLog {
    pub t: usize,
    pub theta: Option<u32>,
    pub cost: f64,
    pub k: usize,
    pub bits: u64,
}

impl SelectionLog {
    pub const CSV_HEADER: &'static str = "t,theta_star,J_star,k,bits";

    pub fn to_csv(&self) -> String {
        let theta = self
            .theta
            .map_or_else(|| "-".to_string(), |t| t.to_string());
        format!(
            "{},{},{},{},{}",
            self.t, theta, self.cost, self.k, self.bits
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    /// Accumulated traversal cost over the realized trajectory.
    pub cost: f64,
    /// Total bits the Sensor transmitted.
    pub bits: u64,
    pub steps: usize,
    pub reached: bool,
    /// Actor decoder wall time per step, in milliseconds.
    pub decoder_ms: Vec<f64>,
    /// Every cell the Actor occupied, duplicates included.
    pub trajectory: Vec<Pos>,
}

impl RunMetrics {
    pub fn mean_decoder_ms(&self) -> f64 {
        if self.decoder_ms.is_empty() {
            0.0
        } else {
            self.decoder_ms.iter().sum::<f64>() / self.decoder_ms.len() as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub trace: Vec<StepRecord>,
    pub selections: Vec<SelectionLog>,
}

/// State visible to a per-step observer, after the Actor has moved.
pub struct StepView<'a> {
    pub t: usize,
    pub dims: Dims,
    /// The Actor's projected estimate used for this step's plan.
    pub estimate: &'a [f64],
    pub actor_trajectory: &'a [Pos],
    pub sensor_trajectory: &'a [Pos],
}

/// Boustrophedon sweep: run along the row to the region edge, shift
/// `spacing` rows (bouncing off the top and bottom edges), run back. Returns
/// `horizon + 1` positions, one cell apart.
pub fn lawnmower_path(
    start: Pos,
    dims: Dims,
    spacing: usize,
    horizon: usize,
    region: Option<[Pos; 2]>,
) -> Result<Vec<Pos>> {
    dims.check(start, "lawnmower start")?;
    if spacing == 0 {
        return arg("stripe spacing must be positive");
    }
    let [lo, hi] = region.unwrap_or([Pos::new(0, 0), Pos::new(dims.rows - 1, dims.cols - 1)]);
    let within = |r: i64, c: i64| {
        r >= lo.row as i64 && r <= hi.row as i64 && c >= lo.col as i64 && c <= hi.col as i64
    };
    if !within(start.row as i64, start.col as i64) {
        return arg(format!(
            "lawnmower start {start} lies outside the sweep region"
        ));
    }

    let (mut r, mut c) = (start.row as i64, start.col as i64);
    let (mut dh, mut dv) = (1i64, 1i64);
    let mut pending = 0usize;
    let mut out = Vec::with_capacity(horizon + 1);
    out.push(start);
    while out.len() <= horizon {
        if pending == 0 && !within(r, c + dh) {
            pending = spacing;
        }
        if pending > 0 {
            if !within(r + dv, c) {
                dv = -dv;
            }
            if within(r + dv, c) {
                r += dv;
            }
            pending -= 1;
            if pending == 0 {
                dh = -dh;
            }
        } else {
            c += dh;
        }
        out.push(Pos::new(r as usize, c as usize));
    }
    Ok(out)
}

/// Random walk over {UP, DOWN, LEFT, RIGHT, STAY} that moves only on even
/// timesteps; moves leaving the map become STAY. Returns `horizon + 1`
/// positions.
pub fn moving_target_trace(start: Pos, dims: Dims, seed: u64, horizon: usize) -> Result<Vec<Pos>> {
    dims.check(start, "target start")?;
    let mut rng = stream_rng(seed, Stream::Target);
    let mut out = Vec::with_capacity(horizon + 1);
    let mut p = start;
    out.push(p);
    for t in 1..=horizon {
        if t % 2 == 0 {
            let (dr, dc) = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1), (0, 0)][rng.random_range(0..5)];
            let (r, c) = (p.row as i64 + dr, p.col as i64 + dc);
            if dims.contains_signed(r, c) {
                p = Pos::new(r as usize, c as usize);
            }
        }
        out.push(p);
    }
    Ok(out)
}

/// `Σ (x_p + a)` over the realized trajectory, on true map values.
pub fn accumulated_cost(trajectory: &[Pos], map: &GridMap, movement_penalty: f64) -> f64 {
    trajectory
        .iter()
        .map(|&p| map.get(p) + movement_penalty)
        .sum()
}

fn mean_ratio(pairs: &[(f64, f64)], what: &str) -> Result<f64> {
    if pairs.is_empty() {
        return arg(format!("{what}: no runs"));
    }
    let mut sum = 0.0;
    for &(v, base) in pairs {
        if !(base > 0.0) {
            return Err(Error::Data(format!(
                "{what}: baseline value {base} is not positive"
            )));
        }
        sum += v / base;
    }
    Ok(sum / pairs.len() as f64)
}

/// Mean of `C / C_max` over `(C, C_uninformed)` pairs.
pub fn cost_ratio(pairs: &[(f64, f64)]) -> Result<f64> {
    mean_ratio(pairs, "cost ratio")
}

/// Mean of `B / B_max` over `(B, B_fully_informed)` pairs.
pub fn bits_ratio(pairs: &[(u64, u64)]) -> Result<f64> {
    let pairs: Vec<_> = pairs.iter().map(|&(a, b)| (a as f64, b as f64)).collect();
    mean_ratio(&pairs, "bits ratio")
}

/// A ratio as a percentage with one decimal, e.g. `0.01583 -> "1.6"`.
pub fn percent_1dp(ratio: f64) -> String {
    format!("{:.1}", ratio * 100.0)
}

pub fn run_scenario(scenario: &Scenario) -> Result<RunOutput> {
    run_scenario_observed(scenario, &mut |_| {})
}

pub fn run_scenario_observed(
    scenario: &Scenario,
    observer: &mut dyn FnMut(&StepView<'_>),
) -> Result<RunOutput> {
    let cfg = &scenario.config;
    let map = &scenario.map;
    let codebook = &scenario.codebook;
    let dims = map.dims();
    let n = dims.len();
    let truth = map.values();
    let framework = cfg.framework;

    let actor_noise = NoiseModel {
        variance: cfg.actor.noise_variance,
        reg_epsilon: cfg.reg_epsilon,
    };
    let channel_noise = NoiseModel {
        variance: cfg.sensor.noise_variance,
        reg_epsilon: cfg.reg_epsilon,
    };
    let planner = cfg.actor.planner();
    let encoder = cfg.encoder.params();
    let cap = cfg.step_cap_for(dims);
    let horizon = cfg.sensor.horizon;
    let [aw, ah] = cfg.actor.window;
    let [sw, sh] = cfg.sensor.window;

    let lawn = lawnmower_path(
        cfg.sensor.start,
        dims,
        cfg.sensor.stripe_spacing,
        horizon,
        Some(cfg.sensor.sweep_region(dims)),
    )?;
    let targets = match &cfg.target {
        TargetConfig::Static { position } => vec![*position],
        TargetConfig::Moving { start, seed } => {
            moving_target_trace(*start, dims, seed.unwrap_or(cfg.seed), cap)?
        }
    };
    let target_at = |t: usize| targets[t.min(targets.len() - 1)];

    let mut actor_rng = stream_rng(cfg.seed, Stream::ActorPerception);
    let mut channel_rng = stream_rng(cfg.seed, Stream::Channel);

    let mut actor_belief = match cfg.actor.covariance {
        CovarianceStorage::Blocks => BeliefState::new(n, cfg.prior.mean, cfg.prior.variance)?,
        CovarianceStorage::Dense => BeliefState::dense(n, cfg.prior.mean, cfg.prior.variance)?,
    };
    let mut history =
        (cfg.decoder == DecoderKind::Qp).then(|| HistoryStack::new(vec![cfg.prior.mean; n]));
    let mut sensor_belief = match framework {
        Framework::AbstractionSelection => {
            Some(BeliefState::new(n, cfg.prior.mean, cfg.prior.variance)?)
        }
        _ => None,
    };
    let mut sensed = SensedMap::new(n);

    let mut actor = cfg.actor.start;
    let mut trajectory = vec![actor];
    let mut sensor_trajectory = Vec::new();
    let mut prev_path = straight_line_path(actor, target_at(0));
    let mut bits_total = 0u64;
    let mut trace = Vec::new();
    let mut selections = Vec::new();
    let mut decoder_ms = Vec::new();
    let mut reached = actor == target_at(0);
    let mut t = 0;

    while !reached && t < cap {
        let target = target_at(t);

        let actor_window = window_at(dims, actor, aw, ah)?;
        let actor_op = raw_window_operator(&actor_window, dims);
        let (actor_obs, _) =
            add_gaussian_noise(&actor_op.apply(truth), actor_noise.variance, &mut actor_rng);

        let sensor_pos = lawn[t.min(horizon)];
        let mut received: Option<(ObservationOperator, Vec<f64>)> = None;
        let mut bits_step = 0;
        if framework != Framework::Uninformed && t < horizon {
            sensor_trajectory.push(sensor_pos);
            let sensor_window = window_at(dims, sensor_pos, sw, sh)?;
            sensed.record(&sensor_window.cells, truth);
            match framework {
                Framework::FullyInformed => {
                    let op = raw_window_operator(&sensor_window, dims);
                    let tx = transmit(
                        &op.apply(truth),
                        OperatorSource::Raw,
                        channel_noise.variance,
                        codebook,
                        &mut channel_rng,
                    );
                    bits_step = tx.bits;
                    received = Some((op, tx.payload));
                }
                Framework::AbstractionSelection => {
                    let sb = sensor_belief.as_mut().expect("sensor belief under AS");
                    let overlap: Vec<usize> = actor_window
                        .cells
                        .iter()
                        .copied()
                        .filter(|&c| sensed.contains(c))
                        .collect();
                    sensor_overlap_update(sb, &sensed, &overlap, &actor_noise)?;
                    sb.project();
                    let weights = path_weights(
                        &prev_path,
                        dims,
                        cfg.encoder.sigma,
                        cfg.encoder.weight_cutoff,
                    )?;
                    let sel = select_abstraction(
                        sb,
                        &sensed,
                        &weights,
                        sensor_pos,
                        dims,
                        codebook,
                        &encoder,
                        &channel_noise,
                    )?;
                    let k = sel.k();
                    if let Some(op) = sel.operator {
                        sb.kalman_update(&op, &sel.observation, &channel_noise)?;
                        let tx = transmit(
                            &sel.observation,
                            op.source(),
                            channel_noise.variance,
                            codebook,
                            &mut channel_rng,
                        );
                        bits_step = tx.bits;
                        received = Some((op, tx.payload));
                    }
                    sb.project();
                    selections.push(SelectionLog {
                        t,
                        theta: sel.theta,
                        cost: sel.cost,
                        k,
                        bits: bits_step,
                    });
                }
                Framework::Uninformed => unreachable!(),
            }
        }

        let started = Instant::now();
        let estimate: Vec<f64> = match &mut history {
            None => {
                actor_decode_step(
                    &mut actor_belief,
                    &actor_op,
                    &actor_obs,
                    &actor_noise,
                    received.as_ref().map(|(op, obs)| (op, obs.as_slice())),
                    &channel_noise,
                )?;
                log::trace!(
                    "t={t}: largest covariance block {} cells",
                    actor_belief.block_sizes().into_iter().max().unwrap_or(0)
                );
                actor_belief.projected().to_vec()
            }
            Some(h) => {
                h.push(&actor_op, &actor_obs)?;
                if let Some((op, obs)) = &received {
                    h.push(op, obs)?;
                }
                let sol = solve_history_qp(h);
                log::debug!(
                    "t={t}: history QP over {} rows, {:?} after {} Newton steps (residual {:.2e})",
                    h.n_rows(),
                    sol.mode,
                    sol.iterations,
                    sol.residual
                );
                sol.x
            }
        };
        let elapsed = started.elapsed().as_secs_f64() * 1e3;
        decoder_ms.push(elapsed);

        let path = plan(&estimate, dims, actor, target, &planner)?;
        trace.push(StepRecord {
            t,
            actor,
            sensor: (framework != Framework::Uninformed).then_some(sensor_pos),
            target,
            theta: received.as_ref().map(|(op, _)| op.source()),
            bits: bits_step,
            plan_cost: path.cost,
            decoder_ms: elapsed,
        });
        bits_total += bits_step;
        actor = path.next_cell().expect("plans are non-empty");
        trajectory.push(actor);
        prev_path = path.cells;
        reached = actor == target;

        observer(&StepView {
            t,
            dims,
            estimate: &estimate,
            actor_trajectory: &trajectory,
            sensor_trajectory: &sensor_trajectory,
        });
        t += 1;
    }

    let metrics = RunMetrics {
        cost: accumulated_cost(&trajectory, map, cfg.actor.movement_penalty),
        bits: bits_total,
        steps: t,
        reached,
        decoder_ms,
        trajectory,
    };
    Ok(RunOutput {
        metrics,
        trace,
        selections,
    })
}

#[derive(Debug, Clone)]
pub struct BatchRun {
    pub seed: u64,
    pub framework: Framework,
    pub metrics: RunMetrics,
}

/// Runs every framework for every seed; runs sharing a seed share the map,
/// the target trace, and the noise seeds. Results are ordered by
/// `(seed, framework)` in input order.
pub fn run_batch(
    base: &ScenarioConfig,
    seeds: &[u64],
    frameworks: &[Framework],
) -> Result<Vec<BatchRun>> {
    base.validate()?;
    let codebook = load_codebook(base.sensor.codebook.as_deref())?;
    let per_seed: Vec<Vec<BatchRun>> = seeds
        .par_iter()
        .map(|&seed| {
            let map = base.map.load(seed)?;
            frameworks
                .par_iter()
                .map(|&framework| {
                    let mut cfg = base.clone();
                    cfg.seed = seed;
                    cfg.framework = framework;
                    let sc = Scenario::from_parts(cfg, map.clone(), codebook.clone())?;
                    let out = run_scenario(&sc)?;
                    Ok(BatchRun {
                        seed,
                        framework,
                        metrics: out.metrics,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameworkSummary {
    pub framework: Framework,
    pub runs: usize,
    pub cost_mean: f64,
    pub cost_sd: f64,
    pub bits_mean: f64,
    pub bits_sd: f64,
    /// Against paired Uninformed runs, when those were executed.
    pub cost_ratio: Option<f64>,
    /// Against paired Fully-Informed runs, when those were executed.
    pub bits_ratio: Option<f64>,
    pub reached: usize,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

/// Table-style summary per framework, ratios computed over paired seeds only.
pub fn summarize(runs: &[BatchRun]) -> Vec<FrameworkSummary> {
    let find = |seed: u64, fw: Framework| {
        runs.iter()
            .find(|r| r.seed == seed && r.framework == fw)
            .map(|r| &r.metrics)
    };
    let mut frameworks: Vec<Framework> = runs.iter().map(|r| r.framework).collect();
    frameworks.sort();
    frameworks.dedup();
    frameworks
        .into_iter()
        .map(|fw| {
            let mine: Vec<&BatchRun> = runs.iter().filter(|r| r.framework == fw).collect();
            let costs: Vec<f64> = mine.iter().map(|r| r.metrics.cost).collect();
            let bits: Vec<f64> = mine.iter().map(|r| r.metrics.bits as f64).collect();
            let (cost_mean, cost_sd) = mean_sd(&costs);
            let (bits_mean, bits_sd) = mean_sd(&bits);
            let cost_pairs: Vec<(f64, f64)> = mine
                .iter()
                .filter_map(|r| {
                    find(r.seed, Framework::Uninformed).map(|u| (r.metrics.cost, u.cost))
                })
                .collect();
            let bit_pairs: Vec<(u64, u64)> = mine
                .iter()
                .filter_map(|r| {
                    find(r.seed, Framework::FullyInformed).map(|f| (r.metrics.bits, f.bits))
                })
                .collect();
            FrameworkSummary {
                framework: fw,
                runs: mine.len(),
                cost_mean,
                cost_sd,
                bits_mean,
                bits_sd,
                cost_ratio: cost_ratio(&cost_pairs).ok(),
                bits_ratio: bits_ratio(&bit_pairs).ok(),
                reached: mine.iter().filter(|r| r.metrics.reached).count(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub horizon: usize,
    pub decoder: DecoderKind,
    pub mean_ms: f64,
    pub steps: usize,
}

impl TimingRow {
    pub const CSV_HEADER: &'static str = "horizon,decoder,mean_decoder_ms,steps";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6},{}",
            self.horizon, self.decoder, self.mean_ms, self.steps
        )
    }
}

/// Mean per-step Actor decoder time for each Sensor horizon, once with the
/// iterative decoder and once with the history QP.
pub fn timing_study(base: &Scenario, horizons: &[usize]) -> Result<Vec<TimingRow>> {
    let mut rows = Vec::with_capacity(2 * horizons.len());
    for &h in horizons {
        for decoder in [DecoderKind::Iterative, DecoderKind::Qp] {
            let mut cfg = base.config.clone();
            cfg.sensor.horizon = h;
            cfg.decoder = decoder;
            let sc = Scenario::from_parts(cfg, base.map.clone(), base.codebook.clone())?;
            let out = run_scenario(&sc)?;
            rows.push(TimingRow {
                horizon: h,
                decoder,
                mean_ms: out.metrics.mean_decoder_ms(),
                steps: out.metrics.steps,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lawnmower_serpentine() {
        let d = Dims::new(4, 4);
        let p = lawnmower_path(Pos::new(0, 0), d, 1, 15, None).unwrap();
        let want: Vec<Pos> = [
            (0, 0),
            (0, 1),
            (0, 2),
            (0, 3),
            (1, 3),
            (1, 2),
            (1, 1),
            (1, 0),
            (2, 0),
            (2, 1),
            (2, 2),
            (2, 3),
            (3, 3),
            (3, 2),
            (3, 1),
            (3, 0),
        ]
        .into_iter()
        .map(Pos::from)
        .collect();
        assert_eq!(p, want);
        assert_eq!(
            lawnmower_path(Pos::new(1, 1), d, 1, 0, None).unwrap(),
            vec![Pos::new(1, 1)]
        );
        let long = lawnmower_path(Pos::new(2, 1), d, 3, 100, None).unwrap();
        assert_eq!(long.len(), 101);
        assert!(long
            .windows(2)
            .all(|w| w[0].is_adjacent(w[1]) || w[0] == w[1]));
        assert!(long.iter().all(|&p| d.contains(p)));
    }

    #[test]
    fn lawnmower_respects_region() {
        let d = Dims::new(20, 20);
        let region = [Pos::new(5, 5), Pos::new(12, 9)];
        let p = lawnmower_path(Pos::new(5, 5), d, 2, 60, Some(region)).unwrap();
        assert!(p
            .iter()
            .all(|q| (5..=12).contains(&q.row) && (5..=9).contains(&q.col)));
        assert!(lawnmower_path(Pos::new(0, 0), d, 2, 5, Some(region)).is_err());
    }

    #[test]
    fn default_sweep_keeps_window_inside() {
        let cfg = ScenarioConfig::default().sensor;
        let d = Dims::new(128, 128);
        assert_eq!(cfg.sweep_region(d), [Pos::new(7, 7), Pos::new(120, 120)]);
        let path = lawnmower_path(
            cfg.start,
            d,
            cfg.stripe_spacing,
            400,
            Some(cfg.sweep_region(d)),
        )
        .unwrap();
        for p in path {
            assert_eq!(window_at(d, p, 15, 15).unwrap().cells.len(), 225);
        }
        let tiny = Dims::new(5, 40);
        let cfg = SensorConfig {
            start: Pos::new(2, 3),
            ..cfg
        };
        assert_eq!(cfg.sweep_region(tiny), [Pos::new(0, 3), Pos::new(4, 32)]);
    }

    #[test]
    fn target_moves_only_on_even_steps() {
        let d = Dims::new(10, 10);
        for seed in 0..20 {
            let tr = moving_target_trace(Pos::new(0, 9), d, seed, 50).unwrap();
            assert_eq!(tr.len(), 51);
            assert_eq!(
                tr,
                moving_target_trace(Pos::new(0, 9), d, seed, 50).unwrap()
            );
            for t in 1..=50 {
                if t % 2 == 1 {
                    assert_eq!(tr[t], tr[t - 1]);
                } else {
                    assert!(tr[t] == tr[t - 1] || tr[t].is_adjacent(tr[t - 1]));
                }
                assert!(d.contains(tr[t]));
            }
        }
    }

    #[test]
    fn accumulated_cost_sums_truth() {
        let map = GridMap::new(Dims::new(1, 3), vec![0.0, 0.1, 0.2]).unwrap();
        let traj = [Pos::new(0, 0), Pos::new(0, 1), Pos::new(0, 2)];
        assert!((accumulated_cost(&traj, &map, 0.025) - 0.375).abs() < 1e-15);
        let twice = [Pos::new(0, 1), Pos::new(0, 1)];
        assert!((accumulated_cost(&twice, &map, 0.025) - 0.25).abs() < 1e-15);
        assert_eq!(accumulated_cost(&[], &map, 0.025), 0.0);
    }

    #[test]
    fn ratio_arithmetic() {
        assert_eq!(cost_ratio(&[(3.0, 3.0), (2.0, 2.0)]).unwrap(), 1.0);
        assert_eq!(cost_ratio(&[(1.0, 2.0), (4.0, 4.0)]).unwrap(), 0.75);
        assert_eq!(percent_1dp(bits_ratio(&[(7692, 486_000)]).unwrap()), "1.6");
        assert_eq!(percent_1dp(bits_ratio(&[(6602, 283_500)]).unwrap()), "2.3");
        assert_eq!(
            percent_1dp(bits_ratio(&[(486_000, 486_000)]).unwrap()),
            "100.0"
        );
        assert!(cost_ratio(&[]).is_err());
        assert!(bits_ratio(&[(1, 0)]).is_err());
    }

    #[test]
    fn framework_parsing() {
        assert_eq!(
            "as".parse::<Framework>().unwrap(),
            Framework::AbstractionSelection
        );
        assert_eq!("FI".parse::<Framework>().unwrap(), Framework::FullyInformed);
        assert_eq!(
            "uninformed".parse::<Framework>().unwrap(),
            Framework::Uninformed
        );
        assert!("XX".parse::<Framework>().is_err());
        assert_eq!("qp".parse::<DecoderKind>().unwrap(), DecoderKind::Qp);
    }

    #[test]
    fn trace_row_format() {
        let r = StepRecord {
            t: 3,
            actor: Pos::new(1, 2),
            sensor: None,
            target: Pos::new(4, 5),
            theta: Some(OperatorSource::Template(6)),
            bits: 112,
            plan_cost: 1.5,
            decoder_ms: 0.25,
        };
        assert_eq!(r.to_csv(false), "3,1:2,-,4:5,6,112,1.5,");
        assert_eq!(r.to_csv(true), "3,1:2,-,4:5,6,112,1.5,0.250000");
    }
}
