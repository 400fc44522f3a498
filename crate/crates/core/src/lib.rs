//! Task-driven map abstraction for a mapping Sensor robot and a planning
//! Actor robot sharing a bandwidth-limited channel.
//!
//! The Sensor picks, each step, the abstraction template whose compressed
//! observation best improves the Actor's map estimate near the Actor's
//! planned path, trading reconstruction error against bits sent. The Actor
//! fuses its own noisy window observations with what it receives, projects
//! the estimate onto `[0, 1]`, and replans with Dijkstra.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abstraction;
pub mod channel;
pub mod encoder;
pub mod error;
pub mod estimator;
pub mod grid_map;
pub mod oracle_qp;
pub mod planner;
pub mod relevance;
pub mod sim;
pub mod synthetic;

pub use abstraction::{
    instantiate_operator, raw_window_operator, AbstractionTemplate, Codebook, ObservationOperator,
    OperatorSource, TemplateId,
};
pub use channel::{add_gaussian_noise, stream_rng, transmit, Stream, Transmission};
pub use encoder::{select_abstraction, EncoderParams, SelectionResult, WeightMode};
pub use error::{Error, Result};
pub use estimator::{
    actor_decode_step, noiseless_observation, sensor_decode_step, sensor_overlap_update,
    BeliefState, NoiseModel, SensedMap, DEFAULT_REG_EPSILON,
};
pub use grid_map::{
    depth_to_inclination, load_raster, read_raster, to_pgm, to_text_matrix, window_at, Dims,
    GridMap, Neighborhood, Pos, RasterFormat, RawRaster, Window,
};
pub use oracle_qp::{
    solve_history_qp, solve_history_qp_with, HistoryStack, QpMode, QpOptions, QpSolution,
};
pub use planner::{cell_cost, plan, straight_line_path, Path, PlannerParams};
pub use relevance::{path_weights, WeightField, CUTOFF_WEIGHT};
pub use sim::{
    accumulated_cost, bits_ratio, cost_ratio, lawnmower_path, load_codebook, moving_target_trace,
    percent_1dp, run_batch, run_scenario, run_scenario_observed, summarize, timing_study,
    ActorConfig, BatchRun, CovarianceStorage, DecoderKind, EncoderConfig, Framework,
    FrameworkSummary, MapSource, PriorConfig, RunMetrics, RunOutput, Scenario, ScenarioConfig,
    SelectionLog, SensorConfig, StepRecord, StepView, TargetConfig, TimingRow,
};
pub use synthetic::{synthetic_map, SyntheticParams};
