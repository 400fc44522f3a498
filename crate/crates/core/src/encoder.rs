//! Sensor-side abstraction selection.
//!
//! Every template in the codebook is tried against a copy of the Sensor's
//! belief, assuming the most likely (zero) channel noise. The score is the
//! path-weighted squared reconstruction error over sensed cells plus a
//! communication cost proportional to the number of compressed cells.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstraction::{instantiate_operator, Codebook, ObservationOperator, TemplateId};
use crate::error::{arg, Result};
use crate::estimator::{noiseless_observation, BeliefState, NoiseModel, SensedMap};
use crate::grid_map::{Dims, Pos};
use crate::relevance::WeightField;

/// How path weights enter the error norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// `Σ (w_p e_p)²`
    #[default]
    Squared,
    /// `Σ w_p e_p²`
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderParams {
    /// `λ(θ) = lambda_coefficient * k`.
    pub lambda_coefficient: f64,
    pub weight_mode: WeightMode,
    /// Also consider sending nothing (no update, zero cost).
    pub allow_silence: bool,
}

impl Default for EncoderParams {
    fn default() -> Self {
        Self {
            lambda_coefficient: 0.02,
            weight_mode: WeightMode::Squared,
            allow_silence: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelectionResult {
    /// Chosen template, or `None` when staying silent won.
    pub theta: Option<TemplateId>,
    pub cost: f64,
    /// `(θ, J(θ))` for every template, in codebook order.
    pub per_template: Vec<(TemplateId, f64)>,
    /// Cost of sending nothing, when that option is enabled.
    pub silent_cost: Option<f64>,
    /// Operator of the chosen template at the Sensor's position.
    pub operator: Option<ObservationOperator>,
    /// Noise-free `A x̃` for the chosen template.
    pub observation: Vec<f64>,
}

impl SelectionResult {
    pub fn k(&self) -> usize {
        self.operator
            .as_ref()
            .map_or(0, ObservationOperator::n_rows)
    }
}

fn term(mode: WeightMode, w: f64, err: f64) -> f64 {
    match mode {
        WeightMode::Squared => (w * err) * (w * err),
        WeightMode::Linear => w * err * err,
    }
}

struct Candidate {
    id: TemplateId,
    cost: f64,
    op: ObservationOperator,
    obs: Vec<f64>,
}

/// Exhaustive search over the codebook for the template minimizing
/// `‖W ∘ (x̃ - x̂(θ))‖² + λ k(θ)`. Ties go to the lowest template id.
#[allow(clippy::too_many_arguments)]
pub fn select_abstraction(
    belief: &BeliefState,
    sensed: &SensedMap,
    weights: &WeightField,
    sensor_pos: Pos,
    dims: Dims,
    codebook: &Codebook,
    params: &EncoderParams,
    channel_noise: &NoiseModel,
) -> Result<SelectionResult> {
    if codebook.is_empty() {
        return arg("codebook is empty");
    }
    if weights.weights.len() != belief.len() || dims.len() != belief.len() {
        return arg("weights, map, and belief sizes disagree");
    }
    let mode = params.weight_mode;
    let projected = belief.projected();
    let sensed_cells = sensed.cells();
    let x_tilde = sensed.values();

    let error_with = |changed: &[(usize, f64)]| -> f64 {
        let mut est = std::collections::HashMap::with_capacity(changed.len());
        for &(c, m) in changed {
            est.insert(c, m.clamp(0.0, 1.0));
        }
        sensed_cells
            .iter()
            .map(|&c| {
                let xh = est.get(&c).copied().unwrap_or(projected[c]);
                term(mode, weights.weights[c], x_tilde[c] - xh)
            })
            .sum()
    };

    let mut candidates = codebook
        .templates()
        .par_iter()
        .map(|t| -> Result<Candidate> {
            let op = instantiate_operator(t, dims, sensor_pos)?;
            let obs = noiseless_observation(sensed, &op)?;
            let changed = if op.is_empty() {
                Vec::new()
            } else {
                belief.predicted_means(&op, &obs, channel_noise)?
            };
            let cost = error_with(&changed) + params.lambda_coefficient * op.n_rows() as f64;
            Ok(Candidate {
                id: t.id(),
                cost,
                op,
                obs,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let per_template: Vec<_> = candidates.iter().map(|c| (c.id, c.cost)).collect();
    let best = candidates
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.cost.total_cmp(&b.cost).then(a.id.cmp(&b.id)))
        .map(|(i, _)| i)
        .expect("non-empty codebook");

    let silent_cost = params.allow_silence.then(|| error_with(&[]));
    if let Some(sc) = silent_cost {
        if sc < candidates[best].cost {
            return Ok(SelectionResult {
                theta: None,
                cost: sc,
                per_template,
                silent_cost,
                operator: None,
                observation: Vec::new(),
            });
        }
    }
    let chosen = candidates.swap_remove(best);
    Ok(SelectionResult {
        theta: Some(chosen.id),
        cost: chosen.cost,
        per_template,
        silent_cost,
        operator: Some(chosen.op),
        observation: chosen.obs,
    })
}
