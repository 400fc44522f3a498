//! Path converter: Gaussian proximity weights around the Actor's planned path.

use crate::error::{arg, Result};
use crate::grid_map::{Dims, Pos};

#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    pub weights: Vec<f64>,
    pub sigma: f64,
}

impl WeightField {
    pub fn get(&self, cell: usize) -> f64 {
        self.weights[cell]
    }
}

/// Weight assigned beyond the optional `6σ` cutoff: `e^{-18}`, an upper bound
/// on every true weight out there.
pub const CUTOFF_WEIGHT: f64 = 1.522_997_974_471_263e-8;

/// `w(p) = max over path cells p* of exp(-‖p - p*‖² / (2σ²))`, with distances
/// between cell centres in cell units. With `cutoff`, cells farther than `6σ`
/// from the path get [`CUTOFF_WEIGHT`].
pub fn path_weights(path: &[Pos], dims: Dims, sigma: f64, cutoff: bool) -> Result<WeightField> {
    if path.is_empty() {
        return arg("path is empty");
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return arg(format!("sigma must be positive, got {sigma}"));
    }
    if let Some(p) = path.iter().find(|p| !dims.contains(**p)) {
        return arg(format!("path cell {p} is outside the map"));
    }
    let mut uniq = path.to_vec();
    uniq.sort_unstable();
    uniq.dedup();

    let limit = (6.0 * sigma).powi(2);
    let denom = 2.0 * sigma * sigma;
    let weights = (0..dims.len())
        .map(|i| {
            let p = dims.pos(i);
            let d2 = uniq
                .iter()
                .map(|&q| p.sq_dist(q))
                .fold(f64::INFINITY, f64::min);
            if cutoff && d2 > limit {
                CUTOFF_WEIGHT
            } else {
                (-d2 / denom).exp()
            }
        })
        .collect();
    Ok(WeightField { weights, sigma })
}
