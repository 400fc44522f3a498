//! Seeded synthetic traversability maps: a low, gently varying background
//! with smooth obstacle blobs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{stream_rng, Stream};
use crate::error::{arg, Result};
use crate::grid_map::{Dims, GridMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub obstacles: usize,
    /// Obstacle radius range, in cells.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Background values are drawn from `[0, background_max]`.
    pub background_max: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            obstacles: 12,
            min_radius: 2.0,
            max_radius: 6.0,
            background_max: 0.15,
        }
    }
}

pub fn synthetic_map(dims: Dims, seed: u64, params: &SyntheticParams) -> Result<GridMap> {
    if dims.is_empty() {
        return arg("synthetic map needs at least one cell");
    }
    if !(params.min_radius > 0.0 && params.max_radius >= params.min_radius) {
        return arg("synthetic obstacle radii must satisfy 0 < min <= max");
    }
    let mut rng = stream_rng(seed, Stream::Map);
    let (rows, cols) = (dims.rows as f64, dims.cols as f64);

    // background: a few wide bumps scaled into [0, background_max]
    let bumps: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..rows),
                rng.random_range(0.0..cols),
                rng.random_range(0.15..0.4) * rows.max(cols),
            )
        })
        .collect();
    let obstacles: Vec<(f64, f64, f64, f64)> = (0..params.obstacles)
        .map(|_| {
            (
                rng.random_range(0.0..rows),
                rng.random_range(0.0..cols),
                rng.random_range(params.min_radius..=params.max_radius),
                rng.random_range(0.6..=1.0),
            )
        })
        .collect();

    let mut bg = vec![0.0; dims.len()];
    for (i, v) in bg.iter_mut().enumerate() {
        let p = dims.pos(i);
        let (r, c) = (p.row as f64, p.col as f64);
        *v = bumps
            .iter()
            .map(|&(br, bc, s)| (-((r - br).powi(2) + (c - bc).powi(2)) / (2.0 * s * s)).exp())
            .sum::<f64>();
    }
    let hi = bg.iter().cloned().fold(0.0f64, f64::max);
    let scale = if hi > 0.0 {
        params.background_max / hi
    } else {
        0.0
    };

    let values = bg
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let p = dims.pos(i);
            let (r, c) = (p.row as f64, p.col as f64);
            let obstacle = obstacles
                .iter()
                .map(|&(orow, ocol, rad, h)| {
                    let d2 = (r - orow).powi(2) + (c - ocol).powi(2);
                    // flat top out to the radius, smooth shoulder beyond it
                    let d = d2.sqrt();
                    if d <= rad {
                        h
                    } else {
                        h * (-(d - rad).powi(2) / 2.0).exp()
                    }
                })
                .fold(0.0f64, f64::max);
            (b * scale).max(obstacle).clamp(0.0, 1.0)
        })
        .collect();
    GridMap::new(dims, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let d = Dims::new(64, 64);
        let p = SyntheticParams::default();
        let a = synthetic_map(d, 5, &p).unwrap();
        let b = synthetic_map(d, 5, &p).unwrap();
        let c = synthetic_map(d, 6, &p).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.values().iter().any(|&v| v > 0.5));
        assert!(a.values().iter().filter(|&&v| v <= 0.15).count() > d.len() / 2);
    }
}
