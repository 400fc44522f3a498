//! Actor path planning on the 4-connected grid with per-cell (vertex) costs.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::grid_map::{Dims, Pos};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerParams {
    /// Constant cost `a` paid for every cell on a path.
    pub movement_penalty: f64,
    /// Cells estimated above this are priced as untraversable.
    pub feasibility_threshold: f64,
}

impl PlannerParams {
    pub fn new(movement_penalty: f64, feasibility_threshold: f64) -> Result<Self> {
        let p = Self {
            movement_penalty,
            feasibility_threshold,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.movement_penalty > 0.0) || !self.movement_penalty.is_finite() {
            return arg(format!(
                "movement penalty must be positive, got {}",
                self.movement_penalty
            ));
        }
        if !(self.feasibility_threshold > 0.0 && self.feasibility_threshold <= 1.0) {
            return arg(format!(
                "feasibility threshold must lie in (0, 1], got {}",
                self.feasibility_threshold
            ));
        }
        Ok(())
    }

    /// The threshold must exceed the prior belief so unexplored cells are
    /// preferred over known obstacles.
    pub fn check_against_prior(&self, prior_mean: f64) -> Result<()> {
        if self.feasibility_threshold <= prior_mean {
            return arg(format!(
                "feasibility threshold {} must exceed the prior mean {prior_mean}",
                self.feasibility_threshold
            ));
        }
        Ok(())
    }

    /// Surcharge for one infeasible cell on a map of `n_cells`: `N (ε + a)`.
    pub fn infeasible_cost(&self, n_cells: usize) -> f64 {
        n_cells as f64 * (self.feasibility_threshold + self.movement_penalty)
    }
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            movement_penalty: 0.025,
            feasibility_threshold: 0.501,
        }
    }
}

/// `x̂ + a` when `x̂ ≤ ε`, otherwise `N (ε + a)`.
pub fn cell_cost(estimate: f64, params: &PlannerParams, n_cells: usize) -> f64 {
    if estimate <= params.feasibility_threshold {
        estimate + params.movement_penalty
    } else {
        params.infeasible_cost(n_cells)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// From the current position to the goal, inclusive.
    pub cells: Vec<Pos>,
    /// Sum of cell costs over every cell, endpoints included.
    pub cost: f64,
}

impl Path {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// The cell to move to next, or the current cell when already at the goal.
    pub fn next_cell(&self) -> Option<Pos> {
        self.cells.get(1).or(self.cells.first()).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dist(f64);

impl Eq for Dist {}

impl PartialOrd for Dist {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dist {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Minimum total cell cost path from `start` to `goal` under UP, DOWN, LEFT,
/// RIGHT moves, found with Dijkstra. Equal-cost frontier vertices expand in
/// `(row, col)` order and the first predecessor to reach a vertex is kept.
pub fn plan(
    estimate: &[f64],
    dims: Dims,
    start: Pos,
    goal: Pos,
    params: &PlannerParams,
) -> Result<Path> {
    if estimate.len() != dims.len() {
        return arg(format!(
            "estimate has {} cells, map has {}",
            estimate.len(),
            dims.len()
        ));
    }
    dims.check(start, "start")?;
    dims.check(goal, "goal")?;

    let n = dims.len();
    let costs: Vec<f64> = estimate.iter().map(|&x| cell_cost(x, params, n)).collect();
    let s = dims.index(start);
    let g = dims.index(goal);

    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[s] = costs[s];
    heap.push(Reverse((Dist(dist[s]), s)));

    while let Some(Reverse((Dist(d), u))) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        if u == g {
            break;
        }
        for v in dims.neighbors4(dims.pos(u)) {
            let vi = dims.index(v);
            if done[vi] {
                continue;
            }
            let nd = d + costs[vi];
            if nd < dist[vi] {
                dist[vi] = nd;
                prev[vi] = u;
                heap.push(Reverse((Dist(nd), vi)));
            }
        }
    }

    let mut cells = vec![goal];
    let mut cur = g;
    while cur != s {
        cur = prev[cur];
        cells.push(dims.pos(cur));
    }
    cells.reverse();
    Ok(Path {
        cells,
        cost: dist[g],
    })
}

/// A 4-connected staircase from `start` to `goal` that stays as close as
/// possible to the straight segment between them.
pub fn straight_line_path(start: Pos, goal: Pos) -> Vec<Pos> {
    let (r0, c0) = (start.row as i64, start.col as i64);
    let (dr, dc) = (goal.row as i64 - r0, goal.col as i64 - c0);
    let steps = dr.abs() + dc.abs();
    let mut cells = Vec::with_capacity(steps as usize + 1);
    let (mut r, mut c) = (r0, c0);
    cells.push(start);
    for _ in 0..steps {
        // pick the move whose result lies closest to the segment
        let try_row = (r + dr.signum(), c);
        let try_col = (r, c + dc.signum());
        let off = |(rr, cc): (i64, i64)| ((rr - r0) * dc - (cc - c0) * dr).abs();
        let row_ok = r != goal.row as i64;
        let col_ok = c != goal.col as i64;
        (r, c) = match (row_ok, col_ok) {
            (true, true) if off(try_row) <= off(try_col) => try_row,
            (true, true) => try_col,
            (true, false) => try_row,
            _ => try_col,
        };
        cells.push(Pos::new(r as usize, c as usize));
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> PlannerParams {
        PlannerParams::new(0.025, 0.201).unwrap()
    }

    #[test]
    fn cell_cost_branches() {
        let p = params();
        assert!((cell_cost(0.1, &p, 65536) - 0.125).abs() < 1e-15);
        assert!((cell_cost(0.3, &p, 65536) - 14811.136).abs() < 1e-9);
        assert_eq!(cell_cost(0.201, &p, 10), 0.201 + 0.025);
    }

    #[test]
    fn params_validation() {
        assert!(PlannerParams::new(0.0, 0.5).is_err());
        assert!(PlannerParams::new(0.1, 1.5).is_err());
        assert!(params().check_against_prior(0.2).is_ok());
        assert!(params().check_against_prior(0.201).is_err());
    }

    #[test]
    fn single_row_unique_path() {
        let d = Dims::new(1, 3);
        let p = plan(&[0.1; 3], d, Pos::new(0, 0), Pos::new(0, 2), &params()).unwrap();
        assert_eq!(p.cells.len(), 3);
        assert!((p.cost - 3.0 * 0.125).abs() < 1e-12);
    }

    #[test]
    fn start_equals_goal() {
        let d = Dims::new(2, 2);
        let p = plan(&[0.05; 4], d, Pos::new(1, 1), Pos::new(1, 1), &params()).unwrap();
        assert_eq!(p.cells, vec![Pos::new(1, 1)]);
        assert_eq!(p.cost, 0.05 + 0.025);
        assert_eq!(p.next_cell(), Some(Pos::new(1, 1)));
    }

    #[test]
    fn uniform_map_staircase_cost() {
        let d = Dims::new(6, 7);
        let x = 0.15;
        let (s, g) = (Pos::new(1, 5), Pos::new(4, 0));
        let p = plan(&vec![x; d.len()], d, s, g, &params()).unwrap();
        let cells = (3 + 5 + 1) as f64;
        assert!((p.cost - cells * (x + 0.025)).abs() < 1e-12);
        assert_eq!(p.cells.len(), 9);
        assert!(p.cells.windows(2).all(|w| w[0].is_adjacent(w[1])));
    }

    #[test]
    fn routes_around_infeasible_center() {
        let d = Dims::new(3, 3);
        let mut x = vec![0.1; 9];
        x[4] = 0.9;
        let p = plan(&x, d, Pos::new(1, 0), Pos::new(1, 2), &params()).unwrap();
        assert!(!p.cells.contains(&Pos::new(1, 1)));
        assert_eq!(p.cells.len(), 5);
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = Dims::new(2, 2);
        assert!(plan(&[0.1; 3], d, Pos::new(0, 0), Pos::new(1, 1), &params()).is_err());
        assert!(plan(&[0.1; 4], d, Pos::new(2, 0), Pos::new(1, 1), &params()).is_err());
    }

    #[test]
    fn straight_line_is_connected() {
        for (s, g) in [
            (Pos::new(0, 0), Pos::new(5, 3)),
            (Pos::new(7, 2), Pos::new(1, 9)),
            (Pos::new(4, 4), Pos::new(4, 4)),
            (Pos::new(3, 0), Pos::new(3, 6)),
        ] {
            let path = straight_line_path(s, g);
            assert_eq!(path.first(), Some(&s));
            assert_eq!(path.last(), Some(&g));
            assert_eq!(path.len(), s.manhattan(g) + 1);
            assert!(path.windows(2).all(|w| w[0].is_adjacent(w[1])));
        }
    }
}
