//! Iterative map decoder: Kalman updates from linear averaging observations
//! followed by a clamp projection onto `[0, 1]`.
//!
//! The prior covariance is `v0 I`. An update only correlates cells that share
//! a row of some operator, so the covariance stays block diagonal: each block
//! is a set of cells that have been linked through observations, carried as a
//! dense matrix. Untouched cells keep their prior mean and variance and take
//! no memory. Rows whose cells fall in different blocks force those blocks to
//! merge; rows in unrelated blocks are updated independently, which is exact
//! because the blocks are uncorrelated and the measurement noise is isotropic.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::abstraction::{ObservationOperator, OperatorSource};
use crate::error::{arg, Error, Result};

/// Isotropic measurement noise `V = variance * I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub variance: f64,
    /// Added to the innovation covariance diagonal when it cannot be factored.
    pub reg_epsilon: f64,
}

pub const DEFAULT_REG_EPSILON: f64 = 1e-8;

impl NoiseModel {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance >= 0.0) || !variance.is_finite() {
            return arg(format!(
                "noise variance must be finite and >= 0, got {variance}"
            ));
        }
        Ok(Self {
            variance,
            reg_epsilon: DEFAULT_REG_EPSILON,
        })
    }

    pub fn noiseless() -> Self {
        Self {
            variance: 0.0,
            reg_epsilon: DEFAULT_REG_EPSILON,
        }
    }
}

const UNTOUCHED: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Block {
    cells: Vec<usize>,
    cov: DMatrix<f64>,
}

/// Replaces both triangles by their average, in cache-sized tiles.
fn symmetrize(m: &mut DMatrix<f64>) {
    const TILE: usize = 32;
    let n = m.nrows();
    for tj in (0..n).step_by(TILE) {
        for ti in (tj..n).step_by(TILE) {
            for j in tj..(tj + TILE).min(n) {
                let start = if ti == tj { j + 1 } else { ti };
                for i in start..(ti + TILE).min(n) {
                    let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
        }
    }
}

/// Gaussian map belief: unprojected mean, block-diagonal covariance, and the
/// projected mean `clamp(mean, 0, 1)`.
#[derive(Debug, Clone)]
pub struct BeliefState {
    prior_mean: Vec<f64>,
    prior_var: f64,
    mean: Vec<f64>,
    projected: Vec<f64>,
    block_of: Vec<u32>,
    slot: Vec<u32>,
    blocks: Vec<Option<Block>>,
    free_blocks: Vec<usize>,
}

impl BeliefState {
    /// Prior `N(mean * 1, var * I)` over `n` cells.
    pub fn new(n: usize, mean: f64, var: f64) -> Result<Self> {
        Self::with_prior(vec![mean; n], var)
    }

    pub fn with_prior(mean: Vec<f64>, var: f64) -> Result<Self> {
        if mean.is_empty() {
            return arg("belief needs at least one cell");
        }
        if !(var > 0.0) || !var.is_finite() {
            return arg(format!("prior variance must be positive, got {var}"));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Data("prior mean must be finite".into()));
        }
        let n = mean.len();
        let projected = mean.iter().map(|m| m.clamp(0.0, 1.0)).collect();
        Ok(Self {
            prior_mean: mean.clone(),
            prior_var: var,
            mean,
            projected,
            block_of: vec![UNTOUCHED; n],
            slot: vec![0; n],
            blocks: Vec::new(),
            free_blocks: Vec::new(),
        })
    }

    /// Like [`BeliefState::new`] but with the full `N x N` covariance held in
    /// one block from the start. Every update then costs the same regardless
    /// of history; every cell counts as touched.
    pub fn dense(n: usize, mean: f64, var: f64) -> Result<Self> {
        let mut b = Self::new(n, mean, var)?;
        b.block_of = vec![0; n];
        b.slot = (0..n as u32).collect();
        b.blocks.push(Some(Block {
            cells: (0..n).collect(),
            cov: DMatrix::from_diagonal_element(n, n, var),
        }));
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Unprojected mean `x̂'`, the quantity the recursion propagates.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Projected mean `x̂ = clamp(x̂', 0, 1)`.
    pub fn projected(&self) -> &[f64] {
        &self.projected
    }

    pub fn prior_mean(&self) -> &[f64] {
        &self.prior_mean
    }

    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }

    pub fn is_touched(&self, cell: usize) -> bool {
        self.block_of[cell] != UNTOUCHED
    }

    pub fn touched(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&c| self.is_touched(c))
    }

    pub fn variance(&self, cell: usize) -> f64 {
        match self.block_of[cell] {
            UNTOUCHED => self.prior_var,
            b => {
                let s = self.slot[cell] as usize;
                self.block(b as usize).cov[(s, s)]
            }
        }
    }

    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.variance(i);
        }
        match (self.block_of[i], self.block_of[j]) {
            (a, b) if a == b && a != UNTOUCHED => {
                self.block(a as usize).cov[(self.slot[i] as usize, self.slot[j] as usize)]
            }
            _ => 0.0,
        }
    }

    /// Dense `N x N` covariance. Only sensible for small maps.
    pub fn covariance_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            if !self.is_touched(i) {
                out[(i, i)] = self.prior_var;
            }
        }
        for blk in self.blocks.iter().flatten() {
            for (a, &i) in blk.cells.iter().enumerate() {
                for (b, &j) in blk.cells.iter().enumerate() {
                    out[(i, j)] = blk.cov[(a, b)];
                }
            }
        }
        out
    }

    /// Sizes of the correlated cell groups, largest first.
    pub fn block_sizes(&self) -> Vec<usize> {
        let mut s: Vec<_> = self
            .blocks
            .iter()
            .flatten()
            .map(|b| b.cells.len())
            .collect();
        s.sort_unstable_by(|a, b| b.cmp(a));
        s
    }

    fn block(&self, b: usize) -> &Block {
        self.blocks[b].as_ref().expect("live block")
    }

    /// Recomputes `x̂ = max(min(x̂', 1), 0)` for every cell.
    pub fn project(&mut self) {
        for (p, m) in self.projected.iter_mut().zip(&self.mean) {
            *p = m.clamp(0.0, 1.0);
        }
    }

    fn check(&self, op: &ObservationOperator, obs: &[f64]) -> Result<()> {
        if op.n_cols() != self.len() {
            return arg(format!(
                "operator has {} columns, belief has {} cells",
                op.n_cols(),
                self.len()
            ));
        }
        if obs.len() != op.n_rows() {
            return arg(format!(
                "{} observations for an operator with {} rows",
                obs.len(),
                op.n_rows()
            ));
        }
        if let Some(i) = obs.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("observation {i} is not finite")));
        }
        Ok(())
    }

    /// Partitions operator rows into groups that share no block (or untouched
    /// cell) with any other group. Groups are returned in order of their
    /// first row.
    fn row_groups(&self, op: &ObservationOperator) -> Vec<Vec<usize>> {
        #[derive(Hash, PartialEq, Eq)]
        enum Key {
            Block(u32),
            Cell(usize),
        }
        let k = op.n_rows();
        let mut parent: Vec<usize> = (0..k).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut owner: HashMap<Key, usize> = HashMap::new();
        for (i, row) in op.rows().iter().enumerate() {
            for &j in row {
                let key = match self.block_of[j] {
                    UNTOUCHED => Key::Cell(j),
                    b => Key::Block(b),
                };
                match owner.entry(key) {
                    Entry::Occupied(e) => {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, *e.get()));
                        if a != b {
                            parent[a.max(b)] = a.min(b);
                        }
                    }
                    Entry::Vacant(e) => {
                        e.insert(i);
                    }
                }
            }
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut group_of_root: HashMap<usize, usize> = HashMap::new();
        for i in 0..k {
            let r = find(&mut parent, i);
            let g = *group_of_root.entry(r).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(i);
        }
        groups
    }

    /// Builds `P = Σ Aᵀ` restricted to the cells correlated with the given
    /// rows, and the innovation covariance `S = A Σ Aᵀ + V`.
    fn gather(&self, op: &ObservationOperator, rows: &[usize], noise: &NoiseModel) -> Gathered {
        let mut cells: Vec<usize> = Vec::new();
        let mut block_offset: HashMap<u32, usize> = HashMap::new();
        let mut cell_offset: HashMap<usize, usize> = HashMap::new();
        for &i in rows {
            for &j in &op.rows()[i] {
                match self.block_of[j] {
                    UNTOUCHED => {
                        if let Entry::Vacant(e) = cell_offset.entry(j) {
                            e.insert(cells.len());
                            cells.push(j);
                        }
                    }
                    b => {
                        if let Entry::Vacant(e) = block_offset.entry(b) {
                            e.insert(cells.len());
                            cells.extend_from_slice(&self.block(b as usize).cells);
                        }
                    }
                }
            }
        }
        let local = |j: usize| match self.block_of[j] {
            UNTOUCHED => cell_offset[&j],
            b => block_offset[&b] + self.slot[j] as usize,
        };

        let n = cells.len();
        let k = rows.len();
        let mut p = DMatrix::<f64>::zeros(n, k);
        for (r, &i) in rows.iter().enumerate() {
            let row = &op.rows()[i];
            let w = 1.0 / row.len() as f64;
            for &j in row {
                match self.block_of[j] {
                    UNTOUCHED => p[(cell_offset[&j], r)] += w * self.prior_var,
                    b => {
                        let blk = self.block(b as usize);
                        let off = block_offset[&b];
                        let src = blk.cov.column(self.slot[j] as usize);
                        let mut dst = p.view_mut((off, r), (blk.cells.len(), 1));
                        dst.zip_apply(&src, |d, v| *d += w * v);
                    }
                }
            }
        }

        let mut s = DMatrix::<f64>::zeros(k, k);
        let mut innov_pred = DVector::<f64>::zeros(k);
        for (r, &i) in rows.iter().enumerate() {
            let row = &op.rows()[i];
            let w = 1.0 / row.len() as f64;
            let lr: Vec<usize> = row.iter().map(|&j| local(j)).collect();
            for c in 0..k {
                s[(r, c)] = w * lr.iter().map(|&l| p[(l, c)]).sum::<f64>();
            }
            innov_pred[r] = w * row.iter().map(|&j| self.mean[j]).sum::<f64>();
        }
        let s = (&s + s.transpose()) * 0.5 + DMatrix::identity(k, k) * noise.variance;
        Gathered {
            cells,
            p,
            s,
            predicted: innov_pred,
        }
    }

    /// Merges every block touched by `rows` (plus any untouched cells) into a
    /// single block and returns its index.
    fn merge_for(&mut self, op: &ObservationOperator, rows: &[usize]) -> usize {
        let mut involved: Vec<u32> = Vec::new();
        let mut fresh: Vec<usize> = Vec::new();
        for &i in rows {
            for &j in &op.rows()[i] {
                match self.block_of[j] {
                    UNTOUCHED => {
                        if !fresh.contains(&j) {
                            fresh.push(j);
                        }
                    }
                    b => {
                        if !involved.contains(&b) {
                            involved.push(b);
                        }
                    }
                }
            }
        }
        if fresh.is_empty() && involved.len() == 1 {
            return involved[0] as usize;
        }

        let n: usize = fresh.len()
            + involved
                .iter()
                .map(|&b| self.block(b as usize).cells.len())
                .sum::<usize>();
        let mut cells = Vec::with_capacity(n);
        let mut cov = DMatrix::<f64>::zeros(n, n);
        for &b in &involved {
            let blk = self.blocks[b as usize].take().expect("live block");
            self.free_blocks.push(b as usize);
            let off = cells.len();
            let m = blk.cells.len();
            cov.view_mut((off, off), (m, m)).copy_from(&blk.cov);
            cells.extend(blk.cells);
        }
        for j in fresh {
            let off = cells.len();
            cov[(off, off)] = self.prior_var;
            cells.push(j);
        }

        let id = match self.free_blocks.pop() {
            Some(id) => id,
            None => {
                self.blocks.push(None);
                self.blocks.len() - 1
            }
        };
        for (s, &c) in cells.iter().enumerate() {
            self.block_of[c] = id as u32;
            self.slot[c] = s as u32;
        }
        self.blocks[id] = Some(Block { cells, cov });
        id
    }

    /// One Kalman update `x̂' += K (o - A x̂')`, `Σ = (I - K A) Σ` with
    /// `K = Σ Aᵀ (A Σ Aᵀ + V)⁻¹`. The projected mean of the affected cells is
    /// refreshed as well.
    pub fn kalman_update(
        &mut self,
        op: &ObservationOperator,
        obs: &[f64],
        noise: &NoiseModel,
    ) -> Result<()> {
        self.check(op, obs)?;
        for group in self.row_groups(op) {
            let b = self.merge_for(op, &group);
            let g = self.gather(op, &group, noise);
            let chol = factor(g.s, noise.reg_epsilon)?;
            let innov = DVector::from_iterator(
                group.len(),
                group
                    .iter()
                    .zip(g.predicted.iter())
                    .map(|(&i, pred)| obs[i] - pred),
            );
            let step = &g.p * chol.solve(&innov);
            let kt = chol.solve(&g.p.transpose());

            let blk = self.blocks[b].as_mut().expect("live block");
            debug_assert_eq!(blk.cells, g.cells);
            blk.cov.gemm(-1.0, &g.p, &kt, 1.0);
            symmetrize(&mut blk.cov);
            for (s, &c) in blk.cells.iter().enumerate() {
                self.mean[c] += step[s];
                self.projected[c] = self.mean[c].clamp(0.0, 1.0);
            }
        }
        Ok(())
    }

    /// Unprojected means after a hypothetical update, as `(cell, value)` for
    /// every cell whose mean could change. `self` is left untouched.
    pub fn predicted_means(
        &self,
        op: &ObservationOperator,
        obs: &[f64],
        noise: &NoiseModel,
    ) -> Result<Vec<(usize, f64)>> {
        self.check(op, obs)?;
        let mut out = Vec::new();
        for group in self.row_groups(op) {
            let g = self.gather(op, &group, noise);
            let chol = factor(g.s, noise.reg_epsilon)?;
            let innov = DVector::from_iterator(
                group.len(),
                group
                    .iter()
                    .zip(g.predicted.iter())
                    .map(|(&i, pred)| obs[i] - pred),
            );
            let step = &g.p * chol.solve(&innov);
            out.extend(
                g.cells
                    .iter()
                    .zip(step.iter())
                    .map(|(&c, d)| (c, self.mean[c] + d)),
            );
        }
        Ok(out)
    }
}

struct Gathered {
    cells: Vec<usize>,
    p: DMatrix<f64>,
    s: DMatrix<f64>,
    predicted: DVector<f64>,
}

const PIVOT_FLOOR: f64 = 1e-12;
const MAX_REG_ATTEMPTS: usize = 6;

/// Cholesky of the innovation covariance. A failed or near-singular
/// factorization is retried with `eps I` added, growing `eps` tenfold per
/// attempt.
fn factor(mut s: DMatrix<f64>, eps: f64) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let k = s.nrows();
    let scale = s.diagonal().iter().fold(1.0f64, |m, &d| m.max(d.abs()));
    let mut add = eps;
    for attempt in 0..=MAX_REG_ATTEMPTS {
        if let Some(chol) = s.clone().cholesky() {
            let l = chol.l_dirty();
            let ok = (0..k).all(|i| l[(i, i)] * l[(i, i)] > PIVOT_FLOOR * scale);
            if ok {
                return Ok(chol);
            }
        }
        if attempt == MAX_REG_ATTEMPTS {
            break;
        }
        for i in 0..k {
            s[(i, i)] += add;
        }
        add *= 10.0;
    }
    Err(Error::Data(
        "innovation covariance is not positive definite even after regularization".into(),
    ))
}

/// Cells the Sensor has observed so far, with their (noiseless) values.
#[derive(Debug, Clone)]
pub struct SensedMap {
    values: Vec<f64>,
    mask: Vec<bool>,
    cells: Vec<usize>,
}

impl SensedMap {
    pub fn new(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
            mask: vec![false; n],
            cells: Vec::new(),
        }
    }

    /// Marks `cells` as sensed with the values read from `truth`.
    pub fn record(&mut self, cells: &[usize], truth: &[f64]) {
        for &c in cells {
            self.values[c] = truth[c];
            if !self.mask[c] {
                self.mask[c] = true;
                self.cells.push(c);
            }
        }
    }

    pub fn get(&self, cell: usize) -> Option<f64> {
        self.mask[cell].then(|| self.values[cell])
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.mask[cell]
    }

    /// Sensed cells in first-sensed order.
    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Full-length value vector; entries of unsensed cells are meaningless.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// The Actor's per-step decode: own raw window, then the Sensor's abstraction
/// (if one arrived), then projection.
pub fn actor_decode_step(
    belief: &mut BeliefState,
    actor_op: &ObservationOperator,
    actor_obs: &[f64],
    actor_noise: &NoiseModel,
    received: Option<(&ObservationOperator, &[f64])>,
    channel_noise: &NoiseModel,
) -> Result<()> {
    belief.kalman_update(actor_op, actor_obs, actor_noise)?;
    if let Some((op, obs)) = received {
        belief.kalman_update(op, obs, channel_noise)?;
    }
    belief.project();
    Ok(())
}

/// Replays the Actor's measurement of the cells both robots have seen, using
/// the Sensor's own values and the Actor's noise level. No-op when `overlap`
/// is empty.
pub fn sensor_overlap_update(
    belief: &mut BeliefState,
    sensed: &SensedMap,
    overlap: &[usize],
    actor_noise: &NoiseModel,
) -> Result<()> {
    if overlap.is_empty() {
        return Ok(());
    }
    let mut obs = Vec::with_capacity(overlap.len());
    for &c in overlap {
        obs.push(
            sensed
                .get(c)
                .ok_or_else(|| Error::Argument(format!("overlap cell {c} has not been sensed")))?,
        );
    }
    let op = ObservationOperator::singletons(belief.len(), overlap, OperatorSource::Raw)?;
    belief.kalman_update(&op, &obs, actor_noise)
}

/// The Sensor's decode: overlap replay, then its own abstraction with the
/// noise-free observation `A x̃`, then projection.
pub fn sensor_decode_step(
    belief: &mut BeliefState,
    sensed: &SensedMap,
    overlap: &[usize],
    actor_noise: &NoiseModel,
    template_op: Option<&ObservationOperator>,
    channel_noise: &NoiseModel,
) -> Result<()> {
    sensor_overlap_update(belief, sensed, overlap, actor_noise)?;
    if let Some(op) = template_op {
        sensor_abstraction_update(belief, sensed, op, channel_noise)?;
    }
    belief.project();
    Ok(())
}

/// `A x̃` over sensed cells; errors if the operator reaches an unsensed cell.
pub fn noiseless_observation(sensed: &SensedMap, op: &ObservationOperator) -> Result<Vec<f64>> {
    if let Some(c) = op.support().find(|&c| !sensed.contains(c)) {
        return arg(format!("operator reads cell {c}, which was never sensed"));
    }
    Ok(op.apply(sensed.values()))
}

pub(crate) fn sensor_abstraction_update(
    belief: &mut BeliefState,
    sensed: &SensedMap,
    op: &ObservationOperator,
    channel_noise: &NoiseModel,
) -> Result<()> {
    let obs = noiseless_observation(sensed, op)?;
    belief.kalman_update(op, &obs, channel_noise)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: f64 = 1e-10;

    fn noise(v: f64) -> NoiseModel {
        NoiseModel::new(v).unwrap()
    }

    #[test]
    fn full_identity_observation_recovers_obs() {
        let n = 6;
        let mut b = BeliefState::new(n, 0.2, 1.0).unwrap();
        let op =
            ObservationOperator::singletons(n, &(0..n).collect::<Vec<_>>(), OperatorSource::Raw)
                .unwrap();
        let obs = [0.1, 0.9, 0.3, 0.0, 1.0, 0.55];
        b.kalman_update(&op, &obs, &noise(TINY)).unwrap();
        for (i, o) in obs.iter().enumerate() {
            assert!((b.mean()[i] - o).abs() < 1e-8);
            assert!(b.variance(i) < 1e-8);
        }
    }

    #[test]
    fn scalar_update_by_hand() {
        // K = 1 / (1 + 1) = 0.5; mean = 0.2 + 0.5 (1.0 - 0.2); var = (1 - 0.5) 1
        let mut b = BeliefState::new(1, 0.2, 1.0).unwrap();
        let op = ObservationOperator::singletons(1, &[0], OperatorSource::Raw).unwrap();
        b.kalman_update(&op, &[1.0], &noise(1.0)).unwrap();
        assert!((b.mean()[0] - 0.6).abs() < 1e-15);
        assert!((b.variance(0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn averaging_row_splits_innovation() {
        // A = [1/2 1/2], Σ = I: AΣAᵀ = 1/2, K = [1, 1]ᵀ (as V -> 0),
        // so each mean moves by the full innovation 0.5.
        let mut b = BeliefState::new(2, 0.5, 1.0).unwrap();
        let op =
            ObservationOperator::new(2, vec![vec![0, 1]], OperatorSource::Template(0)).unwrap();
        b.kalman_update(&op, &[1.0], &noise(TINY)).unwrap();
        assert!((b.mean()[0] - 1.0).abs() < 1e-8);
        assert!((b.mean()[1] - 1.0).abs() < 1e-8);
        // posterior covariance: I - 0.5 * [1 1; 1 1]
        assert!((b.covariance(0, 1) + 0.5).abs() < 1e-8);
        assert!((b.variance(0) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn projection_clamps_and_is_idempotent() {
        let mut b = BeliefState::with_prior(vec![-0.3, 0.5, 1.7], 1.0).unwrap();
        b.project();
        assert_eq!(b.projected(), &[0.0, 0.5, 1.0]);
        let once = b.projected().to_vec();
        b.project();
        assert_eq!(b.projected(), &once[..]);
        assert_eq!(b.mean(), &[-0.3, 0.5, 1.7]);
    }

    #[test]
    fn dimension_and_data_errors() {
        let mut b = BeliefState::new(3, 0.5, 1.0).unwrap();
        let op = ObservationOperator::singletons(4, &[0], OperatorSource::Raw).unwrap();
        assert!(matches!(
            b.kalman_update(&op, &[0.0], &noise(1.0)),
            Err(Error::Argument(_))
        ));
        let op = ObservationOperator::singletons(3, &[0, 1], OperatorSource::Raw).unwrap();
        assert!(matches!(
            b.kalman_update(&op, &[0.0], &noise(1.0)),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            b.kalman_update(&op, &[0.0, f64::NAN], &noise(1.0)),
            Err(Error::Data(_))
        ));
        assert!(NoiseModel::new(-1.0).is_err());
    }

    #[test]
    fn singular_innovation_is_regularized() {
        // the same cell twice in one operator with zero noise: S = [[1,1],[1,1]]
        let mut b = BeliefState::new(2, 0.5, 1.0).unwrap();
        let op = ObservationOperator::singletons(2, &[0, 0], OperatorSource::Raw).unwrap();
        b.kalman_update(&op, &[0.8, 0.8], &NoiseModel::noiseless())
            .unwrap();
        assert!((b.mean()[0] - 0.8).abs() < 1e-6);
        // re-observing an exactly known cell with zero noise: S = 0
        let op = ObservationOperator::singletons(2, &[0], OperatorSource::Raw).unwrap();
        b.kalman_update(&op, &[0.8], &NoiseModel::noiseless())
            .unwrap();
        assert!((b.mean()[0] - 0.8).abs() < 1e-6);
        assert_eq!(b.mean()[1], 0.5);
    }

    #[test]
    fn blocks_merge_only_when_linked() {
        let n = 10;
        let mut b = BeliefState::new(n, 0.5, 1.0).unwrap();
        let op = ObservationOperator::singletons(n, &[0, 1, 2], OperatorSource::Raw).unwrap();
        b.kalman_update(&op, &[0.1, 0.2, 0.3], &noise(1e-3))
            .unwrap();
        assert_eq!(b.block_sizes(), vec![1, 1, 1]);
        let op =
            ObservationOperator::new(n, vec![vec![1, 2, 5]], OperatorSource::Template(0)).unwrap();
        b.kalman_update(&op, &[0.4], &noise(1e-3)).unwrap();
        assert_eq!(b.block_sizes(), vec![3, 1]);
        assert_eq!(b.mean()[9], 0.5);
        assert_eq!(b.variance(9), 1.0);
        assert!(!b.is_touched(9));
    }

    #[test]
    fn prediction_matches_real_update_without_mutation() {
        let n = 8;
        let mut b = BeliefState::new(n, 0.3, 1.0).unwrap();
        let a = ObservationOperator::new(
            n,
            vec![vec![0, 1], vec![2, 3, 4]],
            OperatorSource::Template(0),
        )
        .unwrap();
        b.kalman_update(&a, &[0.6, 0.1], &noise(1e-4)).unwrap();
        let op =
            ObservationOperator::new(n, vec![vec![1, 2], vec![6]], OperatorSource::Template(1))
                .unwrap();
        let before = b.mean().to_vec();
        let pred = b.predicted_means(&op, &[0.9, 0.7], &noise(1e-4)).unwrap();
        assert_eq!(b.mean(), &before[..]);
        let mut real = b.clone();
        real.kalman_update(&op, &[0.9, 0.7], &noise(1e-4)).unwrap();
        for (c, v) in pred {
            assert!((real.mean()[c] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn actor_step_with_and_without_sensor() {
        let n = 6;
        let nz = noise(TINY);
        let actor = ObservationOperator::singletons(n, &[0, 1], OperatorSource::Raw).unwrap();
        let sensor =
            ObservationOperator::singletons(n, &[4, 5], OperatorSource::Template(1)).unwrap();

        let mut a = BeliefState::new(n, 0.5, 1.0).unwrap();
        actor_decode_step(&mut a, &actor, &[0.2, 0.3], &nz, None, &nz).unwrap();
        assert!(!a.is_touched(4));

        let mut b = BeliefState::new(n, 0.5, 1.0).unwrap();
        actor_decode_step(
            &mut b,
            &actor,
            &[0.2, 0.3],
            &nz,
            Some((&sensor, &[0.9, 1.0])),
            &nz,
        )
        .unwrap();
        let want = [0.2, 0.3, 0.5, 0.5, 0.9, 1.0];
        for (x, w) in b.projected().iter().zip(want) {
            assert!((x - w).abs() < 1e-8);
        }

        // disjoint supports commute
        let mut c = BeliefState::new(n, 0.5, 1.0).unwrap();
        c.kalman_update(&sensor, &[0.9, 1.0], &nz).unwrap();
        c.kalman_update(&actor, &[0.2, 0.3], &nz).unwrap();
        for (x, y) in b.mean().iter().zip(c.mean()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sensor_step_overlap() {
        let n = 4;
        let truth = [0.1, 0.8, 0.3, 0.6];
        let mut sensed = SensedMap::new(n);
        sensed.record(&[0, 1, 2, 3], &truth);
        let nz = noise(TINY);
        let tmpl = ObservationOperator::new(n, vec![vec![0, 1, 2, 3]], OperatorSource::Template(3))
            .unwrap();

        let mut a = BeliefState::new(n, 0.5, 1.0).unwrap();
        sensor_decode_step(&mut a, &sensed, &[], &nz, Some(&tmpl), &nz).unwrap();
        let mut b = BeliefState::new(n, 0.5, 1.0).unwrap();
        b.kalman_update(&tmpl, &[0.45], &nz).unwrap();
        b.project();
        for (x, y) in a.mean().iter().zip(b.mean()) {
            assert!((x - y).abs() < 1e-14);
        }

        let mut c = BeliefState::new(n, 0.5, 1.0).unwrap();
        sensor_decode_step(&mut c, &sensed, &[1], &nz, None, &nz).unwrap();
        assert!((c.mean()[1] - 0.8).abs() < 1e-8);

        let mut d = BeliefState::new(n, 0.5, 1.0).unwrap();
        let mut small = SensedMap::new(n);
        small.record(&[0], &truth);
        assert!(sensor_decode_step(&mut d, &small, &[2], &nz, None, &nz).is_err());
    }

    #[test]
    fn dense_storage_matches_blocks() {
        let n = 40;
        let mut sparse = BeliefState::new(n, 0.5, 1.0).unwrap();
        let mut dense = BeliefState::dense(n, 0.5, 1.0).unwrap();
        let ops = [
            ObservationOperator::new(
                n,
                vec![vec![0, 1, 2, 3], vec![10, 11]],
                OperatorSource::Template(2),
            )
            .unwrap(),
            ObservationOperator::singletons(n, &[1, 5, 39], OperatorSource::Raw).unwrap(),
            ObservationOperator::new(n, vec![(2..38).collect()], OperatorSource::Template(3))
                .unwrap(),
        ];
        let obs: [&[f64]; 3] = [&[0.2, 0.9], &[0.1, 0.7, 0.3], &[0.45]];
        for (op, o) in ops.iter().zip(obs) {
            sparse.kalman_update(op, o, &noise(1e-4)).unwrap();
            dense.kalman_update(op, o, &noise(1e-4)).unwrap();
        }
        let (a, b) = (sparse.covariance_dense(), dense.covariance_dense());
        assert!((a - &b).amax() < 1e-12);
        assert_eq!(b, b.transpose());
        for (x, y) in sparse.mean().iter().zip(dense.mean()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(dense.touched().count(), n);
    }

    #[test]
    fn symmetrize_averages_across_tiles() {
        let n = 70;
        let mut m = DMatrix::from_fn(n, n, |i, j| (i * 3 + j * 7) as f64);
        symmetrize(&mut m);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(m[(i, j)], 5.0 * (i + j) as f64);
            }
        }
    }
}
