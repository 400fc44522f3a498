//! Abstraction templates, the shared codebook, and linear observation operators.
//!
//! A template partitions (part of) a `w x h` sensing window into blocks. Each
//! block becomes one compressed cell whose value is the average of the map
//! cells it covers. Cells outside every block carry no information.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{arg, Error, Result};
use crate::grid_map::{window_origin, Dims, Pos, Window};

pub type TemplateId = u32;

type Block = Vec<(usize, usize)>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbstractionTemplate {
    id: TemplateId,
    width: usize,
    height: usize,
    /// Cells of each block as `(row, col)` relative to the window's top-left.
    blocks: Vec<Block>,
}

impl AbstractionTemplate {
    pub fn new(id: TemplateId, width: usize, height: usize, blocks: Vec<Block>) -> Result<Self> {
        if width == 0 || height == 0 {
            return arg(format!("template {id}: window must be at least 1x1"));
        }
        let mut seen = HashSet::new();
        for (b, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return arg(format!("template {id}: block {b} is empty"));
            }
            for &(r, c) in block {
                if r >= height || c >= width {
                    return arg(format!(
                        "template {id}: cell ({r},{c}) outside {width}x{height} window"
                    ));
                }
                if !seen.insert((r, c)) {
                    return arg(format!(
                        "template {id}: cell ({r},{c}) appears in more than one block"
                    ));
                }
            }
        }
        Ok(Self {
            id,
            width,
            height,
            blocks,
        })
    }

    /// Template tiling the window with `bh x bw` rectangles; edge blocks
    /// shrink when the window is not a multiple of the block size.
    pub fn uniform(
        id: TemplateId,
        width: usize,
        height: usize,
        bh: usize,
        bw: usize,
    ) -> Result<Self> {
        if bh == 0 || bw == 0 {
            return arg("block size must be positive");
        }
        let mut blocks = Vec::new();
        for r0 in (0..height).step_by(bh) {
            for c0 in (0..width).step_by(bw) {
                blocks.push(rect(r0, c0, (r0 + bh).min(height), (c0 + bw).min(width)));
            }
        }
        Self::new(id, width, height, blocks)
    }

    pub fn id(&self) -> TemplateId {
        self.id
    }

    pub fn window_shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn blocks(&self) -> &[Vec<(usize, usize)>] {
        &self.blocks
    }

    /// Number of compressed cells, before any clipping.
    pub fn k(&self) -> usize {
        self.blocks.len()
    }
}

/// Cells of the half-open rectangle `[r0, r1) x [c0, c1)`, row-major.
fn rect(r0: usize, c0: usize, r1: usize, c1: usize) -> Vec<(usize, usize)> {
    (r0..r1)
        .flat_map(|r| (c0..c1).map(move |c| (r, c)))
        .collect()
}

fn singletons(r0: usize, c0: usize, r1: usize, c1: usize) -> Vec<Block> {
    rect(r0, c0, r1, c1).into_iter().map(|c| vec![c]).collect()
}

/// Where an operator's rows came from; decides how it is priced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OperatorSource {
    Template(TemplateId),
    Raw,
}

impl std::fmt::Display for OperatorSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OperatorSource::Template(id) => write!(f, "{id}"),
            OperatorSource::Raw => f.write_str("raw"),
        }
    }
}

/// Sparse averaging operator `A`: row `i` is the mean of the map cells in
/// `rows[i]`, so every nonzero entry of a row equals `1 / rows[i].len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationOperator {
    n_cols: usize,
    rows: Vec<Vec<usize>>,
    source: OperatorSource,
}

impl ObservationOperator {
    pub fn new(n_cols: usize, rows: Vec<Vec<usize>>, source: OperatorSource) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return arg(format!("operator row {i} is empty"));
            }
            if let Some(&j) = row.iter().find(|&&j| j >= n_cols) {
                return arg(format!("operator row {i} references cell {j} >= {n_cols}"));
            }
            let uniq: HashSet<_> = row.iter().collect();
            if uniq.len() != row.len() {
                return arg(format!("operator row {i} repeats a cell"));
            }
        }
        Ok(Self {
            n_cols,
            rows,
            source,
        })
    }

    /// Operator with one singleton row per listed cell.
    pub fn singletons(n_cols: usize, cells: &[usize], source: OperatorSource) -> Result<Self> {
        Self::new(n_cols, cells.iter().map(|&c| vec![c]).collect(), source)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn source(&self) -> OperatorSource {
        self.source
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `A x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_cols);
        self.rows
            .iter()
            .map(|row| row.iter().map(|&j| x[j]).sum::<f64>() / row.len() as f64)
            .collect()
    }

    /// All cells with a nonzero coefficient in some row.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.iter().flatten().copied()
    }

    /// Dense row-major copy, for tests and small problems.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|row| {
                let mut dense = vec![0.0; self.n_cols];
                let w = 1.0 / row.len() as f64;
                for &j in row {
                    dense[j] = w;
                }
                dense
            })
            .collect()
    }
}

/// Places `template` with its window centred on `sensor_pos`. Blocks lose the
/// cells that fall off the map; blocks clipped to nothing are dropped.
pub fn instantiate_operator(
    template: &AbstractionTemplate,
    dims: Dims,
    sensor_pos: Pos,
) -> Result<ObservationOperator> {
    dims.check(sensor_pos, "sensor position")?;
    let (r0, c0) = window_origin(sensor_pos, template.width, template.height);
    let rows = template
        .blocks
        .iter()
        .map(|block| {
            block
                .iter()
                .map(|&(r, c)| (r0 + r as i64, c0 + c as i64))
                .filter(|&(r, c)| dims.contains_signed(r, c))
                .map(|(r, c)| r as usize * dims.cols + c as usize)
                .collect::<Vec<_>>()
        })
        .filter(|row| !row.is_empty())
        .collect();
    Ok(ObservationOperator {
        n_cols: dims.len(),
        rows,
        source: OperatorSource::Template(template.id),
    })
}

/// One singleton row per window cell.
pub fn raw_window_operator(window: &Window, dims: Dims) -> ObservationOperator {
    ObservationOperator {
        n_cols: dims.len(),
        rows: window.cells.iter().map(|&c| vec![c]).collect(),
        source: OperatorSource::Raw,
    }
}

/// The finite set of templates every robot agrees on, plus the bit pricing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codebook {
    templates: Vec<AbstractionTemplate>,
    /// Bits per transmitted measurement.
    pub n_m: u64,
    /// Bits per transmitted template index.
    pub n_a: u64,
}

impl Codebook {
    pub fn new(templates: Vec<AbstractionTemplate>, n_m: u64, n_a: u64) -> Result<Self> {
        let mut ids = HashSet::new();
        for t in &templates {
            if !ids.insert(t.id) {
                return arg(format!("duplicate template id {}", t.id));
            }
        }
        if let Some(first) = templates.first() {
            if let Some(t) = templates
                .iter()
                .find(|t| t.window_shape() != first.window_shape())
            {
                return arg(format!(
                    "template {} has window {:?}, expected {:?}",
                    t.id,
                    t.window_shape(),
                    first.window_shape()
                ));
            }
        }
        let need = index_bits(templates.len());
        if n_a < need {
            return arg(format!(
                "n_a = {n_a} cannot index {} templates (need {need} bits)",
                templates.len()
            ));
        }
        Ok(Self {
            templates,
            n_m,
            n_a,
        })
    }

    pub fn templates(&self) -> &[AbstractionTemplate] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, id: TemplateId) -> Option<&AbstractionTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }

    pub fn window_shape(&self) -> Option<(usize, usize)> {
        self.templates.first().map(|t| t.window_shape())
    }

    /// Bits to send `k` measurements: `k n_m + n_a` for a template, `k n_m`
    /// for a raw window (no index is sent).
    pub fn bits_for(&self, source: OperatorSource, k: usize) -> u64 {
        let payload = k as u64 * self.n_m;
        match source {
            OperatorSource::Template(_) => payload + self.n_a,
            OperatorSource::Raw => payload,
        }
    }

    pub fn bits_for_operator(&self, op: &ObservationOperator) -> u64 {
        self.bits_for(op.source(), op.n_rows())
    }

    /// The 16-template set on a 15x15 window with `n_m = 12`, `n_a = 4`.
    ///
    /// | id | layout                                               | k   |
    /// |----|------------------------------------------------------|-----|
    /// | 1  | full resolution                                      | 225 |
    /// | 2  | 3x3 blocks                                           | 25  |
    /// | 3  | one block, whole window                              | 1   |
    /// | 4  | horizontal stripes (one per row)                     | 15  |
    /// | 5  | vertical stripes (one per column)                    | 15  |
    /// | 6  | 5x5 blocks                                           | 9   |
    /// | 7  | left / right halves (cols 0-6, 7-14)                 | 2   |
    /// | 8  | top / bottom halves (rows 0-6, 7-14)                 | 2   |
    /// | 9  | centre 5x5 at full resolution, rest omitted          | 25  |
    /// | 10 | centre 5x5 at full resolution, ring as eight 5x5     | 33  |
    /// | 11 | top 5 rows at full resolution, rest omitted          | 75  |
    /// | 12 | bottom 5 rows at full resolution, rest omitted       | 75  |
    /// | 13 | left 5 columns at full resolution, rest omitted      | 75  |
    /// | 14 | right 5 columns at full resolution, rest omitted     | 75  |
    /// | 15 | cross of 3x3 blocks through the centre, rest omitted | 9   |
    /// | 16 | inner 9x9 as 3x3 blocks, outer ring as four strips   | 13  |
    pub fn builtin_16() -> Self {
        const W: usize = 15;
        let t = |id, blocks| AbstractionTemplate::new(id, W, W, blocks).expect("builtin template");
        let mut templates = vec![
            t(1, singletons(0, 0, W, W)),
            AbstractionTemplate::uniform(2, W, W, 3, 3).expect("builtin template"),
            t(3, vec![rect(0, 0, W, W)]),
            t(4, (0..W).map(|r| rect(r, 0, r + 1, W)).collect()),
            t(5, (0..W).map(|c| rect(0, c, W, c + 1)).collect()),
            AbstractionTemplate::uniform(6, W, W, 5, 5).expect("builtin template"),
            t(7, vec![rect(0, 0, W, 7), rect(0, 7, W, W)]),
            t(8, vec![rect(0, 0, 7, W), rect(7, 0, W, W)]),
            t(9, singletons(5, 5, 10, 10)),
        ];

        let mut ring: Vec<_> = singletons(5, 5, 10, 10);
        for br in 0..3 {
            for bc in 0..3 {
                if (br, bc) != (1, 1) {
                    ring.push(rect(br * 5, bc * 5, br * 5 + 5, bc * 5 + 5));
                }
            }
        }
        templates.push(t(10, ring));
        templates.push(t(11, singletons(0, 0, 5, W)));
        templates.push(t(12, singletons(10, 0, W, W)));
        templates.push(t(13, singletons(0, 0, W, 5)));
        templates.push(t(14, singletons(0, 10, W, W)));

        let mut cross = Vec::new();
        for br in 0..5 {
            for bc in 0..5 {
                if br == 2 || bc == 2 {
                    cross.push(rect(br * 3, bc * 3, br * 3 + 3, bc * 3 + 3));
                }
            }
        }
        templates.push(t(15, cross));

        let mut inner: Vec<_> = (0..3)
            .flat_map(|br| (0..3).map(move |bc| (br, bc)))
            .map(|(br, bc)| rect(3 + br * 3, 3 + bc * 3, 6 + br * 3, 6 + bc * 3))
            .collect();
        inner.extend([
            rect(0, 0, 3, W),
            rect(12, 0, W, W),
            rect(3, 0, 12, 3),
            rect(3, 12, 12, W),
        ]);
        templates.push(t(16, inner));

        Self::new(templates, 12, 4).expect("builtin codebook")
    }

    /// Parses the codebook text format:
    ///
    /// ```text
    /// # comment
    /// n_m 12
    /// n_a 4
    /// window 15 15          # width height
    /// template 3
    /// 0,0 0,1 1,0 1,1       # one block per line, cells as row,col
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut n_m = None;
        let mut n_a = None;
        let mut shape: Option<(usize, usize)> = None;
        let mut pending: Vec<(TemplateId, Vec<Block>)> = Vec::new();

        let bad = |line: usize, msg: String| Error::Data(format!("codebook line {line}: {msg}"));

        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let head = toks.next().unwrap_or_default();
            let mut num = |name: &str| -> Result<u64> {
                toks.next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(lineno, format!("`{head}` needs a numeric {name}")))
            };
            match head {
                "n_m" => n_m = Some(num("value")?),
                "n_a" => n_a = Some(num("value")?),
                "window" => shape = Some((num("width")? as usize, num("height")? as usize)),
                "template" => pending.push((num("id")? as TemplateId, Vec::new())),
                _ => {
                    let (_, blocks) = pending
                        .last_mut()
                        .ok_or_else(|| bad(lineno, "block listed before any `template`".into()))?;
                    let block = line
                        .split_whitespace()
                        .map(|cell| {
                            let (r, c) = cell.split_once(',')?;
                            Some((r.parse().ok()?, c.parse().ok()?))
                        })
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| bad(lineno, format!("bad cell list `{line}`")))?;
                    blocks.push(block);
                }
            }
        }
        let (w, h) = shape.ok_or_else(|| Error::Data("codebook has no `window` line".into()))?;
        let templates = pending
            .into_iter()
            .map(|(id, blocks)| AbstractionTemplate::new(id, w, h, blocks))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            templates,
            n_m.ok_or_else(|| Error::Data("codebook has no `n_m` line".into()))?,
            n_a.ok_or_else(|| Error::Data("codebook has no `n_a` line".into()))?,
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n_m {}", self.n_m);
        let _ = writeln!(out, "n_a {}", self.n_a);
        if let Some((w, h)) = self.window_shape() {
            let _ = writeln!(out, "window {w} {h}");
        }
        for t in &self.templates {
            let _ = writeln!(out, "template {}", t.id);
            for block in &t.blocks {
                let cells: Vec<String> = block.iter().map(|(r, c)| format!("{r},{c}")).collect();
                let _ = writeln!(out, "{}", cells.join(" "));
            }
        }
        out
    }
}

/// Smallest `b` with `2^b >= n`.
fn index_bits(n: usize) -> u64 {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as u64
    }
}
