//! Finest-resolution world maps, sensing windows, and raster ingestion.
//!
//! Every map is stored row-major and every position is `(row, col)`.
//! Cell values live in `[0, 1]`: `0` is fully traversable, `1` is not.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

/// A cell position, `(row, col)`. Orders lexicographically by row then column.
/// Serializes as a two-element `[row, col]` array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn manhattan(self, other: Pos) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    pub fn sq_dist(self, other: Pos) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        dr * dr + dc * dc
    }

    pub fn is_adjacent(self, other: Pos) -> bool {
        self.manhattan(other) == 1
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.row, self.col)
    }
}

impl From<(usize, usize)> for Pos {
    fn from((row, col): (usize, usize)) -> Self {
        Self { row, col }
    }
}

impl From<Pos> for (usize, usize) {
    fn from(p: Pos) -> Self {
        (p.row, p.col)
    }
}

/// Map dimensions in cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub rows: usize,
    pub cols: usize,
}

impl Dims {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub const fn len(self) -> usize {
        self.rows * self.cols
    }

    pub const fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub const fn contains(self, p: Pos) -> bool {
        p.row < self.rows && p.col < self.cols
    }

    pub fn contains_signed(self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.rows && (col as usize) < self.cols
    }

    pub const fn index(self, p: Pos) -> usize {
        p.row * self.cols + p.col
    }

    pub const fn pos(self, index: usize) -> Pos {
        Pos {
            row: index / self.cols,
            col: index % self.cols,
        }
    }

    /// 4-connected neighbours of `p` in the fixed order UP, DOWN, LEFT, RIGHT.
    pub fn neighbors4(self, p: Pos) -> impl Iterator<Item = Pos> {
        let (r, c) = (p.row as i64, p.col as i64);
        [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
            .into_iter()
            .filter(move |&(r, c)| self.contains_signed(r, c))
            .map(|(r, c)| Pos::new(r as usize, c as usize))
    }

    pub(crate) fn check(self, p: Pos, what: &str) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            arg(format!(
                "{what} {p} outside {}x{} map",
                self.rows, self.cols
            ))
        }
    }
}

/// Ground-truth cell values of the world.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    dims: Dims,
    values: Vec<f64>,
}

impl GridMap {
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return arg("map must have at least one cell");
        }
        if values.len() != dims.len() {
            return arg(format!(
                "expected {} values for a {}x{} map, got {}",
                dims.len(),
                dims.rows,
                dims.cols,
                values.len()
            ));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Data(format!(
                "cell {} has value {v} outside [0, 1]",
                dims.pos(i)
            )));
        }
        Ok(Self { dims, values })
    }

    /// A map where every cell holds `value`.
    pub fn filled(dims: Dims, value: f64) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn rows(&self) -> usize {
        self.dims.rows
    }

    pub fn cols(&self) -> usize {
        self.dims.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, p: Pos) -> f64 {
        self.values[self.dims.index(p)]
    }
}

/// Unnormalized raster values as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRaster {
    pub dims: Dims,
    pub values: Vec<f64>,
}

impl RawRaster {
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return arg("raster must have at least one cell");
        }
        if values.len() != dims.len() {
            return arg(format!(
                "expected {} raster values, got {}",
                dims.len(),
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "raster value at {} is not finite",
                dims.pos(i)
            )));
        }
        Ok(Self { dims, values })
    }

    /// Linear rescale to `[0, 1]` by `(v - min) / (max - min)`. Constant
    /// rasters map to all zeros.
    pub fn normalize(&self) -> GridMap {
        GridMap {
            dims: self.dims,
            values: min_max_normalize(&self.values).0,
        }
    }
}

/// Returns the rescaled values and whether the input was constant.
fn min_max_normalize(values: &[f64]) -> (Vec<f64>, bool) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    if !(span > 0.0) {
        return (vec![0.0; values.len()], true);
    }
    let out = values
        .iter()
        .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect();
    (out, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RasterFormat {
    /// `rows cols` header line followed by whitespace-separated decimals.
    TextMatrix,
    /// Binary graymap (`P5`), 8 bits per pixel.
    Pgm,
}

impl RasterFormat {
    /// Guess from the file extension: `.pgm` is a graymap, anything else text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("pgm") => RasterFormat::Pgm,
            _ => RasterFormat::TextMatrix,
        }
    }
}

pub fn read_raster(path: &Path, format: RasterFormat) -> Result<RawRaster> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        RasterFormat::TextMatrix => parse_text_matrix(path, &bytes),
        RasterFormat::Pgm => parse_pgm(path, &bytes),
    }
}

/// Reads a raster and rescales it to `[0, 1]`.
pub fn load_raster(path: &Path, format: RasterFormat) -> Result<GridMap> {
    Ok(read_raster(path, format)?.normalize())
}

fn format_err(path: &Path, location: String, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        location,
        message: message.into(),
    }
}

fn parse_text_matrix(path: &Path, bytes: &[u8]) -> Result<RawRaster> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| format_err(path, format!("byte {}", e.valid_up_to()), "not UTF-8"))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines
        .next()
        .ok_or_else(|| format_err(path, "line 1".into(), "missing `rows cols` header"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format_err(path, format!("line {hline}"), format!("bad header: {e}")))?;
    let [rows, cols] = dims[..] else {
        return Err(format_err(
            path,
            format!("line {hline}"),
            "header must be `rows cols`",
        ));
    };
    if rows == 0 || cols == 0 {
        return Err(format_err(path, format!("line {hline}"), "empty raster"));
    }

    let mut values = Vec::with_capacity(rows * cols);
    let mut seen_rows = 0;
    for (lineno, line) in lines {
        if seen_rows == rows {
            return Err(format_err(
                path,
                format!("line {lineno}"),
                format!("more than {rows} data rows"),
            ));
        }
        let before = values.len();
        for (tok_i, tok) in line.split_whitespace().enumerate() {
            let v: f64 = tok.parse().map_err(|_| {
                format_err(
                    path,
                    format!("line {lineno}, column {}", tok_i + 1),
                    format!("`{tok}` is not a number"),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{}: non-finite value at line {lineno}, column {}",
                    path.display(),
                    tok_i + 1
                )));
            }
            values.push(v);
        }
        if values.len() - before != cols {
            return Err(format_err(
                path,
                format!("line {lineno}"),
                format!("expected {cols} values, found {}", values.len() - before),
            ));
        }
        seen_rows += 1;
    }
    if seen_rows != rows {
        return Err(format_err(
            path,
            "end of file".into(),
            format!("expected {rows} data rows, found {seen_rows}"),
        ));
    }
    RawRaster::new(Dims::new(rows, cols), values)
}

fn parse_pgm(path: &Path, bytes: &[u8]) -> Result<RawRaster> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        // skip whitespace and comments
        loop {
            match bytes.get(*pos) {
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(b'#') => {
                    while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                        *pos += 1;
                    }
                }
                Some(_) => break,
                None => {
                    return Err(format_err(
                        path,
                        format!("byte {pos}"),
                        "unexpected end of header",
                    ))
                }
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            *pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = token(&mut pos)?;
    if magic != "P5" {
        return Err(format_err(
            path,
            "byte 0".into(),
            format!("bad magic `{magic}`, expected P5"),
        ));
    }
    let field = |name: &str, pos: &mut usize| -> Result<usize> {
        let at = *pos;
        let t = token(pos)?;
        t.parse()
            .map_err(|_| format_err(path, format!("byte {at}"), format!("bad {name} `{t}`")))
    };
    let cols = field("width", &mut pos)?;
    let rows = field("height", &mut pos)?;
    let maxval = field("maxval", &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(format_err(
            path,
            format!("byte {pos}"),
            format!("maxval {maxval} is not an 8-bit graymap"),
        ));
    }
    if rows == 0 || cols == 0 {
        return Err(format_err(path, format!("byte {pos}"), "empty image"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = rows * cols;
    let data = bytes.get(pos..pos + need).ok_or_else(|| {
        format_err(
            path,
            format!("byte {}", bytes.len()),
            format!("truncated raster: need {need} bytes after header"),
        )
    })?;
    let values = data.iter().map(|&b| b as f64 / 255.0).collect();
    RawRaster::new(Dims::new(rows, cols), values)
}

/// Neighbour set used when turning depth into inclination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Neighborhood {
    #[default]
    Four,
    Eight,
}

impl Neighborhood {
    fn offsets(self) -> &'static [(i64, i64)] {
        match self {
            Neighborhood::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Neighborhood::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Inclination map from raw depth: each cell scores the summed absolute
/// depth difference to its in-bounds neighbours, then scores are min-max
/// normalized. A constant depth map yields all zeros.
pub fn depth_to_inclination(depth: &RawRaster, neighborhood: Neighborhood) -> GridMap {
    let dims = depth.dims;
    let mut z = vec![0.0; dims.len()];
    for (j, zj) in z.iter_mut().enumerate() {
        let p = dims.pos(j);
        let y = depth.values[j];
        *zj = neighborhood
            .offsets()
            .iter()
            .map(|&(dr, dc)| (p.row as i64 + dr, p.col as i64 + dc))
            .filter(|&(r, c)| dims.contains_signed(r, c))
            .map(|(r, c)| (y - depth.values[r as usize * dims.cols + c as usize]).abs())
            .sum();
    }
    let (values, flat) = min_max_normalize(&z);
    if flat {
        log::warn!("inclination is constant over the map; returning an all-zero map");
    }
    GridMap { dims, values }
}

/// A `w x h` sensing window centred on a cell, clipped to the map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub center: Pos,
    pub width: usize,
    pub height: usize,
    /// Covered map indices, row-major within the window.
    pub cells: Vec<usize>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Top-left corner (possibly negative) of a `w x h` window centred on `center`.
pub(crate) fn window_origin(center: Pos, w: usize, h: usize) -> (i64, i64) {
    (
        center.row as i64 - (h / 2) as i64,
        center.col as i64 - (w / 2) as i64,
    )
}

pub fn window_at(dims: Dims, center: Pos, w: usize, h: usize) -> Result<Window> {
    dims.check(center, "window center")?;
    if w == 0 || h == 0 {
        return arg("window must be at least 1x1");
    }
    let (r0, c0) = window_origin(center, w, h);
    let mut cells = Vec::with_capacity(w * h);
    for r in r0..r0 + h as i64 {
        for c in c0..c0 + w as i64 {
            if dims.contains_signed(r, c) {
                cells.push(r as usize * dims.cols + c as usize);
            }
        }
    }
    Ok(Window {
        center,
        width: w,
        height: h,
        cells,
    })
}

/// Plain-text matrix serialization, readable by [`load_raster`].
pub fn to_text_matrix(dims: Dims, values: &[f64]) -> String {
    let mut out = format!("{} {}\n", dims.rows, dims.cols);
    for row in values.chunks(dims.cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Binary graymap (`P5`, maxval 255) of 8-bit pixels.
pub fn to_pgm(dims: Dims, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", dims.cols, dims.rows).into_bytes();
    out.extend_from_slice(pixels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f
    }

    #[test]
    fn text_matrix_rescales_endpoints() {
        let f = write_tmp(b"2 2\n0 5\n10 10\n");
        let m = load_raster(f.path(), RasterFormat::TextMatrix).unwrap();
        assert_eq!(m.values(), &[0.0, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn constant_raster_is_all_zero() {
        let f = write_tmp(b"1 3\n7 7 7\n");
        let m = load_raster(f.path(), RasterFormat::TextMatrix).unwrap();
        assert_eq!(m.values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn distinct_integers_map_linearly() {
        let f = write_tmp(b"3 3\n1 2 3\n4 5 6\n7 8 9\n");
        let m = load_raster(f.path(), RasterFormat::TextMatrix).unwrap();
        for (i, v) in m.values().iter().enumerate() {
            assert!((v - i as f64 / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn text_matrix_errors_carry_position() {
        let f = write_tmp(b"2 2\n0 1\n2 x\n");
        let err = load_raster(f.path(), RasterFormat::TextMatrix).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3, column 2"), "{msg}");

        let f = write_tmp(b"2 2\n0 1\n");
        let err = load_raster(f.path(), RasterFormat::TextMatrix).unwrap_err();
        assert!(err.to_string().contains("expected 2 data rows"));

        let f = write_tmp(b"1 2\n0 inf\n");
        let err = load_raster(f.path(), RasterFormat::TextMatrix).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_raster(Path::new("/no/such/map.txt"), RasterFormat::TextMatrix).unwrap_err();
        assert!(err.to_string().contains("/no/such/map.txt"));
    }

    #[test]
    fn pgm_round_trip() {
        let dims = Dims::new(2, 3);
        let bytes = to_pgm(dims, &[0, 51, 102, 153, 204, 255]);
        let f = write_tmp(&bytes);
        let m = load_raster(f.path(), RasterFormat::Pgm).unwrap();
        assert_eq!(m.dims(), dims);
        let expect = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        for (a, b) in m.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pgm_with_comment_and_truncation() {
        let f = write_tmp(b"P5\n# made by hand\n2 1\n255\n\x00\xff");
        let m = load_raster(f.path(), RasterFormat::Pgm).unwrap();
        assert_eq!(m.values(), &[0.0, 1.0]);

        let f = write_tmp(b"P5\n2 2\n255\n\x00");
        assert!(load_raster(f.path(), RasterFormat::Pgm).is_err());
        let f = write_tmp(b"P2\n1 1\n255\n0");
        assert!(load_raster(f.path(), RasterFormat::Pgm)
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }

    #[test]
    fn inclination_of_flat_and_pair() {
        let flat = RawRaster::new(Dims::new(3, 4), vec![2.5; 12]).unwrap();
        assert!(depth_to_inclination(&flat, Neighborhood::Four)
            .values()
            .iter()
            .all(|&v| v == 0.0));

        let pair = RawRaster::new(Dims::new(1, 2), vec![0.0, 1.0]).unwrap();
        assert_eq!(
            depth_to_inclination(&pair, Neighborhood::Four).values(),
            &[0.0, 0.0]
        );
    }

    #[test]
    fn inclination_raised_center_is_max() {
        let mut v = vec![0.0; 9];
        v[4] = 3.0;
        let raw = RawRaster::new(Dims::new(3, 3), v).unwrap();
        let m = depth_to_inclination(&raw, Neighborhood::Four);
        // brute force: z = sum over in-bounds 4-neighbours of |y_j - y_j'|
        let z: Vec<f64> = (0..9)
            .map(|j| {
                let (r, c) = (j / 3, j % 3);
                let mut s = 0.0;
                for (dr, dc) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
                    let (rr, cc) = (r as i32 + dr, c as i32 + dc);
                    if (0..3).contains(&rr) && (0..3).contains(&cc) {
                        s += (raw.values[j] - raw.values[(rr * 3 + cc) as usize]).abs();
                    }
                }
                s
            })
            .collect();
        // corners 0, edges 3, center 12
        assert_eq!(z, vec![0.0, 3.0, 0.0, 3.0, 12.0, 3.0, 0.0, 3.0, 0.0]);
        assert_eq!(m.values()[4], 1.0);
        assert!((m.values()[1] - 0.25).abs() < 1e-15);
        assert_eq!(m.values()[0], 0.0);
    }

    #[test]
    fn windows_clip_at_borders() {
        let d = Dims::new(5, 5);
        let w = window_at(d, Pos::new(2, 2), 3, 3).unwrap();
        assert_eq!(w.cells, vec![6, 7, 8, 11, 12, 13, 16, 17, 18]);
        let w = window_at(d, Pos::new(0, 0), 3, 3).unwrap();
        assert_eq!(w.cells, vec![0, 1, 5, 6]);
        let w = window_at(Dims::new(128, 128), Pos::new(12, 57), 5, 5).unwrap();
        assert_eq!(w.len(), 25);
        assert!(window_at(d, Pos::new(5, 0), 3, 3).is_err());
    }

    #[test]
    fn index_round_trip() {
        let d = Dims::new(7, 3);
        for i in 0..d.len() {
            assert_eq!(d.index(d.pos(i)), i);
        }
    }
}
