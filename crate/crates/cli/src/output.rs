use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use mapcomm::{to_pgm, to_text_matrix, Dims, Pos};

/// Writes through a temporary file in the same directory and renames it into
/// place, so readers never see a half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)
        .with_context(|| format!("writing {}", path.display()))?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("moving output into {}", path.display()))?;
    Ok(())
}

pub fn write_lines<I, S>(path: &Path, header: &str, rows: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(r.as_ref());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub const ACTOR_PIXEL: u8 = 0;
pub const SENSOR_PIXEL: u8 = 255;
const LO: f64 = 16.0;
const HI: f64 = 239.0;

/// Estimated traversability in the gray band `[16, 239]` (lighter means
/// easier to cross), with Actor cells drawn black and Sensor cells white.
/// Cells visited by both show as Actor cells.
pub fn heatmap(dims: Dims, estimate: &[f64], actor: &[Pos], sensor: &[Pos]) -> Vec<u8> {
    let mut px: Vec<u8> = estimate
        .iter()
        .map(|&x| (HI - (HI - LO) * x.clamp(0.0, 1.0)).round() as u8)
        .collect();
    for &p in sensor {
        px[dims.index(p)] = SENSOR_PIXEL;
    }
    for &p in actor {
        px[dims.index(p)] = ACTOR_PIXEL;
    }
    to_pgm(dims, &px)
}

pub const LEGEND: &str = "\
Heatmap legend (estimate_tNNNNN.pgm)
  gray 16..239   estimated cell value x, pixel = round(239 - 223 x); lighter is more traversable
  black (0)      cells the Actor has occupied
  white (255)    cells the Sensor has occupied
estimate_tNNNNN.txt holds the same estimate as a text matrix (rows cols header).
";

pub fn write_snapshot(
    out: &Path,
    t: usize,
    dims: Dims,
    estimate: &[f64],
    actor: &[Pos],
    sensor: &[Pos],
) -> Result<()> {
    write_atomic(
        &out.join(format!("estimate_t{t:05}.pgm")),
        &heatmap(dims, estimate, actor, sensor),
    )?;
    write_atomic(
        &out.join(format!("estimate_t{t:05}.txt")),
        to_text_matrix(dims, estimate).as_bytes(),
    )
}
