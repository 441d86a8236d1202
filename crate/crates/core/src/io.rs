//! File formats.
//!
//! * Point patterns: CSV with header `x,y`.
//! * Windows: JSON `{"xmin", "xmax", "ymin", "ymax", "mask_file"?}`; a relative
//!   `mask_file` is resolved against the directory of the JSON file.
//! * Masks and covariate rasters: ASCII grids, one whitespace-separated row per
//!   line, top line = largest y.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CovariateField, Mask, Point, PointPattern, Rect, Window};

pub fn read_points_csv(path: &Path) -> Result<Vec<Point>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "y" {
        return Err(Error::parse(path, format!("expected header `x,y`, found {:?}", headers.iter().collect::<Vec<_>>())));
    }
    let mut pts = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|e| Error::parse(path, format!("row {}: {:?}: {e}", line + 2, &rec[k])))
        };
        let p = Point::try_new(num(0)?, num(1)?).map_err(|e| Error::parse(path, format!("row {}: {e}", line + 2)))?;
        pts.push(p);
    }
    Ok(pts)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

pub fn write_points_csv(path: &Path, pts: &[Point]) -> Result<()> {
    let mut out = String::from("x,y\n");
    for p in pts {
        out.push_str(&format!("{:?},{:?}\n", p.x, p.y));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowFile {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<PathBuf>,
}

impl WindowFile {
    pub fn rect(&self) -> Result<Rect> {
        Rect::new(self.xmin, self.xmax, self.ymin, self.ymax)
    }

    pub fn from_window(w: &Window) -> Self {
        let r = w.bounds();
        WindowFile {
            xmin: r.xmin,
            xmax: r.xmax,
            ymin: r.ymin,
            ymax: r.ymax,
            mask_file: None,
        }
    }
}

pub fn read_window(path: &Path) -> Result<Window> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: WindowFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let rect = spec.rect()?;
    match &spec.mask_file {
        None => Ok(Window::rect(rect)),
        Some(m) => {
            let mpath = resolve(path, m);
            let (nx, ny, values) = read_ascii_grid(&mpath)?;
            let included = values
                .iter()
                .map(|&v| match v {
                    0.0 => Ok(false),
                    1.0 => Ok(true),
                    other => Err(Error::parse(&mpath, format!("mask value {other} is not 0 or 1"))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Window::masked(rect, Mask::new(nx, ny, included)?))
        }
    }
}

pub fn write_window(path: &Path, w: &Window) -> Result<()> {
    if w.mask().is_some() {
        return Err(Error::InvalidInput("writing masked windows is not supported".into()));
    }
    let text = serde_json::to_string_pretty(&WindowFile::from_window(w)).expect("window serialises");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Resolves `rel` against the directory containing `anchor`.
pub fn resolve(anchor: &Path, rel: &Path) -> PathBuf {
    if rel.is_absolute() {
        rel.to_path_buf()
    } else {
        anchor.parent().unwrap_or(Path::new(".")).join(rel)
    }
}

/// Reads an ASCII grid; values are returned row-major with row 0 at the bottom.
pub fn read_ascii_grid(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::parse(path, format!("line {}: {t:?}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(path, format!("line {} has {} values, expected {}", i + 1, row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::parse(path, "empty grid"));
    }
    let (nx, ny) = (rows[0].len(), rows.len());
    let values = rows.into_iter().rev().flatten().collect();
    Ok((nx, ny, values))
}

/// Reads a covariate raster covering `rect`.
pub fn read_covariate(path: &Path, rect: Rect) -> Result<CovariateField> {
    let (nx, ny, values) = read_ascii_grid(path)?;
    CovariateField::new(rect, nx, ny, values)
}

/// Reads a pattern file with an optional window sidecar (unit square otherwise).
pub fn read_pattern(points: &Path, window: Option<&Path>) -> Result<PointPattern> {
    let w = match window {
        Some(p) => read_window(p)?,
        None => Window::unit_square(),
    };
    let pts = read_points_csv(points)?;
    PointPattern::new(pts, w).map_err(|e| Error::parse(points, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let pts = vec![Point::new(0.1, 0.2), Point::new(1.0 / 3.0, 0.7)];
        write_points_csv(&p, &pts).unwrap();
        assert_eq!(read_points_csv(&p).unwrap(), pts);
        fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_points_csv(&p), Err(Error::Parse { .. })));
        fs::write(&p, "x,y\n1,zz\n").unwrap();
        assert!(matches!(read_points_csv(&p), Err(Error::Parse { .. })));
        assert!(matches!(read_points_csv(&dir.path().join("missing.csv")), Err(Error::Io { .. })));
    }

    #[test]
    fn masked_window_top_row_is_max_y() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("mask.txt"), "1 0\n0 0\n").unwrap();
        let wp = dir.path().join("w.json");
        fs::write(&wp, r#"{"xmin":0,"xmax":2,"ymin":0,"ymax":2,"mask_file":"mask.txt"}"#).unwrap();
        let w = read_window(&wp).unwrap();
        assert!(w.contains(&Point::new(0.5, 1.5)));
        assert!(!w.contains(&Point::new(0.5, 0.5)));
        assert!((w.area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn covariate_grid_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "3 4\n1 2\n").unwrap();
        let f = read_covariate(&p, Rect::unit()).unwrap();
        assert_eq!(f.value(&Point::new(0.25, 0.25)), 1.0);
        assert_eq!(f.value(&Point::new(0.75, 0.75)), 4.0);
        fs::write(&p, "1 2\n3\n").unwrap();
        assert!(read_covariate(&p, Rect::unit()).is_err());
    }
}
