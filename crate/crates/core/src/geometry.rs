//! Planar points, observation windows and neighbour counting.
//!
//! Distances use a half-open convention: a neighbour at distance `d` is
//! counted in the band `[lo, hi)`. All comparisons are made on squared
//! distances so that the boundary rule is applied consistently everywhere.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn try_new(x: f64, y: f64) -> Result<Self> {
        if x.is_finite() && y.is_finite() {
            Ok(Point { x, y })
        } else {
            Err(Error::InvalidInput(format!(
                "non-finite coordinate ({x}, {y})"
            )))
        }
    }

    #[inline]
    pub fn dist2(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    #[inline]
    pub fn dist(&self, other: &Point) -> f64 {
        self.dist2(other).sqrt()
    }
}

/// Axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Rect {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Result<Self> {
        let finite = [xmin, xmax, ymin, ymax].iter().all(|v| v.is_finite());
        if !finite || xmax <= xmin || ymax <= ymin {
            return Err(Error::InvalidInput(format!(
                "degenerate rectangle [{xmin}, {xmax}] x [{ymin}, {ymax}]"
            )));
        }
        Ok(Rect {
            xmin,
            xmax,
            ymin,
            ymax,
        })
    }

    pub fn unit() -> Self {
        Rect {
            xmin: 0.0,
            xmax: 1.0,
            ymin: 0.0,
            ymax: 1.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.xmin && p.x <= self.xmax && p.y >= self.ymin && p.y <= self.ymax
    }

    /// Index of the `nx` x `ny` cell holding `p`, clamping points on the upper edges.
    pub(crate) fn cell_of(&self, p: &Point, nx: usize, ny: usize) -> (usize, usize) {
        let fx = (p.x - self.xmin) / self.width() * nx as f64;
        let fy = (p.y - self.ymin) / self.height() * ny as f64;
        let ix = (fx.floor().max(0.0) as usize).min(nx - 1);
        let iy = (fy.floor().max(0.0) as usize).min(ny - 1);
        (ix, iy)
    }
}

/// Cell-inclusion raster aligned to a window rectangle. Row 0 is the bottom row.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    nx: usize,
    ny: usize,
    included: Vec<bool>,
}

impl Mask {
    /// `included` is row-major with row 0 at `ymin`.
    pub fn new(nx: usize, ny: usize, included: Vec<bool>) -> Result<Self> {
        if nx == 0 || ny == 0 || included.len() != nx * ny {
            return Err(Error::InvalidInput(format!(
                "mask of {} cells does not match {nx}x{ny}",
                included.len()
            )));
        }
        if !included.iter().any(|&c| c) {
            return Err(Error::InvalidInput("mask excludes every cell".into()));
        }
        Ok(Mask { nx, ny, included })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn is_included(&self, ix: usize, iy: usize) -> bool {
        self.included[iy * self.nx + ix]
    }

    pub fn included_count(&self) -> usize {
        self.included.iter().filter(|&&c| c).count()
    }
}

/// Observation window: a rectangle, optionally restricted by a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    rect: Rect,
    mask: Option<Arc<Mask>>,
}

impl Window {
    pub fn rect(rect: Rect) -> Self {
        Window { rect, mask: None }
    }

    pub fn unit_square() -> Self {
        Window::rect(Rect::unit())
    }

    pub fn masked(rect: Rect, mask: Mask) -> Self {
        Window {
            rect,
            mask: Some(Arc::new(mask)),
        }
    }

    pub fn bounds(&self) -> &Rect {
        &self.rect
    }

    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_deref()
    }

    pub fn area(&self) -> f64 {
        match &self.mask {
            None => self.rect.area(),
            Some(m) => {
                let (nx, ny) = m.dims();
                self.rect.area() * m.included_count() as f64 / (nx * ny) as f64
            }
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        if !self.rect.contains(p) {
            return false;
        }
        match &self.mask {
            None => true,
            Some(m) => {
                let (nx, ny) = m.dims();
                let (ix, iy) = self.rect.cell_of(p, nx, ny);
                m.is_included(ix, iy)
            }
        }
    }
}

/// A finite point configuration observed in a window.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPattern {
    points: Vec<Point>,
    window: Window,
}

impl PointPattern {
    /// Validates that every point is finite, inside the window and distinct.
    pub fn new(points: Vec<Point>, window: Window) -> Result<Self> {
        for p in &points {
            Point::try_new(p.x, p.y)?;
            if !window.contains(p) {
                return Err(Error::PointOutsideWindow { x: p.x, y: p.y });
            }
        }
        let mut sorted = points.clone();
        sorted.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicatePoint {
                x: w[0].x,
                y: w[0].y,
            });
        }
        Ok(PointPattern { points, window })
    }

    /// Sampler output; points are inside the window by construction.
    pub(crate) fn from_sampler(points: Vec<Point>, window: Window) -> Self {
        debug_assert!(points.iter().all(|p| window.contains(p)));
        PointPattern { points, window }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The pattern with point `k` removed.
    pub fn without(&self, k: usize) -> Vec<Point> {
        let mut pts = self.points.clone();
        pts.remove(k);
        pts
    }
}

/// Real-valued raster over a rectangle, read by nearest-cell lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct CovariateField {
    rect: Rect,
    nx: usize,
    ny: usize,
    values: Vec<f64>,
}

impl CovariateField {
    /// `values` is row-major with row 0 at `ymin`.
    pub fn new(rect: Rect, nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 || values.len() != nx * ny {
            return Err(Error::InvalidInput(format!(
                "raster of {} values does not match {nx}x{ny}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite raster value {v}")));
        }
        Ok(CovariateField {
            rect,
            nx,
            ny,
            values,
        })
    }

    /// Samples `f` at the cell centres of an `nx` x `ny` raster.
    pub fn from_fn(rect: Rect, nx: usize, ny: usize, f: impl Fn(Point) -> f64) -> Result<Self> {
        let cw = rect.width() / nx as f64;
        let ch = rect.height() / ny as f64;
        let mut values = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                values.push(f(Point::new(
                    rect.xmin + (ix as f64 + 0.5) * cw,
                    rect.ymin + (iy as f64 + 0.5) * ch,
                )));
            }
        }
        CovariateField::new(rect, nx, ny, values)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn bounds(&self) -> &Rect {
        &self.rect
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value of the cell containing `p`; points outside the raster use the nearest edge cell.
    pub fn value(&self, p: &Point) -> f64 {
        let (ix, iy) = self.rect.cell_of(p, self.nx, self.ny);
        self.values[iy * self.nx + ix]
    }
}

/// Number of points `v` of `y` with `lo <= |u - v| < hi`.
pub fn count_neighbors(u: &Point, y: &[Point], lo: f64, hi: f64) -> usize {
    let lo2 = lo * lo;
    let hi2 = hi * hi;
    y.iter()
        .filter(|v| {
            let d2 = u.dist2(v);
            d2 >= lo2 && d2 < hi2
        })
        .count()
}

/// Indices of `pts` sorted by x coordinate, for sweep-line searches.
fn x_order(pts: &[Point]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| pts[a].x.total_cmp(&pts[b].x));
    idx
}

/// Number of unordered pairs at distance `< r`.
pub fn pair_count(y: &[Point], r: f64) -> usize {
    let idx = x_order(y);
    let r2 = r * r;
    let mut count = 0;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            if y[j].x - y[i].x >= r {
                break;
            }
            if y[i].dist2(&y[j]) < r2 {
                count += 1;
            }
        }
    }
    count
}

/// Smallest interpoint distance; `None` for fewer than two points.
pub fn min_interpoint_distance(y: &[Point]) -> Option<f64> {
    if y.len() < 2 {
        return None;
    }
    let idx = x_order(y);
    let mut best2 = f64::INFINITY;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            let dx = y[j].x - y[i].x;
            if dx * dx >= best2 {
                break;
            }
            best2 = best2.min(y[i].dist2(&y[j]));
        }
    }
    Some(best2.sqrt())
}
