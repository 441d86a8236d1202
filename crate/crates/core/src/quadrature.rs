//! Grid quadrature and stratified dummy points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Point, Window};

/// Midpoint-rule quadrature on the included cells of a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureScheme {
    nodes: Vec<Point>,
    weights: Vec<f64>,
    /// Grid cell `(ix, iy)` of each node.
    cells: Vec<(usize, usize)>,
    dims: (usize, usize),
    cell_size: (f64, f64),
    /// Lower-left corner of the grid.
    origin: Point,
}

impl QuadratureScheme {
    /// Nodes at the centres of the `nx` x `ny` cells whose centres lie in `window`.
    pub fn grid(window: &Window, nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidInput(format!("grid {nx}x{ny}")));
        }
        let rect = window.bounds();
        let cw = rect.width() / nx as f64;
        let ch = rect.height() / ny as f64;
        let mut nodes = Vec::new();
        let mut cells = Vec::new();
        for iy in 0..ny {
            for ix in 0..nx {
                let c = Point::new(
                    rect.xmin + (ix as f64 + 0.5) * cw,
                    rect.ymin + (iy as f64 + 0.5) * ch,
                );
                if window.contains(&c) {
                    nodes.push(c);
                    cells.push((ix, iy));
                }
            }
        }
        if nodes.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no {nx}x{ny} grid cell centre lies inside the window"
            )));
        }
        let weights = vec![cw * ch; nodes.len()];
        Ok(QuadratureScheme {
            nodes,
            weights,
            cells,
            dims: (nx, ny),
            cell_size: (cw, ch),
            origin: Point::new(rect.xmin, rect.ymin),
        })
    }

    /// Grid whose cells have side close to `cell` (at least one cell per axis).
    pub fn with_cell_size(window: &Window, cell: f64) -> Result<Self> {
        let (nx, ny) = grid_dims_for_cell(window, cell)?;
        Self::grid(window, nx, ny)
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn cell_size(&self) -> (f64, f64) {
        self.cell_size
    }

    pub(crate) fn origin(&self) -> Point {
        self.origin
    }

    pub(crate) fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `sum_j w_j f(u_j)`.
    pub fn integrate(&self, f: impl Fn(&Point) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(u, w)| w * f(u))
            .sum()
    }

    /// Vector-valued version of [`integrate`](Self::integrate) for `f: W -> R^k`.
    pub fn integrate_vec(&self, k: usize, f: impl Fn(&Point) -> Vec<f64>) -> Vec<f64> {
        let mut acc = vec![0.0; k];
        for (u, w) in self.nodes.iter().zip(&self.weights) {
            let v = f(u);
            debug_assert_eq!(v.len(), k);
            for (a, x) in acc.iter_mut().zip(v) {
                *a += w * x;
            }
        }
        acc
    }
}

pub(crate) fn grid_dims_for_cell(window: &Window, cell: f64) -> Result<(usize, usize)> {
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(Error::InvalidInput(format!("cell size {cell}")));
    }
    let r = window.bounds();
    let nx = ((r.width() / cell).round() as usize).max(1);
    let ny = ((r.height() / cell).round() as usize).max(1);
    Ok((nx, ny))
}

/// Dummy points for the logistic pseudolikelihood.
#[derive(Clone, Debug, PartialEq)]
pub struct DummyPattern {
    pub points: Vec<Point>,
    /// Dummy intensity, points per unit area.
    pub rho: f64,
}

impl DummyPattern {
    /// One uniform point in each included cell of an `nx` x `ny` grid.
    ///
    /// A cell is included when its centre is in the window, as for [`QuadratureScheme::grid`];
    /// points that fall outside a masked window are redrawn within the cell.
    pub fn stratified(window: &Window, nx: usize, ny: usize, seed: u64) -> Result<Self> {
        let scheme = QuadratureScheme::grid(window, nx, ny)?;
        let (cw, ch) = scheme.cell_size();
        let rect = window.bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(scheme.len());
        for &(ix, iy) in scheme.cells() {
            let x0 = rect.xmin + ix as f64 * cw;
            let y0 = rect.ymin + iy as f64 * ch;
            let mut p = Point::new(x0 + rng.random::<f64>() * cw, y0 + rng.random::<f64>() * ch);
            let mut tries = 0;
            while !window.contains(&p) && tries < 32 {
                p = Point::new(x0 + rng.random::<f64>() * cw, y0 + rng.random::<f64>() * ch);
                tries += 1;
            }
            if !window.contains(&p) {
                p = Point::new(x0 + 0.5 * cw, y0 + 0.5 * ch);
            }
            points.push(p);
        }
        Ok(DummyPattern {
            points,
            rho: 1.0 / (cw * ch),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Mask, Rect};
    use crate::model::GibbsModel;

    #[test]
    fn unit_square_grid() {
        let s = QuadratureScheme::grid(&Window::unit_square(), 50, 50).unwrap();
        assert_eq!(s.len(), 2500);
        assert!(s.weights().iter().all(|&w| (w - 4e-4).abs() < 1e-18));
        assert!((s.total_weight() - 1.0).abs() < 1e-12);

        let one = QuadratureScheme::grid(&Window::unit_square(), 1, 1).unwrap();
        assert_eq!(one.nodes(), &[Point::new(0.5, 0.5)]);
        assert_eq!(one.weights(), &[1.0]);
    }

    #[test]
    fn half_masked_grid() {
        let w = Window::masked(Rect::unit(), Mask::new(2, 1, vec![true, false]).unwrap());
        let s = QuadratureScheme::grid(&w, 2, 2).unwrap();
        assert_eq!(s.len(), 2);
        assert!((s.total_weight() - 0.5).abs() < 1e-15);
        assert!(s.nodes().iter().all(|p| p.x < 0.5));
    }

    #[test]
    fn empty_grid_is_error() {
        // a mask whose only included cell sits between the 2x2 grid centres
        let mask = Mask::new(4, 4, (0..16).map(|i| i == 0).collect()).unwrap();
        let w = Window::masked(Rect::unit(), mask);
        assert!(QuadratureScheme::grid(&w, 1, 1).is_err());
        assert!(QuadratureScheme::grid(&Window::unit_square(), 0, 3).is_err());
    }

    #[test]
    fn midpoint_rule() {
        let s = QuadratureScheme::grid(&Window::unit_square(), 50, 50).unwrap();
        assert!((s.integrate(|_| 1.0) - 1.0).abs() < 1e-12);
        assert!((s.integrate(|p| p.x) - 0.5).abs() < 1e-12);
        let v = s.integrate_vec(2, |p| vec![p.y, 3.0 * p.x - 1.0]);
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn refinement_of_strauss_intensity_integral() {
        let inst = GibbsModel::strauss(0.08)
            .unwrap()
            .instance(vec![100f64.ln(), 0.2f64.ln()])
            .unwrap();
        let x = [
            Point::new(0.2, 0.3),
            Point::new(0.25, 0.32),
            Point::new(0.7, 0.7),
            Point::new(0.5, 0.1),
        ];
        let coarse = QuadratureScheme::grid(&Window::unit_square(), 50, 50).unwrap();
        let fine = QuadratureScheme::grid(&Window::unit_square(), 500, 500).unwrap();
        let a = coarse.integrate(|u| inst.conditional_intensity(u, &x));
        let b = fine.integrate(|u| inst.conditional_intensity(u, &x));
        assert!(((a - b) / b).abs() <= 0.01, "{a} vs {b}");
    }

    #[test]
    fn refinement_error_shrinks_for_lipschitz_f() {
        // reference value from a 2000x2000 grid
        let exact = QuadratureScheme::grid(&Window::unit_square(), 2000, 2000)
            .unwrap()
            .integrate(|p| (p.x * p.y).sin() + (p.x - 0.3).abs());
        let err = |n| {
            let s = QuadratureScheme::grid(&Window::unit_square(), n, n).unwrap();
            (s.integrate(|p| (p.x * p.y).sin() + (p.x - 0.3).abs()) - exact).abs()
        };
        assert!(err(20) <= 1.0 / 20.0);
        assert!(err(40) <= 1.0 / 40.0);
    }

    #[test]
    fn stratified_dummies() {
        let w = Window::unit_square();
        let d = DummyPattern::stratified(&w, 50, 50, 7).unwrap();
        assert_eq!(d.points.len(), 2500);
        assert!((d.rho - 2500.0).abs() < 1e-9);
        assert_eq!(d, DummyPattern::stratified(&w, 50, 50, 7).unwrap());
        assert_ne!(d, DummyPattern::stratified(&w, 50, 50, 8).unwrap());
        let mut counts = vec![0usize; 2500];
        for p in &d.points {
            let (ix, iy) = w.bounds().cell_of(p, 50, 50);
            counts[iy * 50 + ix] += 1;
        }
        assert!(counts.iter().all(|&c| c == 1));
    }
}
