//! Nystrom discretisation of the Fredholm equation on a quadrature grid.
//!
//! The product `lambda phi` is taken constant on each grid cell while the
//! kernel `1 - r(u, v)` is integrated exactly over the cell, so
//! `kbar_j(u)` is the cell average of `1 - r(u, .)` over cell `j`. With
//! `g_i = sqrt(w_i lambda(u_i, y))` the symmetrised system reads
//! `(I + T) z = l` where `T_ij = g_i g_j kbar_j(u_i)` and `l_i = g_i t(u_i, y)`;
//! the weight function at the nodes is `phi_i = z_i / g_i`, and off the nodes
//! `phi(u) = t(u, y) - sum_j g_j z_j kbar_j(u)`.
//!
//! Configurations that differ from the base pattern by one point only change
//! the rows of nodes within the interaction range of that point. Each solve
//! reuses the base factor up to the first changed row, in whichever of several
//! node orderings puts that row last.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::envelope::Envelope;
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::model::{GibbsModel, ModelInstance, PairEffect};
use crate::quadrature::QuadratureScheme;

/// Pair code: 0 blocked, 1 and 2 interaction coordinates, 3 no interaction.
#[inline]
pub(crate) fn pair_code(e: PairEffect) -> u8 {
    if e.blocked {
        0
    } else {
        match e.coord {
            Some(k) => 1 + k,
            None => 3,
        }
    }
}

/// `area{v in [0, a] x [0, b] : |v| < rho}`, extended as an odd function of `a` and of `b`.
fn quarter_area(a: f64, b: f64, rho: f64) -> f64 {
    let sign = a.signum() * b.signum();
    let (a, b) = (a.abs().min(rho), b.abs().min(rho));
    let xb = (rho * rho - b * b).sqrt();
    if a <= xb {
        return sign * a * b;
    }
    let prim = |x: f64| 0.5 * (x * (rho * rho - x * x).max(0.0).sqrt() + rho * rho * (x / rho).min(1.0).asin());
    sign * (b * xb + prim(a) - prim(xb))
}

/// Area of the disc of radius `rho` about `u` inside the rectangle centred at `c` with sides `cell`.
pub(crate) fn disc_cell_area(u: &Point, c: &Point, cell: (f64, f64), rho: f64) -> f64 {
    if !(rho > 0.0) {
        return 0.0;
    }
    let (x0, x1) = (c.x - 0.5 * cell.0 - u.x, c.x + 0.5 * cell.0 - u.x);
    let (y0, y1) = (c.y - 0.5 * cell.1 - u.y, c.y + 0.5 * cell.1 - u.y);
    quarter_area(x1, y1, rho) - quarter_area(x0, y1, rho) - quarter_area(x1, y0, rho) + quarter_area(x0, y0, rho)
}

/// Fractions of a cell in the blocked band and the two interaction bands, by pair code.
pub(crate) type Fractions = [f64; 3];

/// Annuli `[previous radius, radius)` about a point with their pair codes.
#[derive(Clone, Debug)]
pub(crate) struct Bands {
    outer: Vec<(f64, u8)>,
}

impl Bands {
    pub(crate) fn new(model: &GibbsModel) -> Self {
        let range = model.range();
        let mut radii: Vec<f64> = [model.hard_core(), model.interaction().inner(), Some(range)]
            .into_iter()
            .flatten()
            .filter(|&r| r > 0.0 && r <= range)
            .collect();
        radii.sort_by(f64::total_cmp);
        radii.dedup();
        let mut outer = Vec::new();
        let mut lo = 0.0;
        for r in radii {
            let mid = 0.5 * (lo + r);
            outer.push((r, pair_code(model.pair_effect(mid * mid))));
            lo = r;
        }
        Bands { outer }
    }

    pub(crate) fn range(&self) -> f64 {
        self.outer.last().map_or(0.0, |b| b.0)
    }

    /// Band fractions of the cell centred at `c` seen from `u`.
    pub(crate) fn fractions(&self, u: &Point, c: &Point, cell: (f64, f64)) -> Fractions {
        let area = cell.0 * cell.1;
        let mut f = [0.0; 3];
        let mut inner = 0.0;
        for &(r, code) in &self.outer {
            let a = disc_cell_area(u, c, cell, r);
            if (code as usize) < 3 {
                f[code as usize] += (a - inner) / area;
            }
            inner = a;
        }
        f
    }
}

/// `1 - ratio` by pair code with the kernel clamp applied.
pub(crate) fn one_minus_by_code(inst: &ModelInstance) -> [f64; 4] {
    pair_effects().map(|e| 1.0 - inst.ratio_for(e, true))
}

fn pair_effects() -> [PairEffect; 4] {
    let effect = |coord: Option<u8>, blocked| PairEffect { coord, blocked };
    [effect(None, true), effect(Some(0), false), effect(Some(1), false), effect(None, false)]
}

#[inline]
pub(crate) fn kernel_value(f: &Fractions, one_minus: &[f64; 4]) -> f64 {
    f[0] * one_minus[0] + f[1] * one_minus[1] + f[2] * one_minus[2]
}

/// Nodes looked up by grid cell.
#[derive(Debug)]
pub(crate) struct NodeIndex {
    origin: Point,
    cell: (f64, f64),
    dims: (usize, usize),
    slot: Vec<u32>,
}

fn cell_span(c: f64, r: f64, origin: f64, size: f64, n: usize) -> Option<(usize, usize)> {
    let lo = ((c - r - origin) / size - 0.5).floor();
    let hi = ((c + r - origin) / size - 0.5).ceil();
    if hi < 0.0 || lo > (n - 1) as f64 {
        return None;
    }
    Some((lo.max(0.0) as usize, hi.min((n - 1) as f64) as usize))
}

impl NodeIndex {
    pub(crate) fn new(scheme: &QuadratureScheme) -> Self {
        let (nx, ny) = scheme.dims();
        let mut slot = vec![u32::MAX; nx * ny];
        for (i, &(ix, iy)) in scheme.cells().iter().enumerate() {
            slot[iy * nx + ix] = i as u32;
        }
        NodeIndex {
            origin: scheme.origin(),
            cell: scheme.cell_size(),
            dims: (nx, ny),
            slot,
        }
    }

    /// Calls `f(node, d2)` for every node with squared distance `d2 < r2` from `u`, in node order.
    pub(crate) fn within(&self, nodes: &[Point], u: &Point, r2: f64, mut f: impl FnMut(usize, f64)) {
        if !(r2 > 0.0) {
            return;
        }
        let r = r2.sqrt();
        let (nx, ny) = self.dims;
        let Some((x0, x1)) = cell_span(u.x, r, self.origin.x, self.cell.0, nx) else {
            return;
        };
        let Some((y0, y1)) = cell_span(u.y, r, self.origin.y, self.cell.1, ny) else {
            return;
        };
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                let s = self.slot[iy * nx + ix];
                if s == u32::MAX {
                    continue;
                }
                let d2 = u.dist2(&nodes[s as usize]);
                if d2 < r2 {
                    f(s as usize, d2);
                }
            }
        }
    }
}

/// Nodes whose cell meets the disc of radius `bands.range()` about `u`, with their band fractions.
pub(crate) fn kernel_neighbours(
    index: &NodeIndex,
    nodes: &[Point],
    bands: &Bands,
    u: &Point,
) -> Vec<(u32, Fractions)> {
    let (cw, ch) = index.cell;
    let reach = bands.range() + 0.5 * cw.hypot(ch);
    let mut out = Vec::new();
    index.within(nodes, u, reach * reach, |j, _| {
        let f = bands.fractions(u, &nodes[j], (cw, ch));
        if f.iter().any(|&v| v != 0.0) {
            out.push((j as u32, f));
        }
    });
    out
}

/// A node ordering with its envelope and the lower-triangle pattern of the kernel.
#[derive(Debug)]
struct Ordering {
    perm: Vec<u32>,
    inv: Vec<u32>,
    env: Envelope,
    lower_start: Vec<usize>,
    /// `(column position, kernel table index)` of the structural entries left of and on the diagonal.
    lower: Vec<(u32, u32)>,
}

impl Ordering {
    fn new(perm: Vec<u32>, adj_start: &[usize], adj: &[(u32, u32)]) -> Self {
        let m = perm.len();
        let mut inv = vec![0u32; m];
        for (pos, &node) in perm.iter().enumerate() {
            inv[node as usize] = pos as u32;
        }
        let mut first = Vec::with_capacity(m);
        let mut lower_start = Vec::with_capacity(m + 1);
        let mut lower = Vec::new();
        for (pos, &node) in perm.iter().enumerate() {
            lower_start.push(lower.len());
            let mut f = pos;
            for &(j, t) in &adj[adj_start[node as usize]..adj_start[node as usize + 1]] {
                let jp = inv[j as usize] as usize;
                if jp <= pos {
                    lower.push((jp as u32, t));
                    f = f.min(jp);
                }
            }
            first.push(f);
        }
        lower_start.push(lower.len());
        Ordering {
            perm,
            inv,
            env: Envelope::new(first),
            lower_start,
            lower,
        }
    }

    fn lower_row(&self, pos: usize) -> &[(u32, u32)] {
        &self.lower[self.lower_start[pos]..self.lower_start[pos + 1]]
    }
}

/// Pattern-independent structure: nodes, kernel sparsity and orderings.
#[derive(Debug)]
pub(crate) struct Structure {
    nodes: Vec<Point>,
    weights: Vec<f64>,
    index: NodeIndex,
    bands: Bands,
    range2: f64,
    adj_start: Vec<usize>,
    /// Nodes within range of each node (including itself) with their pair code.
    adj: Vec<(u32, u8)>,
    /// Band fractions by absolute cell offset, `dy * (kx + 1) + dx`.
    table: Vec<Fractions>,
    kernel_start: Vec<usize>,
    /// Nodes whose cell meets the interaction disc of each node, with their table index.
    kernel: Vec<(u32, u32)>,
    orderings: Vec<Ordering>,
}

impl Structure {
    pub(crate) fn new(model: &GibbsModel, scheme: &QuadratureScheme) -> Self {
        let nodes = scheme.nodes().to_vec();
        let index = NodeIndex::new(scheme);
        let range2 = model.range() * model.range();
        let mut adj_start = Vec::with_capacity(nodes.len() + 1);
        let mut adj = Vec::new();
        for u in &nodes {
            adj_start.push(adj.len());
            index.within(&nodes, u, range2, |j, d2| adj.push((j as u32, pair_code(model.pair_effect(d2)))));
        }
        adj_start.push(adj.len());

        let bands = Bands::new(model);
        let cells = scheme.cells();
        let cell = scheme.cell_size();
        let reach = bands.range() + 0.5 * cell.0.hypot(cell.1);
        let kx = (reach / cell.0).ceil() as usize + 1;
        let ky = (reach / cell.1).ceil() as usize + 1;
        let origin = Point::new(0.0, 0.0);
        let mut table = Vec::with_capacity((kx + 1) * (ky + 1));
        for dy in 0..=ky {
            for dx in 0..=kx {
                let c = Point::new(dx as f64 * cell.0, dy as f64 * cell.1);
                table.push(bands.fractions(&origin, &c, cell));
            }
        }
        let mut kernel_start = Vec::with_capacity(nodes.len() + 1);
        let mut kernel = Vec::new();
        for (i, u) in nodes.iter().enumerate() {
            kernel_start.push(kernel.len());
            index.within(&nodes, u, reach * reach, |j, _| {
                let dx = cells[i].0.abs_diff(cells[j].0);
                let dy = cells[i].1.abs_diff(cells[j].1);
                let t = dy * (kx + 1) + dx;
                if table[t].iter().any(|&v| v != 0.0) {
                    kernel.push((j as u32, t as u32));
                }
            });
        }
        kernel_start.push(kernel.len());

        let row_major: Vec<u32> = (0..nodes.len() as u32).collect();
        let mut col_major = row_major.clone();
        col_major.sort_by_key(|&i| (cells[i as usize].0, cells[i as usize].1));
        let mut perms = vec![row_major.clone(), row_major.into_iter().rev().collect()];
        perms.push(col_major.iter().rev().copied().collect());
        perms.push(col_major);
        let orderings = perms
            .into_iter()
            .map(|perm| Ordering::new(perm, &kernel_start, &kernel))
            .collect();
        Structure {
            nodes,
            weights: scheme.weights().to_vec(),
            index,
            bands,
            range2,
            adj_start,
            adj,
            table,
            kernel_start,
            kernel,
            orderings,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.nodes.len()
    }

    pub(crate) fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn neighbours(&self, node: usize) -> &[(u32, u8)] {
        &self.adj[self.adj_start[node]..self.adj_start[node + 1]]
    }

    fn kernel_row(&self, node: usize) -> &[(u32, u32)] {
        &self.kernel[self.kernel_start[node]..self.kernel_start[node + 1]]
    }

    /// Nodes whose cell meets the interaction disc of an arbitrary point, with band fractions.
    pub(crate) fn kernel_neighbours_of(&self, u: &Point) -> Vec<(u32, Fractions)> {
        kernel_neighbours(&self.index, &self.nodes, &self.bands, u)
    }

    /// Nodes within range of an arbitrary point, with pair codes.
    pub(crate) fn neighbours_of(&self, model: &GibbsModel, u: &Point) -> Vec<(u32, u8)> {
        let mut out = Vec::new();
        self.index.within(&self.nodes, u, self.range2, |j, d2| {
            out.push((j as u32, pair_code(model.pair_effect(d2))))
        });
        out
    }

    /// Envelope entries of the first ordering that are not structural non-zeros.
    pub(crate) fn fill_in(&self) -> usize {
        let o = &self.orderings[0];
        let diag_missing = (0..self.len())
            .filter(|&pos| !o.lower_row(pos).iter().any(|&(j, _)| j as usize == pos))
            .count();
        o.env.size() - o.lower.len() - diag_missing
    }
}

/// Node statistics of a base pattern, independent of `theta`.
#[derive(Debug)]
pub(crate) struct FredholmContext {
    model: GibbsModel,
    structure: Arc<Structure>,
    q: usize,
    p: usize,
    trend: Vec<f64>,
    counts: Vec<[u32; 2]>,
    blocked: Vec<u32>,
    points: Vec<Point>,
    point_nbrs: Vec<Vec<(u32, u8)>>,
    point_kernel: Vec<Vec<(u32, Fractions)>>,
    /// `t(x_k, x \ x_k)`.
    point_stats: Vec<Vec<f64>>,
}

impl FredholmContext {
    pub(crate) fn new(model: &GibbsModel, structure: Arc<Structure>, points: &[Point]) -> Self {
        let m = structure.len();
        let q = model.interaction_coords().start;
        let p = model.dim();
        let mut trend = vec![0.0; m * q];
        let mut buf = vec![0.0; p];
        for (i, u) in structure.nodes.iter().enumerate() {
            model.trend_into(u, &mut buf);
            trend[i * q..(i + 1) * q].copy_from_slice(&buf[..q]);
        }
        let mut counts = vec![[0u32; 2]; m];
        let mut blocked = vec![0u32; m];
        let mut point_nbrs = Vec::with_capacity(points.len());
        for x in points {
            let nb = structure.neighbours_of(model, x);
            for &(j, code) in &nb {
                apply(&mut counts[j as usize], &mut blocked[j as usize], code, true);
            }
            point_nbrs.push(nb);
        }
        let point_kernel = points.iter().map(|x| structure.kernel_neighbours_of(x)).collect();
        let point_stats = (0..points.len())
            .map(|k| {
                let rest: Vec<Point> = points[..k].iter().chain(&points[k + 1..]).copied().collect();
                model.sufficient_statistic(&points[k], &rest)
            })
            .collect();
        FredholmContext {
            model: model.clone(),
            structure,
            q,
            p,
            trend,
            counts,
            blocked,
            points: points.to_vec(),
            point_nbrs,
            point_kernel,
            point_stats,
        }
    }

    pub(crate) fn structure(&self) -> &Structure {
        &self.structure
    }

    pub(crate) fn model(&self) -> &GibbsModel {
        &self.model
    }

    /// Same pattern and structure under a different model of identical shape (e.g. clamped).
    pub(crate) fn with_model(&self, model: &GibbsModel) -> Self {
        FredholmContext {
            model: model.clone(),
            structure: Arc::clone(&self.structure),
            trend: self.trend.clone(),
            counts: self.counts.clone(),
            blocked: self.blocked.clone(),
            points: self.points.clone(),
            point_nbrs: self.point_nbrs.clone(),
            point_kernel: self.point_kernel.clone(),
            point_stats: self.point_stats.clone(),
            ..*self
        }
    }

    fn stat_into(&self, node: usize, counts: [u32; 2], out: &mut [f64]) {
        out[..self.q].copy_from_slice(&self.trend[node * self.q..(node + 1) * self.q]);
        for (k, o) in out[self.q..].iter_mut().enumerate() {
            *o = counts[k] as f64;
        }
    }
}

#[inline]
fn apply(counts: &mut [u32; 2], blocked: &mut u32, code: u8, add: bool) {
    match code {
        0 if add => *blocked += 1,
        0 => *blocked -= 1,
        1 | 2 if add => counts[code as usize - 1] += 1,
        1 | 2 => counts[code as usize - 1] -= 1,
        _ => {}
    }
}

/// One point added to or removed from the base pattern.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Delta<'a> {
    pub add: bool,
    /// Nodes within range of the point with their pair codes.
    pub affected: &'a [(u32, u8)],
}

/// Solution of one configuration.
pub(crate) struct ConfigView<'w> {
    z: &'w [f64],
    inv: &'w [u32],
    g: &'w [f64],
    p: usize,
}

impl ConfigView<'_> {
    #[inline]
    pub(crate) fn z(&self, node: usize) -> &[f64] {
        let pos = self.inv[node] as usize;
        &self.z[pos * self.p..(pos + 1) * self.p]
    }

    #[inline]
    pub(crate) fn g(&self, node: usize) -> f64 {
        self.g[node]
    }
}

struct Base {
    l: Vec<f64>,
    y: Vec<f64>,
}

struct Workspace {
    l: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    /// Rows before this position still equal the base.
    clean: Vec<usize>,
    g: Vec<f64>,
    counts: Vec<[u32; 2]>,
    blocked: Vec<u32>,
    z: Vec<f64>,
    stat: Vec<f64>,
}

/// The discretised system at a fixed `theta`.
pub(crate) struct ThetaState<'c> {
    ctx: &'c FredholmContext,
    inst: ModelInstance,
    /// `1 - ratio` by pair code, with the kernel clamp.
    one_minus: [f64; 4],
    /// Cell-averaged kernel by table index.
    kbar: Vec<f64>,
    /// Unclamped ratio by pair code.
    ratio: [f64; 4],
    trend_eta: Vec<f64>,
    g: Vec<f64>,
    bases: Vec<Option<Base>>,
}

impl<'c> ThetaState<'c> {
    pub(crate) fn new(ctx: &'c FredholmContext, inst: &ModelInstance) -> Self {
        let st = &ctx.structure;
        let m = st.len();
        let one_minus = one_minus_by_code(inst);
        let ratio = pair_effects().map(|e| inst.ratio_for(e, false));
        let kbar = st.table.iter().map(|f| kernel_value(f, &one_minus)).collect();
        let theta = inst.theta();
        let trend_eta: Vec<f64> = (0..m)
            .map(|i| {
                let tr = &ctx.trend[i * ctx.q..(i + 1) * ctx.q];
                let mut eta = theta[0];
                for c in 1..ctx.q {
                    eta += theta[c] * tr[c];
                }
                eta
            })
            .collect();
        let mut s = ThetaState {
            ctx,
            inst: inst.clone(),
            one_minus,
            kbar,
            ratio,
            trend_eta,
            g: Vec::new(),
            bases: (0..st.orderings.len()).map(|_| None).collect(),
        };
        s.g = (0..m).map(|i| s.g_of(i, ctx.counts[i], ctx.blocked[i])).collect();
        s
    }

    #[inline]
    fn g_of(&self, node: usize, counts: [u32; 2], blocked: u32) -> f64 {
        if blocked > 0 {
            return 0.0;
        }
        let lambda = self.inst.eta_from_counts(self.trend_eta[node], counts).exp();
        (self.ctx.structure.weights[node] * lambda).sqrt()
    }

    pub(crate) fn g(&self) -> &[f64] {
        &self.g
    }

    pub(crate) fn ratio(&self, code: u8) -> f64 {
        self.ratio[code as usize]
    }


    /// Symmetrised kernel `T` as upper-triangle triplets `(i, j, value)`, `i <= j`.
    pub(crate) fn kernel_entries(&self) -> Vec<(usize, usize, f64)> {
        let st = &self.ctx.structure;
        let mut out = Vec::new();
        for i in 0..st.len() {
            for &(j, t) in st.kernel_row(i) {
                let j = j as usize;
                if j >= i {
                    let v = self.g[i] * self.g[j] * self.kbar[t as usize];
                    if v != 0.0 {
                        out.push((i, j, v));
                    }
                }
            }
        }
        out
    }

    fn assemble_row(&self, o: &Ordering, pos: usize, g: &[f64], l: &mut [f64]) {
        let range = o.env.row(pos);
        l[range.clone()].fill(0.0);
        let gi = g[o.perm[pos] as usize];
        if gi != 0.0 {
            for &(jp, t) in o.lower_row(pos) {
                let gj = g[o.perm[jp as usize] as usize];
                l[o.env.index(pos, jp as usize)] = gi * gj * self.kbar[t as usize];
            }
        }
        l[range.end - 1] += 1.0;
    }

    fn rhs_rows(&self, o: &Ordering, from: usize, g: &[f64], counts: &[[u32; 2]], y: &mut [f64], stat: &mut [f64]) {
        let p = self.ctx.p;
        for pos in from..o.perm.len() {
            let node = o.perm[pos] as usize;
            self.ctx.stat_into(node, counts[node], stat);
            for c in 0..p {
                y[pos * p + c] = g[node] * stat[c];
            }
        }
    }

    fn ensure_base(&mut self, oi: usize) -> Result<()> {
        if self.bases[oi].is_some() {
            return Ok(());
        }
        let o = &self.ctx.structure.orderings[oi];
        let m = o.perm.len();
        let mut l = vec![0.0; o.env.size()];
        for pos in 0..m {
            self.assemble_row(o, pos, &self.g, &mut l);
        }
        o.env
            .factor_from(&mut l, 0)
            .map_err(|pivot| Error::NotPositiveDefinite { pivot })?;
        let mut y = vec![0.0; m * self.ctx.p];
        let mut stat = vec![0.0; self.ctx.p];
        self.rhs_rows(o, 0, &self.g, &self.ctx.counts, &mut y, &mut stat);
        o.env.forward_from(&l, &mut y, self.ctx.p, 0);
        self.bases[oi] = Some(Base { l, y });
        Ok(())
    }

    /// Solution `z` for the base pattern, node-major `m x p`.
    pub(crate) fn base_solution(&mut self) -> Result<Vec<f64>> {
        let oi = self.bases.iter().position(Option::is_some).unwrap_or(0);
        self.ensure_base(oi)?;
        let o = &self.ctx.structure.orderings[oi];
        let base = self.bases[oi].as_ref().expect("base built");
        let p = self.ctx.p;
        let mut z = base.y.clone();
        o.env.backward(&base.l, &mut z, p);
        let mut out = vec![0.0; z.len()];
        for (pos, &node) in o.perm.iter().enumerate() {
            out[node as usize * p..(node as usize + 1) * p].copy_from_slice(&z[pos * p..(pos + 1) * p]);
        }
        Ok(out)
    }

    /// Solves every configuration in `deltas` and maps each solution through `f`.
    pub(crate) fn solve_deltas<T, F>(&mut self, deltas: &[Delta<'_>], f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, &ConfigView<'_>) -> T + Sync,
    {
        let st = &self.ctx.structure;
        let m = st.len();
        let n_ord = st.orderings.len();
        // first changed position per delta and ordering
        let starts: Vec<Vec<usize>> = deltas
            .iter()
            .map(|d| {
                st.orderings
                    .iter()
                    .map(|o| d.affected.iter().map(|&(j, _)| o.inv[j as usize] as usize).min().unwrap_or(m))
                    .collect()
            })
            .collect();
        let mut best_set = 0usize;
        let mut best_cost = f64::INFINITY;
        for set in 1usize..(1 << n_ord) {
            let mut cost: f64 = (0..n_ord)
                .filter(|&o| set & (1 << o) != 0 && self.bases[o].is_none())
                .map(|o| st.orderings[o].env.work_from(0))
                .sum();
            for s in &starts {
                cost += (0..n_ord)
                    .filter(|&o| set & (1 << o) != 0)
                    .map(|o| st.orderings[o].env.work_from(s[o]))
                    .fold(f64::INFINITY, f64::min);
            }
            if cost < best_cost {
                best_cost = cost;
                best_set = set;
            }
        }
        let mut jobs: Vec<(usize, usize, usize)> = starts
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let o = (0..n_ord)
                    .filter(|&o| best_set & (1 << o) != 0)
                    .max_by_key(|&o| (s[o], std::cmp::Reverse(o)))
                    .expect("non-empty ordering set");
                (o, s[o], k)
            })
            .collect();
        for o in 0..n_ord {
            if jobs.iter().any(|j| j.0 == o) {
                self.ensure_base(o)?;
            }
        }
        // descending start within each ordering keeps prefix copies minimal
        jobs.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
        let this = &*self;
        let threads = rayon::current_num_threads().max(1);
        let chunk = jobs.len().div_ceil(threads).max(1);
        let parts: Vec<Vec<(usize, Result<T>)>> = jobs
            .par_chunks(chunk)
            .map(|chunk| {
                let mut ws = this.workspace();
                chunk
                    .iter()
                    .map(|&(o, from, k)| (k, this.solve_one(&mut ws, o, from, &deltas[k], |v| f(k, v))))
                    .collect()
            })
            .collect();
        let mut slots: Vec<Option<Result<T>>> = (0..deltas.len()).map(|_| None).collect();
        for (k, r) in parts.into_iter().flatten() {
            slots[k] = Some(r);
        }
        slots.into_iter().map(|r| r.expect("every job ran")).collect()
    }

    fn workspace(&self) -> Workspace {
        let n_ord = self.ctx.structure.orderings.len();
        Workspace {
            l: vec![Vec::new(); n_ord],
            y: vec![Vec::new(); n_ord],
            clean: vec![0; n_ord],
            g: self.g.clone(),
            counts: self.ctx.counts.clone(),
            blocked: self.ctx.blocked.clone(),
            z: vec![0.0; self.ctx.structure.len() * self.ctx.p],
            stat: vec![0.0; self.ctx.p],
        }
    }

    fn solve_one<T>(
        &self,
        ws: &mut Workspace,
        oi: usize,
        from: usize,
        delta: &Delta<'_>,
        f: impl FnOnce(&ConfigView<'_>) -> T,
    ) -> Result<T> {
        let o = &self.ctx.structure.orderings[oi];
        let base = self.bases[oi].as_ref().expect("base built");
        let p = self.ctx.p;
        let m = o.perm.len();
        for &(j, code) in delta.affected {
            let j = j as usize;
            apply(&mut ws.counts[j], &mut ws.blocked[j], code, delta.add);
        }
        for &(j, _) in delta.affected {
            let j = j as usize;
            ws.g[j] = self.g_of(j, ws.counts[j], ws.blocked[j]);
        }
        if ws.l[oi].is_empty() {
            ws.l[oi] = vec![0.0; o.env.size()];
            ws.y[oi] = vec![0.0; m * p];
        }
        let row_start = |pos: usize| if pos == m { o.env.size() } else { o.env.row(pos).start };
        let clean = ws.clean[oi];
        if clean < from {
            let r = row_start(clean)..row_start(from);
            ws.l[oi][r.clone()].copy_from_slice(&base.l[r]);
            ws.y[oi][clean * p..from * p].copy_from_slice(&base.y[clean * p..from * p]);
        }
        ws.clean[oi] = from;

        let l = &mut ws.l[oi];
        for pos in from..m {
            self.assemble_row(o, pos, &ws.g, l);
        }
        let factored = o.env.factor_from(l, from);
        let result = factored.map_err(|pivot| Error::NotPositiveDefinite { pivot }).map(|()| {
            let y = &mut ws.y[oi];
            self.rhs_rows(o, from, &ws.g, &ws.counts, y, &mut ws.stat);
            o.env.forward_from(l, y, p, from);
            ws.z.copy_from_slice(y);
            o.env.backward(l, &mut ws.z, p);
            f(&ConfigView {
                z: &ws.z,
                inv: &o.inv,
                g: &ws.g,
                p,
            })
        });
        for &(j, code) in delta.affected {
            let j = j as usize;
            apply(&mut ws.counts[j], &mut ws.blocked[j], code, !delta.add);
            ws.g[j] = self.g[j];
        }
        result
    }

    /// Estimating function and empirical sensitivity at this `theta`.
    pub(crate) fn estimating_function(&mut self) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let ctx = self.ctx;
        let p = ctx.p;
        let z = self.base_solution()?;
        let mut integral = vec![0.0; p];
        let mut sens = DMatrix::zeros(p, p);
        let mut t = vec![0.0; p];
        for node in 0..ctx.structure.len() {
            let g = self.g[node];
            if g == 0.0 {
                continue;
            }
            ctx.stat_into(node, ctx.counts[node], &mut t);
            let zn = &z[node * p..(node + 1) * p];
            for c in 0..p {
                let gz = g * zn[c];
                integral[c] += gz;
                for d in 0..p {
                    sens[(c, d)] += gz * t[d];
                }
            }
        }
        let deltas: Vec<Delta<'_>> = ctx
            .point_nbrs
            .iter()
            .map(|nb| Delta {
                add: false,
                affected: nb,
            })
            .collect();
        let one_minus = self.one_minus;
        let phis = self.solve_deltas(&deltas, |k, view| {
            let mut phi = ctx.point_stats[k].clone();
            for (j, f) in &ctx.point_kernel[k] {
                let j = *j as usize;
                let w = view.g(j) * kernel_value(f, &one_minus);
                if w != 0.0 {
                    for (ph, zj) in phi.iter_mut().zip(view.z(j)) {
                        *ph -= w * zj;
                    }
                }
            }
            phi
        })?;
        let mut value = vec![0.0; p];
        for phi in &phis {
            for (v, ph) in value.iter_mut().zip(phi) {
                *v += ph;
            }
        }
        for (v, i) in value.iter_mut().zip(&integral) {
            *v -= i;
        }
        Ok((value, sens))
    }
}
