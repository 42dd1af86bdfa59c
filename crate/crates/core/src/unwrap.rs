//! Phase unwrapping.
//!
//! The default path is minimum-cost-flow (MCF) unwrapping on the dual grid:
//! every 2×2 pixel loop is a node whose supply is its residue charge, every
//! pixel-to-pixel edge is a pair of opposite arcs between the two loops it
//! separates (or a loop and the outer boundary node), and a unit of flow
//! across an edge adds one 2π cycle to that edge's wrapped gradient. The
//! integer flow of minimum total cost removes all residues, after which the
//! corrected gradients integrate path-independently.
//!
//! A quality-guided region grower is kept as a fallback and cross-check.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::f64::consts::TAU;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase::wrap;
use crate::raster::{GridMeta, RasterKind, RealRaster};

/// Coherence-to-cost quantization constant.
pub const COST_SCALE: f64 = 100.0;

/// Default coherence below which pixels are excluded before unwrapping.
pub const DEFAULT_COHERENCE_MASK: f64 = 0.3;

/// Residue charges of the `(height-1) × (width-1)` elementary loops.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidueMap {
    pub meta: GridMeta,
    pub rows: usize,
    pub cols: usize,
    pub charges: Vec<i8>,
    /// Loops touching a masked pixel have no defined charge.
    pub undefined: Vec<bool>,
}

impl ResidueMap {
    #[inline]
    pub fn charge(&self, row: usize, col: usize) -> i8 {
        self.charges[row * self.cols + col]
    }

    pub fn count(&self) -> usize {
        self.charges.iter().filter(|q| **q != 0).count()
    }

    pub fn net_charge(&self) -> i64 {
        self.charges.iter().map(|&q| q as i64).sum()
    }
}

/// Wrapped loop sum of one 2×2 cell in units of 2π.
#[inline]
fn loop_charge(a: f64, b: f64, c: f64, d: f64) -> i8 {
    // a = (r, c), b = (r, c+1), c = (r+1, c+1), d = (r+1, c)
    let s = wrap(b - a) + wrap(c - b) + wrap(d - c) + wrap(a - d);
    (s / TAU).round() as i8
}

pub fn compute_residues(phase: &RealRaster) -> ResidueMap {
    let meta = phase.meta;
    let (w, h) = (meta.width, meta.height);
    let rows = h.saturating_sub(1);
    let cols = w.saturating_sub(1);
    let mut charges = vec![0i8; rows * cols];
    let mut undefined = vec![false; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let idx = [r * w + c, r * w + c + 1, (r + 1) * w + c + 1, (r + 1) * w + c];
            let k = r * cols + c;
            if idx.iter().any(|&i| phase.mask[i]) {
                undefined[k] = true;
                continue;
            }
            let [a, b, cc, d] = idx.map(|i| phase.data[i]);
            charges[k] = loop_charge(a, b, cc, d);
        }
    }
    ResidueMap {
        meta,
        rows,
        cols,
        charges,
        undefined,
    }
}

/// A directed arc of the dual network. `edge` names the pixel edge it
/// crosses; `forward` tells whether the arc runs from the loop where that
/// edge is traversed positively.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowArc {
    pub from: usize,
    pub to: usize,
    pub cost: i64,
    pub edge: usize,
    pub forward: bool,
}

/// Uncapacitated min-cost-flow instance. The last node is the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowProblem {
    pub node_count: usize,
    pub arcs: Vec<FlowArc>,
    pub supplies: Vec<i64>,
}

impl FlowProblem {
    pub fn boundary(&self) -> usize {
        self.node_count - 1
    }

    pub fn cost_of(&self, flows: &[i64]) -> i64 {
        self.arcs.iter().zip(flows).map(|(a, f)| a.cost * f).sum()
    }
}

/// Pixel edges of a grid: horizontal edges `(r, c)-(r, c+1)` first, then
/// vertical edges `(r, c)-(r+1, c)`.
#[derive(Debug, Clone, Copy)]
struct EdgeLayout {
    w: usize,
    h: usize,
}

impl EdgeLayout {
    fn horizontal_count(&self) -> usize {
        self.h * (self.w - 1)
    }

    fn count(&self) -> usize {
        self.horizontal_count() + (self.h - 1) * self.w
    }

    /// The two pixel indices joined by an edge, in gradient order.
    fn pixels(&self, e: usize) -> (usize, usize) {
        let nh = self.horizontal_count();
        if e < nh {
            let (r, c) = (e / (self.w - 1), e % (self.w - 1));
            (r * self.w + c, r * self.w + c + 1)
        } else {
            let e = e - nh;
            let (r, c) = (e / self.w, e % self.w);
            (r * self.w + c, (r + 1) * self.w + c)
        }
    }

    /// Dual nodes `(positive side, negative side)` of an edge: the loop that
    /// traverses it along its gradient and the loop that traverses it back.
    fn dual_nodes(&self, e: usize, boundary: usize) -> (usize, usize) {
        let cols = self.w - 1;
        let nh = self.horizontal_count();
        if e < nh {
            let (r, c) = (e / (self.w - 1), e % (self.w - 1));
            let below = if r + 1 < self.h { r * cols + c } else { boundary };
            let above = if r > 0 { (r - 1) * cols + c } else { boundary };
            (below, above)
        } else {
            let e = e - nh;
            let (r, c) = (e / self.w, e % self.w);
            let left = if c > 0 { r * cols + c - 1 } else { boundary };
            let right = if c + 1 < self.w { r * cols + c } else { boundary };
            (left, right)
        }
    }
}

/// Arc cost from the mean coherence of the two pixels an arc crosses.
#[inline]
pub fn coherence_cost(gamma_edge: f64) -> i64 {
    (COST_SCALE * (1.0 - gamma_edge.clamp(0.0, 1.0))).round() as i64 + 1
}

/// Builds the dual network. Interior arcs cost `round(K·(1-γ_edge)) + 1`;
/// arcs to the boundary node cost 1. Masked coherence counts as 0.
pub fn build_flow(res: &ResidueMap, coherence: &RealRaster) -> Result<FlowProblem> {
    res.meta.ensure_compatible(&coherence.meta)?;
    let (w, h) = (res.meta.width, res.meta.height);
    if w < 2 || h < 2 {
        return Err(Error::InvalidInput("unwrapping needs at least a 2x2 grid".into()));
    }
    let layout = EdgeLayout { w, h };
    let cells = res.rows * res.cols;
    let boundary = cells;
    let gamma = |i: usize| if coherence.mask[i] { 0.0 } else { coherence.data[i] };

    let mut arcs = Vec::with_capacity(layout.count() * 2);
    for e in 0..layout.count() {
        let (pos, neg) = layout.dual_nodes(e, boundary);
        let cost = if pos == boundary || neg == boundary {
            1
        } else {
            let (p, q) = layout.pixels(e);
            coherence_cost(0.5 * (gamma(p) + gamma(q)))
        };
        arcs.push(FlowArc {
            from: pos,
            to: neg,
            cost,
            edge: e,
            forward: true,
        });
        arcs.push(FlowArc {
            from: neg,
            to: pos,
            cost,
            edge: e,
            forward: false,
        });
    }

    let mut supplies: Vec<i64> = res.charges.iter().map(|&q| q as i64).collect();
    supplies.push(-res.net_charge());
    Ok(FlowProblem {
        node_count: cells + 1,
        arcs,
        supplies,
    })
}

/// Solves an uncapacitated min-cost flow by successive shortest paths.
///
/// Dijkstra runs on reduced costs against node potentials, from every node
/// with remaining excess at once, and stops at the first node with
/// remaining deficit. Returns one nonnegative integer flow per arc.
pub fn solve_mcf(fp: &FlowProblem) -> Result<Vec<i64>> {
    let n = fp.node_count;
    if fp.supplies.len() != n {
        return Err(Error::InvalidInput(
            "supply vector length differs from node count".into(),
        ));
    }
    let total: i64 = fp.supplies.iter().sum();
    if total != 0 {
        return Err(Error::UnbalancedFlow(total));
    }
    if let Some(a) = fp.arcs.iter().find(|a| a.cost < 0 || a.from >= n || a.to >= n) {
        return Err(Error::InvalidInput(format!("invalid arc {a:?}")));
    }

    // residual adjacency: (arc index, traversed forward)
    let mut adj: Vec<Vec<(usize, bool)>> = vec![Vec::new(); n];
    for (k, a) in fp.arcs.iter().enumerate() {
        adj[a.from].push((k, true));
        adj[a.to].push((k, false));
    }

    let mut flow = vec![0i64; fp.arcs.len()];
    let mut excess = fp.supplies.clone();
    let mut potential = vec![0i64; n];
    let mut dist = vec![i64::MAX; n];
    let mut parent: Vec<Option<(usize, bool)>> = vec![None; n];
    let mut settled = vec![false; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut order: Vec<usize> = Vec::new();

    loop {
        let sources: Vec<usize> = (0..n).filter(|&v| excess[v] > 0).collect();
        if sources.is_empty() {
            break;
        }
        for &v in &touched {
            dist[v] = i64::MAX;
            parent[v] = None;
            settled[v] = false;
        }
        touched.clear();
        order.clear();

        let mut heap = BinaryHeap::new();
        for &s in &sources {
            dist[s] = 0;
            touched.push(s);
            heap.push(Reverse((0i64, s)));
        }
        let mut sink = None;
        while let Some(Reverse((d, u))) = heap.pop() {
            if settled[u] || d > dist[u] {
                continue;
            }
            settled[u] = true;
            order.push(u);
            if excess[u] < 0 {
                sink = Some(u);
                break;
            }
            for &(k, fwd) in &adj[u] {
                let a = &fp.arcs[k];
                let (v, cost) = if fwd {
                    (a.to, a.cost)
                } else if flow[k] > 0 {
                    (a.from, -a.cost)
                } else {
                    continue;
                };
                if settled[v] {
                    continue;
                }
                let nd = d + cost + potential[u] - potential[v];
                if nd < dist[v] {
                    if dist[v] == i64::MAX {
                        touched.push(v);
                    }
                    dist[v] = nd;
                    parent[v] = Some((k, fwd));
                    heap.push(Reverse((nd, v)));
                }
            }
        }
        let t = sink.ok_or_else(|| Error::InvalidInput("flow network is disconnected".into()))?;
        let dt = dist[t];
        for &v in &order {
            potential[v] -= dt - dist[v];
        }

        // bottleneck: remaining excess at the path start, deficit at t, and
        // flow available on reversed arcs
        let mut amount = -excess[t];
        let mut v = t;
        while let Some((k, fwd)) = parent[v] {
            let a = &fp.arcs[k];
            if fwd {
                v = a.from;
            } else {
                amount = amount.min(flow[k]);
                v = a.to;
            }
        }
        amount = amount.min(excess[v]);
        let source = v;

        let mut v = t;
        while let Some((k, fwd)) = parent[v] {
            let a = &fp.arcs[k];
            if fwd {
                flow[k] += amount;
                v = a.from;
            } else {
                flow[k] -= amount;
                v = a.to;
            }
        }
        excess[source] -= amount;
        excess[t] += amount;
    }
    Ok(flow)
}

/// Number of 2π cycles each pixel edge gains from a flow solution.
fn edge_cycles(layout: &EdgeLayout, fp: &FlowProblem, flows: &[i64]) -> Result<Vec<i64>> {
    if flows.len() != fp.arcs.len() {
        return Err(Error::InvalidInput("flow vector length differs from arc count".into()));
    }
    let mut cycles = vec![0i64; layout.count()];
    for (a, &f) in fp.arcs.iter().zip(flows) {
        if a.edge >= cycles.len() {
            return Err(Error::InvalidInput("arc references an edge outside the grid".into()));
        }
        cycles[a.edge] += if a.forward { -f } else { f };
    }
    Ok(cycles)
}

/// Residues of the gradient field after the flow correction, with masked
/// pixels read as phase 0. All zeros for a feasible flow.
pub fn corrected_residues(phase: &RealRaster, fp: &FlowProblem, flows: &[i64]) -> Result<ResidueMap> {
    let meta = phase.meta;
    let (w, h) = (meta.width, meta.height);
    if w < 2 || h < 2 {
        return Err(Error::InvalidInput("unwrapping needs at least a 2x2 grid".into()));
    }
    let layout = EdgeLayout { w, h };
    let cycles = edge_cycles(&layout, fp, flows)?;
    let phi = filled_phase(phase);
    let grad = |e: usize| {
        let (p, q) = layout.pixels(e);
        wrap(phi[q] - phi[p]) + TAU * cycles[e] as f64
    };
    let (rows, cols) = (h - 1, w - 1);
    let nh = layout.horizontal_count();
    let charges = (0..rows * cols)
        .map(|k| {
            let (r, c) = (k / cols, k % cols);
            let s = grad(r * cols + c) + grad(nh + r * w + c + 1) - grad((r + 1) * cols + c) - grad(nh + r * w + c);
            (s / TAU).round() as i8
        })
        .collect();
    Ok(ResidueMap {
        meta,
        rows,
        cols,
        charges,
        undefined: vec![false; rows * cols],
    })
}

fn filled_phase(phase: &RealRaster) -> Vec<f64> {
    phase
        .data
        .iter()
        .zip(&phase.mask)
        .map(|(&v, &m)| if m { 0.0 } else { v })
        .collect()
}

/// Integrates gradients corrected by the MCF solution.
///
/// Masked pixels are treated as phase 0 (the same convention used by
/// [`unwrap_mcf`] when building the network), so the corrected field is
/// curl-free over the whole grid and any integration path gives the same
/// result. The output is `wrapped + 2π·n` with integer `n` per pixel.
pub fn integrate_unwrapped(phase: &RealRaster, fp: &FlowProblem, flows: &[i64]) -> Result<RealRaster> {
    let meta = phase.meta;
    let (w, h) = (meta.width, meta.height);
    if phase.valid_count() == 0 {
        return Err(Error::NoSeed);
    }
    if w < 2 || h < 2 {
        return Err(Error::InvalidInput("unwrapping needs at least a 2x2 grid".into()));
    }
    let layout = EdgeLayout { w, h };
    let cycles = edge_cycles(&layout, fp, flows)?;
    let phi = filled_phase(phase);
    // per pixel: list of (neighbor, integer jump)
    let mut jumps = vec![0i64; layout.count()];
    for (e, jump) in jumps.iter_mut().enumerate() {
        let (p, q) = layout.pixels(e);
        let raw = phi[q] - phi[p];
        *jump = ((wrap(raw) - raw) / TAU).round() as i64 + cycles[e];
    }

    let seed = phase.mask.iter().position(|m| !m).ok_or(Error::NoSeed)?;
    let mut turns = vec![i64::MIN; w * h];
    turns[seed] = 0;
    let mut queue = VecDeque::from([seed]);
    let nh = layout.horizontal_count();
    while let Some(p) = queue.pop_front() {
        let (r, c) = (p / w, p % w);
        let mut visit = |q: usize, delta: i64| {
            if turns[q] == i64::MIN {
                turns[q] = turns[p] + delta;
                queue.push_back(q);
            }
        };
        if c + 1 < w {
            visit(p + 1, jumps[r * (w - 1) + c]);
        }
        if c > 0 {
            visit(p - 1, -jumps[r * (w - 1) + c - 1]);
        }
        if r + 1 < h {
            visit(p + w, jumps[nh + r * w + c]);
        }
        if r > 0 {
            visit(p - w, -jumps[nh + (r - 1) * w + c]);
        }
    }

    let data = phi
        .iter()
        .zip(&turns)
        .zip(&phase.mask)
        .map(|((&v, &n), &m)| if m { f64::NAN } else { v + TAU * n as f64 })
        .collect();
    RealRaster::new(meta, RasterKind::Phase, data)
}

/// Masks pixels whose coherence is below `threshold` (or masked).
pub fn apply_coherence_mask(phase: &RealRaster, coherence: &RealRaster, threshold: f64) -> Result<RealRaster> {
    phase.meta.ensure_compatible(&coherence.meta)?;
    let mut out = phase.clone();
    for i in 0..out.data.len() {
        if coherence.mask[i] || coherence.data[i] < threshold {
            out.set_masked(i);
        }
    }
    Ok(out)
}

/// Full MCF path on an already masked phase raster.
pub fn unwrap_mcf(phase: &RealRaster, coherence: &RealRaster) -> Result<RealRaster> {
    phase.meta.ensure_compatible(&coherence.meta)?;
    if phase.valid_count() == 0 {
        return Err(Error::NoSeed);
    }
    let mut filled = phase.clone();
    filled.data = filled_phase(phase);
    filled.mask = vec![false; phase.data.len()];
    let res = compute_residues(&filled);
    let fp = build_flow(&res, coherence)?;
    let flows = solve_mcf(&fp)?;
    integrate_unwrapped(phase, &fp, &flows)
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct Frontier {
    quality: u64,
    tiebreak: Reverse<usize>,
    pixel: usize,
    from: usize,
}

/// Region growing from the highest-coherence pixel, always unwrapping the
/// best-quality frontier pixel next. Disconnected regions are reseeded from
/// their own best pixel.
pub fn unwrap_quality_guided(phase: &RealRaster, coherence: &RealRaster) -> Result<RealRaster> {
    let meta = phase.meta;
    meta.ensure_compatible(&coherence.meta)?;
    let (w, h) = (meta.width, meta.height);
    // nonnegative finite f64 order matches its bit pattern order
    let quality = |i: usize| {
        let g = if coherence.mask[i] {
            0.0
        } else {
            coherence.data[i].max(0.0)
        };
        g.to_bits()
    };
    let mut seeds: Vec<usize> = (0..w * h).filter(|&i| !phase.mask[i]).collect();
    if seeds.is_empty() {
        return Err(Error::NoSeed);
    }
    seeds.sort_by_key(|&i| (Reverse(quality(i)), i));

    let mut out = vec![f64::NAN; w * h];
    let mut done = vec![false; w * h];
    let mut heap = BinaryHeap::new();
    for seed in seeds {
        if done[seed] {
            continue;
        }
        done[seed] = true;
        out[seed] = phase.data[seed];
        heap.push(Frontier {
            quality: u64::MAX,
            tiebreak: Reverse(seed),
            pixel: seed,
            from: seed,
        });
        while let Some(Frontier { pixel, from, .. }) = heap.pop() {
            if pixel != from {
                if done[pixel] {
                    continue;
                }
                done[pixel] = true;
                let n = ((out[from] - phase.data[pixel]) / TAU).round();
                out[pixel] = phase.data[pixel] + TAU * n;
            }
            let (r, c) = (pixel / w, pixel % w);
            let neighbors = [
                (c + 1 < w).then(|| pixel + 1),
                (c > 0).then(|| pixel - 1),
                (r + 1 < h).then(|| pixel + w),
                (r > 0).then(|| pixel - w),
            ];
            for q in neighbors.into_iter().flatten() {
                if !done[q] && !phase.mask[q] {
                    heap.push(Frontier {
                        quality: quality(q),
                        tiebreak: Reverse(q),
                        pixel: q,
                        from: pixel,
                    });
                }
            }
        }
    }
    RealRaster::new(meta, RasterKind::Phase, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnwrapMethod {
    Mcf,
    Quality,
}

impl FromStr for UnwrapMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcf" => Ok(UnwrapMethod::Mcf),
            "quality" => Ok(UnwrapMethod::Quality),
            other => Err(Error::InvalidInput(format!("unknown unwrap method {other}"))),
        }
    }
}

/// Coherence masking followed by the selected unwrapper. Pixels dropped by
/// the mask are reported as gaps in the output.
pub fn unwrap(phase: &RealRaster, coherence: &RealRaster, method: UnwrapMethod, coh_mask: f64) -> Result<RealRaster> {
    let masked = apply_coherence_mask(phase, coherence, coh_mask)?;
    match method {
        UnwrapMethod::Mcf => unwrap_mcf(&masked, coherence),
        UnwrapMethod::Quality => unwrap_quality_guided(&masked, coherence),
    }
}
