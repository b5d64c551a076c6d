//! Construction of the minimum transition matrix by the series of recursive
//! convolution integrals.
//!
//! The zeroth term is the pure survival factor
//! `P^(0)_ij(s,t) = δ_ij exp(∫_s^t q_ii)`. Each further term feeds the
//! previous one through the jump kernel
//! `K(s,u)_ik = exp(∫_s^u q_ii) [q(u) + d(u)]_ik`, where `d` cancels the
//! diagonal, and the sum over all orders is the minimal solution. Two
//! recursions exist, one convolving the kernel on the left (fixed end time,
//! field over start nodes) and one on the right (fixed start, field over end
//! nodes); they agree term by term, which downstream checks exploit.
//!
//! All integrals are composite trapezoid on a grid with forced nodes at every
//! declared rate discontinuity; each cell evaluates its own one-sided branch
//! of the rates, so piecewise-smooth integrands keep the O(h²) order. Long
//! horizons are cut into segments with `Λ·len` bounded and composed by the
//! Chapman-Kolmogorov identity, which keeps the series order small and the
//! survival scalings well conditioned.
//!
//! Everything here is a pure function of immutable inputs with a fixed
//! summation order, so repeated runs are bit-identical.

use std::sync::Arc;

use ndarray::{linalg::general_mat_mul, Array2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rates::{
    eval_rates, eval_rates_left, integrate_diagonal, validate_q_matrix, RateModel,
    CALLABLE_VALIDATION_TOL, PC_VALIDATION_TOL,
};

/// Solver parameters for the series construction.
#[derive(Debug, Clone)]
pub struct KernelOptions {
    /// Target quadrature step; cells never exceed it.
    pub h: f64,
    /// Stop once the latest term's sup-norm falls below this and the norms
    /// are decreasing.
    pub series_tol: f64,
    /// Hard cap on the series order per chain segment.
    pub max_order: usize,
    /// Chain segments are cut so that `lambda_max * segment_length` stays at
    /// or below this.
    pub chain_lambda_cap: f64,
    /// Absolute tolerance for diagonal integrals of callable rates.
    pub quad_tol: f64,
}

impl KernelOptions {
    pub fn new(h: f64) -> Self {
        Self {
            h,
            series_tol: 1e-10,
            max_order: 128,
            chain_lambda_cap: 4.0,
            quad_tol: 1e-9,
        }
    }

    fn check(&self) -> Result<()> {
        if !self.h.is_finite() || self.h <= 0.0 {
            return Err(Error::Config(format!("step h must be positive (got {})", self.h)));
        }
        if self.series_tol.is_nan() || self.series_tol <= 0.0 {
            return Err(Error::Config(format!(
                "series tolerance must be positive (got {})",
                self.series_tol
            )));
        }
        if self.max_order == 0 {
            return Err(Error::Config("max_order must be at least 1".into()));
        }
        Ok(())
    }
}

/// Discretization of `[s, t_end]`: near-uniform cells of length at most `h`,
/// with a node forced at every declared rate discontinuity in between.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    step: f64,
}

impl TimeGrid {
    /// Build the grid for `rates` on `[s, t_end]` with target step `h`.
    pub fn build(rates: &RateModel, s: f64, t_end: f64, h: f64) -> Result<Self> {
        if !h.is_finite() || h <= 0.0 {
            return Err(Error::Config(format!("step h must be positive (got {h})")));
        }
        let horizon = rates.horizon();
        if s < 0.0 || t_end > horizon || s > t_end {
            return Err(Error::OutOfHorizon {
                t: if s < 0.0 || s > t_end { s } else { t_end },
                horizon,
            });
        }
        let mut anchors = vec![s];
        for d in rates.discontinuities() {
            if d > s && d < t_end {
                anchors.push(d);
            }
        }
        anchors.push(t_end);

        // relative guard so a ratio like 8.0000000000000007 still yields 8 cells
        let cell_count = |len: f64| -> f64 {
            let ratio = len / h;
            (ratio - 1e-9 * ratio.max(1.0)).ceil().max(1.0)
        };
        let total_cells: f64 = anchors.windows(2).map(|w| cell_count(w[1] - w[0])).sum();
        if total_cells > 5e7 {
            return Err(Error::Config(format!(
                "step {h} would create {total_cells:.0} grid cells; raise h"
            )));
        }

        let mut nodes = vec![s];
        for w in anchors.windows(2) {
            let (a, b) = (w[0], w[1]);
            let cells = cell_count(b - a) as usize;
            for k in 1..=cells {
                let t = if k == cells {
                    b
                } else {
                    a + (b - a) * (k as f64 / cells as f64)
                };
                if t > *nodes.last().unwrap() {
                    nodes.push(t);
                }
            }
        }
        Ok(Self { nodes, step: h })
    }

    /// Grid from explicit nodes; no discontinuity forcing is applied.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::GridMismatch("grid needs at least one node".into()));
        }
        if nodes.windows(2).any(|w| w[1] <= w[0] || w[0].is_nan()) {
            return Err(Error::GridMismatch("grid nodes must be strictly increasing".into()));
        }
        let step = nodes
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0f64, f64::max)
            .max(f64::MIN_POSITIVE);
        Ok(Self { nodes, step })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn start(&self) -> f64 {
        self.nodes[0]
    }

    pub fn end(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// Requested step (cells are this size or smaller).
    pub fn step(&self) -> f64 {
        self.step
    }

    /// Number of cells (one less than the number of nodes).
    pub fn cells(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Index of the node matching `t` (tolerance scaled to the grid step).
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let eps = 1e-9 * self.step.max(1e-300);
        let k = self.nodes.partition_point(|&u| u < t - eps);
        if k < self.nodes.len() && (self.nodes[k] - t).abs() <= eps {
            Ok(k)
        } else {
            Err(Error::OffGrid(t))
        }
    }
}

/// Whether a field's matrices vary in their start or end argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FieldLayout {
    /// `matrices[b] = P(start, node_b)`.
    FixedStart,
    /// `matrices[a] = P(node_a, end)`.
    FixedEnd,
}

/// Transition matrices over a grid, one per node.
#[derive(Debug, Clone)]
pub struct TransitionField {
    pub grid: TimeGrid,
    pub layout: FieldLayout,
    pub matrices: Vec<Array2<f64>>,
}

impl TransitionField {
    pub fn dim(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn at(&self, node: usize) -> &Array2<f64> {
        &self.matrices[node]
    }

    pub fn at_time(&self, t: f64) -> Result<&Array2<f64>> {
        Ok(&self.matrices[self.grid.index_of(t)?])
    }

    pub fn row_sum(&self, node: usize, i: usize) -> f64 {
        self.matrices[node].row(i).sum()
    }

    /// `1 - Σ_j P_ij` at a node, unclamped.
    pub fn defect_raw(&self, node: usize, i: usize) -> f64 {
        1.0 - self.row_sum(node, i)
    }
}

/// One term of the series, on every node of a grid.
#[derive(Debug, Clone)]
pub struct SeriesTerm {
    pub order: usize,
    pub layout: FieldLayout,
    pub values: Vec<Array2<f64>>,
    pub sup_norm: f64,
}

/// Jump-kernel matrices `K(s,u) = exp(∫_s^u q_ii) [q(u)+d(u)]` per cell
/// endpoint. `d` cancels the diagonal, so every entry is nonnegative.
#[derive(Debug, Clone)]
pub struct KernelWeights {
    /// Kernel at the left endpoint of each cell (right-continuous branch).
    pub left: Vec<Array2<f64>>,
    /// Kernel at the right endpoint of each cell (left-limit branch).
    pub right: Vec<Array2<f64>>,
}

/// Materialize the jump kernel on a grid (mostly useful for inspection and
/// invariant tests; the recursions compute the same scalings in place).
pub fn kernel_weights(rates: &RateModel, grid: &TimeGrid, quad_tol: f64) -> Result<KernelWeights> {
    let data = GridData::build(rates, grid.clone(), quad_tol)?;
    let n = rates.dim();
    let mut left = Vec::with_capacity(grid.cells());
    let mut right = Vec::with_capacity(grid.cells());
    for cell in 0..grid.cells() {
        let mut kl = Array2::zeros((n, n));
        offdiag_into(&data.q_left[cell], &mut kl);
        for i in 0..n {
            let scale = (data.cum_diag[[cell, i]] - data.cum_diag[[0, i]]).exp();
            kl.row_mut(i).mapv_inplace(|x| x * scale);
        }
        let mut kr = Array2::zeros((n, n));
        offdiag_into(&data.q_right[cell], &mut kr);
        for i in 0..n {
            let scale = (data.cum_diag[[cell + 1, i]] - data.cum_diag[[0, i]]).exp();
            kr.row_mut(i).mapv_inplace(|x| x * scale);
        }
        left.push(kl);
        right.push(kr);
    }
    Ok(KernelWeights { left, right })
}

/// Convergence record of one [`minimal_solution`] run.
#[derive(Debug, Clone, Serialize)]
pub struct SeriesReport {
    /// Highest series order used on any chain segment.
    pub series_order: usize,
    /// Per-order sup-norms, maximized across chain segments.
    pub term_sup_norms: Vec<f64>,
    /// A-priori factorial bound on everything beyond the truncation:
    /// sum over segments of `Σ_{n>N} (Λ·len)^n / n!`.
    pub tail_bound: f64,
    /// Requested quadrature step.
    pub quad_step: f64,
    /// Rate bound Λ used for chaining and the tail certificate.
    pub lambda_max: f64,
    /// Number of chain segments composed by Chapman-Kolmogorov.
    pub segments: usize,
    /// Largest partial row sum seen while accumulating the series; the
    /// mathematics caps this at 1, quadrature may overshoot slightly.
    pub max_partial_row_sum: f64,
}

/// The computed minimal solution: a transition field plus its convergence
/// certificate.
#[derive(Debug, Clone)]
pub struct MinimalSolution {
    pub field: TransitionField,
    pub report: SeriesReport,
}

/// Defect table of a solution: `1 - Σ_j P_ij` per (node, state).
#[derive(Debug, Clone)]
pub struct DefectReport {
    /// Clamped at zero.
    pub per_node: Array2<f64>,
    /// Raw values, kept for diagnostics (round-off may dip below zero).
    pub per_node_raw: Array2<f64>,
    pub max: f64,
    pub regular: bool,
    pub tol: f64,
}

/// Max residual of an integral-equation check and where it occurred.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub max: f64,
    pub row: usize,
    pub col: usize,
    pub node: usize,
    pub time: f64,
}

/// Per-order discrepancy between the two series recursions, compared at the
/// full interval `(s, t_end)`.
#[derive(Debug, Clone, Serialize)]
pub struct PqEqualityReport {
    pub per_order: Vec<f64>,
    pub max: f64,
}

// ---------------------------------------------------------------------------
// Grid-resident rate data
// ---------------------------------------------------------------------------

/// Rates and cumulative diagonal integrals evaluated on a grid.
///
/// `q_left[c]` is Q at the left endpoint of cell `c` (right-continuous),
/// `q_right[c]` at its right endpoint (left limit), so a cell never mixes
/// branches across a discontinuity. `cum_diag[[a, i]]` is `∫_{s}^{u_a} q_ii`.
struct GridData {
    grid: TimeGrid,
    cum_diag: Array2<f64>,
    q_left: Vec<Arc<Array2<f64>>>,
    q_right: Vec<Arc<Array2<f64>>>,
}

impl GridData {
    fn build(rates: &RateModel, grid: TimeGrid, quad_tol: f64) -> Result<Self> {
        let tol = match rates {
            RateModel::PiecewiseConstant(_) => PC_VALIDATION_TOL,
            RateModel::Callable(_) => CALLABLE_VALIDATION_TOL,
        };
        let report = validate_q_matrix(rates, tol)?;
        if !report.valid {
            let v = &report.violations[0];
            return Err(Error::InvalidRates(format!(
                "{} at t={} (and {} more)",
                v.description,
                v.time,
                report.violations.len() - 1
            )));
        }

        let n = rates.dim();
        let cells = grid.cells();
        let mut q_left = Vec::with_capacity(cells);
        let mut q_right = Vec::with_capacity(cells);
        match rates {
            RateModel::PiecewiseConstant(pc) => {
                let blocks: Vec<Arc<Array2<f64>>> =
                    pc.blocks().iter().cloned().map(Arc::new).collect();
                for c in 0..cells {
                    // forced breakpoints mean one block governs the whole cell
                    q_left.push(Arc::clone(&blocks[pc.block_index(grid.nodes[c])?]));
                    q_right.push(Arc::clone(&blocks[pc.block_index_left(grid.nodes[c + 1])?]));
                }
            }
            RateModel::Callable(_) => {
                // callable evaluations are hard-checked at every node they
                // feed into the quadrature
                let mut violations = Vec::new();
                for c in 0..cells {
                    let left = eval_rates(rates, grid.nodes[c])?;
                    crate::rates::check_matrix(&left, grid.nodes[c], tol, &mut violations);
                    let right = eval_rates_left(rates, grid.nodes[c + 1])?;
                    crate::rates::check_matrix(&right, grid.nodes[c + 1], tol, &mut violations);
                    if let Some(v) = violations.first() {
                        return Err(Error::InvalidRates(format!(
                            "{} at t={}",
                            v.description, v.time
                        )));
                    }
                    q_left.push(Arc::new(left));
                    q_right.push(Arc::new(right));
                }
            }
        }

        let mut cum_diag = Array2::zeros((cells + 1, n));
        match rates {
            RateModel::PiecewiseConstant(_) => {
                for c in 0..cells {
                    let dt = grid.nodes[c + 1] - grid.nodes[c];
                    for i in 0..n {
                        cum_diag[[c + 1, i]] = cum_diag[[c, i]] + dt * q_left[c][[i, i]];
                    }
                }
            }
            RateModel::Callable(_) => {
                let cell_tol = quad_tol / cells.max(1) as f64;
                for c in 0..cells {
                    for i in 0..n {
                        let inc = integrate_diagonal(
                            rates,
                            i,
                            grid.nodes[c],
                            grid.nodes[c + 1],
                            cell_tol,
                        )?;
                        cum_diag[[c + 1, i]] = cum_diag[[c, i]] + inc;
                    }
                }
            }
        }

        Ok(Self {
            grid,
            cum_diag,
            q_left,
            q_right,
        })
    }

    fn dim(&self) -> usize {
        self.cum_diag.ncols()
    }

    /// Survival factors `exp(cum[a] - cum[lo])` per state, and their inverses.
    fn exp_tables(&self, lo: usize, hi: usize) -> (Array2<f64>, Array2<f64>) {
        let n = self.dim();
        let m = hi - lo;
        let mut sexp = Array2::zeros((m + 1, n));
        let mut rexp = Array2::zeros((m + 1, n));
        for a in 0..=m {
            for i in 0..n {
                let rel = self.cum_diag[[lo + a, i]] - self.cum_diag[[lo, i]];
                sexp[[a, i]] = rel.exp();
                rexp[[a, i]] = (-rel).exp();
            }
        }
        (sexp, rexp)
    }
}

fn offdiag_into(q: &Array2<f64>, out: &mut Array2<f64>) {
    let n = q.nrows();
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = if i == j { 0.0 } else { q[[i, j]].max(0.0) };
        }
    }
}

fn sup_norm(values: &[Array2<f64>]) -> f64 {
    values
        .iter()
        .flat_map(|m| m.iter())
        .fold(0.0f64, |acc, &x| acc.max(x.abs()))
}

// ---------------------------------------------------------------------------
// The two recursions (shared by public ops and the chained solver)
// ---------------------------------------------------------------------------

/// Order-zero term on nodes `lo..=hi`.
fn term_zero(data: &GridData, lo: usize, hi: usize, layout: FieldLayout) -> Vec<Array2<f64>> {
    let n = data.dim();
    (lo..=hi)
        .map(|a| {
            let mut m = Array2::zeros((n, n));
            for i in 0..n {
                let integral = match layout {
                    FieldLayout::FixedStart => data.cum_diag[[a, i]] - data.cum_diag[[lo, i]],
                    FieldLayout::FixedEnd => data.cum_diag[[hi, i]] - data.cum_diag[[a, i]],
                };
                m[[i, i]] = integral.exp();
            }
            m
        })
        .collect()
}

/// Fixed-start step: feed the previous term through the kernel on the right.
///
/// `next[b]_ij = exp(I_j(u_b)) · trapz_{lo..b} [prev(u) G(u)]_ij exp(-I_j(u)) du`
/// with `I` relative to node `lo`.
fn term_next_fixed_start(
    data: &GridData,
    lo: usize,
    hi: usize,
    sexp: &Array2<f64>,
    rexp: &Array2<f64>,
    prev: &[Array2<f64>],
) -> Vec<Array2<f64>> {
    let n = data.dim();
    let m = hi - lo;
    let mut values = Vec::with_capacity(m + 1);
    values.push(Array2::zeros((n, n)));
    let mut acc: Array2<f64> = Array2::zeros((n, n));
    let mut gbuf: Array2<f64> = Array2::zeros((n, n));
    for c in 0..m {
        let dt = data.grid.nodes[lo + c + 1] - data.grid.nodes[lo + c];
        let w = 0.5 * dt;
        // left endpoint of the cell, right-continuous branch
        offdiag_into(&data.q_left[lo + c], &mut gbuf);
        for j in 0..n {
            gbuf.column_mut(j).mapv_inplace(|x| x * rexp[[c, j]]);
        }
        general_mat_mul(w, &prev[c], &gbuf, 1.0, &mut acc);
        // right endpoint, left-limit branch
        offdiag_into(&data.q_right[lo + c], &mut gbuf);
        for j in 0..n {
            gbuf.column_mut(j).mapv_inplace(|x| x * rexp[[c + 1, j]]);
        }
        general_mat_mul(w, &prev[c + 1], &gbuf, 1.0, &mut acc);

        let mut out = acc.clone();
        for j in 0..n {
            out.column_mut(j).mapv_inplace(|x| x * sexp[[c + 1, j]]);
        }
        values.push(out);
    }
    values
}

/// Fixed-end step: feed the previous term through the kernel on the left.
///
/// `next[a]_ij = exp(-I_i(u_a)) · trapz_{a..hi} exp(I_i(u)) [G(u) prev(u)]_ij du`.
fn term_next_fixed_end(
    data: &GridData,
    lo: usize,
    hi: usize,
    sexp: &Array2<f64>,
    rexp: &Array2<f64>,
    prev: &[Array2<f64>],
) -> Vec<Array2<f64>> {
    let n = data.dim();
    let m = hi - lo;
    let mut rev = Vec::with_capacity(m + 1);
    rev.push(Array2::zeros((n, n)));
    let mut acc: Array2<f64> = Array2::zeros((n, n));
    let mut gbuf: Array2<f64> = Array2::zeros((n, n));
    for c in (0..m).rev() {
        let dt = data.grid.nodes[lo + c + 1] - data.grid.nodes[lo + c];
        let w = 0.5 * dt;
        offdiag_into(&data.q_left[lo + c], &mut gbuf);
        for i in 0..n {
            gbuf.row_mut(i).mapv_inplace(|x| x * sexp[[c, i]]);
        }
        general_mat_mul(w, &gbuf, &prev[c], 1.0, &mut acc);
        offdiag_into(&data.q_right[lo + c], &mut gbuf);
        for i in 0..n {
            gbuf.row_mut(i).mapv_inplace(|x| x * sexp[[c + 1, i]]);
        }
        general_mat_mul(w, &gbuf, &prev[c + 1], 1.0, &mut acc);

        let mut out = acc.clone();
        for i in 0..n {
            out.row_mut(i).mapv_inplace(|x| x * rexp[[c, i]]);
        }
        rev.push(out);
    }
    rev.reverse();
    rev
}

// ---------------------------------------------------------------------------
// Public series operations (single grid, no chaining)
// ---------------------------------------------------------------------------

/// Survival probability `exp(∫_s^t q_ii)`; always in (0, 1].
pub fn survival(rates: &RateModel, i: usize, s: f64, t: f64) -> Result<f64> {
    if s > t {
        return Err(Error::OutOfHorizon {
            t: s,
            horizon: rates.horizon(),
        });
    }
    Ok(integrate_diagonal(rates, i, s, t, 1e-12)?.exp())
}

/// Order-zero series term on a grid in the requested layout.
pub fn series_term_zero(
    rates: &RateModel,
    grid: &TimeGrid,
    layout: FieldLayout,
    quad_tol: f64,
) -> Result<SeriesTerm> {
    let data = GridData::build(rates, grid.clone(), quad_tol)?;
    let values = term_zero(&data, 0, grid.cells(), layout);
    let sup = sup_norm(&values);
    Ok(SeriesTerm {
        order: 0,
        layout,
        values,
        sup_norm: sup,
    })
}

fn check_prev(prev: &SeriesTerm, grid: &TimeGrid, expected: FieldLayout) -> Result<()> {
    if prev.layout != expected {
        return Err(Error::GridMismatch(format!(
            "previous term has layout {:?}, expected {:?}",
            prev.layout, expected
        )));
    }
    if prev.values.len() != grid.nodes().len() {
        return Err(Error::GridMismatch(format!(
            "previous term has {} nodes, grid has {}",
            prev.values.len(),
            grid.nodes().len()
        )));
    }
    Ok(())
}

/// One step of the kernel-on-the-left recursion (fixed end time, field over
/// start nodes).
pub fn series_term_forward(
    rates: &RateModel,
    prev: &SeriesTerm,
    grid: &TimeGrid,
    quad_tol: f64,
) -> Result<SeriesTerm> {
    check_prev(prev, grid, FieldLayout::FixedEnd)?;
    let data = GridData::build(rates, grid.clone(), quad_tol)?;
    let (sexp, rexp) = data.exp_tables(0, grid.cells());
    let values = term_next_fixed_end(&data, 0, grid.cells(), &sexp, &rexp, &prev.values);
    let sup = sup_norm(&values);
    Ok(SeriesTerm {
        order: prev.order + 1,
        layout: FieldLayout::FixedEnd,
        values,
        sup_norm: sup,
    })
}

/// One step of the kernel-on-the-right recursion (fixed start time, field
/// over end nodes).
pub fn series_term_backward(
    rates: &RateModel,
    prev: &SeriesTerm,
    grid: &TimeGrid,
    quad_tol: f64,
) -> Result<SeriesTerm> {
    check_prev(prev, grid, FieldLayout::FixedStart)?;
    let data = GridData::build(rates, grid.clone(), quad_tol)?;
    let (sexp, rexp) = data.exp_tables(0, grid.cells());
    let values = term_next_fixed_start(&data, 0, grid.cells(), &sexp, &rexp, &prev.values);
    let sup = sup_norm(&values);
    Ok(SeriesTerm {
        order: prev.order + 1,
        layout: FieldLayout::FixedStart,
        values,
        sup_norm: sup,
    })
}

// ---------------------------------------------------------------------------
// Chained solver
// ---------------------------------------------------------------------------

struct SegmentSum {
    values: Vec<Array2<f64>>,
    orders: usize,
    sup_norms: Vec<f64>,
    tail_bound: f64,
    max_partial_row_sum: f64,
}

/// Sum the series on nodes `lo..=hi` in the given layout.
fn sum_segment(
    data: &GridData,
    lo: usize,
    hi: usize,
    layout: FieldLayout,
    lambda: f64,
    opts: &KernelOptions,
) -> Result<SegmentSum> {
    let (sexp, rexp) = data.exp_tables(lo, hi);
    let mut acc = term_zero(data, lo, hi, layout);
    let mut prev = acc.clone();
    let mut sup_norms = vec![sup_norm(&acc)];
    let mut max_row_sum = max_partial_row_sum(&acc);
    let mut order = 0;
    let mut prev_sup = f64::INFINITY;
    loop {
        if order == opts.max_order {
            return Err(Error::NoConvergence {
                order,
                last_norm: *sup_norms.last().unwrap(),
                tol: opts.series_tol,
            });
        }
        let next = match layout {
            FieldLayout::FixedStart => term_next_fixed_start(data, lo, hi, &sexp, &rexp, &prev),
            FieldLayout::FixedEnd => term_next_fixed_end(data, lo, hi, &sexp, &rexp, &prev),
        };
        order += 1;
        let sup = sup_norm(&next);
        sup_norms.push(sup);
        for (a, t) in acc.iter_mut().zip(next.iter()) {
            *a += t;
        }
        max_row_sum = max_row_sum.max(max_partial_row_sum(&acc));
        let done = sup <= opts.series_tol && sup <= prev_sup;
        prev_sup = sup;
        prev = next;
        if done {
            break;
        }
    }
    let span = data.grid.nodes[hi] - data.grid.nodes[lo];
    Ok(SegmentSum {
        values: acc,
        orders: order,
        sup_norms,
        tail_bound: factorial_tail_bound(lambda * span, order),
        max_partial_row_sum: max_row_sum,
    })
}

fn max_partial_row_sum(values: &[Array2<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for m in values {
        for row in m.rows() {
            worst = worst.max(row.sum());
        }
    }
    worst
}

/// Bound on `Σ_{n>order} x^n / n!`, the mass the truncated series can miss.
fn factorial_tail_bound(x: f64, order: usize) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let mut term = 1.0f64;
    let mut n = 0usize;
    while n < order + 1 {
        n += 1;
        term *= x / n as f64;
    }
    // term = x^(order+1)/(order+1)!; extend until the ratio is under 1/2,
    // then close with a geometric bound.
    let mut total = 0.0;
    loop {
        let ratio = x / (n + 1) as f64;
        if ratio < 0.5 {
            return total + term / (1.0 - ratio);
        }
        total += term;
        n += 1;
        term *= x / n as f64;
        if term < 1e-300 {
            return total;
        }
    }
}

/// Chain segment boundaries: node indices such that `Λ·segment ≤ cap`.
fn chain_cuts(grid: &TimeGrid, lambda: f64, cap: f64) -> Vec<usize> {
    let nodes = grid.nodes();
    let last = nodes.len() - 1;
    let mut cuts = vec![0];
    if lambda <= 0.0 || !cap.is_finite() {
        cuts.push(last);
        return cuts;
    }
    let max_len = cap / lambda;
    let mut cur = 0;
    while cur < last {
        let limit = nodes[cur] + max_len;
        let mut next = cur + 1;
        while next < last && nodes[next + 1] <= limit {
            next += 1;
        }
        cuts.push(next);
        cur = next;
    }
    cuts
}

fn merge_reports(
    segs: &[SegmentSum],
    lambda: f64,
    opts: &KernelOptions,
) -> SeriesReport {
    let series_order = segs.iter().map(|s| s.orders).max().unwrap_or(0);
    let max_terms = segs.iter().map(|s| s.sup_norms.len()).max().unwrap_or(0);
    let mut term_sup_norms = vec![0.0f64; max_terms];
    for s in segs {
        for (k, &v) in s.sup_norms.iter().enumerate() {
            term_sup_norms[k] = term_sup_norms[k].max(v);
        }
    }
    SeriesReport {
        series_order,
        term_sup_norms,
        tail_bound: segs.iter().map(|s| s.tail_bound).sum(),
        quad_step: opts.h,
        lambda_max: lambda,
        segments: segs.len(),
        max_partial_row_sum: segs
            .iter()
            .map(|s| s.max_partial_row_sum)
            .fold(0.0, f64::max),
    }
}

/// Construct the minimal solution `P(s, ·)` on `[s, t_end]`.
///
/// The horizon is cut into segments with `Λ·len ≤ chain_lambda_cap`; on each
/// the series is summed until the latest term's sup-norm is below
/// `series_tol` and decreasing, and the segments are composed in time order.
pub fn minimal_solution(
    rates: &RateModel,
    s: f64,
    t_end: f64,
    opts: &KernelOptions,
) -> Result<MinimalSolution> {
    opts.check()?;
    let grid = TimeGrid::build(rates, s, t_end, opts.h)?;
    let data = GridData::build(rates, grid.clone(), opts.quad_tol)?;
    let lambda = rates.lambda_max();
    let cuts = chain_cuts(&grid, lambda, opts.chain_lambda_cap);

    let n = rates.dim();
    let mut matrices: Vec<Array2<f64>> = vec![Array2::eye(n)];
    let mut segs = Vec::new();
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let seg = sum_segment(&data, lo, hi, FieldLayout::FixedStart, lambda, opts)?;
        let left = matrices[lo].clone();
        for (k, sv) in seg.values.iter().enumerate().skip(1) {
            matrices.push(left.dot(sv));
            debug_assert_eq!(matrices.len() - 1, lo + k);
        }
        segs.push(seg);
    }
    let report = merge_reports(&segs, lambda, opts);
    Ok(MinimalSolution {
        field: TransitionField {
            grid,
            layout: FieldLayout::FixedStart,
            matrices,
        },
        report,
    })
}

/// Construct the minimal solution in the varying-start layout
/// `P(node_a, t_end)` for every grid node.
pub fn minimal_solution_varying_start(
    rates: &RateModel,
    s: f64,
    t_end: f64,
    opts: &KernelOptions,
) -> Result<MinimalSolution> {
    opts.check()?;
    let grid = TimeGrid::build(rates, s, t_end, opts.h)?;
    let data = GridData::build(rates, grid.clone(), opts.quad_tol)?;
    let lambda = rates.lambda_max();
    let cuts = chain_cuts(&grid, lambda, opts.chain_lambda_cap);

    let n = rates.dim();
    let total = grid.nodes().len();
    let mut matrices: Vec<Array2<f64>> = vec![Array2::eye(n); total];
    let mut segs = Vec::new();
    for w in cuts.windows(2).rev() {
        let (lo, hi) = (w[0], w[1]);
        let seg = sum_segment(&data, lo, hi, FieldLayout::FixedEnd, lambda, opts)?;
        let right = matrices[hi].clone();
        for (k, sv) in seg.values.iter().enumerate() {
            if lo + k < hi {
                matrices[lo + k] = sv.dot(&right);
            }
        }
        segs.push(seg);
    }
    segs.reverse();
    let report = merge_reports(&segs, lambda, opts);
    Ok(MinimalSolution {
        field: TransitionField {
            grid,
            layout: FieldLayout::FixedEnd,
            matrices,
        },
        report,
    })
}

// ---------------------------------------------------------------------------
// Residuals and the defect
// ---------------------------------------------------------------------------

fn scan_residual(
    field: &TransitionField,
    integral: &[Array2<f64>],
) -> ResidualReport {
    let n = field.dim();
    let mut best = ResidualReport {
        max: 0.0,
        row: 0,
        col: 0,
        node: 0,
        time: field.grid.nodes()[0],
    };
    for (b, (p, int)) in field.matrices.iter().zip(integral.iter()).enumerate() {
        for i in 0..n {
            for j in 0..n {
                let expected = int[[i, j]] + if i == j { 1.0 } else { 0.0 };
                let r = (p[[i, j]] - expected).abs();
                if r > best.max {
                    best = ResidualReport {
                        max: r,
                        row: i,
                        col: j,
                        node: b,
                        time: field.grid.nodes()[b],
                    };
                }
            }
        }
    }
    best
}

/// Residual of the identity `P(s,t) = ∫_s^t P(s,v) Q(v) dv + I`, evaluated
/// with the same trapezoid rule on the solution's own grid.
pub fn forward_residual(rates: &RateModel, sol: &MinimalSolution) -> Result<ResidualReport> {
    let field = &sol.field;
    if field.layout != FieldLayout::FixedStart {
        return Err(Error::GridMismatch(
            "forward residual needs the fixed-start layout".into(),
        ));
    }
    let data = GridData::build(rates, field.grid.clone(), 1e-12)?;
    let n = field.dim();
    let m = field.grid.cells();
    let mut integral = Vec::with_capacity(m + 1);
    integral.push(Array2::zeros((n, n)));
    let mut acc: Array2<f64> = Array2::zeros((n, n));
    for c in 0..m {
        let w = 0.5 * (field.grid.nodes()[c + 1] - field.grid.nodes()[c]);
        general_mat_mul(w, &field.matrices[c], &data.q_left[c], 1.0, &mut acc);
        general_mat_mul(w, &field.matrices[c + 1], &data.q_right[c], 1.0, &mut acc);
        integral.push(acc.clone());
    }
    Ok(scan_residual(field, &integral))
}

/// Residual of the identity `P(s,t) = ∫_s^t Q(v) P(v,t) dv + I` over a
/// varying-start field.
pub fn backward_residual(rates: &RateModel, sol: &MinimalSolution) -> Result<ResidualReport> {
    let field = &sol.field;
    if field.layout != FieldLayout::FixedEnd {
        return Err(Error::GridMismatch(
            "backward residual needs the varying-start layout".into(),
        ));
    }
    let data = GridData::build(rates, field.grid.clone(), 1e-12)?;
    let n = field.dim();
    let m = field.grid.cells();
    let mut integral = vec![Array2::<f64>::zeros((n, n)); m + 1];
    let mut acc: Array2<f64> = Array2::zeros((n, n));
    for c in (0..m).rev() {
        let w = 0.5 * (field.grid.nodes()[c + 1] - field.grid.nodes()[c]);
        general_mat_mul(w, &data.q_left[c], &field.matrices[c], 1.0, &mut acc);
        general_mat_mul(w, &data.q_right[c], &field.matrices[c + 1], 1.0, &mut acc);
        integral[c] = acc.clone();
    }
    Ok(scan_residual(field, &integral))
}

/// Defect table `1 - Σ_j P_ij` per (node, state), clamped at zero in the
/// report and kept raw for diagnostics. `regular` means the maximum defect
/// stays within `tol`.
pub fn regularity_defect(sol: &MinimalSolution, tol: f64) -> DefectReport {
    let field = &sol.field;
    let n = field.dim();
    let nodes = field.matrices.len();
    let mut raw = Array2::zeros((nodes, n));
    let mut clamped = Array2::zeros((nodes, n));
    let mut max = 0.0f64;
    for b in 0..nodes {
        for i in 0..n {
            let d = field.defect_raw(b, i);
            raw[[b, i]] = d;
            let c = d.max(0.0);
            clamped[[b, i]] = c;
            max = max.max(c);
        }
    }
    DefectReport {
        per_node: clamped,
        per_node_raw: raw,
        max,
        regular: max <= tol,
        tol,
    }
}

/// Compute both recursions up to `max_order` on the same grid and report the
/// per-order discrepancy at the endpoints `(s, t_end)`.
pub fn pq_equality_check(
    rates: &RateModel,
    grid: &TimeGrid,
    max_order: usize,
    quad_tol: f64,
) -> Result<PqEqualityReport> {
    let data = GridData::build(rates, grid.clone(), quad_tol)?;
    let hi = grid.cells();
    let (sexp, rexp) = data.exp_tables(0, hi);
    let mut fwd = term_zero(&data, 0, hi, FieldLayout::FixedEnd);
    let mut bwd = term_zero(&data, 0, hi, FieldLayout::FixedStart);
    let mut per_order = Vec::with_capacity(max_order + 1);
    let mut max = 0.0f64;
    for order in 0..=max_order {
        let diff = (&fwd[0] - &bwd[hi])
            .iter()
            .fold(0.0f64, |acc, &x| acc.max(x.abs()));
        per_order.push(diff);
        max = max.max(diff);
        if order < max_order {
            fwd = term_next_fixed_end(&data, 0, hi, &sexp, &rexp, &fwd);
            bwd = term_next_fixed_start(&data, 0, hi, &sexp, &rexp, &bwd);
        }
    }
    Ok(PqEqualityReport { per_order, max })
}
