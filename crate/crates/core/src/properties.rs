//! Numerical checks of the axioms a transition field must satisfy:
//! nonnegativity and substochastic rows, identity at coincident times,
//! vanishing of `P(s,s+h) - I`, the Chapman-Kolmogorov equation, the
//! continuity inequality, the right-derivative match with Q, and the row
//! bound on the rates. All checks are read-only.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{survival, FieldLayout, TransitionField};
use crate::rates::{eval_rates, RateModel};

/// Result of one property check. `passed` holds exactly when
/// `measured <= bound + tolerance`.
#[derive(Debug, Clone, Serialize)]
pub struct PropertyOutcome {
    pub name: String,
    pub passed: bool,
    pub location: String,
    pub measured: f64,
    pub bound: f64,
    pub tolerance: f64,
}

impl PropertyOutcome {
    fn check(name: &str, location: String, measured: f64, bound: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: measured <= bound + tolerance,
            location,
            measured,
            bound,
            tolerance,
        }
    }
}

/// Chapman-Kolmogorov residual at one split.
#[derive(Debug, Clone, Serialize)]
pub struct CkResidual {
    pub max: f64,
    pub row: usize,
    pub col: usize,
}

/// One side-by-side evaluation of the continuity inequality
/// `|P_ij(u,t) - P_ij(v,t)| <= 1 - P_ii(u∧v, u∨v)`.
#[derive(Debug, Clone, Serialize)]
pub struct ContinuityCheck {
    pub holds: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
}

/// Richardson-extrapolated right derivative against the rate entry.
#[derive(Debug, Clone, Serialize)]
pub struct DerivativeCheck {
    pub estimate: f64,
    pub target: f64,
    pub error: f64,
}

/// Check the pretransition axioms on a computed field: nonnegativity, row
/// sums at most one, identity at coincident times, positive diagonal, and
/// first-order vanishing of `P - I` near the diagonal.
pub fn validate_pretransition(field: &TransitionField, tol: f64) -> Vec<PropertyOutcome> {
    let n = field.dim();
    let nodes = field.grid.nodes();
    let mut outcomes = Vec::new();

    // nonnegativity of every entry
    let mut worst = (0.0f64, 0usize, 0usize, 0usize);
    for (b, m) in field.matrices.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                let neg = -m[[i, j]];
                if neg > worst.0 {
                    worst = (neg, b, i, j);
                }
            }
        }
    }
    outcomes.push(PropertyOutcome::check(
        "nonnegativity",
        format!(
            "entry ({},{}) at node {} (t={})",
            worst.2, worst.3, worst.1, nodes[worst.1]
        ),
        worst.0,
        0.0,
        tol,
    ));

    // row sums at most 1
    let mut worst = (f64::NEG_INFINITY, 0usize, 0usize);
    for (b, m) in field.matrices.iter().enumerate() {
        for i in 0..n {
            let s = m.row(i).sum();
            if s > worst.0 {
                worst = (s, b, i);
            }
        }
    }
    outcomes.push(PropertyOutcome::check(
        "row_sums",
        format!("row {} at node {} (t={})", worst.2, worst.1, nodes[worst.1]),
        worst.0,
        1.0,
        tol,
    ));

    // P(s,s) = I (the degenerate node of the layout)
    let at_start = match field.layout {
        FieldLayout::FixedStart => 0,
        FieldLayout::FixedEnd => field.matrices.len() - 1,
    };
    let dev = max_identity_deviation(&field.matrices[at_start]);
    outcomes.push(PropertyOutcome::check(
        "identity_at_coincidence",
        format!("node {at_start} (t={})", nodes[at_start]),
        dev,
        0.0,
        tol,
    ));

    // strictly positive diagonal
    let mut worst = (f64::INFINITY, 0usize, 0usize);
    for (b, m) in field.matrices.iter().enumerate() {
        for i in 0..n {
            if m[[i, i]] < worst.0 {
                worst = (m[[i, i]], b, i);
            }
        }
    }
    outcomes.push(PropertyOutcome::check(
        "diagonal_positivity",
        format!("P_ii for i={} at node {} (t={})", worst.2, worst.1, nodes[worst.1]),
        -worst.0,
        0.0,
        tol,
    ));

    // |P(s,s+h) - I| -> 0 along the smallest grid steps: the deviation at the
    // first step must be consistent with at least first-order decay measured
    // over the first few nodes.
    if field.grid.cells() >= 1 {
        let probes = field.grid.cells().min(4);
        let (m1, h1, mk, hk, t1) = match field.layout {
            FieldLayout::FixedStart => {
                let s = nodes[0];
                (
                    max_identity_deviation(&field.matrices[1]),
                    nodes[1] - s,
                    max_identity_deviation(&field.matrices[probes]),
                    nodes[probes] - s,
                    nodes[1],
                )
            }
            FieldLayout::FixedEnd => {
                let last = field.matrices.len() - 1;
                let t = nodes[last];
                (
                    max_identity_deviation(&field.matrices[last - 1]),
                    t - nodes[last - 1],
                    max_identity_deviation(&field.matrices[last - probes]),
                    t - nodes[last - probes],
                    nodes[last - 1],
                )
            }
        };
        let bound = 2.0 * (h1 / hk) * mk;
        outcomes.push(PropertyOutcome::check(
            "diagonal_continuity",
            format!("first step t={t1} (deviation {m1:.3e}, reference {mk:.3e} at h={hk:.3e})"),
            m1,
            bound,
            tol,
        ));
    }

    outcomes
}

fn max_identity_deviation(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let d = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((m[[i, j]] - d).abs());
        }
    }
    worst
}

/// `max_ij |P(s,t) - P(s,u)·P(u,t)|` from the three matrices.
pub fn ck_residual(
    p_su: &Array2<f64>,
    p_ut: &Array2<f64>,
    p_st: &Array2<f64>,
) -> Result<CkResidual> {
    let n = p_st.nrows();
    if p_su.nrows() != n || p_su.ncols() != n || p_ut.nrows() != n || p_ut.ncols() != n {
        return Err(Error::DimensionMismatch(
            "Chapman-Kolmogorov factors must share the field dimension".into(),
        ));
    }
    let composed = p_su.dot(p_ut);
    let mut best = CkResidual {
        max: 0.0,
        row: 0,
        col: 0,
    };
    for i in 0..n {
        for j in 0..n {
            let r = (p_st[[i, j]] - composed[[i, j]]).abs();
            if r > best.max {
                best = CkResidual { max: r, row: i, col: j };
            }
        }
    }
    Ok(best)
}

/// Chapman-Kolmogorov check specified by grid times: `field_s` supplies
/// `P(s,u)` and `P(s,t)`, `field_u` (a field started at `u`) supplies `P(u,t)`.
pub fn ck_residual_on(
    field_s: &TransitionField,
    field_u: &TransitionField,
    u: f64,
    t: f64,
) -> Result<CkResidual> {
    if (field_u.grid.start() - u).abs() > 1e-9 * field_s.grid.step().max(1e-300) {
        return Err(Error::GridMismatch(format!(
            "intermediate field starts at {} but the split is at {u}",
            field_u.grid.start()
        )));
    }
    ck_residual(
        field_s.at_time(u)?,
        field_u.at_time(t)?,
        field_s.at_time(t)?,
    )
}

/// Continuity inequality in the start argument: the shift of any entry is
/// bounded by one minus the short-interval diagonal.
pub fn continuity_inequality(
    p_ut: &Array2<f64>,
    p_vt: &Array2<f64>,
    p_uv_short: &Array2<f64>,
    i: usize,
    j: usize,
    tol: f64,
) -> ContinuityCheck {
    let lhs = (p_ut[[i, j]] - p_vt[[i, j]]).abs();
    let rhs = 1.0 - p_uv_short[[i, i]];
    ContinuityCheck {
        holds: lhs <= rhs + tol,
        lhs,
        rhs,
        slack: rhs - lhs,
    }
}

/// Estimate `lim (P_ij(s,s+h) - δ_ij)/h` by Richardson extrapolation over the
/// given decreasing step list and compare it with `q_ij(s)`.
///
/// `field` must be a fixed-start field whose start is `s` and whose grid
/// contains `s + h` for every step; `s` must not be a declared discontinuity.
pub fn derivative_at_diagonal(
    field: &TransitionField,
    rates: &RateModel,
    i: usize,
    j: usize,
    steps: &[f64],
) -> Result<DerivativeCheck> {
    if field.layout != FieldLayout::FixedStart {
        return Err(Error::GridMismatch(
            "derivative check needs a fixed-start field".into(),
        ));
    }
    if steps.is_empty() {
        return Err(Error::Config("derivative check needs at least one step".into()));
    }
    let s = field.grid.start();
    for d in rates.discontinuities() {
        if (d - s).abs() <= 1e-12 * s.abs().max(1.0) {
            return Err(Error::AtDiscontinuity(s));
        }
    }
    let delta = if i == j { 1.0 } else { 0.0 };
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(steps.len());
    for &h in steps {
        let p = field.at_time(s + h)?;
        points.push((h, (p[[i, j]] - delta) / h));
    }
    let estimate = neville_at_zero(&points);
    let target = eval_rates(rates, s)?[[i, j]];
    Ok(DerivativeCheck {
        estimate,
        target,
        error: (estimate - target).abs(),
    })
}

/// Polynomial extrapolation of `(h, value)` samples to `h = 0`.
fn neville_at_zero(points: &[(f64, f64)]) -> f64 {
    let mut vals: Vec<f64> = points.iter().map(|&(_, v)| v).collect();
    let hs: Vec<f64> = points.iter().map(|&(h, _)| h).collect();
    let k = vals.len();
    for level in 1..k {
        for idx in 0..k - level {
            let h0 = hs[idx];
            let h1 = hs[idx + level];
            vals[idx] = (h0 * vals[idx + 1] - h1 * vals[idx]) / (h0 - h1);
        }
    }
    vals[0]
}

/// Verify `Σ_{j≠i} q_ij(s) <= -q_ii(s)` for every row; a restatement of the
/// row-sum constraint, so it must pass for any validated matrix.
pub fn rate_row_bound(rates: &RateModel, s: f64, tol: f64) -> Result<PropertyOutcome> {
    let q = eval_rates(rates, s)?;
    let n = q.nrows();
    let mut worst = (f64::NEG_INFINITY, 0usize);
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| q[[i, j]]).sum();
        let excess = off + q[[i, i]];
        if excess > worst.0 {
            worst = (excess, i);
        }
    }
    Ok(PropertyOutcome::check(
        "rate_row_bound",
        format!("row {} at t={s}", worst.1),
        worst.0,
        0.0,
        tol,
    ))
}

/// Grid-neighbor continuity: consecutive field matrices may differ at most by
/// one minus the smallest short-interval survival, per the continuity
/// inequality with the zeroth series term as the diagonal's lower bound.
pub fn step_continuity(
    field: &TransitionField,
    rates: &RateModel,
    tol: f64,
) -> Result<PropertyOutcome> {
    let nodes = field.grid.nodes();
    let n = field.dim();
    let mut worst_margin = (f64::NEG_INFINITY, 0usize, 0.0, 0.0);
    for c in 0..field.grid.cells() {
        let mut shift = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                shift = shift.max((field.matrices[c + 1][[i, j]] - field.matrices[c][[i, j]]).abs());
            }
        }
        let mut min_survival = f64::INFINITY;
        for k in 0..n {
            min_survival = min_survival.min(survival(rates, k, nodes[c], nodes[c + 1])?);
        }
        let bound = 1.0 - min_survival;
        if shift - bound > worst_margin.0 {
            worst_margin = (shift - bound, c, shift, bound);
        }
    }
    let (margin, cell, shift, bound) = worst_margin;
    let measured = if margin.is_finite() { shift } else { 0.0 };
    let bound = if margin.is_finite() { bound } else { 0.0 };
    Ok(PropertyOutcome::check(
        "step_continuity",
        format!("cell {cell} (shift {shift:.3e} vs bound {bound:.3e})"),
        measured,
        bound,
        tol,
    ))
}
