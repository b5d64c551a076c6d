//! Nonhomogeneous rate matrices Q(t) on a finite state window.
//!
//! A valid rate matrix has nonnegative off-diagonals, nonpositive finite
//! diagonals and row sums ≤ 0. Row sums strictly below zero mean the chain
//! loses mass (killing); truncating a countable chain to a finite window
//! produces exactly this kind of non-conservative matrix, which the rest of
//! the crate treats as a first-class input.
//!
//! Evaluation in time is right-continuous: a piecewise-constant matrix takes
//! the value of block `k` on `[t_k, t_{k+1})`.

use std::fmt;
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Default validation tolerance for piecewise-constant blocks (exact
/// arithmetic expected).
pub const PC_VALIDATION_TOL: f64 = 1e-12;
/// Default validation tolerance for sampled callable rates.
pub const CALLABLE_VALIDATION_TOL: f64 = 1e-9;

/// Finite, ordered window of state labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    labels: Vec<String>,
}

impl StateSpace {
    /// Build a state space from distinct labels. At least one label is required.
    pub fn new<S: Into<String>>(labels: Vec<S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::InvalidRates("state space must be non-empty".into()));
        }
        for (i, a) in labels.iter().enumerate() {
            if labels[..i].contains(a) {
                return Err(Error::InvalidRates(format!("duplicate state label {a:?}")));
            }
        }
        Ok(Self { labels })
    }

    /// State space `0, 1, ..., n-1`.
    pub fn indexed(n: usize) -> Self {
        Self {
            labels: (0..n.max(1)).map(|i| i.to_string()).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Q(t) given as constant blocks between strictly increasing breakpoints
/// `0 = t_0 < t_1 < ... < t_m`; block `k` holds on `[t_k, t_{k+1})`.
#[derive(Debug, Clone)]
pub struct PiecewiseConstantRates {
    pub space: StateSpace,
    breakpoints: Vec<f64>,
    blocks: Vec<Array2<f64>>,
}

impl PiecewiseConstantRates {
    /// Structural construction: matching dimensions and sorted breakpoints.
    /// Sign and row-sum constraints are the job of [`validate_q_matrix`].
    pub fn new(space: StateSpace, breakpoints: Vec<f64>, blocks: Vec<Array2<f64>>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(Error::InvalidRates(
                "need at least two breakpoints (start and horizon)".into(),
            ));
        }
        if breakpoints[0] != 0.0 {
            return Err(Error::InvalidRates(format!(
                "breakpoints must start at 0 (got {})",
                breakpoints[0]
            )));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0] || w[0].is_nan()) {
            return Err(Error::InvalidRates(
                "breakpoints must be strictly increasing".into(),
            ));
        }
        if !breakpoints.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidRates("breakpoints must be finite".into()));
        }
        if blocks.len() != breakpoints.len() - 1 {
            return Err(Error::DimensionMismatch(format!(
                "{} blocks for {} intervals",
                blocks.len(),
                breakpoints.len() - 1
            )));
        }
        let n = space.size();
        for (k, b) in blocks.iter().enumerate() {
            if b.nrows() != n || b.ncols() != n {
                return Err(Error::DimensionMismatch(format!(
                    "block {k} is {}x{}, state space has {n} states",
                    b.nrows(),
                    b.ncols()
                )));
            }
            if b.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidRates(format!(
                    "block {k} contains non-finite entries"
                )));
            }
        }
        Ok(Self {
            space,
            breakpoints,
            blocks,
        })
    }

    /// Single constant block on `[0, horizon]`.
    pub fn constant(space: StateSpace, q: Array2<f64>, horizon: f64) -> Result<Self> {
        Self::new(space, vec![0.0, horizon], vec![q])
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn blocks(&self) -> &[Array2<f64>] {
        &self.blocks
    }

    /// Index of the block governing time `t` (right-continuous; the horizon
    /// itself maps to the last block).
    pub fn block_index(&self, t: f64) -> Result<usize> {
        if t < 0.0 || t > self.horizon() {
            return Err(Error::OutOfHorizon {
                t,
                horizon: self.horizon(),
            });
        }
        // partition_point: first breakpoint strictly greater than t
        let k = self.breakpoints.partition_point(|&b| b <= t);
        Ok(k.saturating_sub(1).min(self.blocks.len() - 1))
    }

    /// Block governing the left limit at `t`: at an interior breakpoint this
    /// is the preceding block, elsewhere it coincides with `block_index`.
    pub fn block_index_left(&self, t: f64) -> Result<usize> {
        let k = self.block_index(t)?;
        if k > 0 && self.breakpoints[k] == t {
            Ok(k - 1)
        } else {
            Ok(k)
        }
    }
}

/// Q(t) given as an arbitrary evaluation function with declared
/// discontinuities and a bound on the diagonal.
///
/// `eval` must be pure: same `t`, same matrix, no observable side effects.
/// The declared `discontinuities` and `diag_bound` stand in for the
/// measurability-and-integrability hypothesis: together they guarantee the
/// diagonal is integrable on every compact interval of the horizon.
#[derive(Clone)]
pub struct CallableRates {
    pub space: StateSpace,
    eval: Arc<dyn Fn(f64) -> Array2<f64> + Send + Sync>,
    discontinuities: Vec<f64>,
    pub diag_bound: f64,
    horizon: f64,
}

impl CallableRates {
    pub fn new(
        space: StateSpace,
        eval: Arc<dyn Fn(f64) -> Array2<f64> + Send + Sync>,
        mut discontinuities: Vec<f64>,
        diag_bound: f64,
        horizon: f64,
    ) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::InvalidRates(format!(
                "horizon must be positive and finite (got {horizon})"
            )));
        }
        if !diag_bound.is_finite() || diag_bound < 0.0 {
            return Err(Error::InvalidRates(format!(
                "diagonal bound must be finite and nonnegative (got {diag_bound})"
            )));
        }
        discontinuities.retain(|&t| t > 0.0 && t < horizon);
        discontinuities.sort_by(|a, b| a.partial_cmp(b).unwrap());
        discontinuities.dedup();
        let n = space.size();
        let probe = (eval)(0.0);
        if probe.nrows() != n || probe.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "eval returns {}x{}, state space has {n} states",
                probe.nrows(),
                probe.ncols()
            )));
        }
        Ok(Self {
            space,
            eval,
            discontinuities,
            diag_bound,
            horizon,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn discontinuities(&self) -> &[f64] {
        &self.discontinuities
    }

    fn eval_at(&self, t: f64) -> Array2<f64> {
        (self.eval)(t)
    }

    /// Evaluate the left limit at `t` by nudging off a declared discontinuity.
    fn eval_left_at(&self, t: f64) -> Array2<f64> {
        if self.discontinuities.binary_search_by(|d| d.partial_cmp(&t).unwrap()).is_ok() {
            let nudge = (t.abs().max(1.0)) * 1e-9;
            (self.eval)(t - nudge)
        } else {
            (self.eval)(t)
        }
    }
}

impl fmt::Debug for CallableRates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CallableRates")
            .field("space", &self.space)
            .field("discontinuities", &self.discontinuities)
            .field("diag_bound", &self.diag_bound)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

/// Either representation of Q(t), as accepted by every downstream operation.
#[derive(Debug, Clone)]
pub enum RateModel {
    PiecewiseConstant(PiecewiseConstantRates),
    Callable(CallableRates),
}

impl From<PiecewiseConstantRates> for RateModel {
    fn from(pc: PiecewiseConstantRates) -> Self {
        RateModel::PiecewiseConstant(pc)
    }
}

impl From<CallableRates> for RateModel {
    fn from(c: CallableRates) -> Self {
        RateModel::Callable(c)
    }
}

impl RateModel {
    pub fn space(&self) -> &StateSpace {
        match self {
            RateModel::PiecewiseConstant(pc) => &pc.space,
            RateModel::Callable(c) => &c.space,
        }
    }

    pub fn dim(&self) -> usize {
        self.space().size()
    }

    pub fn horizon(&self) -> f64 {
        match self {
            RateModel::PiecewiseConstant(pc) => pc.horizon(),
            RateModel::Callable(c) => c.horizon(),
        }
    }

    /// Declared discontinuities strictly inside the horizon (breakpoints for
    /// piecewise-constant rates).
    pub fn discontinuities(&self) -> Vec<f64> {
        match self {
            RateModel::PiecewiseConstant(pc) => {
                let m = pc.breakpoints.len();
                pc.breakpoints[1..m - 1].to_vec()
            }
            RateModel::Callable(c) => c.discontinuities.clone(),
        }
    }

    /// Upper bound on the total exit rate, `max_i sup_t (-q_ii(t))`.
    /// For callable rates this is the declared diagonal bound.
    pub fn lambda_max(&self) -> f64 {
        match self {
            RateModel::PiecewiseConstant(pc) => {
                let mut worst = 0.0f64;
                for b in &pc.blocks {
                    for &d in b.diag() {
                        worst = worst.max(-d);
                    }
                }
                worst
            }
            RateModel::Callable(c) => c.diag_bound,
        }
    }

    pub fn as_piecewise_constant(&self) -> Option<&PiecewiseConstantRates> {
        match self {
            RateModel::PiecewiseConstant(pc) => Some(pc),
            RateModel::Callable(_) => None,
        }
    }
}

/// One Definition-2 violation found during validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub time: f64,
    pub row: usize,
    pub description: String,
}

/// Outcome of [`validate_q_matrix`].
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub valid: bool,
    pub conservative: bool,
    pub violations: Vec<Violation>,
}

pub(crate) fn check_matrix(q: &Array2<f64>, time: f64, tol: f64, out: &mut Vec<Violation>) -> f64 {
    let n = q.nrows();
    let mut max_abs_row_sum = 0.0f64;
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..n {
            let v = q[[i, j]];
            row_sum += v;
            if i != j && v < -tol {
                out.push(Violation {
                    time,
                    row: i,
                    description: format!("negative off-diagonal at ({i},{j})"),
                });
            }
            if i == j && v > tol {
                out.push(Violation {
                    time,
                    row: i,
                    description: format!("positive diagonal at ({i},{i})"),
                });
            }
        }
        if row_sum > tol {
            out.push(Violation {
                time,
                row: i,
                description: format!("positive row sum {row_sum:.3e} at row {i}"),
            });
        }
        max_abs_row_sum = max_abs_row_sum.max(row_sum.abs());
    }
    max_abs_row_sum
}

/// Check the sign and row-sum constraints of a rate matrix and classify it as
/// conservative or not.
///
/// Piecewise-constant rates are checked block by block. Callable rates are
/// sampled on a node set refined around the declared discontinuities; the
/// declared diagonal bound is also enforced at every sampled node.
pub fn validate_q_matrix(rates: &RateModel, tol: f64) -> Result<ValidationReport> {
    let mut violations = Vec::new();
    let mut conservative = true;
    match rates {
        RateModel::PiecewiseConstant(pc) => {
            for (k, block) in pc.blocks.iter().enumerate() {
                let worst = check_matrix(block, pc.breakpoints[k], tol, &mut violations);
                if worst > tol {
                    conservative = false;
                }
            }
        }
        RateModel::Callable(c) => {
            for t in callable_sample_nodes(c) {
                let q = c.eval_at(t);
                if q.nrows() != c.space.size() || q.ncols() != c.space.size() {
                    return Err(Error::DimensionMismatch(format!(
                        "eval at t={t} returned {}x{}",
                        q.nrows(),
                        q.ncols()
                    )));
                }
                let worst = check_matrix(&q, t, tol, &mut violations);
                if worst > tol {
                    conservative = false;
                }
                for (i, &d) in q.diag().iter().enumerate() {
                    if d.abs() > c.diag_bound + tol {
                        violations.push(Violation {
                            time: t,
                            row: i,
                            description: format!(
                                "|q_ii({t})| = {:.6e} exceeds declared bound {:.6e}",
                                d.abs(),
                                c.diag_bound
                            ),
                        });
                    }
                }
            }
        }
    }
    Ok(ValidationReport {
        valid: violations.is_empty(),
        conservative,
        violations,
    })
}

/// Sampling nodes for callable-rate validation: every smooth segment between
/// declared discontinuities gets a uniform batch of interior probes plus its
/// endpoints (right-continuous side).
fn callable_sample_nodes(c: &CallableRates) -> Vec<f64> {
    const PER_SEGMENT: usize = 17;
    let mut anchors = vec![0.0];
    anchors.extend_from_slice(c.discontinuities());
    anchors.push(c.horizon());
    let mut nodes = Vec::new();
    for w in anchors.windows(2) {
        let (a, b) = (w[0], w[1]);
        for k in 0..PER_SEGMENT {
            nodes.push(a + (b - a) * k as f64 / PER_SEGMENT as f64);
        }
    }
    nodes.push(c.horizon());
    nodes
}

/// Evaluate Q at time `t` (right-continuous convention).
pub fn eval_rates(rates: &RateModel, t: f64) -> Result<Array2<f64>> {
    match rates {
        RateModel::PiecewiseConstant(pc) => Ok(pc.blocks[pc.block_index(t)?].clone()),
        RateModel::Callable(c) => {
            if t < 0.0 || t > c.horizon {
                return Err(Error::OutOfHorizon {
                    t,
                    horizon: c.horizon,
                });
            }
            Ok(c.eval_at(t))
        }
    }
}

/// Evaluate the left limit of Q at `t`; differs from [`eval_rates`] only at
/// declared discontinuities. Quadrature uses this for the right endpoint of a
/// cell so that each cell integrates its own one-sided branch.
pub fn eval_rates_left(rates: &RateModel, t: f64) -> Result<Array2<f64>> {
    match rates {
        RateModel::PiecewiseConstant(pc) => Ok(pc.blocks[pc.block_index_left(t)?].clone()),
        RateModel::Callable(c) => {
            if t < 0.0 || t > c.horizon {
                return Err(Error::OutOfHorizon {
                    t,
                    horizon: c.horizon,
                });
            }
            Ok(c.eval_left_at(t))
        }
    }
}

/// ∫_a^b q_ii(u) du.
///
/// Exact block sums for piecewise-constant rates; adaptive Simpson split at
/// the declared discontinuities, with absolute tolerance `quad_tol`, for
/// callable rates.
pub fn integrate_diagonal(rates: &RateModel, i: usize, a: f64, b: f64, quad_tol: f64) -> Result<f64> {
    let horizon = rates.horizon();
    if a < 0.0 || b > horizon || a > b {
        return Err(Error::OutOfHorizon {
            t: if a < 0.0 { a } else { b },
            horizon,
        });
    }
    if i >= rates.dim() {
        return Err(Error::DimensionMismatch(format!(
            "state {i} outside window of size {}",
            rates.dim()
        )));
    }
    match rates {
        RateModel::PiecewiseConstant(pc) => {
            let mut total = 0.0;
            for (k, block) in pc.blocks.iter().enumerate() {
                let lo = pc.breakpoints[k].max(a);
                let hi = pc.breakpoints[k + 1].min(b);
                if hi > lo {
                    total += (hi - lo) * block[[i, i]];
                }
            }
            Ok(total)
        }
        RateModel::Callable(c) => {
            let f = |t: f64| c.eval_at(t)[[i, i]];
            let mut anchors = vec![a];
            anchors.extend(c.discontinuities.iter().copied().filter(|&d| d > a && d < b));
            anchors.push(b);
            let mut total = 0.0;
            for w in anchors.windows(2) {
                total += adaptive_simpson(&f, w[0], w[1], quad_tol);
            }
            Ok(total)
        }
    }
}

/// Adaptive Simpson with the classic 1/15 error estimate.
fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    if b <= a {
        return 0.0;
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(fa, fm, fb, b - a);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Finite birth-death window: `q_{i,i+1} = λ(i)` for `i < n-1`,
/// `q_{i,i-1} = μ(i)` for `i > 0`, `q_ii = -(λ(i) + μ(i))`.
///
/// The birth rate of the last state is kept on the diagonal but its
/// transition is dropped, so the top row leaks mass: this is how a countable
/// birth-death chain truncates to a deliberately non-conservative window.
pub fn truncate_birth_death(
    lambda: impl Fn(usize) -> f64,
    mu: impl Fn(usize) -> f64,
    n: usize,
    horizon: f64,
) -> Result<PiecewiseConstantRates> {
    if n == 0 {
        return Err(Error::InvalidRates("window size must be at least 1".into()));
    }
    let mut q = Array2::zeros((n, n));
    for i in 0..n {
        let birth = lambda(i);
        if !birth.is_finite() || birth < 0.0 {
            return Err(Error::NonnegativityViolation(format!("lambda({i}) = {birth}")));
        }
        let death = if i > 0 {
            let d = mu(i);
            if !d.is_finite() || d < 0.0 {
                return Err(Error::NonnegativityViolation(format!("mu({i}) = {d}")));
            }
            d
        } else {
            0.0
        };
        if i + 1 < n {
            q[[i, i + 1]] = birth;
        }
        if i > 0 {
            q[[i, i - 1]] = death;
        }
        q[[i, i]] = -(birth + death);
    }
    PiecewiseConstantRates::constant(StateSpace::indexed(n), q, horizon)
}
