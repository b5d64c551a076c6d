//! One-stop verification: run every numerical check against a rate model and
//! collect the outcomes into a serializable report.
//!
//! The report covers the pretransition axioms on both field layouts, grid
//! continuity, the rate row bound, Chapman-Kolmogorov splits, both
//! integral-equation residuals, right-derivative probes against Q, and the
//! regularity verdict. A non-regular chain is a finding, not a failure;
//! everything else failing its tolerance marks the report as failed.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{
    backward_residual, forward_residual, minimal_solution, minimal_solution_varying_start,
    regularity_defect, KernelOptions, MinimalSolution, ResidualReport, SeriesReport,
};
use crate::oracle::minimal_exact;
use crate::properties::{
    ck_residual, derivative_at_diagonal, rate_row_bound, step_continuity,
    validate_pretransition, PropertyOutcome,
};
use crate::rates::RateModel;
use crate::sampler::{empirical_transition, EmpiricalEstimate};

/// Tolerances and probe layout for a verification run.
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub kernel: KernelOptions,
    /// Tolerance for the pretransition axioms and the regularity verdict.
    pub property_tol: f64,
    /// Bound on the forward/backward integral-equation residuals.
    pub residual_tol: f64,
    /// Bound on the Chapman-Kolmogorov composition residual.
    pub ck_tol: f64,
    /// Bound on |derivative estimate - q_ij|.
    pub derivative_tol: f64,
    /// Interior split points for the C-K check, as fractions of the horizon.
    pub ck_fractions: Vec<f64>,
    /// Decreasing finite-difference steps for the derivative probes.
    pub derivative_steps: Vec<f64>,
}

impl VerifyOptions {
    pub fn new(kernel: KernelOptions) -> Self {
        Self {
            kernel,
            property_tol: 1e-6,
            residual_tol: 1e-4,
            ck_tol: 2e-4,
            derivative_tol: 1e-3,
            ck_fractions: vec![0.25, 0.5, 0.75],
            derivative_steps: vec![1e-2, 5e-3, 2.5e-3],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CkProbe {
    pub u: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CkSummary {
    pub probes: Vec<CkProbe>,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualSummary {
    #[serde(flatten)]
    pub report: ResidualReport,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeSummary {
    pub probe_time: f64,
    pub max_error: f64,
    pub worst_row: usize,
    pub worst_col: usize,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularitySummary {
    pub regular: bool,
    pub max_defect: f64,
    pub tolerance: f64,
    /// Clamped defect per state at the final node.
    pub final_defect: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub pretransition: Vec<PropertyOutcome>,
    pub pretransition_varying_start: Vec<PropertyOutcome>,
    pub step_continuity_forward: PropertyOutcome,
    pub step_continuity_backward: PropertyOutcome,
    pub rate_row_bound: PropertyOutcome,
    pub chapman_kolmogorov: CkSummary,
    pub forward_residual: ResidualSummary,
    pub backward_residual: ResidualSummary,
    pub derivative_checks: Vec<DerivativeSummary>,
    pub series: SeriesReport,
    pub regularity: RegularitySummary,
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Compute both field layouts and verify everything.
pub fn run_verification(
    rates: &RateModel,
    s: f64,
    t_end: f64,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let sol = minimal_solution(rates, s, t_end, &opts.kernel)?;
    let rev = minimal_solution_varying_start(rates, s, t_end, &opts.kernel)?;
    run_verification_with(rates, &sol, &rev, opts)
}

/// Verify precomputed solutions (the two layouts of the same problem).
pub fn run_verification_with(
    rates: &RateModel,
    sol: &MinimalSolution,
    rev: &MinimalSolution,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let mut failures = Vec::new();
    let tol = opts.property_tol;

    let pretransition = validate_pretransition(&sol.field, tol);
    let pretransition_varying_start = validate_pretransition(&rev.field, tol);
    let step_fwd = step_continuity(&sol.field, rates, tol)?;
    let step_bwd = step_continuity(&rev.field, rates, tol)?;

    // worst rate row bound over a uniform probe set
    let s = sol.field.grid.start();
    let t_end = sol.field.grid.end();
    let mut row_bound: Option<PropertyOutcome> = None;
    for k in 0..=4 {
        let t = s + (t_end - s) * k as f64 / 4.0;
        let outcome = rate_row_bound(rates, t, tol)?;
        let replace = row_bound
            .as_ref()
            .is_none_or(|cur| outcome.measured > cur.measured);
        if replace {
            row_bound = Some(outcome);
        }
    }
    let row_bound = row_bound.expect("at least one probe");

    // Chapman-Kolmogorov at interior splits, composing the fixed-start field
    // with the varying-start field
    let cells = sol.field.grid.cells();
    let last = sol.field.matrices.len() - 1;
    let mut probes = Vec::new();
    let mut max_residual = 0.0f64;
    if cells >= 2 {
        for &f in &opts.ck_fractions {
            let node = ((f * cells as f64).round() as usize).clamp(1, cells - 1);
            let res = ck_residual(sol.field.at(node), rev.field.at(node), sol.field.at(last))?;
            max_residual = max_residual.max(res.max);
            probes.push(CkProbe {
                u: sol.field.grid.nodes()[node],
                residual: res.max,
            });
        }
    }
    let ck = CkSummary {
        probes,
        max_residual,
        tolerance: opts.ck_tol,
        passed: max_residual <= opts.ck_tol,
    };

    let fr = forward_residual(rates, sol)?;
    let forward = ResidualSummary {
        passed: fr.max <= opts.residual_tol,
        tolerance: opts.residual_tol,
        report: fr,
    };
    let br = backward_residual(rates, rev)?;
    let backward = ResidualSummary {
        passed: br.max <= opts.residual_tol,
        tolerance: opts.residual_tol,
        report: br,
    };

    let derivative_checks = derivative_probes(rates, s, t_end, opts)?;

    let defect = regularity_defect(sol, tol);
    let n = sol.field.dim();
    let regularity = RegularitySummary {
        regular: defect.regular,
        max_defect: defect.max,
        tolerance: tol,
        final_defect: (0..n).map(|i| defect.per_node[[last, i]]).collect(),
    };

    for o in pretransition
        .iter()
        .chain(pretransition_varying_start.iter())
        .chain([&step_fwd, &step_bwd, &row_bound])
    {
        if !o.passed {
            failures.push(format!(
                "{}: measured {:.3e} exceeds bound {:.3e} at {}",
                o.name, o.measured, o.bound, o.location
            ));
        }
    }
    if !ck.passed {
        failures.push(format!(
            "chapman_kolmogorov: residual {:.3e} exceeds {:.3e}",
            ck.max_residual, ck.tolerance
        ));
    }
    if !forward.passed {
        failures.push(format!(
            "forward_residual: {:.3e} exceeds {:.3e} at entry ({},{}) t={}",
            forward.report.max,
            forward.tolerance,
            forward.report.row,
            forward.report.col,
            forward.report.time
        ));
    }
    if !backward.passed {
        failures.push(format!(
            "backward_residual: {:.3e} exceeds {:.3e} at entry ({},{}) t={}",
            backward.report.max,
            backward.tolerance,
            backward.report.row,
            backward.report.col,
            backward.report.time
        ));
    }
    for d in &derivative_checks {
        if !d.passed {
            failures.push(format!(
                "derivative at t={}: error {:.3e} exceeds {:.3e} at entry ({},{})",
                d.probe_time, d.max_error, d.tolerance, d.worst_row, d.worst_col
            ));
        }
    }

    Ok(VerificationReport {
        pretransition,
        pretransition_varying_start,
        step_continuity_forward: step_fwd,
        step_continuity_backward: step_bwd,
        rate_row_bound: row_bound,
        chapman_kolmogorov: ck,
        forward_residual: forward,
        backward_residual: backward,
        derivative_checks,
        series: sol.report.clone(),
        regularity,
        passed: failures.is_empty(),
        failures,
    })
}

/// Right-derivative probes: one midpoint per smooth segment (skipping
/// segments too short for the largest step), capped at eight probes.
fn derivative_probes(
    rates: &RateModel,
    s: f64,
    t_end: f64,
    opts: &VerifyOptions,
) -> Result<Vec<DerivativeSummary>> {
    let steps = &opts.derivative_steps;
    if steps.is_empty() {
        return Ok(Vec::new());
    }
    let max_step = steps.iter().cloned().fold(0.0f64, f64::max);
    let min_step = steps.iter().cloned().fold(f64::INFINITY, f64::min);

    let mut anchors = vec![s];
    for d in rates.discontinuities() {
        if d > s && d < t_end {
            anchors.push(d);
        }
    }
    anchors.push(t_end);

    let n = rates.dim();
    let mut out = Vec::new();
    for w in anchors.windows(2) {
        if out.len() >= 8 {
            break;
        }
        let p = 0.5 * (w[0] + w[1]);
        if p + max_step > w[1] {
            continue; // segment too short for the coarsest step
        }
        let probe_opts = KernelOptions {
            h: min_step / 2.0,
            ..opts.kernel.clone()
        };
        let sub = minimal_solution(rates, p, p + max_step, &probe_opts)?;
        let mut worst = (0.0f64, 0usize, 0usize);
        for i in 0..n {
            for j in 0..n {
                let check = derivative_at_diagonal(&sub.field, rates, i, j, steps)?;
                if check.error > worst.0 {
                    worst = (check.error, i, j);
                }
            }
        }
        out.push(DerivativeSummary {
            probe_time: p,
            max_error: worst.0,
            worst_row: worst.1,
            worst_col: worst.2,
            tolerance: opts.derivative_tol,
            passed: worst.0 <= opts.derivative_tol,
        });
    }
    Ok(out)
}

/// Cross-validation of the kernel against the exponential-product reference.
#[derive(Debug, Clone, Serialize)]
pub struct OracleComparison {
    pub probes: Vec<OracleProbe>,
    pub max_discrepancy: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleProbe {
    pub t: f64,
    pub discrepancy: f64,
    pub max_defect_gap: f64,
}

/// Compare the computed field with the restriction of the exact augmented
/// chain at about `n_probes` grid times (always including the endpoint).
pub fn oracle_compare(
    rates: &RateModel,
    sol: &MinimalSolution,
    n_probes: usize,
    tolerance: f64,
) -> Result<OracleComparison> {
    let pc = rates.as_piecewise_constant().ok_or_else(|| {
        Error::Config("oracle comparison requires piecewise-constant rates".into())
    })?;
    let s = sol.field.grid.start();
    let cells = sol.field.grid.cells();
    let n = sol.field.dim();
    let stride = (cells / n_probes.max(1)).max(1);
    let mut probes = Vec::new();
    let mut max_discrepancy = 0.0f64;
    let mut node = stride.min(cells);
    loop {
        let t = sol.field.grid.nodes()[node];
        let exact = minimal_exact(pc, s, t)?;
        let approx = sol.field.at(node);
        let mut disc = 0.0f64;
        let mut defect_gap = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                disc = disc.max((approx[[i, j]] - exact.matrix[[i, j]]).abs());
            }
            let kernel_defect = 1.0 - approx.row(i).sum();
            defect_gap = defect_gap.max((kernel_defect - exact.defect[i]).abs());
        }
        max_discrepancy = max_discrepancy.max(disc);
        probes.push(OracleProbe {
            t,
            discrepancy: disc,
            max_defect_gap: defect_gap,
        });
        if node == cells {
            break;
        }
        node = (node + stride).min(cells);
    }
    Ok(OracleComparison {
        probes,
        max_discrepancy,
        tolerance,
        passed: max_discrepancy <= tolerance,
    })
}

/// Empirical terminal frequencies against kernel probabilities, state by
/// state plus the killed mass, each within three standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub estimate: EmpiricalEstimate,
    pub comparisons: Vec<SimulationComparison>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationComparison {
    pub target: String,
    pub empirical: f64,
    pub kernel: f64,
    pub band: f64,
    pub within: bool,
}

pub fn simulate_against_kernel(
    rates: &RateModel,
    i0: usize,
    s: f64,
    t_end: f64,
    n_paths: u64,
    seed: u64,
    kernel_opts: &KernelOptions,
) -> Result<SimulationReport> {
    let sol = minimal_solution(rates, s, t_end, kernel_opts)?;
    let estimate = empirical_transition(rates, i0, s, t_end, n_paths, seed)?;
    let last = sol.field.matrices.len() - 1;
    let n = rates.dim();
    let nf = n_paths as f64;
    let mut comparisons = Vec::new();
    let mut row_sum = 0.0;
    for j in 0..n {
        let p = sol.field.at(last)[[i0, j]].clamp(0.0, 1.0);
        row_sum += sol.field.at(last)[[i0, j]];
        let band = 3.0 * (p * (1.0 - p) / nf).sqrt() + 1e-12;
        comparisons.push(SimulationComparison {
            target: format!("state {}", rates.space().label(j)),
            empirical: estimate.freq[j],
            kernel: p,
            band,
            within: (estimate.freq[j] - p).abs() <= band,
        });
    }
    let defect = (1.0 - row_sum).clamp(0.0, 1.0);
    let band = 3.0 * (defect * (1.0 - defect) / nf).sqrt() + 1e-12;
    comparisons.push(SimulationComparison {
        target: "killed".into(),
        empirical: estimate.killed_freq,
        kernel: defect,
        band,
        within: (estimate.killed_freq - defect).abs() <= band,
    });
    let passed = comparisons.iter().all(|c| c.within);
    Ok(SimulationReport {
        estimate,
        comparisons,
        passed,
    })
}
