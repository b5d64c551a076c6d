//! TOML run configuration: a rate model (inline blocks, a birth-death
//! generator, a policy over action sets, or a linear ramp), solver and
//! tolerance settings, and simulation parameters.
//!
//! The full schema is documented in the repository README. Parse errors
//! surface the offending line and field via the TOML error message.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::kernel::KernelOptions;
use crate::policy::{compile_policy, ActionModel, ActionRow, PiecewisePolicy};
use crate::rates::{
    truncate_birth_death, validate_q_matrix, CallableRates, PiecewiseConstantRates, RateModel,
    StateSpace, CALLABLE_VALIDATION_TOL, PC_VALIDATION_TOL,
};
use crate::verify::VerifyOptions;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: ModelSection,
    run: RunSection,
    #[serde(default)]
    simulate: SimulateSection,
    #[serde(default)]
    output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    kind: String,
    labels: Option<Vec<String>>,
    breakpoints: Option<Vec<f64>>,
    #[serde(default)]
    blocks: Vec<BlockSpec>,
    birth_death: Option<BirthDeathSpec>,
    linear_ramp: Option<LinearRampSpec>,
    policy: Option<PolicySpec>,
}

/// One rate block, dense (`rows`) or sparse (`entries` of `[row, col, rate]`
/// triplets, optionally with an explicit `diagonal`). Sparse rows without an
/// explicit diagonal entry are completed conservatively.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockSpec {
    rows: Option<Vec<Vec<f64>>>,
    entries: Option<Vec<(usize, usize, f64)>>,
    diagonal: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BirthDeathSpec {
    states: usize,
    horizon: f64,
    lambda: RateFormula,
    mu: RateFormula,
}

/// Named rate formula in the state index: constant `c0`, linear `c0 + c1·i`,
/// or quadratic `c0 + c1·i + c2·i²`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RateFormula {
    form: String,
    coefficients: Vec<f64>,
}

impl RateFormula {
    fn compile(&self, what: &str) -> Result<impl Fn(usize) -> f64> {
        let max_coeffs = match self.form.as_str() {
            "constant" => 1,
            "linear" => 2,
            "quadratic" => 3,
            other => {
                return Err(Error::Config(format!(
                    "{what}: unknown rate formula {other:?} (expected constant, linear or quadratic)"
                )))
            }
        };
        if self.coefficients.is_empty() || self.coefficients.len() > max_coeffs {
            return Err(Error::Config(format!(
                "{what}: {} formula takes 1..={} coefficients, got {}",
                self.form,
                max_coeffs,
                self.coefficients.len()
            )));
        }
        let c = self.coefficients.clone();
        Ok(move |i: usize| {
            let x = i as f64;
            c.iter()
                .enumerate()
                .map(|(k, &ck)| ck * x.powi(k as i32))
                .sum()
        })
    }
}

/// Q(t) = base + t·slope on `[0, horizon]`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearRampSpec {
    horizon: f64,
    base: Vec<Vec<f64>>,
    slope: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicySpec {
    actions: Vec<ActionSpec>,
    /// `plan[i][k]`: action of state `i` during epoch `[k, k+1)`.
    plan: Vec<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionSpec {
    state: usize,
    name: String,
    row: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    #[serde(default)]
    s: f64,
    t_end: f64,
    h: f64,
    #[serde(default = "default_series_tol")]
    series_tol: f64,
    #[serde(default = "default_max_order")]
    max_order: usize,
    #[serde(default = "default_chain_cap")]
    chain_lambda_cap: f64,
    #[serde(default = "default_quad_tol")]
    quad_tol: f64,
    #[serde(default = "default_property_tol")]
    property_tol: f64,
    #[serde(default = "default_residual_tol")]
    residual_tol: f64,
    #[serde(default = "default_ck_tol")]
    ck_tol: f64,
    #[serde(default = "default_derivative_tol")]
    derivative_tol: f64,
    #[serde(default = "default_oracle_tol")]
    oracle_tol: f64,
}

fn default_series_tol() -> f64 {
    1e-10
}
fn default_max_order() -> usize {
    128
}
fn default_chain_cap() -> f64 {
    4.0
}
fn default_quad_tol() -> f64 {
    1e-9
}
fn default_property_tol() -> f64 {
    1e-6
}
fn default_residual_tol() -> f64 {
    1e-4
}
fn default_ck_tol() -> f64 {
    2e-4
}
fn default_derivative_tol() -> f64 {
    1e-3
}
fn default_oracle_tol() -> f64 {
    1e-4
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateSection {
    #[serde(default = "default_n_paths")]
    n_paths: u64,
    #[serde(default)]
    seed: u64,
    /// Label of the start state; defaults to the first label.
    initial_state: Option<String>,
    #[serde(default)]
    write_terminal_states: bool,
}

fn default_n_paths() -> u64 {
    100_000
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            n_paths: default_n_paths(),
            seed: 0,
            initial_state: None,
            write_terminal_states: false,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    dir: Option<PathBuf>,
}

/// A fully loaded, validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub rates: RateModel,
    pub s: f64,
    pub t_end: f64,
    pub kernel: KernelOptions,
    pub property_tol: f64,
    pub residual_tol: f64,
    pub ck_tol: f64,
    pub derivative_tol: f64,
    pub oracle_tol: f64,
    pub n_paths: u64,
    pub seed: u64,
    pub initial_state: usize,
    pub write_terminal_states: bool,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn verify_options(&self) -> VerifyOptions {
        let mut opts = VerifyOptions::new(self.kernel.clone());
        opts.property_tol = self.property_tol;
        opts.residual_tol = self.residual_tol;
        opts.ck_tol = self.ck_tol;
        opts.derivative_tol = self.derivative_tol;
        opts
    }
}

/// Load and validate a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Parse and validate configuration text.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let file: ConfigFile =
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    let rates = build_model(&file.model)?;

    let tol = match &rates {
        RateModel::PiecewiseConstant(_) => PC_VALIDATION_TOL,
        RateModel::Callable(_) => CALLABLE_VALIDATION_TOL,
    };
    let report = validate_q_matrix(&rates, tol)?;
    if !report.valid {
        let worst = &report.violations[0];
        return Err(Error::InvalidRates(format!(
            "{} at t={}",
            worst.description, worst.time
        )));
    }

    let run = &file.run;
    if run.s < 0.0 || run.t_end < run.s {
        return Err(Error::Config(format!(
            "need 0 <= s <= t_end (got s={}, t_end={})",
            run.s, run.t_end
        )));
    }
    if run.t_end > rates.horizon() {
        return Err(Error::Config(format!(
            "t_end {} exceeds the model horizon {}",
            run.t_end,
            rates.horizon()
        )));
    }
    for (name, v) in [
        ("h", run.h),
        ("series_tol", run.series_tol),
        ("quad_tol", run.quad_tol),
        ("property_tol", run.property_tol),
        ("residual_tol", run.residual_tol),
        ("ck_tol", run.ck_tol),
        ("derivative_tol", run.derivative_tol),
        ("oracle_tol", run.oracle_tol),
    ] {
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::Config(format!("{name} must be positive (got {v})")));
        }
    }

    let mut kernel = KernelOptions::new(run.h);
    kernel.series_tol = run.series_tol;
    kernel.max_order = run.max_order;
    kernel.chain_lambda_cap = run.chain_lambda_cap;
    kernel.quad_tol = run.quad_tol;

    let initial_state = match &file.simulate.initial_state {
        Some(label) => rates.space().index_of(label).ok_or_else(|| {
            Error::Config(format!("initial_state {label:?} is not a state label"))
        })?,
        None => 0,
    };

    Ok(RunConfig {
        rates,
        s: run.s,
        t_end: run.t_end,
        kernel,
        property_tol: run.property_tol,
        residual_tol: run.residual_tol,
        ck_tol: run.ck_tol,
        derivative_tol: run.derivative_tol,
        oracle_tol: run.oracle_tol,
        n_paths: file.simulate.n_paths,
        seed: file.simulate.seed,
        initial_state,
        write_terminal_states: file.simulate.write_terminal_states,
        out_dir: file.output.dir.unwrap_or_else(|| PathBuf::from("out")),
    })
}

fn build_model(model: &ModelSection) -> Result<RateModel> {
    match model.kind.as_str() {
        "piecewise-constant" => build_piecewise(model),
        "birth-death" => {
            let spec = model
                .birth_death
                .as_ref()
                .ok_or_else(|| Error::Config("birth-death model needs [model.birth_death]".into()))?;
            let lambda = spec.lambda.compile("lambda")?;
            let mu = spec.mu.compile("mu")?;
            Ok(truncate_birth_death(lambda, mu, spec.states, spec.horizon)?.into())
        }
        "policy" => {
            let spec = model
                .policy
                .as_ref()
                .ok_or_else(|| Error::Config("policy model needs [model.policy]".into()))?;
            Ok(build_policy(model, spec)?.into())
        }
        "linear-ramp" => {
            let spec = model.linear_ramp.as_ref().ok_or_else(|| {
                Error::Config("linear-ramp model needs [model.linear_ramp]".into())
            })?;
            Ok(build_linear_ramp(model, spec)?.into())
        }
        other => Err(Error::Config(format!(
            "unknown model kind {other:?} (expected piecewise-constant, birth-death, policy or linear-ramp)"
        ))),
    }
}

fn space_from(model: &ModelSection, inferred: usize) -> Result<StateSpace> {
    match &model.labels {
        Some(labels) => {
            if labels.len() != inferred {
                return Err(Error::Config(format!(
                    "{} labels for {} states",
                    labels.len(),
                    inferred
                )));
            }
            StateSpace::new(labels.clone())
        }
        None => Ok(StateSpace::indexed(inferred)),
    }
}

fn dense_matrix(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let n = rows.len();
    let mut q = Array2::zeros((n, n));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Config(format!(
                "{what}: row {i} has {} entries for {n} states",
                row.len()
            )));
        }
        for (j, &v) in row.iter().enumerate() {
            q[[i, j]] = v;
        }
    }
    Ok(q)
}

fn build_block(spec: &BlockSpec, n: usize, index: usize) -> Result<Array2<f64>> {
    match (&spec.rows, &spec.entries) {
        (Some(rows), None) => {
            if rows.len() != n {
                return Err(Error::Config(format!(
                    "block {index}: {} rows for {n} states",
                    rows.len()
                )));
            }
            dense_matrix(rows, &format!("block {index}"))
        }
        (None, Some(entries)) => {
            let mut q = Array2::zeros((n, n));
            let mut diag_given = vec![false; n];
            for &(r, c, v) in entries {
                if r >= n || c >= n {
                    return Err(Error::Config(format!(
                        "block {index}: entry ({r},{c}) outside a {n}-state window"
                    )));
                }
                q[[r, c]] = v;
                if r == c {
                    diag_given[r] = true;
                }
            }
            if let Some(diag) = &spec.diagonal {
                if diag.len() != n {
                    return Err(Error::Config(format!(
                        "block {index}: diagonal has {} entries for {n} states",
                        diag.len()
                    )));
                }
                for (i, &d) in diag.iter().enumerate() {
                    q[[i, i]] = d;
                    diag_given[i] = true;
                }
            }
            // conservative completion for rows without an explicit diagonal
            for i in 0..n {
                if !diag_given[i] {
                    let off: f64 = (0..n).filter(|&j| j != i).map(|j| q[[i, j]]).sum();
                    q[[i, i]] = -off;
                }
            }
            Ok(q)
        }
        _ => Err(Error::Config(format!(
            "block {index}: give exactly one of `rows` or `entries`"
        ))),
    }
}

fn build_piecewise(model: &ModelSection) -> Result<RateModel> {
    let breakpoints = model
        .breakpoints
        .clone()
        .ok_or_else(|| Error::Config("piecewise-constant model needs breakpoints".into()))?;
    if model.blocks.is_empty() {
        return Err(Error::Config("piecewise-constant model needs blocks".into()));
    }
    let n = match (&model.labels, &model.blocks[0].rows) {
        (Some(labels), _) => labels.len(),
        (None, Some(rows)) => rows.len(),
        (None, None) => {
            return Err(Error::Config(
                "sparse blocks need explicit labels to fix the window size".into(),
            ))
        }
    };
    let space = space_from(model, n)?;
    let blocks = model
        .blocks
        .iter()
        .enumerate()
        .map(|(k, spec)| build_block(spec, n, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(PiecewiseConstantRates::new(space, breakpoints, blocks)?.into())
}

fn build_policy(model: &ModelSection, spec: &PolicySpec) -> Result<PiecewiseConstantRates> {
    let n = spec.plan.len();
    if n == 0 {
        return Err(Error::Config("policy plan must cover at least one state".into()));
    }
    let space = space_from(model, n)?;
    let mut actions: Vec<Vec<ActionRow>> = vec![Vec::new(); n];
    for a in &spec.actions {
        if a.state >= n {
            return Err(Error::Config(format!(
                "action {:?} declared for state {} outside the {n}-state window",
                a.name, a.state
            )));
        }
        actions[a.state].push(ActionRow {
            name: a.name.clone(),
            row: a.row.clone(),
        });
    }
    let action_model = ActionModel::new(space, actions)?;
    let policy = PiecewisePolicy {
        plan: spec.plan.clone(),
    };
    compile_policy(&action_model, &policy)
}

fn build_linear_ramp(model: &ModelSection, spec: &LinearRampSpec) -> Result<CallableRates> {
    let n = spec.base.len();
    let space = space_from(model, n)?;
    let base = dense_matrix(&spec.base, "linear_ramp.base")?;
    let slope = dense_matrix(&spec.slope, "linear_ramp.slope")?;
    if spec.slope.len() != n {
        return Err(Error::Config("linear_ramp: base and slope sizes differ".into()));
    }
    // the diagonal is linear in t, so its magnitude peaks at an endpoint
    let mut bound = 0.0f64;
    for i in 0..n {
        let d0 = base[[i, i]];
        let d1 = base[[i, i]] + spec.horizon * slope[[i, i]];
        bound = bound.max(d0.abs()).max(d1.abs());
    }
    let eval = {
        let base = base.clone();
        let slope = slope.clone();
        Arc::new(move |t: f64| &base + &(&slope * t))
    };
    CallableRates::new(space, eval, vec![], bound, spec.horizon)
}
