//! Piecewise-constant control policies over finite action sets, compiled
//! into rate matrices.
//!
//! Each state has a finite set of actions; each action fixes that state's
//! whole rate row. A policy picks one action per state per unit epoch
//! `[k, k+1)`, which makes the compiled Q(t) piecewise constant with integer
//! breakpoints and, in general, discontinuous in time. This is the canonical
//! source of measurable-but-not-continuous rates (a controller switching
//! service speeds in a queue).

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{FieldLayout, MinimalSolution};
use crate::rates::{PiecewiseConstantRates, StateSpace};

/// One selectable rate row for a state.
#[derive(Debug, Clone)]
pub struct ActionRow {
    pub name: String,
    /// Full row of length |S|; entry at the state's own index is the
    /// diagonal.
    pub row: Vec<f64>,
}

/// Per-state action sets. Every row must satisfy the rate-matrix row
/// constraints on its own (checked at construction).
#[derive(Debug, Clone)]
pub struct ActionModel {
    pub space: StateSpace,
    actions: Vec<Vec<ActionRow>>,
}

impl ActionModel {
    pub fn new(space: StateSpace, actions: Vec<Vec<ActionRow>>) -> Result<Self> {
        let n = space.size();
        if actions.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} action sets for {} states",
                actions.len(),
                n
            )));
        }
        for (i, set) in actions.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::InvalidRates(format!("state {i} has no actions")));
            }
            for action in set {
                if action.row.len() != n {
                    return Err(Error::DimensionMismatch(format!(
                        "action {:?} of state {i} has {} entries for {n} states",
                        action.name,
                        action.row.len()
                    )));
                }
                let mut row_sum = 0.0;
                for (j, &v) in action.row.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::InvalidRates(format!(
                            "action {:?} of state {i} has a non-finite rate",
                            action.name
                        )));
                    }
                    if j != i && v < 0.0 {
                        return Err(Error::InvalidRates(format!(
                            "action {:?} of state {i}: negative off-diagonal at column {j}",
                            action.name
                        )));
                    }
                    if j == i && v > 0.0 {
                        return Err(Error::InvalidRates(format!(
                            "action {:?} of state {i}: positive diagonal",
                            action.name
                        )));
                    }
                    row_sum += v;
                }
                if row_sum > 1e-12 {
                    return Err(Error::InvalidRates(format!(
                        "action {:?} of state {i}: positive row sum {row_sum:.3e}",
                        action.name
                    )));
                }
            }
        }
        Ok(Self { space, actions })
    }

    pub fn actions(&self, state: usize) -> &[ActionRow] {
        &self.actions[state]
    }

    fn find(&self, state: usize, name: &str) -> Result<&ActionRow> {
        self.actions[state]
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::ActionNotAvailable {
                state,
                action: name.to_string(),
            })
    }
}

/// Action choices per state for integer epochs `0..K`; the choice of epoch
/// `k` is held on `[k, k+1)`.
#[derive(Debug, Clone)]
pub struct PiecewisePolicy {
    /// `plan[i][k]` names the action of state `i` during epoch `k`.
    pub plan: Vec<Vec<String>>,
}

impl PiecewisePolicy {
    pub fn epochs(&self) -> usize {
        self.plan.first().map_or(0, Vec::len)
    }
}

/// Compile a policy into piecewise-constant rates with breakpoints at
/// `0, 1, ..., K`.
pub fn compile_policy(
    model: &ActionModel,
    policy: &PiecewisePolicy,
) -> Result<PiecewiseConstantRates> {
    let n = model.space.size();
    if policy.plan.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "policy covers {} states, model has {n}",
            policy.plan.len()
        )));
    }
    let epochs = policy.epochs();
    if epochs == 0 {
        return Err(Error::Config("policy must cover at least one epoch".into()));
    }
    if policy.plan.iter().any(|p| p.len() != epochs) {
        return Err(Error::DimensionMismatch(
            "every state needs one action per epoch".into(),
        ));
    }
    let mut blocks = Vec::with_capacity(epochs);
    for k in 0..epochs {
        let mut q = Array2::zeros((n, n));
        for i in 0..n {
            let action = model.find(i, &policy.plan[i][k])?;
            for j in 0..n {
                q[[i, j]] = action.row[j];
            }
        }
        blocks.push(q);
    }
    let breakpoints = (0..=epochs).map(|k| k as f64).collect();
    PiecewiseConstantRates::new(model.space.clone(), breakpoints, blocks)
}

/// Expected queue length over time, conditioned on still being inside the
/// window, plus the survival curve.
#[derive(Debug, Clone, Serialize)]
pub struct QueueMetrics {
    pub times: Vec<f64>,
    /// `E[X_t | X_s = i0, alive]`, using state indices as queue lengths.
    pub expected_length: Vec<f64>,
    /// Row sum of the transition field from `i0`.
    pub survival: Vec<f64>,
}

/// Summarize a solution as queue metrics for the start state `i0`.
pub fn queue_metrics(sol: &MinimalSolution, i0: usize) -> Result<QueueMetrics> {
    if sol.field.layout != FieldLayout::FixedStart {
        return Err(Error::GridMismatch(
            "queue metrics need a fixed-start solution".into(),
        ));
    }
    let n = sol.field.dim();
    if i0 >= n {
        return Err(Error::DimensionMismatch(format!(
            "start state {i0} outside window of size {n}"
        )));
    }
    let nodes = sol.field.grid.nodes();
    let mut expected = Vec::with_capacity(nodes.len());
    let mut survival = Vec::with_capacity(nodes.len());
    for (b, m) in sol.field.matrices.iter().enumerate() {
        let mut mass = 0.0;
        let mut weighted = 0.0;
        for j in 0..n {
            let p = m[[i0, j]];
            mass += p;
            weighted += j as f64 * p;
        }
        if mass < 1e-12 {
            return Err(Error::DegenerateConditioning {
                node: b,
                row_sum: mass,
            });
        }
        expected.push(weighted / mass);
        survival.push(mass);
    }
    Ok(QueueMetrics {
        times: nodes.to_vec(),
        expected_length: expected,
        survival,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{minimal_solution, KernelOptions};
    use crate::rates::{validate_q_matrix, RateModel, PC_VALIDATION_TOL};
    use approx::assert_abs_diff_eq;

    fn two_state_model() -> ActionModel {
        ActionModel::new(
            StateSpace::indexed(2),
            vec![
                vec![ActionRow {
                    name: "arrive".into(),
                    row: vec![-1.0, 1.0],
                }],
                vec![
                    ActionRow {
                        name: "slow".into(),
                        row: vec![0.5, -0.5],
                    },
                    ActionRow {
                        name: "fast".into(),
                        row: vec![2.0, -2.0],
                    },
                ],
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_action_everywhere_gives_one_effective_matrix() {
        let model = two_state_model();
        let policy = PiecewisePolicy {
            plan: vec![vec!["arrive".into()], vec!["slow".into()]],
        };
        let pc = compile_policy(&model, &policy).unwrap();
        assert_eq!(pc.blocks().len(), 1);
        assert_eq!(pc.blocks()[0].row(0).to_vec(), vec![-1.0, 1.0]);
        assert_eq!(pc.blocks()[0].row(1).to_vec(), vec![0.5, -0.5]);
        let report = validate_q_matrix(&RateModel::from(pc), PC_VALIDATION_TOL).unwrap();
        assert!(report.valid);
    }

    #[test]
    fn epochs_change_only_the_controlled_row() {
        let model = two_state_model();
        let policy = PiecewisePolicy {
            plan: vec![
                vec!["arrive".into(), "arrive".into()],
                vec!["slow".into(), "fast".into()],
            ],
        };
        let pc = compile_policy(&model, &policy).unwrap();
        assert_eq!(pc.breakpoints(), &[0.0, 1.0, 2.0]);
        assert_eq!(pc.blocks()[0].row(0), pc.blocks()[1].row(0));
        assert_ne!(pc.blocks()[0].row(1), pc.blocks()[1].row(1));
    }

    #[test]
    fn unknown_action_is_rejected_with_its_state() {
        let model = two_state_model();
        let policy = PiecewisePolicy {
            plan: vec![vec!["arrive".into()], vec!["warp".into()]],
        };
        match compile_policy(&model, &policy) {
            Err(Error::ActionNotAvailable { state, action }) => {
                assert_eq!(state, 1);
                assert_eq!(action, "warp");
            }
            other => panic!("expected ActionNotAvailable, got {other:?}"),
        }
    }

    #[test]
    fn invalid_action_rows_are_rejected_at_construction() {
        let err = ActionModel::new(
            StateSpace::indexed(2),
            vec![
                vec![ActionRow {
                    name: "bad".into(),
                    row: vec![-1.0, -1.0],
                }],
                vec![ActionRow {
                    name: "ok".into(),
                    row: vec![0.0, 0.0],
                }],
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidRates(_)));
    }

    #[test]
    fn frozen_chain_keeps_its_queue_length() {
        let pc = PiecewiseConstantRates::constant(
            StateSpace::indexed(5),
            Array2::zeros((5, 5)),
            1.0,
        )
        .unwrap();
        let sol = minimal_solution(&pc.into(), 0.0, 1.0, &KernelOptions::new(0.05)).unwrap();
        let metrics = queue_metrics(&sol, 3).unwrap();
        assert!(metrics.expected_length.iter().all(|&e| e == 3.0));
        assert!(metrics.survival.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn vanishing_survival_cannot_be_conditioned_on() {
        // a single state killed at rate 60 retains e^{-60} < 1e-12 by t = 1
        let pc = PiecewiseConstantRates::constant(
            StateSpace::indexed(1),
            ndarray::array![[-60.0]],
            1.0,
        )
        .unwrap();
        let sol = minimal_solution(&pc.into(), 0.0, 1.0, &KernelOptions::new(1e-3)).unwrap();
        assert!(matches!(
            queue_metrics(&sol, 0),
            Err(Error::DegenerateConditioning { .. })
        ));
    }

    #[test]
    fn faster_service_keeps_the_queue_shorter() {
        // 4-state arrival/service window; constant policies, two epochs
        let n = 4;
        let mut actions = Vec::new();
        for i in 0..n {
            let mut set = Vec::new();
            for (name, mu) in [("slow", 0.5), ("fast", 2.0)] {
                let mut row = vec![0.0; n];
                let arrival = if i + 1 < n { 1.0 } else { 0.0 };
                let service = if i > 0 { mu } else { 0.0 };
                if i + 1 < n {
                    row[i + 1] = arrival;
                }
                if i > 0 {
                    row[i - 1] = service;
                }
                // the top state still loses arrival mass off the window
                let leak = if i + 1 < n { 0.0 } else { 1.0 };
                row[i] = -(arrival + service + leak);
                set.push(ActionRow {
                    name: name.into(),
                    row,
                });
            }
            actions.push(set);
        }
        let model = ActionModel::new(StateSpace::indexed(n), actions).unwrap();
        let expected_at_end = |action: &str| {
            let policy = PiecewisePolicy {
                plan: vec![vec![action.to_string(); 2]; n],
            };
            let pc = compile_policy(&model, &policy).unwrap();
            let sol = minimal_solution(&pc.into(), 0.0, 2.0, &KernelOptions::new(1e-3)).unwrap();
            let metrics = queue_metrics(&sol, 0).unwrap();
            *metrics.expected_length.last().unwrap()
        };
        let fast = expected_at_end("fast");
        let slow = expected_at_end("slow");
        assert!(
            fast < slow,
            "fast service must shorten the queue: fast {fast:.4} vs slow {slow:.4}"
        );
    }

    #[test]
    fn pure_death_from_one_customer() {
        // service at rate 1, no arrivals: E[X_1 | X_0 = 1] = e^{-1}
        let pc = crate::rates::truncate_birth_death(|_| 0.0, |_| 1.0, 2, 1.0).unwrap();
        let sol = minimal_solution(&pc.into(), 0.0, 1.0, &KernelOptions::new(1e-3)).unwrap();
        let metrics = queue_metrics(&sol, 1).unwrap();
        let last = metrics.times.len() - 1;
        assert_abs_diff_eq!(metrics.survival[last], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(metrics.expected_length[last], (-1.0f64).exp(), epsilon = 1e-5);
        assert_abs_diff_eq!(metrics.expected_length[last], 0.3678794, epsilon = 1e-5);
    }
}
