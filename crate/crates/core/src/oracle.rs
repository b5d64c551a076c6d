//! Reference solver, independent of the series kernel.
//!
//! A possibly non-conservative rate matrix is embedded in a conservative one
//! by adding an absorbing cemetery state that receives each row's missing
//! mass. For piecewise-constant rates the augmented chain's transition matrix
//! is then an ordered product of interval matrix exponentials, exact to
//! machine precision, and its corner on the original window must reproduce
//! the minimal solution. Routing the cemetery mass back into the window
//! instead ("resurrection") produces a different transition matrix for the
//! same rates that dominates the minimal one entrywise, which is exactly what
//! the minimality check needs.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::expm::expm;
use crate::rates::{validate_q_matrix, PiecewiseConstantRates, RateModel, StateSpace, PC_VALIDATION_TOL};

/// A conservative chain on `S ∪ {Δ}` wrapping a base matrix on `S`.
#[derive(Debug, Clone)]
pub struct AugmentedChain {
    base: PiecewiseConstantRates,
    augmented: PiecewiseConstantRates,
}

impl AugmentedChain {
    /// Index of the cemetery state in the augmented window.
    pub fn cemetery(&self) -> usize {
        self.base.space.size()
    }

    pub fn base(&self) -> &PiecewiseConstantRates {
        &self.base
    }

    /// The augmented rates as an ordinary model (every block conservative).
    pub fn rates(&self) -> &PiecewiseConstantRates {
        &self.augmented
    }
}

/// S×S corner of an augmented transition matrix plus the mass each row sent
/// to the cemetery.
#[derive(Debug, Clone)]
pub struct RestrictedMatrix {
    pub matrix: Array2<f64>,
    pub defect: Vec<f64>,
}

fn augmented_space(base: &PiecewiseConstantRates) -> StateSpace {
    let mut labels: Vec<String> = base.space.labels().to_vec();
    let mut cemetery = "cemetery".to_string();
    while labels.contains(&cemetery) {
        cemetery.push('_');
    }
    labels.push(cemetery);
    StateSpace::new(labels).expect("augmented labels are distinct")
}

fn require_valid(q: &PiecewiseConstantRates) -> Result<()> {
    let report = validate_q_matrix(&RateModel::PiecewiseConstant(q.clone()), PC_VALIDATION_TOL)?;
    if !report.valid {
        let v = &report.violations[0];
        return Err(Error::InvalidRates(format!("{} at t={}", v.description, v.time)));
    }
    Ok(())
}

fn augment_blocks(
    base: &PiecewiseConstantRates,
    cemetery_row: impl Fn(usize) -> Vec<f64>,
) -> Vec<Array2<f64>> {
    let n = base.space.size();
    base.blocks()
        .iter()
        .map(|q| {
            let mut big = Array2::zeros((n + 1, n + 1));
            for i in 0..n {
                let mut row_sum = 0.0;
                for j in 0..n {
                    big[[i, j]] = q[[i, j]];
                    row_sum += q[[i, j]];
                }
                // the kill rate is the row's missing mass; exact negation keeps
                // the augmented row sum at zero
                big[[i, n]] = (-row_sum).max(0.0);
            }
            let delta = cemetery_row(n);
            for j in 0..=n {
                big[[n, j]] = delta[j];
            }
            big
        })
        .collect()
}

/// Embed `q` in a conservative chain with an absorbing cemetery.
pub fn conservativize(q: &PiecewiseConstantRates) -> Result<AugmentedChain> {
    require_valid(q)?;
    let blocks = augment_blocks(q, |n| vec![0.0; n + 1]);
    let augmented = PiecewiseConstantRates::new(
        augmented_space(q),
        q.breakpoints().to_vec(),
        blocks,
    )?;
    Ok(AugmentedChain {
        base: q.clone(),
        augmented,
    })
}

/// Embed `q` in a conservative chain whose cemetery returns mass to the
/// window: the cemetery row is `r·ν` on `S` and `-r` on the diagonal.
///
/// Requires `q` to be non-conservative somewhere (otherwise the restriction
/// equals the minimal solution and the construction is vacuous) and `ν` to be
/// a probability vector on the window.
pub fn resurrect(q: &PiecewiseConstantRates, nu: &[f64], r: f64) -> Result<AugmentedChain> {
    require_valid(q)?;
    let n = q.space.size();
    if nu.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "distribution has {} entries for {} states",
            nu.len(),
            n
        )));
    }
    if nu.iter().any(|&p| p < 0.0) {
        return Err(Error::InvalidDistribution(nu.iter().sum()));
    }
    let total: f64 = nu.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidDistribution(total));
    }
    if !r.is_finite() || r <= 0.0 {
        return Err(Error::InvalidRates(format!(
            "resurrection rate must be positive and finite (got {r})"
        )));
    }
    let report = validate_q_matrix(&RateModel::PiecewiseConstant(q.clone()), PC_VALIDATION_TOL)?;
    if report.conservative {
        return Err(Error::VacuousResurrection);
    }
    let blocks = augment_blocks(q, |n| {
        let mut row: Vec<f64> = nu.iter().map(|&p| r * p).collect();
        row.push(-r);
        debug_assert_eq!(row.len(), n + 1);
        row
    });
    let augmented = PiecewiseConstantRates::new(
        augmented_space(q),
        q.breakpoints().to_vec(),
        blocks,
    )?;
    Ok(AugmentedChain {
        base: q.clone(),
        augmented,
    })
}

/// Transition matrix of the augmented chain on `[s, t]`: the ordered product
/// of interval matrix exponentials, split at every breakpoint.
pub fn pc_exact(chain: &AugmentedChain, s: f64, t: f64) -> Result<Array2<f64>> {
    let rates = chain.rates();
    let horizon = rates.horizon();
    if s < 0.0 || t > horizon || s > t {
        return Err(Error::OutOfHorizon {
            t: if s < 0.0 || s > t { s } else { t },
            horizon,
        });
    }
    let n = rates.space.size();
    let mut product = Array2::eye(n);
    let breakpoints = rates.breakpoints();
    for (k, block) in rates.blocks().iter().enumerate() {
        let lo = breakpoints[k].max(s);
        let hi = breakpoints[k + 1].min(t);
        if hi > lo {
            let factor = expm(&(block * (hi - lo)))?;
            product = product.dot(&factor);
        }
    }
    Ok(product)
}

/// Cut an augmented transition matrix back to the base window. The removed
/// column is returned as the per-row defect.
pub fn restrict(augmented: &Array2<f64>) -> RestrictedMatrix {
    let n = augmented.nrows() - 1;
    let mut matrix = Array2::zeros((n, n));
    let mut defect = Vec::with_capacity(n);
    for i in 0..n {
        for j in 0..n {
            matrix[[i, j]] = augmented[[i, j]];
        }
        defect.push(augmented[[i, n]]);
    }
    RestrictedMatrix { matrix, defect }
}

/// Reference value of the minimal solution at `(s, t)`: conservativize,
/// exponentiate, restrict.
pub fn minimal_exact(q: &PiecewiseConstantRates, s: f64, t: f64) -> Result<RestrictedMatrix> {
    let chain = conservativize(q)?;
    Ok(restrict(&pc_exact(&chain, s, t)?))
}
