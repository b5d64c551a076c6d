//! Exact simulation of the jump process behind the minimal solution.
//!
//! Within a constant block the holding time in state `i` is exponential with
//! rate `-q_ii`; a clock that would cross a breakpoint is cut there and
//! redrawn, which is exactly memorylessness. On a jump the destination is
//! chosen proportionally to the off-diagonal rates, and the row's missing
//! mass is the probability of being killed (leaving the window). Callable
//! rates are simulated by thinning against the declared diagonal bound.
//!
//! Streams: path `k` of a run with seed `σ` uses the ChaCha stream `k` of the
//! generator seeded with `σ`, so paths are independent and a parallel run
//! produces the same path set as a sequential one, path for path.

use ndarray::Array2;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rates::{eval_rates, RateModel};

/// How a sampled path ended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TerminalStatus {
    /// Still inside the window at `t_end`.
    Alive,
    /// Left the window (cemetery) at the given time.
    Killed { at: f64 },
}

/// One simulated trajectory: state `states[k]` is entered at `times[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub times: Vec<f64>,
    pub states: Vec<usize>,
    pub status: TerminalStatus,
}

impl PathSample {
    /// State occupied at the end (meaningless for killed paths).
    pub fn terminal_state(&self) -> usize {
        *self.states.last().unwrap()
    }
}

/// Empirical terminal distribution of a batch of paths.
#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalEstimate {
    pub n_paths: u64,
    /// Terminal-state counts over the window.
    pub counts: Vec<u64>,
    pub killed: u64,
    /// Point estimates `counts / n`.
    pub freq: Vec<f64>,
    pub killed_freq: f64,
    /// Standard errors `sqrt(p(1-p)/n)`.
    pub std_err: Vec<f64>,
    pub killed_std_err: f64,
}

fn uniform01(rng: &mut ChaCha12Rng) -> f64 {
    // 53 random bits; in [0, 1)
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn exp_holding(rng: &mut ChaCha12Rng, rate: f64) -> f64 {
    let u = uniform01(rng).max(f64::MIN_POSITIVE);
    -u.ln() / rate
}

/// Pick the jump destination for `row` with total exit rate `total`;
/// `None` means the cemetery. `u` must be uniform on `[0, total)`.
fn pick_destination(row: &Array2<f64>, state: usize, u: f64) -> Option<usize> {
    let n = row.ncols();
    let mut cum = 0.0;
    for j in 0..n {
        if j == state {
            continue;
        }
        cum += row[[state, j]].max(0.0);
        if u < cum {
            return Some(j);
        }
    }
    None
}

/// Simulate one path from `(i0, s)` to `t_end` on the given stream of `seed`.
pub fn sample_path_stream(
    rates: &RateModel,
    i0: usize,
    s: f64,
    t_end: f64,
    seed: u64,
    stream: u64,
) -> Result<PathSample> {
    let horizon = rates.horizon();
    if s < 0.0 || t_end > horizon || s > t_end {
        return Err(Error::OutOfHorizon {
            t: if s < 0.0 || s > t_end { s } else { t_end },
            horizon,
        });
    }
    if i0 >= rates.dim() {
        return Err(Error::DimensionMismatch(format!(
            "start state {i0} outside window of size {}",
            rates.dim()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);

    let mut times = vec![s];
    let mut states = vec![i0];
    let mut state = i0;
    let mut t = s;

    match rates {
        RateModel::PiecewiseConstant(pc) => {
            while t < t_end {
                let k = pc.block_index(t)?;
                let block = &pc.blocks()[k];
                let block_end = pc.breakpoints()[k + 1].min(t_end);
                let total = -block[[state, state]];
                if total <= 0.0 {
                    t = block_end;
                    continue;
                }
                let hold = exp_holding(&mut rng, total);
                if t + hold >= block_end {
                    // clock crosses the breakpoint: advance and redraw
                    t = block_end;
                    continue;
                }
                t += hold;
                let u = uniform01(&mut rng) * total;
                match pick_destination(block, state, u) {
                    Some(j) => {
                        state = j;
                        times.push(t);
                        states.push(j);
                    }
                    None => {
                        return Ok(PathSample {
                            times,
                            states,
                            status: TerminalStatus::Killed { at: t },
                        });
                    }
                }
            }
        }
        RateModel::Callable(c) => {
            let bound = c.diag_bound;
            while t < t_end && bound > 0.0 {
                let hold = exp_holding(&mut rng, bound);
                t += hold;
                if t >= t_end {
                    break;
                }
                let q = eval_rates(rates, t)?;
                let total = -q[[state, state]];
                if total > bound * (1.0 + 1e-9) {
                    return Err(Error::DiagBoundExceeded {
                        t,
                        value: total,
                        bound,
                    });
                }
                let u = uniform01(&mut rng) * bound;
                if u >= total {
                    continue; // thinned proposal
                }
                match pick_destination(&q, state, u) {
                    Some(j) => {
                        state = j;
                        times.push(t);
                        states.push(j);
                    }
                    None => {
                        return Ok(PathSample {
                            times,
                            states,
                            status: TerminalStatus::Killed { at: t },
                        });
                    }
                }
            }
        }
    }
    Ok(PathSample {
        times,
        states,
        status: TerminalStatus::Alive,
    })
}

/// Simulate one path (stream 0 of the seed).
pub fn sample_path(
    rates: &RateModel,
    i0: usize,
    s: f64,
    t_end: f64,
    seed: u64,
) -> Result<PathSample> {
    sample_path_stream(rates, i0, s, t_end, seed, 0)
}

/// Terminal-state frequencies over `n_paths` independent paths.
///
/// Path `k` uses stream `k`; the integer counts are reduced with ordinary
/// addition, so parallel and sequential runs agree exactly.
pub fn empirical_transition(
    rates: &RateModel,
    i0: usize,
    s: f64,
    t_end: f64,
    n_paths: u64,
    seed: u64,
) -> Result<EmpiricalEstimate> {
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be at least 1".into()));
    }
    let n = rates.dim();
    let zero = || (vec![0u64; n], 0u64);
    let (counts, killed) = (0..n_paths)
        .into_par_iter()
        .map(|k| -> Result<(Vec<u64>, u64)> {
            let path = sample_path_stream(rates, i0, s, t_end, seed, k)?;
            let mut c = vec![0u64; n];
            let mut killed = 0u64;
            match path.status {
                TerminalStatus::Alive => c[path.terminal_state()] += 1,
                TerminalStatus::Killed { .. } => killed = 1,
            }
            Ok((c, killed))
        })
        .try_reduce(zero, |mut a, b| {
            for (x, y) in a.0.iter_mut().zip(b.0.iter()) {
                *x += y;
            }
            a.1 += b.1;
            Ok(a)
        })?;

    let nf = n_paths as f64;
    let se = |p: f64| (p * (1.0 - p) / nf).sqrt();
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / nf).collect();
    let killed_freq = killed as f64 / nf;
    Ok(EmpiricalEstimate {
        n_paths,
        std_err: freq.iter().map(|&p| se(p)).collect(),
        killed_std_err: se(killed_freq),
        counts,
        killed,
        freq,
        killed_freq,
    })
}
