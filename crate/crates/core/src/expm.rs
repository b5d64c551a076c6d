//! Matrix exponential via scaling-and-squaring with a Padé(13,13)
//! approximant.
//!
//! Accuracy contract: relative error at or below 1e-12 on the generator
//! matrices the oracle feeds it (essentially nonnegative, bounded norm).
//! The reference solver depends on this routine and nothing from the series
//! kernel, so the two computations cannot share errors.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Padé(13,13) numerator coefficients (denominator uses alternating signs).
const B: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

/// Scaling threshold for the degree-13 approximant.
const THETA_13: f64 = 5.371_920_351_148_152;

/// Compute `exp(a)` for a square matrix.
pub fn expm(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "expm needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidRates("expm input has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(Array2::zeros((0, 0)));
    }
    if n == 1 {
        return Ok(Array2::from_elem((1, 1), a[[0, 0]].exp()));
    }

    let norm = one_norm(a);
    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a / 2f64.powi(s as i32);
    let mut result = pade13(&scaled)?;
    for _ in 0..s {
        result = result.dot(&result);
    }
    Ok(result)
}

fn pade13(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let eye: Array2<f64> = Array2::eye(n);
    let a2 = a.dot(a);
    let a4 = a2.dot(&a2);
    let a6 = a2.dot(&a4);

    let w1 = &a6 * B[13] + &a4 * B[11] + &a2 * B[9];
    let w2 = w1.dot(&a6) + &a6 * B[7] + &a4 * B[5] + &a2 * B[3] + &eye * B[1];
    let u = a.dot(&w2);

    let v1 = &a6 * B[12] + &a4 * B[10] + &a2 * B[8];
    let v = v1.dot(&a6) + &a6 * B[6] + &a4 * B[4] + &a2 * B[2] + &eye * B[0];

    let numer = &v + &u;
    let denom = &v - &u;
    solve(denom, numer)
}

/// Solve `A X = B` by Gaussian elimination with partial pivoting.
fn solve(a: Array2<f64>, b: Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let m = b.ncols();
    let mut lu = a;
    let mut x = b;

    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = lu[[col, col]].abs();
        for row in col + 1..n {
            let v = lu[[row, col]].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = row;
            }
        }
        if pivot_val < 1e-300 {
            return Err(Error::InvalidRates(
                "singular Padé denominator in expm".into(),
            ));
        }
        if pivot_row != col {
            for j in 0..n {
                lu.swap([col, j], [pivot_row, j]);
            }
            for j in 0..m {
                x.swap([col, j], [pivot_row, j]);
            }
        }
        let pivot = lu[[col, col]];
        for row in col + 1..n {
            let factor = lu[[row, col]] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                let v = lu[[col, j]];
                lu[[row, j]] -= factor * v;
            }
            for j in 0..m {
                let v = x[[col, j]];
                x[[row, j]] -= factor * v;
            }
        }
    }

    for col in (0..n).rev() {
        let pivot = lu[[col, col]];
        for j in 0..m {
            let mut sum = x[[col, j]];
            for k in col + 1..n {
                sum -= lu[[col, k]] * x[[k, j]];
            }
            x[[col, j]] = sum / pivot;
        }
    }
    Ok(x)
}

/// Max column sum of absolute values.
fn one_norm(a: &Array2<f64>) -> f64 {
    let mut max = 0.0f64;
    for j in 0..a.ncols() {
        let s: f64 = a.column(j).iter().map(|x| x.abs()).sum();
        max = max.max(s);
    }
    max
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let z = Array2::<f64>::zeros((4, 4));
        assert_eq!(expm(&z).unwrap(), Array2::<f64>::eye(4));
    }

    #[test]
    fn exp_of_diagonal() {
        let a = array![[1.0, 0.0], [0.0, -2.0]];
        let e = expm(&a).unwrap();
        assert_abs_diff_eq!(e[[0, 0]], 1f64.exp(), epsilon = 1e-13);
        assert_abs_diff_eq!(e[[1, 1]], (-2f64).exp(), epsilon = 1e-14);
        assert_eq!(e[[0, 1]], 0.0);
    }

    #[test]
    fn exp_of_nilpotent() {
        // exp([[0,1],[0,0]]) = [[1,1],[0,1]]
        let a = array![[0.0, 1.0], [0.0, 0.0]];
        let e = expm(&a).unwrap();
        assert!(max_abs_diff(&e, &array![[1.0, 1.0], [0.0, 1.0]]) < 1e-14);
    }

    #[test]
    fn exp_of_generator_is_stochastic() {
        let q = array![[-1.0, 1.0, 0.0], [2.0, -5.0, 3.0], [0.5, 0.5, -1.0]];
        let e = expm(&(q * 0.7)).unwrap();
        for i in 0..3 {
            let row: f64 = e.row(i).sum();
            assert_abs_diff_eq!(row, 1.0, epsilon = 1e-13);
            assert!(e.row(i).iter().all(|&x| x >= -1e-15));
        }
    }

    #[test]
    fn semigroup_property_within_a_block() {
        let q = array![[-3.0, 3.0], [7.0, -7.0]];
        let whole = expm(&(&q * 0.9)).unwrap();
        let split = expm(&(&q * 0.4)).unwrap().dot(&expm(&(&q * 0.5)).unwrap());
        assert!(
            max_abs_diff(&whole, &split) < 1e-13,
            "semigroup discrepancy {:.3e}",
            max_abs_diff(&whole, &split)
        );
    }

    #[test]
    fn large_norm_triggers_scaling_and_stays_accurate() {
        // 2-state generator with closed form: p00 = b/(a+b) + a/(a+b) e^{-(a+b)t}
        let (a, b, t) = (80.0, 60.0, 1.0);
        let q = array![[-a, a], [b, -b]];
        let e = expm(&(&q * t)).unwrap();
        let expected = b / (a + b) + a / (a + b) * (-(a + b) * t).exp();
        assert_abs_diff_eq!(e[[0, 0]], expected, epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_square_input() {
        let a = Array2::<f64>::zeros((2, 3));
        assert!(expm(&a).is_err());
    }
}
