//! Statistical calibration: across many independent replications, the
//! three-standard-error comparison between empirical frequencies and kernel
//! probabilities must cover in at least 99% of runs.

use minq::kernel::KernelOptions;
use minq::rates::{PiecewiseConstantRates, RateModel, StateSpace};
use minq::verify::simulate_against_kernel;
use ndarray::array;

#[test]
fn three_sigma_bands_cover_at_least_99_percent() {
    let rates: RateModel = PiecewiseConstantRates::constant(
        StateSpace::indexed(2),
        array![[-1.0, 1.0], [2.0, -2.0]],
        1.0,
    )
    .unwrap()
    .into();
    let opts = KernelOptions::new(1e-3);
    let replications = 200u64;
    let mut covered = 0;
    for rep in 0..replications {
        let report =
            simulate_against_kernel(&rates, 0, 0.0, 1.0, 2_000, 1_000_000 + rep, &opts).unwrap();
        if report.passed {
            covered += 1;
        }
    }
    let rate = covered as f64 / replications as f64;
    assert!(
        rate >= 0.99,
        "3-sigma coverage {covered}/{replications} = {rate:.3} below 0.99"
    );
}
