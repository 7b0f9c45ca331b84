use pseudochain::dynamics::{mixed_correlator, return_probability, survival_amplitude, uniform_grid};
use pseudochain::hilbert::Pauli;
use pseudochain::{BlackBoxChain, BlockSpec, Mode, PseudoChainSpec};

fn hidden() -> PseudoChainSpec<f64> {
    PseudoChainSpec::new(
        vec![BlockSpec::site(0.1), BlockSpec::new(2, -0.3, 0.5), BlockSpec::site(0.2)],
        vec![1.0, 0.7],
    )
    .unwrap()
}

#[test]
fn exact_mode_is_direct_simulation() {
    let times = uniform_grid(0.0, 0.25, 40);
    let mut bb = BlackBoxChain::exact(hidden()).unwrap();
    assert_eq!(bb.query_survival(&times).unwrap(), survival_amplitude(&hidden(), &times).unwrap());
    assert_eq!(bb.query_two_excitation_return(&times).unwrap(), return_probability(&hidden(), &times).unwrap());
    assert_eq!(bb.query_mixed_correlator(Pauli::X, &times).unwrap(), mixed_correlator(&hidden(), Pauli::X, &times).unwrap());
}

/// Standardized errors at 10^5 shots: no outliers and unit mean square.
#[test]
fn sampled_estimates_are_unbiased() {
    let shots = 100_000u64;
    let times = uniform_grid(0.05, 0.05, 200);
    let exact = return_probability(&hidden(), &times).unwrap();
    let mut bb = BlackBoxChain::new(hidden(), Mode::Sampled { shots, seed: 3 }).unwrap();
    let sampled = bb.query_two_excitation_return(&times).unwrap();
    let z: Vec<f64> = exact
        .values
        .iter()
        .zip(&sampled.values)
        .filter(|(p, _)| **p > 1e-3 && **p < 1.0 - 1e-3)
        .map(|(p, q)| (q - p) / (p * (1.0 - p) / shots as f64).sqrt())
        .collect();
    assert!(z.len() > 100);
    let mean_sq = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    assert!(z.iter().all(|v| v.abs() < 5.0));
    assert!((mean_sq - 1.0).abs() < 0.4, "mean square {mean_sq}");
    assert!(mean.abs() < 5.0 / (z.len() as f64).sqrt(), "mean {mean}");
}
