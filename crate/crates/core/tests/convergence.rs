use fvi::experiments::{
    benchmark_damped_linear, benchmark_van_der_pol, halving_ratio, run_convergence, run_ensemble, EnsembleSpec,
    IntegratorSpec, Ladder, VAN_DER_POL_DEFAULTS,
};
use nalgebra::DMatrix;

#[test]
fn ensemble_slopes_stay_in_band() {
    let (eps, rho, lambda) = VAN_DER_POL_DEFAULTS;
    let bench = benchmark_van_der_pol(eps, rho, lambda).unwrap();
    let study = run_ensemble(&bench, &IntegratorSpec::lobatto(3), &Ladder::default(), &EnsembleSpec::default()).unwrap();
    assert_eq!(study.samples.len(), 25);
    for (sample, slope) in study.samples.iter().zip(study.slopes()) {
        assert!((3.7..=4.3).contains(&slope), "sample {} slope {slope}", sample.sample_id);
    }
    let env = study.state_envelope();
    for i in 0..env.mean.len() {
        assert!(env.min[i] <= env.mean[i] && env.mean[i] <= env.max[i]);
    }
}

#[test]
fn halving_the_step_divides_the_error_by_two_to_the_order() {
    let (eps, rho, lambda) = VAN_DER_POL_DEFAULTS;
    let bench = benchmark_van_der_pol(eps, rho, lambda).unwrap();
    for (spec, order) in [(IntegratorSpec::midpoint(), 2), (IntegratorSpec::lobatto(3), 4)] {
        let ratio = halving_ratio(&bench, &spec, 40, 4000).unwrap();
        let expected = 2f64.powi(order);
        assert!(ratio > expected / 1.5 && ratio < expected * 1.5, "{spec}: ratio {ratio}");
    }
}

#[test]
fn damped_linear_converges_to_its_closed_form() {
    let bench = benchmark_damped_linear(
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 0.2),
        DMatrix::from_element(1, 1, 1.0),
    )
    .unwrap();
    let ladder = Ladder {
        h_max: 0.2,
        h_min: 0.002,
        points: 5,
    };
    for (spec, order) in [(IntegratorSpec::alpha(0.5), 2.0), (IntegratorSpec::lobatto(3), 4.0)] {
        let study = run_convergence(&bench, &spec, &ladder).unwrap();
        assert!((study.slope() - order).abs() < 0.15, "{spec}: slope {}", study.slope());
    }
    // first-order alpha rules lose one order
    let study = run_convergence(&bench, &IntegratorSpec::alpha(0.0), &ladder).unwrap();
    assert!((study.slope() - 1.0).abs() < 0.15, "alpha0: slope {}", study.slope());
}
