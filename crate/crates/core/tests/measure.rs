//! Path-measure identities on the bouncing ball.

use hpi_core::measure::{applied_drift, discrete_density_ratio, log_ratio_controlled, passive_drift, path_cost_S, state_cost_L};
use hpi_core::rng::{tags, GaussianNoise, NoiseDraw};
use hpi_core::rollout::OpenLoopPolicy;
use hpi_core::systems::{build, SystemOverrides};
use hpi_core::{rollout, EventConfig};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn girsanov_ratio_equals_discrete_density_ratio_on_jumping_paths() {
    let bench = build("bouncing-ball", &SystemOverrides { dt: Some(0.01), ..Default::default() }).unwrap();
    let (model, grid) = (&bench.model, &bench.grid);
    let eps = model.noise_intensity();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    for k in 0..100u64 {
        let controls = (0..grid.steps).map(|_| DVector::from_element(1, rng.random_range(-20.0..20.0))).collect();
        let policy = OpenLoopPolicy { controls };
        let mut noise = GaussianNoise::new(k, tags::DIAGNOSTIC, 0, k);
        let r = rollout(model, grid, &bench.initial, &policy, &mut noise, &bench.costs, &EventConfig::default()).unwrap();
        assert!(!r.jumps.is_empty());
        let lr = log_ratio_controlled(&r, eps).log_ratio_u_over_0;
        let dr = discrete_density_ratio(model, &r, &passive_drift(model), &applied_drift(model), eps).unwrap();
        assert!(!dr.degenerate);
        assert!((lr - dr.log_ratio).abs() <= 1e-9 * lr.abs().max(1.0), "path {k}: {lr} vs {}", dr.log_ratio);
        checked += 1;
    }
    assert_eq!(checked, 100);
}

#[test]
fn summary_terms_match_recomputation() {
    let bench = build("bouncing-ball", &SystemOverrides { dt: Some(0.01), ..Default::default() }).unwrap();
    let eps = bench.model.noise_intensity();
    let draw = NoiseDraw::generate(5, tags::ACTUATOR, 0, bench.grid.steps, 1, bench.grid.dt);
    let policy = OpenLoopPolicy {
        controls: vec![DVector::from_element(1, 3.0); bench.grid.steps],
    };
    let r = rollout(&bench.model, &bench.grid, &bench.initial, &policy, &mut draw.source(), &bench.costs, &EventConfig::default()).unwrap();
    assert!((state_cost_L(&r) - r.l_h).abs() < 1e-9);
    assert!((path_cost_S(&r, eps) - r.s_u).abs() < 1e-9 * r.s_u.abs().max(1.0));
    let energy: f64 = r.steps.iter().map(|s| 4.5 * s.dt_eff).sum();
    assert!((r.control_energy_integral - energy).abs() < 1e-12);
}
