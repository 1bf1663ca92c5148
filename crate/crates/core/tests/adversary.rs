mod common;

use common::*;

use augnerf::adversary::{
    init_perturbation, pgd_step, project, search, AttackConfig, Component, Constraints, Gradients,
    InitMode, PerturbationSet, Radii,
};
use augnerf::rays::{DepthSamples, SampleBatch};
use augnerf::Error;
use augnerf_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_init_is_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cons = RADII.constraints(&random_samples(&mut rng, 4, 8), 16);
    let config = AttackConfig {
        init: InitMode::Zero,
        ..AttackConfig::default()
    };
    let d = init_perturbation(&config, &cons, &mut rng);
    assert!(d.is_zero());
    assert_eq!(d.depth.shape(), &[4, 8]);
    assert_eq!(d.feature.shape(), &[4, 16]);
}

#[test]
fn random_init_lies_in_every_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let config = AttackConfig::default();
    for _ in 0..10_000 {
        let cons = RADII.constraints(&random_samples(&mut rng, 2, 4), 8);
        let d = init_perturbation(&config, &cons, &mut rng);
        assert!(d.within(&cons));
        assert!(!d.is_zero());
    }
}

#[test]
fn zero_radii_give_zero_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let radii = Radii {
        alpha_t: 0.0,
        eps_ball: 0.0,
        eps_theta: 0.0,
        eps_f: 0.0,
        eps_c: 0.0,
        eps_sigma: 0.0,
        sigma_max: 2.0,
    };
    let cons = radii.constraints(&random_samples(&mut rng, 3, 6), 8);
    for _ in 0..100 {
        assert!(init_perturbation(&AttackConfig::default(), &cons, &mut rng).is_zero());
    }
}

fn unit_cons() -> Constraints {
    let samples = SampleBatch::new(&[DepthSamples {
        t: vec![1.0, 2.0, 3.0],
        terminal_gap: 1.0,
    }])
    .unwrap();
    Radii {
        eps_ball: 1.0,
        ..RADII
    }
    .constraints(&samples, 4)
}

#[test]
fn projection_clamps_boxes_and_rescales_the_ball() {
    let cons = unit_cons();
    let mut d = PerturbationSet::zeros(1, 3, 4);
    d.density.data_mut()[0] = 0.5;
    d.position.data_mut().copy_from_slice(&[3.0, 4.0, 0.0]);
    let p = project(&d, &cons);
    assert_eq!(p.density.data(), &[0.1]);
    let v = p.position.data();
    assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15 && v[2] == 0.0);
}

#[test]
fn projection_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let cons = RADII.constraints(&random_samples(&mut rng, 3, 5), 6);
        let once = project(&random_delta(&mut rng, 3, 5, 6), &cons);
        assert_eq!(project(&once, &cons), once);
    }
}

#[test]
fn positive_gradient_takes_a_full_sign_step() {
    let cons = unit_cons();
    let config = AttackConfig::default();
    let d = PerturbationSet::zeros(1, 3, 4);
    let mut grads: Gradients = Default::default();
    let mut mask = [false; 6];
    for c in [Component::Feature, Component::Color] {
        grads[c as usize] =
            Some(Tensor::new(d.get(c).shape().to_vec(), vec![0.3; d.get(c).numel()]).unwrap());
        mask[c as usize] = true;
    }
    let next = pgd_step(&d, &grads, &config, &cons, &mask).unwrap();
    assert!(next
        .feature
        .data()
        .iter()
        .all(|&v| v == config.feature.step_size));
    assert!(next
        .color
        .data()
        .iter()
        .all(|&v| v == config.output.step_size));
    assert!(next.density.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_gradient_leaves_delta_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cons = RADII.constraints(&random_samples(&mut rng, 2, 4), 8);
    let d = init_perturbation(&AttackConfig::default(), &cons, &mut rng);
    let grads: Gradients =
        Component::ALL.map(|c| Some(Tensor::zeros(d.get(c).shape().to_vec()).unwrap()));
    assert_eq!(
        pgd_step(&d, &grads, &AttackConfig::default(), &cons, &[true; 6]).unwrap(),
        d
    );
}

#[test]
fn missing_gradient_is_reported() {
    let cons = unit_cons();
    let d = PerturbationSet::zeros(1, 3, 4);
    let mut mask = [false; 6];
    mask[Component::Density as usize] = true;
    let err = pgd_step(
        &d,
        &Default::default(),
        &AttackConfig::default(),
        &cons,
        &mask,
    )
    .unwrap_err();
    assert!(matches!(err, Error::MissingGradient("delta_sigma")));
}

#[test]
fn quadratic_ascent_reaches_the_boundary_in_ceil_steps() {
    for (eps, alpha) in [(0.1f64, 0.03), (0.1, 0.025), (1.0, 0.3), (0.05, 0.05)] {
        let n = (eps / alpha).ceil() as usize;
        // (δ + ε)² grows towards +ε
        let path = quadratic_ascent(-eps, eps, alpha, n + 2);
        assert!(
            path[n - 1] < eps,
            "boundary reached early for ε={eps} α={alpha}"
        );
        assert_eq!(path[n], eps);
        assert_eq!(path[n + 2], eps);
        // (δ - ε)² is smallest at +ε, so ascent heads to -ε
        let path = quadratic_ascent(eps, eps, alpha, n);
        assert_eq!(path[n], -eps);
    }
}

#[test]
fn iterates_stay_inside_every_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut config = AttackConfig::default();
    config.coordinate.step_size = 0.03;
    config.feature.step_size = 0.004;
    config.output.step_size = 0.02;
    for _ in 0..10_000 {
        let cons = RADII.constraints(&random_samples(&mut rng, 2, 4), 4);
        let mut d = init_perturbation(&config, &cons, &mut rng);
        for _ in 0..3 {
            let grads = random_grads(&mut rng, 2, 4, 4);
            d = pgd_step(&d, &grads, &config, &cons, &[true; 6]).unwrap();
            assert!(d.within(&cons));
        }
    }
}

#[test]
fn disabled_search_returns_the_clean_loss() {
    let t = toy(7, 4, 8);
    let config = AttackConfig::disabled();
    let cons = t.constraints(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = search(&t.problem(), &config, &cons, &mut rng).unwrap();
    assert!(out.delta.is_zero());
    assert_eq!(
        out.loss.to_bits(),
        t.loss_at(&out.delta, &[false; 6]).to_bits()
    );
}

#[test]
fn zero_start_search_ascends_on_random_models() {
    let config = AttackConfig {
        init: InitMode::Zero,
        ..AttackConfig::default()
    };
    let mut ascended = 0;
    for seed in 0..100 {
        let t = toy(100 + seed, 2, 8);
        let cons = t.constraints(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = search(&t.problem(), &config, &cons, &mut rng).unwrap();
        assert!(out.delta.within(&cons));
        if out.loss >= t.loss_at(&PerturbationSet::zeros(2, 8, 16), &[false; 6]) {
            ascended += 1;
        }
    }
    assert!(ascended >= 90, "ascent in {ascended}/100 models");
}

#[test]
fn one_step_matches_the_corner_grid_maximum() {
    // Output level only, one step of the full radius: every iterate is a box
    // corner, so the grid over {-ε, +ε}⁴ holds the attainable maximum.
    let mut config = AttackConfig {
        init: InitMode::Zero,
        ..AttackConfig::disabled()
    };
    config.output = augnerf::adversary::LevelConfig {
        enabled: true,
        steps: 1,
        step_size: 1.0,
    };
    let eps_c = 0.05;
    let eps_sigma = 0.125;
    config.eps_c = eps_c;
    config.eps_sigma = Some(eps_sigma);
    for seed in 0..10 {
        let t = toy(300 + seed, 1, 2);
        let cons = t.constraints(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let found = search(&t.problem(), &config, &cons, &mut rng).unwrap();
        let active = config.active(&cons.radii);
        let mut best = f64::NEG_INFINITY;
        for corner in 0..16u32 {
            let mut d = PerturbationSet::zeros(1, 2, 16);
            for c in 0..3 {
                d.color.data_mut()[c] = if corner >> c & 1 == 1 { eps_c } else { -eps_c };
            }
            d.density.data_mut()[0] = if corner >> 3 & 1 == 1 {
                eps_sigma
            } else {
                -eps_sigma
            };
            best = best.max(t.loss_at(&d, &active));
        }
        assert!(
            found.loss >= 0.9 * best,
            "seed {seed}: {} against grid {best}",
            found.loss
        );
    }
}

#[test]
fn zero_start_search_leaves_field_and_rng_alone() {
    let t = toy(8, 3, 8);
    let before = t.field.clone();
    let config = AttackConfig {
        init: InitMode::Zero,
        ..AttackConfig::default()
    };
    let cons = t.constraints(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let reference = rng.clone();
    search(&t.problem(), &config, &cons, &mut rng).unwrap();
    assert_eq!(t.field, before);
    assert_eq!(rng, reference);
}

#[test]
fn disabling_a_level_equals_zero_radius() {
    let t = toy(10, 3, 8);
    let disabled = {
        let mut c = AttackConfig::default();
        c.feature.enabled = false;
        c.output.enabled = false;
        c
    };
    let zeroed = AttackConfig {
        eps_f: 0.0,
        eps_c: 0.0,
        eps_sigma: Some(0.0),
        ..AttackConfig::default()
    };
    let a_cons = t.constraints(&disabled);
    let b_cons = t.constraints(&zeroed);
    let a = search(
        &t.problem(),
        &disabled,
        &a_cons,
        &mut ChaCha8Rng::seed_from_u64(11),
    )
    .unwrap();
    let b = search(
        &t.problem(),
        &zeroed,
        &b_cons,
        &mut ChaCha8Rng::seed_from_u64(11),
    )
    .unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.delta, b.delta);

    let all_off = search(
        &t.problem(),
        &AttackConfig::disabled(),
        &a_cons,
        &mut ChaCha8Rng::seed_from_u64(12),
    )
    .unwrap();
    let radii_off = AttackConfig {
        alpha_t: 0.0,
        eps_ball: Some(0.0),
        eps_pixel: 0.0,
        eps_f: 0.0,
        eps_c: 0.0,
        eps_sigma: Some(0.0),
        ..AttackConfig::default()
    };
    let cons = t.constraints(&radii_off);
    let zero = search(
        &t.problem(),
        &radii_off,
        &cons,
        &mut ChaCha8Rng::seed_from_u64(12),
    )
    .unwrap();
    assert_eq!(all_off.loss.to_bits(), zero.loss.to_bits());
    assert_eq!(all_off.delta, zero.delta);
}
