use augnerf::adversary::{init_perturbation, AttackConfig, Radii};
use augnerf::field::{FieldConfig, RadianceField};
use augnerf::forward::RenderSettings;
use augnerf::raster::Image;
use augnerf::rays::{stratified_sample, Camera, DepthSamples, Ray, RayBatch, SampleBatch};
use augnerf::regularize::{explicit_regularizer, regularizer_term, RegularizerKind};
use augnerf::scene::{SceneDataset, View};
use augnerf::train::{
    build_loss, log_csv, photometric_loss, train, Adam, LossBreakdown, Method, TrainConfig, Trainer,
};
use augnerf_autodiff::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn photometric_loss_by_hand() {
    assert_eq!(
        photometric_loss(&[[0.3, 0.2, 0.9]], &[[0.3, 0.2, 0.9]]).unwrap(),
        0.0
    );
    let l = photometric_loss(&[[0.1, 0.0, 0.0]], &[[0.0; 3]]).unwrap();
    assert!((l - 0.01).abs() < 1e-15);
    assert!(photometric_loss(&[[0.0; 3], [0.0; 3]], &[[0.0; 3]]).is_err());
}

#[test]
fn photometric_loss_matches_a_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.random_range(1..50);
        let a: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let b: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let mut total = 0.0;
        for i in 0..n {
            let mut sq = 0.0;
            for c in 0..3 {
                sq += (a[i][c] - b[i][c]).powi(2);
            }
            total += sq;
        }
        assert!((photometric_loss(&a, &b).unwrap() - total / n as f64).abs() < 1e-12);
    }
}

struct Batch {
    field: RadianceField,
    rays: RayBatch,
    samples: SampleBatch,
    radii: Radii,
}

fn batch(seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = RadianceField::new(
        FieldConfig {
            width: 16,
            ..FieldConfig::default()
        },
        &mut rng,
    )
    .unwrap();
    for p in field.parameters_mut() {
        if p.rank() == 1 {
            for v in p.data_mut() {
                *v = rng.random_range(0.05..0.3);
            }
        }
    }
    let list: Vec<Ray> = (0..4)
        .map(|_| {
            let d = [
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                -1.0f64,
            ];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            Ray {
                origin: [0.0, 0.0, 4.0],
                direction: d,
                view_dir: [d[0] / n, d[1] / n, d[2] / n],
                near: 2.0,
                far: 6.0,
                color: [rng.random(), rng.random(), rng.random()],
            }
        })
        .collect();
    let rows: Vec<DepthSamples> = (0..4)
        .map(|_| stratified_sample(2.0, 6.0, 8, &mut rng).unwrap())
        .collect();
    let radii = AttackConfig::default()
        .resolve(augnerf::adversary::SceneScale {
            focal: 50.0,
            depth_range: 4.0,
            samples_per_ray: 8,
        })
        .unwrap();
    Batch {
        field,
        rays: RayBatch::new(&list),
        samples: SampleBatch::new(&rows).unwrap(),
        radii,
    }
}

impl Batch {
    fn settings(&self) -> RenderSettings {
        RenderSettings {
            sigma_max: self.radii.sigma_max,
            white_background: true,
        }
    }
}

#[test]
fn zero_lambda_still_reports_the_adversarial_term() {
    let b = batch(2);
    let config = TrainConfig {
        lambda: 0.0,
        ..TrainConfig::default()
    };
    let attack = AttackConfig::default();
    let cons = b.radii.constraints(&b.samples, 16);
    let delta = init_perturbation(&attack, &cons, &mut ChaCha8Rng::seed_from_u64(3));
    let active = attack.active(&b.radii);
    let mut tape = Tape::new();
    let field = b.field.bind(&mut tape, true);
    let vars = build_loss(
        &mut tape,
        &field,
        &b.rays,
        &b.samples,
        Some((&delta, &active)),
        &config,
        b.settings(),
    )
    .unwrap();
    let loss = vars.breakdown(&tape, &config);
    assert_eq!(loss.total, loss.photometric);
    assert!(loss.adversarial > 0.0 && loss.adversarial != loss.photometric);
}

#[test]
fn disabled_attack_doubles_the_photometric_term() {
    let b = batch(4);
    let config = TrainConfig::default();
    let attack = AttackConfig::disabled();
    let cons = b.radii.constraints(&b.samples, 16);
    let delta = init_perturbation(&attack, &cons, &mut ChaCha8Rng::seed_from_u64(5));
    let active = attack.active(&b.radii);
    let mut tape = Tape::new();
    let field = b.field.bind(&mut tape, true);
    let vars = build_loss(
        &mut tape,
        &field,
        &b.rays,
        &b.samples,
        Some((&delta, &active)),
        &config,
        b.settings(),
    )
    .unwrap();
    let loss = vars.breakdown(&tape, &config);
    assert_eq!(loss.adversarial, loss.photometric);
    assert!((loss.total - 1.1 * loss.photometric).abs() < 1e-15);
}

fn total_loss(
    b: &Batch,
    field: &RadianceField,
    delta: &augnerf::adversary::PerturbationSet,
    config: &TrainConfig,
) -> (f64, Vec<Vec<f64>>) {
    let active = [true; 6];
    let mut tape = Tape::new();
    let bound = field.bind(&mut tape, true);
    let vars = build_loss(
        &mut tape,
        &bound,
        &b.rays,
        &b.samples,
        Some((delta, &active)),
        config,
        b.settings(),
    )
    .unwrap();
    tape.backward(vars.total).unwrap();
    let grads = bound
        .parameter_vars()
        .iter()
        .zip(field.parameters())
        .map(|(&v, p): (&Var, _)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec)
        })
        .collect();
    (tape.value(vars.total).data()[0], grads)
}

#[test]
fn total_gradient_matches_finite_differences_with_frozen_delta() {
    let b = batch(6);
    let config = TrainConfig {
        regularizer: RegularizerKind::Tv,
        regularizer_weight: 1e-3,
        regularizer_resolution: 4,
        ..TrainConfig::default()
    };
    let cons = b.radii.constraints(&b.samples, 16);
    let delta = init_perturbation(
        &AttackConfig::default(),
        &cons,
        &mut ChaCha8Rng::seed_from_u64(7),
    );
    let (_, grads) = total_loss(&b, &b.field, &delta, &config);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for _ in 0..60 {
        let t = rng.random_range(0..grads.len());
        let i = rng.random_range(0..grads[t].len());
        if grads[t][i].abs() < 1e-6 {
            continue;
        }
        let h = 1e-6;
        let at = |shift: f64| {
            let mut f = b.field.clone();
            f.parameters_mut()[t].data_mut()[i] += shift;
            total_loss(&b, &f, &delta, &config).0
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        assert!(
            (grads[t][i] - fd).abs() <= 1e-3 * fd.abs().max(grads[t][i].abs()),
            "tensor {t} index {i}: {} vs {fd}",
            grads[t][i]
        );
        checked += 1;
    }
    assert!(checked >= 20);
}

#[test]
fn adam_matches_a_scalar_implementation() {
    // minimise (x - 3)^2 from x = 0
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
    let (mut x, mut m, mut v) = (0.0f64, 0.0, 0.0);
    let mut expected = Vec::new();
    for t in 1..=10 {
        let g = 2.0 * (x - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        x -= lr * m_hat / (v_hat.sqrt() + eps);
        expected.push(x);
    }
    let mut adam = Adam::new(&[1]);
    let mut p = vec![0.0];
    for want in expected {
        let g = [2.0 * (p[0] - 3.0)];
        adam.step(&mut [p.as_mut_slice()], &[&g], lr).unwrap();
        assert!((p[0] - want).abs() < 1e-12);
    }
    assert_eq!(adam.steps_taken(), 10);
}

#[test]
fn adam_moves_against_a_constant_gradient() {
    let mut adam = Adam::new(&[2]);
    let mut p = vec![0.0, 0.0];
    let mut last = p.clone();
    for _ in 0..100 {
        adam.step(&mut [p.as_mut_slice()], &[&[0.5, -2.0]], 1e-2)
            .unwrap();
        assert!(p[0] < last[0] && p[1] > last[1]);
        last.clone_from(&p);
    }
}

#[test]
fn adam_ignores_zero_gradients() {
    let mut adam = Adam::new(&[3]);
    let mut p = vec![1.0, -2.0, 0.5];
    for _ in 0..5 {
        adam.step(&mut [p.as_mut_slice()], &[&[0.0; 3]], 0.1)
            .unwrap();
    }
    assert_eq!(p, vec![1.0, -2.0, 0.5]);
}

fn one_pixel_scene(color: [f64; 3]) -> SceneDataset {
    let pose = Camera::look_at([0.0, 0.0, 4.0], [0.0; 3], [0.0, 1.0, 0.0]);
    let camera = Camera::new(1, 1, 1.0, pose, 2.0, 6.0).unwrap();
    let view = View {
        name: "only".into(),
        camera,
        image: Image::filled(1, 1, color),
    };
    SceneDataset {
        train: vec![view],
        test: vec![],
        white_background: true,
    }
}

fn small_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_rays: 2,
        coarse_samples: 8,
        fine_samples: 8,
        learning_rate: 5e-3,
        field: FieldConfig {
            width: 16,
            ..FieldConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn one_ray_training_halves_the_loss() {
    let scene = one_pixel_scene([0.1, 0.6, 0.3]);
    let mut trainer = Trainer::new(&scene, small_config(200), AttackConfig::default()).unwrap();
    let losses: Vec<f64> = (0..200)
        .map(|_| trainer.step().unwrap().photometric)
        .collect();
    let start = losses[..5].iter().sum::<f64>() / 5.0;
    let end = losses[195..].iter().sum::<f64>() / 5.0;
    assert!(end <= 0.5 * start, "loss went from {start} to {end}");
    assert!(losses.iter().all(|l| l.is_finite()));
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let scene = one_pixel_scene([0.8, 0.2, 0.4]);
    let config = TrainConfig {
        checkpoint_every: 5,
        ..small_config(12)
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let logs: Vec<String> = dirs
        .iter()
        .map(|d| {
            log_csv(
                &train(&scene, &config, &AttackConfig::default(), Some(d.path()))
                    .unwrap()
                    .log,
            )
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
    for name in [
        "checkpoint_000005.json",
        "checkpoint_000010.json",
        "checkpoint.json",
    ] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let other = TrainConfig { seed: 1, ..config };
    let c = train(&scene, &other, &AttackConfig::default(), None).unwrap();
    assert_ne!(log_csv(&c.log), logs[0]);
}

#[test]
fn zero_lambda_without_attack_reduces_to_vanilla() {
    let scene = one_pixel_scene([0.5, 0.5, 0.9]);
    let aug = TrainConfig {
        lambda: 0.0,
        method: Method::AugNerf,
        ..small_config(15)
    };
    let nerf = TrainConfig {
        method: Method::Nerf,
        ..aug.clone()
    };
    let a = train(&scene, &aug, &AttackConfig::disabled(), None).unwrap();
    let b = train(&scene, &nerf, &AttackConfig::disabled(), None).unwrap();
    assert_eq!(a.field.to_json().unwrap(), b.field.to_json().unwrap());
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.loss.photometric.to_bits(), y.loss.photometric.to_bits());
        assert_eq!(x.loss.total.to_bits(), y.loss.total.to_bits());
    }
}

#[test]
fn breakdown_total_is_exactly_additive() {
    let scene = one_pixel_scene([0.2, 0.9, 0.1]);
    let config = TrainConfig {
        regularizer: RegularizerKind::L1,
        regularizer_weight: 0.01,
        regularizer_resolution: 3,
        ..small_config(10)
    };
    let out = train(&scene, &config, &AttackConfig::default(), None).unwrap();
    for row in &out.log {
        let l = row.loss;
        assert_eq!(
            l,
            LossBreakdown::new(l.photometric, l.adversarial, l.regularizer, 0.1, 0.01)
        );
        assert!(l.regularizer > 0.0 && l.adversarial > 0.0);
    }
}

fn column(tape: &mut Tape, p: Var, c: usize) -> augnerf::Result<Var> {
    let n = tape.shape(p)[0];
    let s = tape.slice(p, 1, c, c + 1)?;
    Ok(tape.reshape(s, &[n])?)
}

#[test]
fn regularizers_vanish_on_an_empty_field() {
    let zero = |tape: &mut Tape, p: Var| -> augnerf::Result<Var> {
        let x = column(tape, p, 0)?;
        Ok(tape.scale(x, 0.0))
    };
    for kind in [
        RegularizerKind::L1,
        RegularizerKind::Tv,
        RegularizerKind::Laplacian,
    ] {
        assert_eq!(explicit_regularizer(&zero, kind, 8).unwrap(), 0.0);
    }
}

#[test]
fn linear_field_has_total_variation_eight() {
    let linear = |tape: &mut Tape, p: Var| column(tape, p, 0);
    for n in [2, 5, 16, 33] {
        assert!(
            (explicit_regularizer(&linear, RegularizerKind::Tv, n).unwrap() - 8.0).abs() < 1e-12
        );
    }
}

#[test]
fn quadratic_field_l1_approaches_its_integral() {
    let square = |tape: &mut Tape, p: Var| -> augnerf::Result<Var> {
        let x = column(tape, p, 0)?;
        Ok(tape.square(x))
    };
    let value = explicit_regularizer(&square, RegularizerKind::L1, 64).unwrap();
    assert!((value - 8.0 / 3.0).abs() < 0.01 * 8.0 / 3.0, "{value}");
}

#[test]
fn harmonic_field_has_no_laplacian() {
    // x² - y² + 3z
    let harmonic = |tape: &mut Tape, p: Var| -> augnerf::Result<Var> {
        let x = column(tape, p, 0)?;
        let y = column(tape, p, 1)?;
        let z = column(tape, p, 2)?;
        let (x2, y2) = (tape.square(x), tape.square(y));
        let d = tape.sub(x2, y2)?;
        let z = tape.scale(z, 3.0);
        Ok(tape.add(d, z)?)
    };
    assert!(explicit_regularizer(&harmonic, RegularizerKind::Laplacian, 16).unwrap() < 1e-9);
}

#[test]
fn quadrature_converges_on_a_smooth_field() {
    // exp(-|x|²) + 0.5 cos(2y)
    let smooth = |tape: &mut Tape, p: Var| -> augnerf::Result<Var> {
        let sq = tape.square(p);
        let r2 = tape.sum_last(sq)?;
        let neg = tape.neg(r2);
        let bump = tape.exp(neg);
        let y = column(tape, p, 1)?;
        let y = tape.scale(y, 2.0);
        let wave = tape.cos(y);
        let wave = tape.scale(wave, 0.5);
        Ok(tape.add(bump, wave)?)
    };
    for kind in [
        RegularizerKind::L1,
        RegularizerKind::Tv,
        RegularizerKind::Laplacian,
    ] {
        let coarse = explicit_regularizer(&smooth, kind, 32).unwrap();
        let fine = explicit_regularizer(&smooth, kind, 64).unwrap();
        assert!(
            (fine - coarse).abs() < 0.05 * fine.abs(),
            "{kind:?}: {coarse} vs {fine}"
        );
    }
}

#[test]
fn training_l1_term_matches_the_quadrature() {
    let b = batch(9);
    let mut tape = Tape::new();
    let bound = b.field.bind(&mut tape, false);
    let term = regularizer_term(&mut tape, &bound, RegularizerKind::L1, 6)
        .unwrap()
        .unwrap();
    let quad = explicit_regularizer(&b.field, RegularizerKind::L1, 6).unwrap();
    assert!((tape.value(term).data()[0] - quad).abs() < 1e-12 * quad.max(1.0));
}
