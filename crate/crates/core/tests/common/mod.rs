//! Fixtures shared by the perturbation tests and the acceptance run.
#![allow(dead_code)]

use augnerf::adversary::{
    pgd_step, AttackConfig, Component, Constraints, Gradients, PerturbationSet, Radii,
    SearchProblem,
};
use augnerf::field::{FieldConfig, RadianceField};
use augnerf::forward::{render_perturbed, RenderSettings};
use augnerf::rays::{stratified_sample, DepthSamples, Ray, RayBatch, SampleBatch};
use augnerf::train::photometric_term;
use augnerf_autodiff::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RADII: Radii = Radii {
    alpha_t: 0.4,
    eps_ball: 0.05,
    eps_theta: 0.004,
    eps_f: 0.01,
    eps_c: 0.05,
    eps_sigma: 0.1,
    sigma_max: 2.0,
};

pub fn random_samples(rng: &mut impl Rng, rays: usize, k: usize) -> SampleBatch {
    let rows: Vec<DepthSamples> = (0..rays)
        .map(|_| stratified_sample(2.0, 6.0, k, rng).unwrap())
        .collect();
    SampleBatch::new(&rows).unwrap()
}

pub fn random_delta(rng: &mut impl Rng, rays: usize, k: usize, width: usize) -> PerturbationSet {
    let mut d = PerturbationSet::zeros(rays, k, width);
    for c in Component::ALL {
        for v in d.get_mut(c).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    d
}

pub fn random_grads(rng: &mut impl Rng, rays: usize, k: usize, width: usize) -> Gradients {
    let d = random_delta(rng, rays, k, width);
    Component::ALL.map(|c| {
        let mut g = d.get(c).clone();
        // exact zeros exercise sign(0)
        for v in g.data_mut() {
            if rng.random_bool(0.1) {
                *v = 0.0;
            }
        }
        Some(g)
    })
}

/// Sign ascent on a one-dimensional quadratic in `δ_σ` alone.
pub fn quadratic_ascent(centre: f64, eps: f64, alpha: f64, steps: usize) -> Vec<f64> {
    let cons = Radii {
        eps_sigma: eps,
        ..RADII
    }
    .constraints(
        &SampleBatch::new(&[DepthSamples {
            t: vec![1.0, 2.0],
            terminal_gap: 1.0,
        }])
        .unwrap(),
        2,
    );
    let mut config = AttackConfig::default();
    config.output.step_size = alpha;
    let mut mask = [false; 6];
    mask[Component::Density as usize] = true;
    let mut d = PerturbationSet::zeros(1, 2, 2);
    let mut path = vec![0.0];
    for _ in 0..steps {
        let x = d.density.data()[0];
        let mut grads: Gradients = Default::default();
        grads[Component::Density as usize] =
            Some(Tensor::new(vec![1], vec![2.0 * (x - centre)]).unwrap());
        d = pgd_step(&d, &grads, &config, &cons, &mask).unwrap();
        path.push(d.density.data()[0]);
    }
    path
}

pub struct Toy {
    pub field: RadianceField,
    pub rays: RayBatch,
    pub samples: SampleBatch,
}

pub fn toy(seed: u64, rays: usize, k: usize) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = RadianceField::new(
        FieldConfig {
            width: 16,
            ..FieldConfig::default()
        },
        &mut rng,
    )
    .unwrap();
    let list: Vec<Ray> = (0..rays)
        .map(|_| {
            let d = [
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                -1.0f64,
            ];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            Ray {
                origin: [
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    4.0,
                ],
                direction: d,
                view_dir: [d[0] / n, d[1] / n, d[2] / n],
                near: 2.0,
                far: 6.0,
                color: [rng.random(), rng.random(), rng.random()],
            }
        })
        .collect();
    let samples = random_samples(&mut rng, rays, k);
    Toy {
        field,
        rays: RayBatch::new(&list),
        samples,
    }
}

impl Toy {
    pub fn problem(&self) -> SearchProblem<'_> {
        SearchProblem {
            field: &self.field,
            rays: &self.rays,
            samples: &self.samples,
            settings: RenderSettings {
                sigma_max: 2.5,
                white_background: true,
            },
        }
    }

    pub fn constraints(&self, config: &AttackConfig) -> Constraints {
        let k = self.samples.samples_per_ray();
        let scale = augnerf::adversary::SceneScale {
            focal: 80.0,
            depth_range: 4.0,
            samples_per_ray: k,
        };
        let mut radii = config.resolve(scale).unwrap();
        radii.sigma_max = 2.5;
        radii.constraints(&self.samples, self.field.width())
    }

    pub fn loss_at(&self, delta: &PerturbationSet, active: &[bool; 6]) -> f64 {
        let mut tape = Tape::new();
        let field = self.field.bind(&mut tape, false);
        let bound = delta.bind(&mut tape, active, &[false; 6]);
        let out = render_perturbed(
            &mut tape,
            &field,
            &self.rays,
            &self.samples,
            &bound.as_vars(),
            self.problem().settings,
        )
        .unwrap();
        let loss = photometric_term(&mut tape, out.color, &self.rays.colors).unwrap();
        tape.value(loss).data()[0]
    }
}
