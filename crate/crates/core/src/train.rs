//! Training objective, optimiser and loop.

use std::fmt::Write as _;
use std::path::Path;

use augnerf_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{
    run_pgd, AttackConfig, Mask, PerturbationSet, Radii, SceneScale, SearchProblem,
};
use crate::error::{check_len, Error, Result};
use crate::field::{BoundField, FieldConfig, RadianceField};
use crate::forward::{
    render_clean, render_perturbed, render_view, sample_batch, RenderSettings, Sampling,
};
use crate::metrics::{psnr, ssim};
use crate::rays::{Ray, RayBatch, SampleBatch};
use crate::regularize::{regularizer_term, RegularizerKind};
use crate::scene::{SceneDataset, View};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Photometric loss only; no perturbed render is built.
    Nerf,
    /// Photometric plus `lambda` times the loss under the worst-case perturbation.
    #[default]
    AugNerf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub lambda: f64,
    pub learning_rate: f64,
    /// Learning rate multiplier reached at the final iteration.
    pub lr_decay: f64,
    pub iterations: usize,
    pub batch_rays: usize,
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub regularizer: RegularizerKind,
    pub regularizer_weight: f64,
    pub regularizer_resolution: usize,
    pub seed: u64,
    /// Iterations between checkpoints; zero keeps only the final one.
    pub checkpoint_every: usize,
    /// Iterations between held-out evaluations; zero disables them.
    pub eval_every: usize,
    pub field: FieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::AugNerf,
            lambda: 0.1,
            learning_rate: 5e-4,
            lr_decay: 0.1,
            iterations: 20_000,
            batch_rays: 256,
            coarse_samples: 32,
            fine_samples: 32,
            regularizer: RegularizerKind::None,
            regularizer_weight: 0.0,
            regularizer_resolution: 8,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            field: FieldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::invalid("train config", detail));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail(format!("lambda {}", self.lambda));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0 && self.lr_decay > 0.0) {
            return fail(format!(
                "learning rate {} decay {}",
                self.learning_rate, self.lr_decay
            ));
        }
        if self.batch_rays == 0 || self.coarse_samples < 2 {
            return fail(format!(
                "{} rays of {} coarse samples",
                self.batch_rays, self.coarse_samples
            ));
        }
        if self.regularizer_resolution < 2 {
            return fail(format!(
                "lattice resolution {}",
                self.regularizer_resolution
            ));
        }
        if !(self.regularizer_weight.is_finite() && self.regularizer_weight >= 0.0) {
            return fail(format!("regularizer weight {}", self.regularizer_weight));
        }
        self.field.validate()
    }

    pub fn sampling(&self) -> Sampling {
        Sampling {
            coarse: self.coarse_samples,
            fine: self.fine_samples,
        }
    }

    /// `lr · decay^(iteration / iterations)`.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let progress = iteration as f64 / self.iterations.max(1) as f64;
        self.learning_rate * self.lr_decay.powf(progress)
    }
}

/// Loss terms of one iteration. `total` is always
/// `photometric + lambda * adversarial + weight * regularizer`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub photometric: f64,
    pub adversarial: f64,
    pub regularizer: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(
        photometric: f64,
        adversarial: f64,
        regularizer: f64,
        lambda: f64,
        weight: f64,
    ) -> Self {
        Self {
            photometric,
            adversarial,
            regularizer,
            total: photometric + lambda * adversarial + weight * regularizer,
        }
    }
}

/// Mean over rays of the squared colour error.
pub fn photometric_loss(rendered: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<f64> {
    check_len("supervision colours", rendered.len(), truth.len())?;
    if rendered.is_empty() {
        return Err(Error::invalid("photometric loss", "empty batch"));
    }
    let sum: f64 = rendered
        .iter()
        .zip(truth)
        .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]) * (a[c] - b[c])))
        .sum();
    Ok(sum / rendered.len() as f64)
}

/// [`photometric_loss`] on a tape, for `[B, 3]` colours.
pub fn photometric_term(tape: &mut Tape, color: Var, truth: &Tensor) -> Result<Var> {
    if tape.shape(color) != truth.shape() || truth.rank() != 2 || truth.shape()[0] == 0 {
        return Err(Error::invalid(
            "photometric loss",
            format!(
                "rendered {:?} against truth {:?}",
                tape.shape(color),
                truth.shape()
            ),
        ));
    }
    let rays = truth.shape()[0];
    let target = tape.constant(truth.clone());
    let diff = tape.sub(color, target)?;
    let sq = tape.square(diff);
    let sum = tape.sum(sq);
    Ok(tape.scale(sum, 1.0 / rays as f64))
}

/// Loss terms of one batch as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub photometric: Var,
    pub adversarial: Option<Var>,
    pub regularizer: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape, config: &TrainConfig) -> LossBreakdown {
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
        LossBreakdown::new(
            value(Some(self.photometric)),
            value(self.adversarial),
            value(self.regularizer),
            config.lambda,
            config.regularizer_weight,
        )
    }
}

/// Clean and (optionally) perturbed renders of the same samples, combined into
/// the training objective. A zero `lambda` keeps the adversarial term out of
/// the graph that `total` depends on.
pub fn build_loss(
    tape: &mut Tape,
    field: &BoundField,
    rays: &RayBatch,
    samples: &SampleBatch,
    delta: Option<(&PerturbationSet, &Mask)>,
    config: &TrainConfig,
    settings: RenderSettings,
) -> Result<LossVars> {
    let clean = render_clean(tape, field, rays, samples, settings)?;
    let photometric = photometric_term(tape, clean.color, &rays.colors)?;
    let adversarial = match delta {
        Some((delta, active)) => {
            let bound = delta.bind(tape, active, &[false; 6]);
            let out = render_perturbed(tape, field, rays, samples, &bound.as_vars(), settings)?;
            Some(photometric_term(tape, out.color, &rays.colors)?)
        }
        None => None,
    };
    let regularizer = if config.regularizer_weight > 0.0 {
        regularizer_term(
            tape,
            field,
            config.regularizer,
            config.regularizer_resolution,
        )?
    } else {
        None
    };
    let mut total = photometric;
    if let Some(a) = adversarial.filter(|_| config.lambda > 0.0) {
        let a = tape.scale(a, config.lambda);
        total = tape.add(total, a)?;
    }
    if let Some(r) = regularizer {
        let r = tape.scale(r, config.regularizer_weight);
        total = tape.add(total, r)?;
    }
    Ok(LossVars {
        photometric,
        adversarial,
        regularizer,
        total,
    })
}

/// Adam with bias correction, `β = (0.9, 0.999)`, `eps = 1e-8`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        check_len("gradient tensors", self.m.len(), grads.len())?;
        check_len("parameter tensors", self.m.len(), params.len())?;
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            check_len("gradient values", p.len(), g.len())?;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub learning_rate: f64,
    pub eval_psnr: Option<f64>,
    pub eval_ssim: Option<f64>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(
        "iteration,photometric,adversarial,regularizer,total,learning_rate,eval_psnr,eval_ssim\n",
    );
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iteration,
            r.loss.photometric,
            r.loss.adversarial,
            r.loss.regularizer,
            r.loss.total,
            r.learning_rate,
            opt(r.eval_psnr),
            opt(r.eval_ssim)
        );
    }
    out
}

/// Mean held-out image quality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub psnr: f64,
    pub ssim: f64,
}

pub fn evaluate(
    field: &RadianceField,
    views: &[View],
    sampling: Sampling,
    settings: RenderSettings,
) -> Result<EvalSummary> {
    if views.is_empty() {
        return Err(Error::invalid("evaluation", "no views"));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for view in views {
        let out = render_view(field, &view.camera, sampling, settings)?;
        p += psnr(&out.color, &view.image)?;
        s += ssim(&out.color, &view.image)?;
    }
    let n = views.len() as f64;
    Ok(EvalSummary {
        psnr: p / n,
        ssim: s / n,
    })
}

fn scene_scale(rays: &[Ray], scene: &SceneDataset, sampling: Sampling) -> SceneScale {
    SceneScale {
        focal: scene.mean_focal(),
        depth_range: rays.iter().map(|r| r.far - r.near).sum::<f64>() / rays.len().max(1) as f64,
        samples_per_ray: sampling.total(),
    }
}

/// Settings a run on `scene` renders with, so a saved field can be
/// re-rendered exactly as it was evaluated during training.
pub fn render_settings(
    scene: &SceneDataset,
    config: &TrainConfig,
    attack: &AttackConfig,
) -> Result<RenderSettings> {
    let rays = scene.training_rays();
    if rays.is_empty() {
        return Err(Error::invalid("scene", "no training rays"));
    }
    let radii = attack.resolve(scene_scale(&rays, scene, config.sampling()))?;
    Ok(RenderSettings {
        sigma_max: radii.sigma_max,
        white_background: scene.white_background,
    })
}

/// Owns the field and optimiser state for one training run.
pub struct Trainer {
    config: TrainConfig,
    attack: AttackConfig,
    field: RadianceField,
    adam: Adam,
    rays: Vec<Ray>,
    radii: Radii,
    settings: RenderSettings,
    rng: ChaCha8Rng,
    attack_rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    pub fn new(scene: &SceneDataset, config: TrainConfig, attack: AttackConfig) -> Result<Self> {
        config.validate()?;
        let rays = scene.training_rays();
        if rays.is_empty() {
            return Err(Error::invalid("scene", "no training rays"));
        }
        let radii = attack.resolve(scene_scale(&rays, scene, config.sampling()))?;
        let settings = RenderSettings {
            sigma_max: radii.sigma_max,
            white_background: scene.white_background,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut attack_rng = ChaCha8Rng::seed_from_u64(config.seed);
        attack_rng.set_stream(attack.seed.wrapping_add(1));
        let field = RadianceField::new(config.field.clone(), &mut rng)?;
        let sizes: Vec<usize> = field.parameters().iter().map(|t| t.numel()).collect();
        Ok(Self {
            adam: Adam::new(&sizes),
            config,
            attack,
            field,
            rays,
            radii,
            settings,
            rng,
            attack_rng,
            iteration: 0,
        })
    }

    pub fn field(&self) -> &RadianceField {
        &self.field
    }

    pub fn into_field(self) -> RadianceField {
        self.field
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn radii(&self) -> &Radii {
        &self.radii
    }

    pub fn settings(&self) -> RenderSettings {
        self.settings
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Sample a batch, search for the perturbation, and take one optimiser step.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let batch: Vec<Ray> = (0..self.config.batch_rays)
            .map(|_| self.rays[self.rng.random_range(0..self.rays.len())])
            .collect();
        let rays = RayBatch::new(&batch);
        let samples = {
            let rng = &mut self.rng;
            let mut fine = ChaCha8Rng::from_rng(rng);
            sample_batch(
                &self.field,
                &rays,
                self.config.sampling(),
                self.settings,
                rng,
                &mut fine,
            )?
        };

        let attack = match self.config.method {
            Method::Nerf => None,
            Method::AugNerf => {
                let cons = self.radii.constraints(&samples, self.field.width());
                let problem = SearchProblem {
                    field: &self.field,
                    rays: &rays,
                    samples: &samples,
                    settings: self.settings,
                };
                let delta = run_pgd(&problem, &self.attack, &cons, &mut self.attack_rng)?;
                Some((delta, self.attack.active(&self.radii)))
            }
        };

        let mut tape = Tape::new();
        let bound = self.field.bind(&mut tape, true);
        let vars = build_loss(
            &mut tape,
            &bound,
            &rays,
            &samples,
            attack.as_ref().map(|(d, m)| (d, m)),
            &self.config,
            self.settings,
        )?;
        let loss = vars.breakdown(&tape, &self.config);
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                dump: dump_batch(&batch, &loss),
            });
        }
        tape.backward(vars.total)?;
        let param_vars = bound.parameter_vars();
        let grads: Vec<Vec<f64>> = param_vars
            .iter()
            .zip(self.field.parameters())
            .map(|(&v, p)| {
                tape.grad(v)
                    .map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec)
            })
            .collect();
        let lr = self.config.learning_rate_at(self.iteration);
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut params: Vec<&mut [f64]> = self
            .field
            .parameters_mut()
            .into_iter()
            .map(Tensor::data_mut)
            .collect();
        self.adam.step(&mut params, &grad_refs, lr)?;
        self.iteration += 1;
        Ok(loss)
    }
}

fn dump_batch(batch: &[Ray], loss: &LossBreakdown) -> String {
    let rays: Vec<_> = batch
        .iter()
        .map(|r| serde_json::json!({"origin": r.origin, "direction": r.direction, "near": r.near, "far": r.far, "color": r.color}))
        .collect();
    serde_json::json!({"loss": loss, "rays": rays}).to_string()
}

/// Final field and per-iteration log of a run.
pub struct TrainOutcome {
    pub field: RadianceField,
    pub log: Vec<LogRow>,
}

/// Run `config.iterations` steps, evaluating on the held-out views every
/// `eval_every` iterations and writing checkpoints into `checkpoint_dir`.
pub fn train(
    scene: &SceneDataset,
    config: &TrainConfig,
    attack: &AttackConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(scene, config.clone(), attack.clone())?;
    let mut log = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let lr = config.learning_rate_at(trainer.iteration());
        let loss = trainer.step()?;
        let it = trainer.iteration();
        let mut row = LogRow {
            iteration: it,
            loss,
            learning_rate: lr,
            eval_psnr: None,
            eval_ssim: None,
        };
        let last = it == config.iterations;
        if config.eval_every > 0 && (it % config.eval_every == 0 || last) && !scene.test.is_empty()
        {
            let e = evaluate(
                trainer.field(),
                &scene.test,
                config.sampling(),
                trainer.settings(),
            )?;
            row.eval_psnr = Some(e.psnr);
            row.eval_ssim = Some(e.ssim);
        }
        log.push(row);
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && it % config.checkpoint_every == 0 && !last {
                trainer
                    .field()
                    .save(&dir.join(format!("checkpoint_{it:06}.json")))?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        trainer.field().save(&dir.join("checkpoint.json"))?;
    }
    Ok(TrainOutcome {
        field: trainer.into_field(),
        log,
    })
}
