//! Bounded perturbations at three levels and the projected-gradient inner
//! maximisation over them.
//!
//! * coordinate level: per-sample depth shifts, a per-ray position offset in an
//!   ℓ2 ball, and a per-ray direction offset inside the pixel frustum;
//! * feature level: a per-ray offset on the trunk feature;
//! * output level: per-ray colour and density offsets.

use augnerf_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::RadianceField;
use crate::forward::{render_perturbed, PerturbationVars, RenderSettings};
use crate::rays::{RayBatch, SampleBatch};
use crate::train::photometric_term;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Coordinate,
    Feature,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Depth,
    Position,
    Direction,
    Feature,
    Color,
    Density,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Depth,
        Component::Position,
        Component::Direction,
        Component::Feature,
        Component::Color,
        Component::Density,
    ];

    pub fn level(self) -> Level {
        match self {
            Component::Depth | Component::Position | Component::Direction => Level::Coordinate,
            Component::Feature => Level::Feature,
            Component::Color | Component::Density => Level::Output,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Depth => "delta_t",
            Component::Position => "delta_xyz",
            Component::Direction => "delta_theta",
            Component::Feature => "delta_f",
            Component::Color => "delta_c",
            Component::Density => "delta_sigma",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Per-component flags, indexed by [`Component`].
pub type Mask = [bool; 6];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    pub enabled: bool,
    /// PGD iterations; zero disables the level.
    pub steps: usize,
    pub step_size: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Uniform draw inside each constraint set.
    Random,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub coordinate: LevelConfig,
    pub feature: LevelConfig,
    pub output: LevelConfig,
    /// Depth shifts are bounded by `alpha_t` times the neighbouring sample gap.
    pub alpha_t: f64,
    /// Radius of the position ball; half the mean sample spacing when unset.
    pub eps_ball: Option<f64>,
    /// Pixel footprint used for the direction box `±eps_pixel / (2 f)`.
    pub eps_pixel: f64,
    pub eps_f: f64,
    pub eps_c: f64,
    /// Density box radius; `0.05 * sigma_max` when unset.
    pub eps_sigma: Option<f64>,
    /// Perturbed density ceiling; `10 / (far - near)` when unset.
    pub sigma_max: Option<f64>,
    pub init: InitMode,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            coordinate: LevelConfig {
                enabled: true,
                steps: 3,
                step_size: 1e-2,
            },
            feature: LevelConfig {
                enabled: true,
                steps: 1,
                step_size: 1e-3,
            },
            output: LevelConfig {
                enabled: true,
                steps: 1,
                step_size: 1e-5,
            },
            alpha_t: 0.5,
            eps_ball: None,
            eps_pixel: 1.0,
            eps_f: 0.01,
            eps_c: 0.05,
            eps_sigma: None,
            sigma_max: None,
            init: InitMode::Random,
            seed: 0,
        }
    }
}

/// Scene quantities the default radii are derived from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneScale {
    /// Focal length in pixels.
    pub focal: f64,
    /// Mean `far - near` over the rays.
    pub depth_range: f64,
    pub samples_per_ray: usize,
}

/// Constraint radii with every default filled in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Radii {
    pub alpha_t: f64,
    pub eps_ball: f64,
    pub eps_theta: f64,
    pub eps_f: f64,
    pub eps_c: f64,
    pub eps_sigma: f64,
    pub sigma_max: f64,
}

/// Depth shifts never exceed this fraction of a gap, so shifted depths stay
/// ordered even after rounding.
const MAX_ALPHA_T: f64 = 0.5 * (1.0 - 1e-6);

impl AttackConfig {
    /// Every level off.
    pub fn disabled() -> Self {
        let mut c = Self::default();
        c.coordinate.enabled = false;
        c.feature.enabled = false;
        c.output.enabled = false;
        c
    }

    pub fn level(&self, level: Level) -> &LevelConfig {
        match level {
            Level::Coordinate => &self.coordinate,
            Level::Feature => &self.feature,
            Level::Output => &self.output,
        }
    }

    pub fn level_mut(&mut self, level: Level) -> &mut LevelConfig {
        match level {
            Level::Coordinate => &mut self.coordinate,
            Level::Feature => &mut self.feature,
            Level::Output => &mut self.output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let radii = [
            ("alpha_t", Some(self.alpha_t)),
            ("eps_ball", self.eps_ball),
            ("eps_pixel", Some(self.eps_pixel)),
            ("eps_f", Some(self.eps_f)),
            ("eps_c", Some(self.eps_c)),
            ("eps_sigma", self.eps_sigma),
            ("sigma_max", self.sigma_max),
        ];
        for (name, value) in radii {
            if let Some(v) = value {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::invalid("attack config", format!("{name} = {v}")));
                }
            }
        }
        for level in [Level::Coordinate, Level::Feature, Level::Output] {
            let l = self.level(level);
            if !(l.step_size.is_finite() && l.step_size >= 0.0) {
                return Err(Error::invalid(
                    "attack config",
                    format!("{level:?} step size {}", l.step_size),
                ));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, scale: SceneScale) -> Result<Radii> {
        self.validate()?;
        let spacing = scale.depth_range / scale.samples_per_ray.max(1) as f64;
        let sigma_max = self.sigma_max.unwrap_or(10.0 / scale.depth_range);
        Ok(Radii {
            alpha_t: self.alpha_t.min(MAX_ALPHA_T),
            eps_ball: self.eps_ball.unwrap_or(0.5 * spacing),
            eps_theta: self.eps_pixel / (2.0 * scale.focal),
            eps_f: self.eps_f,
            eps_c: self.eps_c,
            eps_sigma: self.eps_sigma.unwrap_or(0.05 * sigma_max),
            sigma_max,
        })
    }

    /// Components that are actually perturbed: level enabled with at least
    /// one step and a nonzero radius.
    pub fn active(&self, radii: &Radii) -> Mask {
        let mut mask = [false; 6];
        for c in Component::ALL {
            let level = self.level(c.level());
            mask[c.index()] = level.enabled && level.steps > 0 && radii.radius(c) > 0.0;
        }
        mask
    }

    fn iterations(&self, active: &Mask) -> usize {
        Component::ALL
            .iter()
            .filter(|c| active[c.index()])
            .map(|c| self.level(c.level()).steps)
            .max()
            .unwrap_or(0)
    }
}

impl Radii {
    /// Radius of a component's set; for depth shifts this is `alpha_t`.
    pub fn radius(&self, c: Component) -> f64 {
        match c {
            Component::Depth => self.alpha_t,
            Component::Position => self.eps_ball,
            Component::Direction => self.eps_theta,
            Component::Feature => self.eps_f,
            Component::Color => self.eps_c,
            Component::Density => self.eps_sigma,
        }
    }

    pub fn constraints(&self, samples: &SampleBatch, width: usize) -> Constraints {
        let k = samples.samples_per_ray();
        let deltas = samples.deltas();
        let mut t_bound = Vec::with_capacity(deltas.len());
        for (r, row) in deltas.chunks(k.max(1)).enumerate() {
            let scale = samples.row(r).iter().fold(1.0f64, |m, t| m.max(t.abs()));
            for i in 0..k {
                let mut gap = row[i];
                if i > 0 {
                    gap = gap.min(row[i - 1]);
                }
                // Gaps near the rounding floor of the depths cannot be shifted safely.
                let bound = if gap > 1e-9 * scale {
                    self.alpha_t * gap
                } else {
                    0.0
                };
                t_bound.push(bound.max(0.0));
            }
        }
        Constraints {
            radii: *self,
            rays: samples.rays(),
            samples: k,
            width,
            t_bound,
        }
    }
}

/// Radii together with the per-sample depth bounds of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Constraints {
    pub radii: Radii,
    pub rays: usize,
    pub samples: usize,
    pub width: usize,
    /// `[rays * samples]` bounds on `|delta_t|`.
    pub t_bound: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSet {
    /// `[B, K]`.
    pub depth: Tensor,
    /// `[B, 3]`.
    pub position: Tensor,
    /// `[B, 3]`.
    pub direction: Tensor,
    /// `[B, width]`.
    pub feature: Tensor,
    /// `[B, 3]`.
    pub color: Tensor,
    /// `[B]`.
    pub density: Tensor,
}

impl PerturbationSet {
    pub fn zeros(rays: usize, samples: usize, width: usize) -> Self {
        let z = |shape: Vec<usize>| Tensor::zeros(shape).expect("rank <= 2");
        Self {
            depth: z(vec![rays, samples]),
            position: z(vec![rays, 3]),
            direction: z(vec![rays, 3]),
            feature: z(vec![rays, width]),
            color: z(vec![rays, 3]),
            density: z(vec![rays]),
        }
    }

    pub fn get(&self, c: Component) -> &Tensor {
        match c {
            Component::Depth => &self.depth,
            Component::Position => &self.position,
            Component::Direction => &self.direction,
            Component::Feature => &self.feature,
            Component::Color => &self.color,
            Component::Density => &self.density,
        }
    }

    pub fn get_mut(&mut self, c: Component) -> &mut Tensor {
        match c {
            Component::Depth => &mut self.depth,
            Component::Position => &mut self.position,
            Component::Direction => &mut self.direction,
            Component::Feature => &mut self.feature,
            Component::Color => &mut self.color,
            Component::Density => &mut self.density,
        }
    }

    pub fn is_zero(&self) -> bool {
        Component::ALL
            .iter()
            .all(|&c| self.get(c).data().iter().all(|&v| v == 0.0))
    }

    /// Exact membership test for every component.
    pub fn within(&self, cons: &Constraints) -> bool {
        let r = cons.radii;
        let boxed = |t: &Tensor, eps: f64| t.data().iter().all(|v| v.abs() <= eps);
        let depth_ok = self
            .depth
            .data()
            .iter()
            .zip(&cons.t_bound)
            .all(|(v, b)| v.abs() <= *b);
        let ball_ok = self
            .position
            .data()
            .chunks(3)
            .all(|v| norm3(v) <= r.eps_ball);
        depth_ok
            && ball_ok
            && boxed(&self.direction, r.eps_theta)
            && boxed(&self.feature, r.eps_f)
            && boxed(&self.color, r.eps_c)
            && boxed(&self.density, r.eps_sigma)
    }

    /// Copy the active components onto `tape`. Components in `trainable`
    /// become gradient-tracking leaves.
    pub fn bind(&self, tape: &mut Tape, active: &Mask, trainable: &Mask) -> BoundPerturbation {
        let mut vars = [None; 6];
        for c in Component::ALL {
            let i = c.index();
            if active[i] {
                vars[i] = Some(tape.leaf(self.get(c).clone(), trainable[i]));
            }
        }
        BoundPerturbation { vars }
    }
}

fn norm3(v: &[f64]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// A perturbation set living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundPerturbation {
    pub vars: [Option<Var>; 6],
}

impl BoundPerturbation {
    pub fn as_vars(&self) -> PerturbationVars {
        let v = |c: Component| self.vars[c.index()];
        PerturbationVars {
            t: v(Component::Depth),
            xyz: v(Component::Position),
            theta: v(Component::Direction),
            feature: v(Component::Feature),
            color: v(Component::Color),
            sigma: v(Component::Density),
        }
    }

    pub fn gradients(&self, tape: &Tape, which: &Mask) -> Gradients {
        let mut g: Gradients = Default::default();
        for c in Component::ALL {
            let i = c.index();
            if which[i] {
                if let Some(v) = self.vars[i] {
                    g[i] = tape.grad(v).map(|d| {
                        Tensor::new(tape.shape(v).to_vec(), d.to_vec()).expect("grad shape")
                    });
                }
            }
        }
        g
    }
}

/// Per-component gradients, indexed by [`Component`].
pub type Gradients = [Option<Tensor>; 6];

/// Starting point of the search: zeros, or a uniform draw inside each set.
///
/// The random stream advances by the same amount whatever the configuration,
/// so toggling one level leaves the draws of the others unchanged.
pub fn init_perturbation<R: Rng + ?Sized>(
    config: &AttackConfig,
    cons: &Constraints,
    rng: &mut R,
) -> PerturbationSet {
    let mut delta = PerturbationSet::zeros(cons.rays, cons.samples, cons.width);
    if config.init == InitMode::Zero {
        return delta;
    }
    let active = config.active(&cons.radii);
    let r = cons.radii;
    for c in Component::ALL {
        let on = active[c.index()];
        let data = delta.get_mut(c).data_mut();
        match c {
            Component::Position => {
                for v in data.chunks_mut(3) {
                    let g: [f64; 3] = [
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                    ];
                    let u: f64 = rng.random();
                    if on {
                        let n = norm3(&g);
                        let radius = r.eps_ball * u.cbrt();
                        if n > 0.0 {
                            for (dst, src) in v.iter_mut().zip(g) {
                                *dst = src / n * radius;
                            }
                        }
                    }
                }
            }
            _ => {
                for (i, v) in data.iter_mut().enumerate() {
                    let u: f64 = rng.random();
                    let eps = match c {
                        Component::Depth => cons.t_bound[i],
                        other => r.radius(other),
                    };
                    if on && eps > 0.0 {
                        *v = (2.0 * u - 1.0) * eps;
                    }
                }
            }
        }
    }
    project(&delta, cons)
}

/// Clamp the box components and pull the position offset back onto its ball.
/// The result lies inside every set exactly, and projecting twice changes
/// nothing.
pub fn project(delta: &PerturbationSet, cons: &Constraints) -> PerturbationSet {
    let mut out = delta.clone();
    let r = cons.radii;
    for (v, &b) in out.depth.data_mut().iter_mut().zip(&cons.t_bound) {
        *v = v.clamp(-b, b);
    }
    for v in out.position.data_mut().chunks_mut(3) {
        project_ball(v, r.eps_ball);
    }
    for (c, eps) in [
        (Component::Direction, r.eps_theta),
        (Component::Feature, r.eps_f),
        (Component::Color, r.eps_c),
        (Component::Density, r.eps_sigma),
    ] {
        for v in out.get_mut(c).data_mut() {
            *v = v.clamp(-eps, eps);
        }
    }
    out
}

fn project_ball(v: &mut [f64], eps: f64) {
    let n = norm3(v);
    if n <= eps {
        return;
    }
    if eps == 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    for x in v.iter_mut() {
        *x = *x * eps / n;
    }
    // Rounding can leave the norm an ulp outside the ball.
    while norm3(v) > eps {
        for x in v.iter_mut() {
            *x *= 1.0 - f64::EPSILON;
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One ascent step on the components in `mask`, followed by projection.
///
/// Box components take a sign step of their level's step size. The position
/// offset moves along its per-ray normalised gradient.
pub fn pgd_step(
    delta: &PerturbationSet,
    grads: &Gradients,
    config: &AttackConfig,
    cons: &Constraints,
    mask: &Mask,
) -> Result<PerturbationSet> {
    let mut out = delta.clone();
    for c in Component::ALL {
        let i = c.index();
        if !mask[i] {
            continue;
        }
        let g = grads[i].as_ref().ok_or(Error::MissingGradient(c.name()))?;
        let alpha = config.level(c.level()).step_size;
        let data = out.get_mut(c).data_mut();
        if data.len() != g.numel() {
            return Err(Error::SizeMismatch {
                what: c.name(),
                expected: data.len(),
                actual: g.numel(),
            });
        }
        if c == Component::Position {
            for (v, gv) in data.chunks_mut(3).zip(g.data().chunks(3)) {
                let n = norm3(gv);
                if n > 0.0 {
                    for (x, y) in v.iter_mut().zip(gv) {
                        *x += alpha * (y / n);
                    }
                }
            }
        } else {
            for (x, y) in data.iter_mut().zip(g.data()) {
                *x += alpha * sign(*y);
            }
        }
    }
    Ok(project(&out, cons))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub delta: PerturbationSet,
    /// Photometric loss of the perturbed render at `delta`.
    pub loss: f64,
}

/// Everything the inner maximisation needs about one batch.
pub struct SearchProblem<'a> {
    pub field: &'a RadianceField,
    pub rays: &'a RayBatch,
    pub samples: &'a SampleBatch,
    pub settings: RenderSettings,
}

/// Multi-step projected gradient ascent of the perturbed photometric loss.
///
/// Parameters enter the graph as constants, so the field is never touched.
/// All levels step jointly from one backward pass per iteration; a level
/// drops out once its step budget is spent.
pub fn search<R: Rng + ?Sized>(
    problem: &SearchProblem,
    config: &AttackConfig,
    cons: &Constraints,
    rng: &mut R,
) -> Result<SearchOutcome> {
    let delta = run_pgd(problem, config, cons, rng)?;
    let active = config.active(&cons.radii);
    let mut tape = Tape::new();
    let loss = perturbed_loss(&mut tape, problem, &delta, &active, &[false; 6])?;
    Ok(SearchOutcome {
        loss: tape.value(loss).data()[0],
        delta,
    })
}

/// The PGD iterations of [`search`] without the final loss evaluation.
pub fn run_pgd<R: Rng + ?Sized>(
    problem: &SearchProblem,
    config: &AttackConfig,
    cons: &Constraints,
    rng: &mut R,
) -> Result<PerturbationSet> {
    let active = config.active(&cons.radii);
    let mut delta = init_perturbation(config, cons, rng);
    for it in 0..config.iterations(&active) {
        let mut stepping = [false; 6];
        for c in Component::ALL {
            stepping[c.index()] = active[c.index()] && config.level(c.level()).steps > it;
        }
        let mut tape = Tape::new();
        let (loss, bound) = perturbed_loss_bound(&mut tape, problem, &delta, &active, &stepping)?;
        tape.backward(loss)?;
        let grads = bound.gradients(&tape, &stepping);
        delta = pgd_step(&delta, &grads, config, cons, &stepping)?;
    }
    Ok(delta)
}

fn perturbed_loss(
    tape: &mut Tape,
    problem: &SearchProblem,
    delta: &PerturbationSet,
    active: &Mask,
    trainable: &Mask,
) -> Result<Var> {
    perturbed_loss_bound(tape, problem, delta, active, trainable).map(|(l, _)| l)
}

fn perturbed_loss_bound(
    tape: &mut Tape,
    problem: &SearchProblem,
    delta: &PerturbationSet,
    active: &Mask,
    trainable: &Mask,
) -> Result<(Var, BoundPerturbation)> {
    let field = problem.field.bind(tape, false);
    let bound = delta.bind(tape, active, trainable);
    let out = render_perturbed(
        tape,
        &field,
        problem.rays,
        problem.samples,
        &bound.as_vars(),
        problem.settings,
    )?;
    let loss = photometric_term(tape, out.color, &problem.rays.colors)?;
    Ok((loss, bound))
}
