//! Field evaluation along ray batches, with optional perturbations threaded
//! through every stage of the pipeline.

use augnerf_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::field::BoundField;
use crate::rays::{
    bin_edges, hierarchical_sample, stratified_sample, EvenlySpaced, Midpoints, RayBatch,
    SampleBatch, UniformSource,
};
use crate::render::{composite, composite_perturbed, OutputPerturbation, RenderVars};

/// Perturbation variables for one batch. Absent components are not applied at
/// all, so an empty set renders exactly like the clean pipeline.
#[derive(Clone, Copy, Debug, Default)]
pub struct PerturbationVars {
    /// `[B, K]` depth shifts.
    pub t: Option<Var>,
    /// `[B, 3]` position offsets.
    pub xyz: Option<Var>,
    /// `[B, 3]` direction offsets, renormalised after adding.
    pub theta: Option<Var>,
    /// `[B, width]` feature offsets.
    pub feature: Option<Var>,
    /// `[B, 3]` colour offsets.
    pub color: Option<Var>,
    /// `[B]` density offsets.
    pub sigma: Option<Var>,
}

/// How perturbed densities are bounded and what lies behind the scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub sigma_max: f64,
    pub white_background: bool,
}

pub fn render_clean(
    tape: &mut Tape,
    field: &BoundField,
    rays: &RayBatch,
    samples: &SampleBatch,
    settings: RenderSettings,
) -> Result<RenderVars> {
    render_perturbed(
        tape,
        field,
        rays,
        samples,
        &PerturbationVars::default(),
        settings,
    )
}

pub fn render_perturbed(
    tape: &mut Tape,
    field: &BoundField,
    rays: &RayBatch,
    samples: &SampleBatch,
    delta: &PerturbationVars,
    settings: RenderSettings,
) -> Result<RenderVars> {
    let (b, k) = (samples.rays(), samples.samples_per_ray());
    if rays.len() != b {
        return Err(Error::SizeMismatch {
            what: "rays in sample batch",
            expected: rays.len(),
            actual: b,
        });
    }
    let mut t = tape.constant(samples.t.clone());
    if let Some(dt) = delta.t {
        t = tape.add(t, dt)?;
    }
    let origins = tape.constant(rays.origins.clone());
    let directions = tape.constant(rays.directions.clone());
    let o = tape.expand(origins, 1, k)?;
    let d = tape.expand(directions, 1, k)?;
    let tt = tape.expand(t, 2, 3)?;
    let step = tape.mul(tt, d)?;
    let mut points = tape.add(o, step)?;
    if let Some(dx) = delta.xyz {
        let dx = tape.expand(dx, 1, k)?;
        points = tape.add(points, dx)?;
    }
    let points = tape.reshape(points, &[b * k, 3])?;

    let mut view = tape.constant(rays.view_dirs.clone());
    if let Some(dv) = delta.theta {
        let shifted = tape.add(view, dv)?;
        let sq = tape.square(shifted);
        let norm = tape.sum_last(sq)?;
        let norm = tape.sqrt(norm);
        let norm = tape.expand(norm, 1, 3)?;
        view = tape.div(shifted, norm)?;
    }

    let feature = match delta.feature {
        Some(df) => {
            let width = tape.shape(df).get(1).copied().unwrap_or(0);
            let df = tape.expand(df, 1, k)?;
            Some(tape.reshape(df, &[b * k, width])?)
        }
        None => None,
    };

    let (rgb, sigma) = field.query(tape, points, view, feature)?;
    let rgb = tape.reshape(rgb, &[b, k, 3])?;
    let sigma = tape.reshape(sigma, &[b, k])?;
    let gaps = &samples.terminal_gaps;
    if delta.color.is_none() && delta.sigma.is_none() {
        if delta.t.is_some() {
            check_monotone(tape, t)?;
        }
        return composite(tape, t, gaps, sigma, rgb, settings.white_background);
    }
    let delta_c = match delta.color {
        Some(v) => v,
        None => tape.constant(Tensor::zeros(vec![b, 3])?),
    };
    let delta_sigma = match delta.sigma {
        Some(v) => v,
        None => tape.constant(Tensor::zeros(vec![b])?),
    };
    let perturbation = OutputPerturbation {
        delta_c,
        delta_sigma,
        sigma_max: settings.sigma_max,
    };
    composite_perturbed(
        tape,
        t,
        gaps,
        sigma,
        rgb,
        perturbation,
        settings.white_background,
    )
}

fn check_monotone(tape: &Tape, t: Var) -> Result<()> {
    let value = tape.value(t);
    let k = value.shape()[1];
    for (r, row) in value.data().chunks(k).enumerate() {
        if let Some(s) = row
            .windows(2)
            .position(|w| w[1].is_nan() || w[0].is_nan() || w[1] < w[0])
        {
            return Err(Error::NonMonotoneDepths {
                ray: r,
                sample: s + 1,
            });
        }
    }
    Ok(())
}

/// Coarse and fine sample counts per ray.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sampling {
    pub coarse: usize,
    pub fine: usize,
}

impl Sampling {
    pub fn total(&self) -> usize {
        self.coarse + self.fine
    }
}

/// Stratified coarse depths for every ray, then (when `fine > 0`) fine depths
/// drawn from the weights of a gradient-free coarse render and merged in.
pub fn sample_batch<C: UniformSource + ?Sized, F: UniformSource + ?Sized>(
    field: &crate::field::RadianceField,
    rays: &RayBatch,
    sampling: Sampling,
    settings: RenderSettings,
    coarse_src: &mut C,
    fine_src: &mut F,
) -> Result<SampleBatch> {
    let mut coarse = Vec::with_capacity(rays.len());
    for (&near, &far) in rays.near.iter().zip(&rays.far) {
        coarse.push(stratified_sample(near, far, sampling.coarse, coarse_src)?);
    }
    if sampling.fine == 0 {
        return SampleBatch::new(&coarse);
    }
    let coarse_batch = SampleBatch::new(&coarse)?;
    let mut tape = Tape::new();
    let bound = field.bind(&mut tape, false);
    let out = render_clean(&mut tape, &bound, rays, &coarse_batch, settings)?;
    let weights = tape.value(out.weights).data();
    let k = sampling.coarse;
    let mut merged = Vec::with_capacity(rays.len());
    for (r, samples) in coarse.iter().enumerate() {
        let edges = bin_edges(rays.near[r], rays.far[r], k);
        merged.push(hierarchical_sample(
            samples,
            &weights[r * k..(r + 1) * k],
            &edges,
            sampling.fine,
            fine_src,
        )?);
    }
    SampleBatch::new(&merged)
}

/// Colour, depth and opacity images of one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub color: crate::raster::Image,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

/// Render every pixel of `camera` with deterministic sample placement:
/// coarse samples at bin midpoints and evenly spaced fine draws.
pub fn render_view(
    field: &crate::field::RadianceField,
    camera: &crate::rays::Camera,
    sampling: Sampling,
    settings: RenderSettings,
) -> Result<RenderedView> {
    const CHUNK: usize = 1024;
    let rays = crate::rays::generate_rays(camera);
    let mut color = Vec::with_capacity(rays.len() * 3);
    let mut depth = Vec::with_capacity(rays.len());
    let mut opacity = Vec::with_capacity(rays.len());
    for chunk in rays.chunks(CHUNK) {
        let batch = RayBatch::new(chunk);
        let mut fine = EvenlySpaced::new(sampling.fine);
        let samples = sample_batch(field, &batch, sampling, settings, &mut Midpoints, &mut fine)?;
        let mut tape = Tape::new();
        let bound = field.bind(&mut tape, false);
        let out = render_clean(&mut tape, &bound, &batch, &samples, settings)?;
        color.extend_from_slice(tape.value(out.color).data());
        depth.extend_from_slice(tape.value(out.depth).data());
        opacity.extend_from_slice(tape.value(out.opacity).data());
    }
    Ok(RenderedView {
        color: crate::raster::Image::new(camera.width, camera.height, color)?,
        depth,
        opacity,
    })
}
