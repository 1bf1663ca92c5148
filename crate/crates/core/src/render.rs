//! Emission-absorption compositing, clean and perturbed.
//!
//! Both entry points build their result on a [`Tape`], so colours, densities
//! and depths all stay differentiable.

use augnerf_autodiff::{Tape, Tensor, Var};

use crate::error::{check_len, Error, Result};
use crate::field::FieldOutput;
use crate::rays::DepthSamples;

/// Composited quantities for a batch of `B` rays with `K` samples each.
#[derive(Clone, Copy, Debug)]
pub struct RenderVars {
    /// `[B, 3]`.
    pub color: Var,
    /// `[B]`, expected termination depth `Σ w_k t_k`.
    pub depth: Var,
    /// `[B]`, `Σ w_k`.
    pub opacity: Var,
    /// `[B, K]`.
    pub weights: Var,
}

/// Plain values for one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
}

impl RenderVars {
    pub fn outputs(&self, tape: &Tape) -> Vec<RenderOutput> {
        let color = tape.value(self.color).data();
        let depth = tape.value(self.depth).data();
        let opacity = tape.value(self.opacity).data();
        let weights = tape.value(self.weights);
        let k = weights.shape()[1];
        (0..depth.len())
            .map(|r| RenderOutput {
                color: [color[3 * r], color[3 * r + 1], color[3 * r + 2]],
                depth: depth[r],
                opacity: opacity[r],
                weights: weights.data()[r * k..(r + 1) * k].to_vec(),
            })
            .collect()
    }
}

/// `Δt_k = t_{k+1} - t_k`, with the per-ray terminal gap for the last sample.
fn interval_lengths(tape: &mut Tape, t: Var, terminal_gaps: &[f64]) -> Result<Var> {
    let (b, k) = batch_dims(tape, t)?;
    check_len("terminal gaps", b, terminal_gaps.len())?;
    let last = tape.constant(Tensor::new(vec![b, 1], terminal_gaps.to_vec())?);
    if k == 1 {
        return Ok(last);
    }
    let hi = tape.slice(t, 1, 1, k)?;
    let lo = tape.slice(t, 1, 0, k - 1)?;
    let d = tape.sub(hi, lo)?;
    Ok(tape.concat(&[d, last], 1)?)
}

fn batch_dims(tape: &Tape, t: Var) -> Result<(usize, usize)> {
    match *tape.shape(t) {
        [b, k] if k > 0 => Ok((b, k)),
        ref s => Err(Error::invalid(
            "sample depths",
            format!("expected [rays, samples], got {s:?}"),
        )),
    }
}

fn accumulate(
    tape: &mut Tape,
    t: Var,
    dt: Var,
    sigma: Var,
    rgb: Var,
    white_background: bool,
) -> Result<RenderVars> {
    let (b, k) = batch_dims(tape, t)?;
    if tape.shape(sigma) != [b, k] || tape.shape(rgb) != [b, k, 3] {
        return Err(Error::invalid(
            "field outputs",
            format!(
                "sigma {:?} and rgb {:?} for {b} rays of {k} samples",
                tape.shape(sigma),
                tape.shape(rgb)
            ),
        ));
    }
    let tau = tape.mul(sigma, dt)?;
    let neg = tape.neg(tau);
    let survive = tape.exp(neg);
    let drop = tape.neg(survive);
    let alpha = tape.offset(drop, 1.0);
    let optical = tape.cumsum_exclusive(tau)?;
    let neg = tape.neg(optical);
    let transmittance = tape.exp(neg);
    let weights = tape.mul(transmittance, alpha)?;

    let w3 = tape.expand(weights, 2, 3)?;
    let weighted = tape.mul(w3, rgb)?;
    let mut color = tape.sum_axis(weighted, 1)?;
    let opacity = tape.sum_last(weights)?;
    let wt = tape.mul(weights, t)?;
    let depth = tape.sum_last(wt)?;
    if white_background {
        let clear = tape.neg(opacity);
        let clear = tape.offset(clear, 1.0);
        let clear = tape.expand(clear, 1, 3)?;
        color = tape.add(color, clear)?;
    }
    Ok(RenderVars {
        color,
        depth,
        opacity,
        weights,
    })
}

/// Clean compositing of `[B, K]` densities and `[B, K, 3]` colours at depths
/// `t` (`[B, K]`).
pub fn composite(
    tape: &mut Tape,
    t: Var,
    terminal_gaps: &[f64],
    sigma: Var,
    rgb: Var,
    white_background: bool,
) -> Result<RenderVars> {
    let dt = interval_lengths(tape, t, terminal_gaps)?;
    accumulate(tape, t, dt, sigma, rgb, white_background)
}

/// Output-level perturbation applied before compositing.
#[derive(Clone, Copy, Debug)]
pub struct OutputPerturbation {
    /// `[B, 3]`, added to every sample colour of a ray.
    pub delta_c: Var,
    /// `[B]`, added to every sample density of a ray.
    pub delta_sigma: Var,
    /// Upper end of the admissible perturbed density range.
    pub sigma_max: f64,
}

/// Compositing at shifted depths `t_perturbed` with perturbed outputs.
///
/// Colours become `clamp(c + δ_c, 0, 1)`. Densities become `σ + δ_σ`, clamped
/// below at zero and above at `max(σ, σ_max)`. The upper bound never cuts the
/// unperturbed density, so zero perturbations reproduce [`composite`] exactly.
pub fn composite_perturbed(
    tape: &mut Tape,
    t_perturbed: Var,
    terminal_gaps: &[f64],
    sigma: Var,
    rgb: Var,
    perturbation: OutputPerturbation,
    white_background: bool,
) -> Result<RenderVars> {
    let (b, k) = batch_dims(tape, t_perturbed)?;
    let depths = tape.value(t_perturbed).data();
    for r in 0..b {
        let row = &depths[r * k..(r + 1) * k];
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
    let OutputPerturbation {
        delta_c,
        delta_sigma,
        sigma_max,
    } = perturbation;
    if tape.shape(delta_c) != [b, 3] || tape.shape(delta_sigma) != [b] {
        return Err(Error::invalid(
            "output perturbation",
            format!(
                "delta_c {:?} delta_sigma {:?} for {b} rays",
                tape.shape(delta_c),
                tape.shape(delta_sigma)
            ),
        ));
    }
    let dc = tape.expand(delta_c, 1, k)?;
    let shifted = tape.add(rgb, dc)?;
    let rgb = tape.clamp(shifted, 0.0, 1.0)?;

    let ceiling: Vec<f64> = tape
        .value(sigma)
        .data()
        .iter()
        .map(|&s| s.max(sigma_max))
        .collect();
    let ceiling = tape.constant(Tensor::new(vec![b, k], ceiling)?);
    let ds = tape.expand(delta_sigma, 1, k)?;
    let shifted = tape.add(sigma, ds)?;
    let floored = tape.relu(shifted);
    let sigma = tape.minimum(floored, ceiling)?;

    composite(
        tape,
        t_perturbed,
        terminal_gaps,
        sigma,
        rgb,
        white_background,
    )
}

/// Composite one ray from plain values.
pub fn composite_ray(
    samples: &DepthSamples,
    outputs: &[FieldOutput],
    white_background: bool,
) -> Result<RenderOutput> {
    check_len("field outputs", samples.len(), outputs.len())?;
    let k = samples.len();
    let mut tape = Tape::new();
    let t = tape.constant(Tensor::new(vec![1, k], samples.t.clone())?);
    let sigma = tape.constant(Tensor::new(
        vec![1, k],
        outputs.iter().map(|o| o.sigma).collect(),
    )?);
    let rgb = tape.constant(Tensor::new(
        vec![1, k, 3],
        outputs.iter().flat_map(|o| o.rgb).collect(),
    )?);
    let vars = composite(
        &mut tape,
        t,
        &[samples.terminal_gap],
        sigma,
        rgb,
        white_background,
    )?;
    Ok(vars.outputs(&tape).remove(0))
}
