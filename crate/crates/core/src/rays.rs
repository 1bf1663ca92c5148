//! Pinhole cameras, ray generation and depth sampling.

use augnerf_autodiff::Tensor;
use rand::Rng;

use crate::error::{check_len, Error, Result};

pub type Vec3 = [f64; 3];

/// Pinhole camera looking down its local `-z` axis with `+y` up.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world `[R | t]`.
    pub pose: [[f64; 4]; 3],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera with the principal point at the image centre.
    pub fn new(
        width: usize,
        height: usize,
        focal: f64,
        pose: [[f64; 4]; 3],
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let camera = Self {
            width,
            height,
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            pose,
            near,
            far,
        };
        camera.validate()?;
        Ok(camera)
    }

    /// Focal length from the horizontal field of view: `f = w / (2 tan(fov/2))`.
    pub fn focal_from_fov(width: usize, fov_x: f64) -> f64 {
        width as f64 / (2.0 * (fov_x / 2.0).tan())
    }

    /// Pose at `eye` looking at `target`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> [[f64; 4]; 3] {
        let back = normalize(sub(eye, target));
        let right = normalize(cross(up, back));
        let true_up = cross(back, right);
        let mut pose = [[0.0; 4]; 3];
        for r in 0..3 {
            pose[r] = [right[r], true_up[r], back[r], eye[r]];
        }
        pose
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::invalid("camera", detail));
        if self.width == 0 || self.height == 0 {
            return fail(format!("empty image {}x{}", self.width, self.height));
        }
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return fail(format!("focal length {}", self.focal));
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return fail(format!("bounds near {} far {}", self.near, self.far));
        }
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|r| self.pose[r][a] * self.pose[r][b]).sum();
                let expected = if a == b { 1.0 } else { 0.0 };
                if (dot - expected).abs() > 1e-6 {
                    return fail(format!(
                        "rotation is not orthonormal (column {a}·{b} = {dot})"
                    ));
                }
            }
        }
        Ok(())
    }

    /// World units per pixel at unit depth.
    pub fn pixel_size(&self) -> f64 {
        1.0 / self.focal
    }

    pub fn origin(&self) -> Vec3 {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    /// Ray through the centre of pixel `(i, j)`, column `i` and row `j`.
    pub fn ray(&self, i: usize, j: usize) -> Ray {
        let local = [
            (i as f64 + 0.5 - self.cx) / self.focal,
            -(j as f64 + 0.5 - self.cy) / self.focal,
            -1.0,
        ];
        let mut direction = [0.0; 3];
        for (r, d) in direction.iter_mut().enumerate() {
            *d = self.pose[r][0] * local[0]
                + self.pose[r][1] * local[1]
                + self.pose[r][2] * local[2];
        }
        Ray {
            origin: self.origin(),
            direction,
            view_dir: normalize(direction),
            near: self.near,
            far: self.far,
            color: [0.0; 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    /// `direction / |direction|`.
    pub view_dir: Vec3,
    pub near: f64,
    pub far: f64,
    /// Supervision colour.
    pub color: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// One ray per pixel in row-major order.
pub fn generate_rays(camera: &Camera) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for j in 0..camera.height {
        for i in 0..camera.width {
            rays.push(camera.ray(i, j));
        }
    }
    rays
}

/// Source of values in `[0, 1)` for jittered sampling.
pub trait UniformSource {
    fn next_uniform(&mut self) -> f64;
}

impl<R: Rng + ?Sized> UniformSource for R {
    fn next_uniform(&mut self) -> f64 {
        self.random::<f64>()
    }
}

/// Always returns one half, placing stratified samples at bin midpoints.
#[derive(Clone, Copy, Debug, Default)]
pub struct Midpoints;

impl UniformSource for Midpoints {
    fn next_uniform(&mut self) -> f64 {
        0.5
    }
}

/// Returns `(i + 0.5) / n` for `i = 0, 1, …`, cycling.
#[derive(Clone, Copy, Debug)]
pub struct EvenlySpaced {
    count: usize,
    next: usize,
}

impl EvenlySpaced {
    pub fn new(count: usize) -> Self {
        Self {
            count: count.max(1),
            next: 0,
        }
    }
}

impl UniformSource for EvenlySpaced {
    fn next_uniform(&mut self) -> f64 {
        let u = (self.next as f64 + 0.5) / self.count as f64;
        self.next = (self.next + 1) % self.count;
        u
    }
}

/// Sorted sample depths along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSamples {
    pub t: Vec<f64>,
    /// Interval length assigned to the last sample.
    pub terminal_gap: f64,
}

impl DepthSamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// `t[k+1] - t[k]`, with the terminal gap last.
    pub fn deltas(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.t.windows(2).map(|w| w[1] - w[0]).collect();
        if !self.t.is_empty() {
            d.push(self.terminal_gap);
        }
        d
    }
}

/// `K + 1` evenly spaced bin edges over `[near, far]`.
pub fn bin_edges(near: f64, far: f64, k: usize) -> Vec<f64> {
    let step = (far - near) / k as f64;
    (0..=k)
        .map(|i| if i == k { far } else { near + i as f64 * step })
        .collect()
}

/// One jittered sample in each of `k` equal bins of `[near, far]`.
pub fn stratified_sample<S: UniformSource + ?Sized>(
    near: f64,
    far: f64,
    k: usize,
    src: &mut S,
) -> Result<DepthSamples> {
    if k < 2 {
        return Err(Error::invalid(
            "sample count",
            format!("stratified sampling needs K >= 2, got {k}"),
        ));
    }
    let step = (far - near) / k as f64;
    let t = (0..k)
        .map(|i| {
            let lo = near + i as f64 * step;
            (lo + src.next_uniform() * step).min(far)
        })
        .collect();
    Ok(DepthSamples {
        t,
        terminal_gap: step,
    })
}

/// Inverse-transform samples from the piecewise-constant density proportional
/// to `weights` over the bins delimited by `edges`. All-zero weights fall back
/// to a uniform density.
pub fn sample_pdf<S: UniformSource + ?Sized>(
    weights: &[f64],
    edges: &[f64],
    n: usize,
    src: &mut S,
) -> Result<Vec<f64>> {
    check_len("bin edges", weights.len() + 1, edges.len())?;
    if weights.is_empty() {
        return Err(Error::invalid("pdf", "no bins"));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::invalid("pdf", format!("weight {w}")));
    }
    let total: f64 = weights.iter().sum();
    let uniform = total <= 0.0;
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &w in weights {
        acc += if uniform { 1.0 } else { w };
        cdf.push(acc);
    }
    let total = acc;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = src.next_uniform() * total;
        // First bin whose upper CDF value exceeds u; empty bins are never chosen.
        let j = cdf[1..].partition_point(|&c| c <= u).min(weights.len() - 1);
        let width = cdf[j + 1] - cdf[j];
        let frac = if width > 0.0 {
            ((u - cdf[j]) / width).clamp(0.0, 1.0)
        } else {
            0.5
        };
        out.push(edges[j] + frac * (edges[j + 1] - edges[j]));
    }
    Ok(out)
}

/// Draw `k_fine` extra depths from the coarse weights and merge them with the
/// coarse samples.
pub fn hierarchical_sample<S: UniformSource + ?Sized>(
    coarse: &DepthSamples,
    weights: &[f64],
    edges: &[f64],
    k_fine: usize,
    src: &mut S,
) -> Result<DepthSamples> {
    check_len("coarse weights", coarse.len(), weights.len())?;
    let mut t = sample_pdf(weights, edges, k_fine, src)?;
    t.extend_from_slice(&coarse.t);
    t.sort_by(f64::total_cmp);
    let span = edges[edges.len() - 1] - edges[0];
    let terminal_gap = span / t.len() as f64;
    Ok(DepthSamples { t, terminal_gap })
}

/// Structure-of-arrays view of a set of rays.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub origins: Tensor,
    pub directions: Tensor,
    pub view_dirs: Tensor,
    pub colors: Tensor,
    pub near: Vec<f64>,
    pub far: Vec<f64>,
}

impl RayBatch {
    pub fn new(rays: &[Ray]) -> Self {
        let pack = |f: &dyn Fn(&Ray) -> Vec3| {
            let data = rays.iter().flat_map(f).collect();
            Tensor::new(vec![rays.len(), 3], data).expect("[n, 3] batch")
        };
        Self {
            origins: pack(&|r| r.origin),
            directions: pack(&|r| r.direction),
            view_dirs: pack(&|r| r.view_dir),
            colors: pack(&|r| r.color),
            near: rays.iter().map(|r| r.near).collect(),
            far: rays.iter().map(|r| r.far).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.near.len()
    }

    pub fn is_empty(&self) -> bool {
        self.near.is_empty()
    }
}

/// Depths for a batch of rays, all with the same sample count.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    /// `[rays, samples]`.
    pub t: Tensor,
    pub terminal_gaps: Vec<f64>,
}

impl SampleBatch {
    pub fn new(samples: &[DepthSamples]) -> Result<Self> {
        let k = samples.first().map_or(0, DepthSamples::len);
        for s in samples {
            check_len("samples per ray", k, s.len())?;
        }
        let data = samples.iter().flat_map(|s| s.t.iter().copied()).collect();
        Ok(Self {
            t: Tensor::new(vec![samples.len(), k], data)?,
            terminal_gaps: samples.iter().map(|s| s.terminal_gap).collect(),
        })
    }

    pub fn rays(&self) -> usize {
        self.t.shape()[0]
    }

    pub fn samples_per_ray(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn row(&self, ray: usize) -> &[f64] {
        let k = self.samples_per_ray();
        &self.t.data()[ray * k..(ray + 1) * k]
    }

    /// Per-sample interval lengths `[rays, samples]`.
    pub fn deltas(&self) -> Vec<f64> {
        let k = self.samples_per_ray();
        let mut out = Vec::with_capacity(self.t.numel());
        for (r, &gap) in self.terminal_gaps.iter().enumerate() {
            let row = self.row(r);
            out.extend(row.windows(2).map(|w| w[1] - w[0]));
            if k > 0 {
                out.push(gap);
            }
        }
        out
    }
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(v: Vec3) -> Vec3 {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}
