//! Datasets of posed images: the transforms-JSON layout and procedural toy
//! scenes with analytic ground truth.

use std::path::{Path, PathBuf};

use augnerf_autodiff::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::rays::{generate_rays, stratified_sample, Camera, Midpoints, Ray, UniformSource, Vec3};
use crate::render::composite;

/// One posed image.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub train: Vec<View>,
    pub test: Vec<View>,
    /// Unoccupied space composites to white rather than black.
    pub white_background: bool,
}

impl SceneDataset {
    pub fn validate(&self) -> Result<()> {
        for v in self.train.iter().chain(&self.test) {
            if v.image.width != v.camera.width || v.image.height != v.camera.height {
                return Err(Error::invalid(
                    "view",
                    format!(
                        "{}: image {}x{} but camera {}x{}",
                        v.name, v.image.width, v.image.height, v.camera.width, v.camera.height
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn background(&self) -> [f64; 3] {
        if self.white_background {
            [1.0; 3]
        } else {
            [0.0; 3]
        }
    }

    /// Every training pixel as a supervised ray, view by view in row-major order.
    pub fn training_rays(&self) -> Vec<Ray> {
        let mut out = Vec::new();
        for v in &self.train {
            for (mut ray, c) in generate_rays(&v.camera).into_iter().zip(v.image.pixels()) {
                ray.color = c;
                out.push(ray);
            }
        }
        out
    }

    pub fn mean_focal(&self) -> f64 {
        let views: Vec<&View> = self.train.iter().chain(&self.test).collect();
        views.iter().map(|v| v.camera.focal).sum::<f64>() / views.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    /// Integer image reduction; focal lengths shrink by the same factor.
    pub downsample: usize,
    pub white_background: bool,
    /// Override the depth bounds of the transforms file.
    pub near: Option<f64>,
    pub far: Option<f64>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            downsample: 1,
            white_background: true,
            near: None,
            far: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    far: Option<f64>,
    frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    file_path: String,
    transform_matrix: Vec<Vec<f64>>,
}

const DEFAULT_NEAR: f64 = 2.0;
const DEFAULT_FAR: f64 = 6.0;
/// With a single transforms file, every eighth frame is held out.
const HOLDOUT_EVERY: usize = 8;

/// Read `transforms_train.json` and `transforms_test.json` (or a single
/// `transforms.json`) with the PNGs they reference.
pub fn load_scene(dir: &Path, options: &LoadOptions) -> Result<SceneDataset> {
    let background = if options.white_background {
        [1.0; 3]
    } else {
        [0.0; 3]
    };
    let train_path = dir.join("transforms_train.json");
    let (train, test) = if train_path.exists() {
        let train = load_split(dir, &train_path, options, background)?;
        let test_path = dir.join("transforms_test.json");
        let test = if test_path.exists() {
            load_split(dir, &test_path, options, background)?
        } else {
            Vec::new()
        };
        (train, test)
    } else {
        let all = load_split(dir, &dir.join("transforms.json"), options, background)?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, v) in all.into_iter().enumerate() {
            if i % HOLDOUT_EVERY == 0 {
                test.push(v);
            } else {
                train.push(v);
            }
        }
        (train, test)
    };
    let scene = SceneDataset {
        train,
        test,
        white_background: options.white_background,
    };
    scene.validate()?;
    Ok(scene)
}

fn load_split(
    dir: &Path,
    path: &Path,
    options: &LoadOptions,
    background: [f64; 3],
) -> Result<Vec<View>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: TransformsFile =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let near = options.near.or(file.near).unwrap_or(DEFAULT_NEAR);
    let far = options.far.or(file.far).unwrap_or(DEFAULT_FAR);
    let mut views = Vec::with_capacity(file.frames.len());
    for (index, frame) in file.frames.iter().enumerate() {
        let pose = parse_pose(&frame.transform_matrix)
            .map_err(|detail| Error::format(path, format!("frame {index}: {detail}")))?;
        let image_path = image_path(dir, &frame.file_path);
        let image = Image::load_png(&image_path, background)?.downsample(options.downsample)?;
        let focal = Camera::focal_from_fov(image.width * options.downsample, file.camera_angle_x)
            / options.downsample as f64;
        let camera = Camera::new(image.width, image.height, focal, pose, near, far)
            .map_err(|e| Error::format(path, format!("frame {index}: {e}")))?;
        views.push(View {
            name: frame.file_path.clone(),
            camera,
            image,
        });
    }
    Ok(views)
}

fn parse_pose(m: &[Vec<f64>]) -> std::result::Result<[[f64; 4]; 3], String> {
    if m.len() != 4 {
        return Err(format!("transform_matrix has {} rows, expected 4", m.len()));
    }
    if let Some((r, row)) = m.iter().enumerate().find(|(_, row)| row.len() != 4) {
        return Err(format!(
            "transform_matrix row {r} has {} columns, expected 4",
            row.len()
        ));
    }
    let mut pose = [[0.0; 4]; 3];
    for r in 0..3 {
        pose[r].copy_from_slice(&m[r]);
    }
    Ok(pose)
}

fn image_path(dir: &Path, file_path: &str) -> PathBuf {
    let p = dir.join(file_path);
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

/// Write the dataset in the transforms-JSON layout loaded by [`load_scene`].
pub fn save_scene(scene: &SceneDataset, dir: &Path) -> Result<()> {
    for (split, views) in [("train", &scene.train), ("test", &scene.test)] {
        let sub = dir.join(split);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut frames = Vec::with_capacity(views.len());
        for (i, v) in views.iter().enumerate() {
            let rel = format!("./{split}/r_{i}");
            v.image.save_png(&image_path(dir, &rel))?;
            let mut m: Vec<Vec<f64>> = v.camera.pose.iter().map(|r| r.to_vec()).collect();
            m.push(vec![0.0, 0.0, 0.0, 1.0]);
            frames.push(FrameRecord {
                file_path: rel,
                transform_matrix: m,
            });
        }
        let first = views.first().or(scene.train.first());
        let (fov, near, far) = first.map_or((0.0, DEFAULT_NEAR, DEFAULT_FAR), |v| {
            (
                2.0 * (v.camera.width as f64 / (2.0 * v.camera.focal)).atan(),
                v.camera.near,
                v.camera.far,
            )
        });
        let file = TransformsFile {
            camera_angle_x: fov,
            near: Some(near),
            far: Some(far),
            frames,
        };
        let path = dir.join(format!("transforms_{split}.json"));
        let text = serde_json::to_string_pretty(&file).expect("plain struct");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Analytic primitive with a smooth boundary of width `softness`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyShape {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    Box {
        center: Vec3,
        half_extent: Vec3,
    },
    /// Mixture of two isotropic Gaussians (no hard boundary).
    Blobs {
        centers: [Vec3; 2],
        scale: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyObject {
    pub shape: ToyShape,
    pub color: Vec3,
    /// Density deep inside the object.
    pub density: f64,
    pub softness: f64,
}

impl ToyObject {
    fn density_at(&self, p: Vec3) -> f64 {
        let inside = |signed: f64| self.density * crate::util::logistic(signed / self.softness);
        match &self.shape {
            ToyShape::Sphere { center, radius } => {
                let d = crate::util::distance(p, *center);
                inside(radius - d)
            }
            ToyShape::Box {
                center,
                half_extent,
            } => {
                // Negated signed distance to the box surface.
                let q: Vec3 = [0, 1, 2].map(|a| (p[a] - center[a]).abs() - half_extent[a]);
                let outside = q.map(|v| v.max(0.0));
                let outer =
                    (outside[0] * outside[0] + outside[1] * outside[1] + outside[2] * outside[2])
                        .sqrt();
                let inner = q[0].max(q[1]).max(q[2]).min(0.0);
                inside(-(outer + inner))
            }
            ToyShape::Blobs { centers, scale } => centers
                .iter()
                .map(|c| {
                    let d = crate::util::distance(p, *c);
                    self.density * (-d * d / (2.0 * scale * scale)).exp()
                })
                .sum(),
        }
    }
}

/// Density-weighted mixture of analytic objects.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ToyField {
    pub objects: Vec<ToyObject>,
}

impl ToyField {
    /// Colour and density at `p`.
    pub fn eval(&self, p: Vec3) -> (Vec3, f64) {
        let mut sigma = 0.0;
        let mut rgb = [0.0; 3];
        for o in &self.objects {
            let s = o.density_at(p);
            sigma += s;
            for (acc, c) in rgb.iter_mut().zip(o.color) {
                *acc += s * c;
            }
        }
        if sigma > 0.0 {
            rgb = rgb.map(|v| v / sigma);
        }
        (rgb, sigma)
    }

    pub fn density(&self, p: Vec3) -> f64 {
        self.eval(p).1
    }

    /// Composite `camera` with `samples` stratified depths per ray, drawn
    /// from `src` ([`Midpoints`] for a deterministic quadrature).
    pub fn render<S: UniformSource + ?Sized>(
        &self,
        camera: &Camera,
        samples: usize,
        white_background: bool,
        src: &mut S,
    ) -> Result<Image> {
        const CHUNK: usize = 256;
        let rays = generate_rays(camera);
        let mut data = Vec::with_capacity(rays.len() * 3);
        for chunk in rays.chunks(CHUNK) {
            let b = chunk.len();
            let mut t = Vec::with_capacity(b * samples);
            let mut gaps = Vec::with_capacity(b);
            let mut sigma = Vec::with_capacity(b * samples);
            let mut rgb = Vec::with_capacity(b * samples * 3);
            for ray in chunk {
                let s = stratified_sample(ray.near, ray.far, samples, src)?;
                for &tk in &s.t {
                    let (c, d) = self.eval(ray.at(tk));
                    sigma.push(d);
                    rgb.extend(c);
                }
                t.extend(s.t);
                gaps.push(s.terminal_gap);
            }
            let mut tape = Tape::new();
            let t = tape.constant(Tensor::new(vec![b, samples], t)?);
            let sigma = tape.constant(Tensor::new(vec![b, samples], sigma)?);
            let rgb = tape.constant(Tensor::new(vec![b, samples, 3], rgb)?);
            let out = composite(&mut tape, t, &gaps, sigma, rgb, white_background)?;
            data.extend_from_slice(tape.value(out.color).data());
        }
        Image::new(camera.width, camera.height, data)
    }
}

/// Procedural scene: objects, a ring of inward-facing cameras and image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub objects: Vec<ToyObject>,
    pub views: usize,
    /// Every `holdout_every`-th view (starting from the last of each group)
    /// goes to the test split.
    pub holdout_every: usize,
    pub camera_distance: f64,
    /// Camera height angle above the `xy` plane, radians.
    pub elevation: f64,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, radians.
    pub fov_x: f64,
    pub near: f64,
    pub far: f64,
    pub white_background: bool,
    /// Depth samples per ray of the ground-truth renderer.
    pub oracle_samples: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self::sphere_and_box()
    }
}

impl ToySpec {
    /// The bundled scene: a red sphere beside a blue box, twelve views of 64×64.
    pub fn sphere_and_box() -> Self {
        Self {
            objects: vec![
                ToyObject {
                    shape: ToyShape::Sphere {
                        center: [-0.35, -0.1, 0.0],
                        radius: 0.45,
                    },
                    color: [0.85, 0.25, 0.2],
                    density: 40.0,
                    softness: 0.02,
                },
                ToyObject {
                    shape: ToyShape::Box {
                        center: [0.35, 0.2, -0.1],
                        half_extent: [0.3, 0.3, 0.35],
                    },
                    color: [0.2, 0.45, 0.85],
                    density: 40.0,
                    softness: 0.02,
                },
            ],
            views: 12,
            holdout_every: 3,
            camera_distance: 4.0,
            elevation: 25f64.to_radians(),
            width: 64,
            height: 64,
            fov_x: 40f64.to_radians(),
            near: 2.0,
            far: 6.0,
            white_background: true,
            oracle_samples: 512,
        }
    }

    pub fn field(&self) -> ToyField {
        ToyField {
            objects: self.objects.clone(),
        }
    }

    pub fn camera(&self, view: usize) -> Result<Camera> {
        let azimuth = 2.0 * std::f64::consts::PI * view as f64 / self.views as f64;
        let r = self.camera_distance;
        let eye = [
            r * self.elevation.cos() * azimuth.cos(),
            r * self.elevation.cos() * azimuth.sin(),
            r * self.elevation.sin(),
        ];
        let pose = Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0]);
        let focal = Camera::focal_from_fov(self.width, self.fov_x);
        Camera::new(self.width, self.height, focal, pose, self.near, self.far)
    }

    fn is_test(&self, view: usize) -> bool {
        self.holdout_every > 0 && view % self.holdout_every == self.holdout_every - 1
    }
}

/// Render every view of `spec` with the analytic field, using midpoint
/// quadrature so the images are deterministic.
pub fn generate_toy_scene(spec: &ToySpec) -> Result<(SceneDataset, ToyField)> {
    let field = spec.field();
    for o in &field.objects {
        if !(o.density >= 0.0 && o.density.is_finite() && o.softness > 0.0) {
            return Err(Error::invalid(
                "toy object",
                format!("density {} softness {}", o.density, o.softness),
            ));
        }
    }
    let mut scene = SceneDataset {
        train: Vec::new(),
        test: Vec::new(),
        white_background: spec.white_background,
    };
    for view in 0..spec.views {
        let camera = spec.camera(view)?;
        let image = field.render(
            &camera,
            spec.oracle_samples,
            spec.white_background,
            &mut Midpoints,
        )?;
        let v = View {
            name: format!("view_{view:03}"),
            camera,
            image,
        };
        if spec.is_test(view) {
            scene.test.push(v);
        } else {
            scene.train.push(v);
        }
    }
    Ok((scene, field))
}
