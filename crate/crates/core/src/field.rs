//! Positional encoding and the radiance MLP.
//!
//! The trunk maps an encoded position to a `width`-dimensional feature. The
//! density head reads that feature directly; the colour head reads it together
//! with the encoded view direction. A feature perturbation `delta_f` may be
//! added to the output of any trunk layer.

use std::f64::consts::PI;
use std::path::Path;

use augnerf_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Sin/cos ladder at frequencies `π·2^0 … π·2^(L-1)`.
///
/// Per input axis the output holds the identity term (when enabled), then the
/// `L` sines, then the `L` cosines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncoder {
    pub frequencies: usize,
    pub include_identity: bool,
}

impl PositionalEncoder {
    pub fn new(frequencies: usize, include_identity: bool) -> Self {
        Self {
            frequencies,
            include_identity,
        }
    }

    fn terms(&self) -> usize {
        2 * self.frequencies + usize::from(self.include_identity)
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * self.terms()
    }

    fn frequency(l: usize) -> f64 {
        PI * (1u64 << l) as f64
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.output_dim(x.len()));
        for &v in x {
            if self.include_identity {
                out.push(v);
            }
            out.extend((0..self.frequencies).map(|l| (v * Self::frequency(l)).sin()));
            out.extend((0..self.frequencies).map(|l| (v * Self::frequency(l)).cos()));
        }
        out
    }

    /// Encode every row of an `[n, dim]` variable, giving `[n, dim * terms]`.
    pub fn encode_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || self.terms() == 0 {
            return Err(Error::invalid(
                "encoder input",
                format!("shape {shape:?} with {} terms per axis", self.terms()),
            ));
        }
        let (n, dim) = (shape[0], shape[1]);
        let frequencies: Vec<f64> = (0..self.frequencies).map(Self::frequency).collect();
        let ladder = tape.fourier(x, &frequencies)?;
        let stacked = if self.include_identity {
            let identity = tape.reshape(x, &[n, dim, 1])?;
            tape.concat(&[identity, ladder], 2)?
        } else {
            ladder
        };
        Ok(tape.reshape(stacked, &[n, dim * self.terms()])?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    /// Number of trunk layers.
    pub depth: usize,
    /// Hidden width, which is also the feature perturbation dimension.
    pub width: usize,
    pub pos_frequencies: usize,
    pub dir_frequencies: usize,
    pub include_identity: bool,
    /// The encoded position is concatenated to the output of this trunk layer.
    pub skip_layer: Option<usize>,
    /// `delta_f` is added to the output of this trunk layer.
    pub injection_layer: usize,
    /// Positions are multiplied by this before encoding.
    pub position_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 64,
            pos_frequencies: 6,
            dir_frequencies: 4,
            include_identity: true,
            skip_layer: Some(2),
            injection_layer: 2,
            position_scale: 1.0,
        }
    }
}

impl FieldConfig {
    /// Depth 8, width 256, ten position frequencies.
    pub fn full_size() -> Self {
        Self {
            depth: 8,
            width: 256,
            pos_frequencies: 10,
            skip_layer: Some(4),
            injection_layer: 4,
            ..Self::default()
        }
    }

    pub fn position_encoder(&self) -> PositionalEncoder {
        PositionalEncoder::new(self.pos_frequencies, self.include_identity)
    }

    pub fn direction_encoder(&self) -> PositionalEncoder {
        PositionalEncoder::new(self.dir_frequencies, self.include_identity)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::invalid("field config", detail));
        if self.depth == 0 || self.width < 2 {
            return fail(format!("depth {} width {}", self.depth, self.width));
        }
        if self.injection_layer >= self.depth {
            return fail(format!(
                "injection layer {} outside trunk of depth {}",
                self.injection_layer, self.depth
            ));
        }
        if let Some(skip) = self.skip_layer {
            if skip + 1 >= self.depth {
                return fail(format!("skip layer {skip} has no following trunk layer"));
            }
        }
        if self.position_encoder().output_dim(3) == 0 || self.direction_encoder().output_dim(3) == 0
        {
            return fail("encoders produce no features".into());
        }
        if !(self.position_scale.is_finite() && self.position_scale > 0.0) {
            return fail(format!("position scale {}", self.position_scale));
        }
        Ok(())
    }

    /// `(name, inputs, outputs)` for every linear layer, in storage order.
    fn layer_shapes(&self) -> Vec<(String, usize, usize)> {
        let pos = self.position_encoder().output_dim(3);
        let dir = self.direction_encoder().output_dim(3);
        let w = self.width;
        let mut shapes = Vec::with_capacity(self.depth + 4);
        for i in 0..self.depth {
            let input = if i == 0 {
                pos
            } else if self.skip_layer == Some(i - 1) {
                w + pos
            } else {
                w
            };
            shapes.push((format!("trunk.{i}"), input, w));
        }
        shapes.push(("density".into(), w, 1));
        shapes.push(("feature".into(), w, w));
        shapes.push(("color.hidden".into(), w + dir, w / 2));
        shapes.push(("color.out".into(), w / 2, 3));
        shapes
    }
}

/// Radiance and density at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldOutput {
    pub rgb: [f64; 3],
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct Linear {
    weight: Tensor,
    bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    config: FieldConfig,
    layers: Vec<Linear>,
}

const DENSITY: usize = 0;
const FEATURE: usize = 1;
const COLOR_HIDDEN: usize = 2;
const COLOR_OUT: usize = 3;

impl RadianceField {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(config: FieldConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(_, fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Linear {
                    weight: Tensor::new(vec![fan_in, fan_out], weights).expect("layer shape"),
                    bias: Tensor::vector(vec![0.0; fan_out]),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    /// Weights and biases interleaved, layer by layer.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    /// Copy the parameters onto `tape`. With `trainable = false` they act as
    /// constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundField {
        let params = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.weight.clone(), trainable),
                    tape.leaf(l.bias.clone(), trainable),
                )
            })
            .collect();
        BoundField {
            config: self.config.clone(),
            params,
        }
    }

    /// Evaluate a single point. `dir` must be a unit vector.
    pub fn query(
        &self,
        point: [f64; 3],
        dir: [f64; 3],
        delta_f: Option<&[f64]>,
    ) -> Result<FieldOutput> {
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("view direction", format!("norm {norm}")));
        }
        if let Some(d) = delta_f {
            check_len("feature perturbation", self.width(), d.len())?;
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let p = tape.constant(Tensor::new(vec![1, 3], point.to_vec())?);
        let v = tape.constant(Tensor::new(vec![1, 3], dir.to_vec())?);
        let df = match delta_f {
            Some(d) => Some(tape.constant(Tensor::new(vec![1, self.width()], d.to_vec())?)),
            None => None,
        };
        let (rgb, sigma) = bound.query(&mut tape, p, v, df)?;
        let c = tape.value(rgb).data();
        Ok(FieldOutput {
            rgb: [c[0], c[1], c[2]],
            sigma: tape.value(sigma).data()[0],
        })
    }

    /// Clean density at many points, evaluated in chunks.
    pub fn density_at(&self, points: &[[f64; 3]]) -> Result<Vec<f64>> {
        const CHUNK: usize = 8192;
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(CHUNK) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let flat = chunk.iter().flatten().copied().collect();
            let p = tape.constant(Tensor::new(vec![chunk.len(), 3], flat)?);
            let sigma = bound.density(&mut tape, p, None)?;
            out.extend_from_slice(tape.value(sigma).data());
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        let layers = self
            .config
            .layer_shapes()
            .into_iter()
            .zip(&self.layers)
            .map(|((name, fan_in, fan_out), l)| LayerRecord {
                name,
                inputs: fan_in,
                outputs: fan_out,
                weight: l.weight.data().to_vec(),
                bias: l.bias.data().to_vec(),
            })
            .collect();
        let record = CheckpointRecord {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            layers,
        };
        serde_json::to_string(&record).map_err(|e| Error::invalid("checkpoint", e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: CheckpointRecord =
            serde_json::from_str(text).map_err(|e| Error::invalid("checkpoint", e.to_string()))?;
        if record.format != CHECKPOINT_FORMAT || record.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(
                "checkpoint",
                format!(
                    "unsupported format {} version {}",
                    record.format, record.version
                ),
            ));
        }
        record.config.validate()?;
        let shapes = record.config.layer_shapes();
        check_len("checkpoint layers", shapes.len(), record.layers.len())?;
        let mut layers = Vec::with_capacity(shapes.len());
        for ((name, fan_in, fan_out), l) in shapes.into_iter().zip(record.layers) {
            if l.name != name || l.inputs != fan_in || l.outputs != fan_out {
                return Err(Error::invalid(
                    "checkpoint",
                    format!(
                        "layer {} [{}x{}] where {name} [{fan_in}x{fan_out}] expected",
                        l.name, l.inputs, l.outputs
                    ),
                ));
            }
            check_len("checkpoint bias", fan_out, l.bias.len())?;
            layers.push(Linear {
                weight: Tensor::new(vec![fan_in, fan_out], l.weight)?,
                bias: Tensor::vector(l.bias),
            });
        }
        Ok(Self {
            config: record.config,
            layers,
        })
    }
}

const CHECKPOINT_FORMAT: &str = "augnerf-field";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    format: String,
    version: u32,
    config: FieldConfig,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    inputs: usize,
    outputs: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// A field whose parameters live on a particular tape.
pub struct BoundField {
    config: FieldConfig,
    params: Vec<(Var, Var)>,
}

impl BoundField {
    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    /// Parameter variables in the same order as [`RadianceField::parameters`].
    pub fn parameter_vars(&self) -> Vec<Var> {
        self.params.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    fn linear(&self, tape: &mut Tape, x: Var, layer: usize) -> Result<Var> {
        let (w, b) = self.params[layer];
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, b)?)
    }

    fn head(&self, index: usize) -> usize {
        self.config.depth + index
    }

    /// Trunk feature for `[n, 3]` positions, with `delta_f` (`[n, width]`)
    /// added after the injection layer.
    pub fn trunk(&self, tape: &mut Tape, positions: Var, delta_f: Option<Var>) -> Result<Var> {
        let n = tape.shape(positions)[0];
        if let Some(d) = delta_f {
            let shape = tape.shape(d);
            if shape != [n, self.config.width] {
                return Err(Error::invalid(
                    "feature perturbation",
                    format!(
                        "shape {shape:?} for {n} points of width {}",
                        self.config.width
                    ),
                ));
            }
        }
        let scaled = if self.config.position_scale == 1.0 {
            positions
        } else {
            tape.scale(positions, self.config.position_scale)
        };
        let encoded = self.config.position_encoder().encode_var(tape, scaled)?;
        let mut h = encoded;
        for i in 0..self.config.depth {
            let z = self.linear(tape, h, i)?;
            h = tape.relu(z);
            if i == self.config.injection_layer {
                if let Some(d) = delta_f {
                    h = tape.add(h, d)?;
                }
            }
            if self.config.skip_layer == Some(i) {
                h = tape.concat(&[h, encoded], 1)?;
            }
        }
        Ok(h)
    }

    fn density_head(&self, tape: &mut Tape, feature: Var) -> Result<Var> {
        let n = tape.shape(feature)[0];
        let z = self.linear(tape, feature, self.head(DENSITY))?;
        let s = tape.relu(z);
        Ok(tape.reshape(s, &[n])?)
    }

    /// Density `[n]` at `[n, 3]` positions.
    pub fn density(&self, tape: &mut Tape, positions: Var, delta_f: Option<Var>) -> Result<Var> {
        let feature = self.trunk(tape, positions, delta_f)?;
        self.density_head(tape, feature)
    }

    /// Colour `[n, 3]` and density `[n]` at `[n, 3]` positions. `directions`
    /// is `[r, 3]` with `r` dividing `n`: each unit direction is shared by a
    /// run of `n / r` consecutive positions.
    pub fn query(
        &self,
        tape: &mut Tape,
        positions: Var,
        directions: Var,
        delta_f: Option<Var>,
    ) -> Result<(Var, Var)> {
        let n = tape.shape(positions)[0];
        let r = tape.shape(directions)[0];
        if r == 0 || !n.is_multiple_of(r) {
            return Err(Error::invalid(
                "view directions",
                format!("{r} directions for {n} positions"),
            ));
        }
        let feature = self.trunk(tape, positions, delta_f)?;
        let sigma = self.density_head(tape, feature)?;
        let f = self.linear(tape, feature, self.head(FEATURE))?;
        let dir = self
            .config
            .direction_encoder()
            .encode_var(tape, directions)?;
        // The hidden colour layer acts on [feature, encoded direction]; its
        // direction half is evaluated once per direction.
        let (w, b) = self.params[self.head(COLOR_HIDDEN)];
        let width = self.config.width;
        let rows = tape.shape(w)[0];
        let w_feature = tape.slice(w, 0, 0, width)?;
        let w_dir = tape.slice(w, 0, width, rows)?;
        let from_feature = tape.matmul(f, w_feature)?;
        let from_dir = tape.matmul(dir, w_dir)?;
        let from_dir = tape.add_bias(from_dir, b)?;
        let from_dir = tape.expand(from_dir, 1, n / r)?;
        let from_dir = tape.reshape(from_dir, &[n, width / 2])?;
        let z = tape.add(from_feature, from_dir)?;
        let hidden = tape.relu(z);
        let z = self.linear(tape, hidden, self.head(COLOR_OUT))?;
        Ok((tape.sigmoid(z), sigma))
    }
}
