//! Explicit density regularisers evaluated by lattice quadrature over
//! `[-1, 1]^3`.

use augnerf_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{BoundField, RadianceField};
use crate::geometry::Lattice;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    #[default]
    None,
    L1,
    Tv,
    Laplacian,
}

/// A density that can be evaluated on a tape.
pub trait DensityField {
    /// Density `[n]` at `[n, 3]` positions.
    fn density_var(&self, tape: &mut Tape, points: Var) -> Result<Var>;
}

impl DensityField for RadianceField {
    fn density_var(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        let bound = self.bind(tape, false);
        bound.density(tape, points, None)
    }
}

impl<F: Fn(&mut Tape, Var) -> Result<Var>> DensityField for F {
    fn density_var(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        self(tape, points)
    }
}

const CHUNK: usize = 32768;

fn points_tensor(points: &[[f64; 3]]) -> Tensor {
    Tensor::new(
        vec![points.len(), 3],
        points.iter().flatten().copied().collect(),
    )
    .expect("[n, 3] points")
}

fn density_values(field: &impl DensityField, points: &[[f64; 3]]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(CHUNK) {
        let mut tape = Tape::new();
        let p = tape.constant(points_tensor(chunk));
        let s = field.density_var(&mut tape, p)?;
        out.extend_from_slice(tape.value(s).data());
    }
    Ok(out)
}

/// Quadrature of `|σ|`, `|∇σ|` or `|Δσ|` over an `n^3` lattice of cell
/// centres, each node weighted by the cell volume.
///
/// The gradient comes from differentiating the field with respect to
/// position. The Laplacian uses the 7-point stencil over interior nodes.
pub fn explicit_regularizer(
    field: &impl DensityField,
    kind: RegularizerKind,
    n: usize,
) -> Result<f64> {
    let lattice = Lattice::new(n)?;
    let volume = lattice.cell_volume();
    let points = lattice.points();
    match kind {
        RegularizerKind::None => Ok(0.0),
        RegularizerKind::L1 => {
            let sigma = density_values(field, &points)?;
            Ok(sigma.iter().map(|s| s.abs()).sum::<f64>() * volume)
        }
        RegularizerKind::Tv => {
            let mut total = 0.0;
            for chunk in points.chunks(CHUNK) {
                let mut tape = Tape::new();
                let p = tape.leaf(points_tensor(chunk), true);
                let s = field.density_var(&mut tape, p)?;
                let loss = tape.sum(s);
                tape.backward(loss)?;
                if let Some(g) = tape.grad(p) {
                    total += g
                        .chunks(3)
                        .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
                        .sum::<f64>();
                }
            }
            Ok(total * volume)
        }
        RegularizerKind::Laplacian => {
            if n < 3 {
                return Err(Error::invalid(
                    "lattice",
                    "the Laplacian stencil needs at least 3 nodes per axis",
                ));
            }
            let sigma = density_values(field, &points)?;
            let h2 = lattice.spacing() * lattice.spacing();
            let at = |i: usize, j: usize, k: usize| sigma[lattice.index(i, j, k)];
            let mut total = 0.0;
            for i in 1..n - 1 {
                for j in 1..n - 1 {
                    for k in 1..n - 1 {
                        let c = at(i, j, k);
                        let lap = (at(i + 1, j, k) + at(i - 1, j, k) - 2.0 * c)
                            + (at(i, j + 1, k) + at(i, j - 1, k) - 2.0 * c)
                            + (at(i, j, k + 1) + at(i, j, k - 1) - 2.0 * c);
                        total += (lap / h2).abs();
                    }
                }
            }
            Ok(total * volume)
        }
    }
}

/// Differentiable counterpart of [`explicit_regularizer`] for training.
///
/// Gradients and the Laplacian both come from central differences with step
/// equal to the lattice spacing, evaluated at every node, since the tape only
/// supports first derivatives.
pub fn regularizer_term(
    tape: &mut Tape,
    field: &BoundField,
    kind: RegularizerKind,
    n: usize,
) -> Result<Option<Var>> {
    if kind == RegularizerKind::None {
        return Ok(None);
    }
    let lattice = Lattice::new(n)?;
    let volume = lattice.cell_volume();
    let h = lattice.spacing();
    let nodes = lattice.points();
    let m = nodes.len();
    let offsets: &[[f64; 3]] = if kind == RegularizerKind::L1 {
        &[[0.0; 3]]
    } else {
        &[
            [0.0, 0.0, 0.0],
            [h, 0.0, 0.0],
            [-h, 0.0, 0.0],
            [0.0, h, 0.0],
            [0.0, -h, 0.0],
            [0.0, 0.0, h],
            [0.0, 0.0, -h],
        ]
    };
    let mut pts = Vec::with_capacity(offsets.len() * m * 3);
    for o in offsets {
        for p in &nodes {
            pts.extend([p[0] + o[0], p[1] + o[1], p[2] + o[2]]);
        }
    }
    let p = tape.constant(Tensor::new(vec![offsets.len() * m, 3], pts)?);
    let sigma = field.density(tape, p, None)?;
    let rows = tape.reshape(sigma, &[offsets.len(), m])?;
    let row = |r: usize, tape: &mut Tape| -> Result<Var> {
        let s = tape.slice(rows, 0, r, r + 1)?;
        Ok(tape.reshape(s, &[m])?)
    };
    let integrand = match kind {
        RegularizerKind::L1 => {
            let s = row(0, tape)?;
            tape.abs(s)
        }
        RegularizerKind::Tv => {
            let mut sq = Vec::with_capacity(3);
            for axis in 0..3 {
                let plus = row(1 + 2 * axis, tape)?;
                let minus = row(2 + 2 * axis, tape)?;
                let d = tape.sub(plus, minus)?;
                let d = tape.scale(d, 0.5 / h);
                sq.push(tape.square(d));
            }
            let s = tape.add(sq[0], sq[1])?;
            let s = tape.add(s, sq[2])?;
            // Keeps the gradient of the norm finite where the field is flat.
            let s = tape.offset(s, 1e-12);
            tape.sqrt(s)
        }
        RegularizerKind::Laplacian => {
            let centre = row(0, tape)?;
            let mut acc = tape.scale(centre, -6.0);
            for r in 1..7 {
                let s = row(r, tape)?;
                acc = tape.add(acc, s)?;
            }
            let lap = tape.scale(acc, 1.0 / (h * h));
            tape.abs(lap)
        }
        RegularizerKind::None => unreachable!(),
    };
    let total = tape.sum(integrand);
    Ok(Some(tape.scale(total, volume)))
}
