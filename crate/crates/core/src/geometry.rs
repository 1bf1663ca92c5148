//! Density lattices, marching cubes, OBJ export and Chamfer distance.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::RadianceField;
use crate::mc_tables::{EDGE_TABLE, TRI_TABLE};

pub type Point = [f64; 3];

/// `n^3` cell centres of a regular grid over `[-1, 1]^3`, indexed with `x`
/// slowest and `z` fastest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lattice {
    n: usize,
}

impl Lattice {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(
                "lattice",
                format!("resolution {n} is below 2"),
            ));
        }
        Ok(Self { n })
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    /// Node spacing `2 / n`.
    pub fn spacing(&self) -> f64 {
        2.0 / self.n as f64
    }

    pub fn cell_volume(&self) -> f64 {
        let d = self.spacing();
        d * d * d
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        -1.0 + (i as f64 + 0.5) * self.spacing()
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> Point {
        [self.coordinate(i), self.coordinate(j), self.coordinate(k)]
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n + j) * self.n + k
    }

    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> Vec<Point> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.n {
            for j in 0..self.n {
                for k in 0..self.n {
                    out.push(self.node(i, j, k));
                }
            }
        }
        out
    }
}

/// Anything that reports density at a batch of points.
pub trait DensitySource {
    fn densities(&self, points: &[Point]) -> Result<Vec<f64>>;
}

impl DensitySource for RadianceField {
    fn densities(&self, points: &[Point]) -> Result<Vec<f64>> {
        self.density_at(points)
    }
}

impl<F: Fn(Point) -> f64> DensitySource for F {
    fn densities(&self, points: &[Point]) -> Result<Vec<f64>> {
        Ok(points.iter().map(|&p| self(p)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub lattice: Lattice,
    /// One value per lattice node, in [`Lattice::index`] order.
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.lattice.index(i, j, k)]
    }

    /// Raw little-endian f32 volume at `<stem>.raw` with a `<stem>.json` header.
    pub fn save(&self, stem: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header {
            resolution: usize,
            bounds: [f64; 2],
            dtype: &'static str,
            order: &'static str,
        }
        let raw: Vec<u8> = self
            .values
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        let raw_path = stem.with_extension("raw");
        std::fs::write(&raw_path, raw).map_err(|e| Error::io(&raw_path, e))?;
        let header = Header {
            resolution: self.lattice.resolution(),
            bounds: [-1.0, 1.0],
            dtype: "f32le",
            order: "x-major, z fastest, cell centres",
        };
        let json_path = stem.with_extension("json");
        let text = serde_json::to_string_pretty(&header).expect("plain struct");
        std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
    }
}

/// Density at every cell centre of an `n^3` lattice over `[-1, 1]^3`.
pub fn export_density_grid(field: &impl DensitySource, resolution: usize) -> Result<DensityGrid> {
    let lattice = Lattice::new(resolution)?;
    let values = field.densities(&lattice.points())?;
    if let Some(v) = values.iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(Error::invalid(
            "density grid",
            format!("value {v} is not a nonnegative density"),
        ));
    }
    Ok(DensityGrid { lattice, values })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        let u = sub(b, a);
        let v = sub(c, a);
        0.5 * norm(cross(u, v))
    }

    /// True when every undirected edge borders exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        !count.is_empty() && count.values().all(|&c| c == 2)
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        out
    }

    pub fn save_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }

    /// Area-weighted uniform samples on the surface.
    pub fn sample_surface<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Point>> {
        if self.is_empty() {
            return Err(Error::invalid("mesh", "cannot sample an empty surface"));
        }
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in 0..self.triangles.len() {
            acc += self.triangle_area(t);
            cdf.push(acc);
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.random::<f64>() * acc;
            let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
            let (mut r1, mut r2): (f64, f64) = (rng.random(), rng.random());
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            out.push([0, 1, 2].map(|d| a[d] + r1 * (b[d] - a[d]) + r2 * (c[d] - a[d])));
        }
        Ok(out)
    }
}

/// Corner offsets in Bourke order.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs joined by each cube edge.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Isosurface `σ = threshold` with one cube per lattice cell. Vertices on a
/// shared cell edge are emitted once, so closed surfaces come out watertight.
pub fn marching_cubes(grid: &DensityGrid, threshold: f64) -> TriangleMesh {
    let lat = grid.lattice;
    let n = lat.resolution();
    let spacing = lat.spacing();
    let mut mesh = TriangleMesh::default();
    let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            for k in 0..n - 1 {
                let corner = |c: usize| [i + CORNERS[c][0], j + CORNERS[c][1], k + CORNERS[c][2]];
                let mut case = 0usize;
                for c in 0..8 {
                    let [a, b, d] = corner(c);
                    if grid.value(a, b, d) < threshold {
                        case |= 1 << c;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut vertex_of_edge = [usize::MAX; 12];
                for (e, &[c0, c1]) in EDGES.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let (mut lo, mut hi) = (corner(c0), corner(c1));
                    if lat.index(lo[0], lo[1], lo[2]) > lat.index(hi[0], hi[1], hi[2]) {
                        std::mem::swap(&mut lo, &mut hi);
                    }
                    let axis = (0..3).find(|&a| lo[a] != hi[a]).expect("cube edge");
                    let key = (lat.index(lo[0], lo[1], lo[2]), axis);
                    let id = *cache.entry(key).or_insert_with(|| {
                        let v0 = grid.value(lo[0], lo[1], lo[2]);
                        let v1 = grid.value(hi[0], hi[1], hi[2]);
                        let t = (threshold - v0) / (v1 - v0);
                        let mut p = lat.node(lo[0], lo[1], lo[2]);
                        p[axis] += t * spacing;
                        mesh.vertices.push(p);
                        mesh.vertices.len() - 1
                    });
                    vertex_of_edge[e] = id;
                }
                for tri in TRI_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [0, 1, 2].map(|m| vertex_of_edge[tri[m] as usize]);
                    if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                        continue;
                    }
                    mesh.triangles.push(t);
                    if mesh.triangle_area(mesh.triangles.len() - 1) == 0.0 {
                        mesh.triangles.pop();
                    }
                }
            }
        }
    }
    mesh
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn dist2(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Static k-d tree for exact nearest-neighbour queries.
pub struct KdTree<'a> {
    points: &'a [Point],
    /// Implicit balanced tree: the median of each range is its root.
    order: Vec<usize>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Point]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        build(points, &mut order, 0);
        Self { points, order }
    }

    /// Smallest squared distance from `q` to any point, computed with the
    /// same arithmetic as a direct scan.
    pub fn nearest_dist2(&self, q: &Point) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, 0, self.order.len(), 0, &mut best);
        best
    }

    fn search(&self, q: &Point, lo: usize, hi: usize, depth: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[self.order[mid]];
        let d = dist2(q, p);
        if d < *best {
            *best = d;
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, depth + 1, best);
        if diff * diff <= *best {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }
}

fn build(points: &[Point], order: &mut [usize], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let (left, right) = order.split_at_mut(mid);
    build(points, left, depth + 1);
    build(points, &mut right[1..], depth + 1);
}

fn check_nonempty(points: &[Point]) -> Result<()> {
    if points.is_empty() {
        Err(Error::invalid("point set", "empty"))
    } else {
        Ok(())
    }
}

fn mean_nearest(from: &[Point], nearest: impl Fn(&Point) -> f64) -> f64 {
    from.iter().map(|p| nearest(p).sqrt()).sum::<f64>() / from.len() as f64
}

/// Mean nearest-neighbour distance from `a` to `b` plus from `b` to `a`.
pub fn chamfer_distance(a: &[Point], b: &[Point]) -> Result<f64> {
    check_nonempty(a)?;
    check_nonempty(b)?;
    let (ta, tb) = (KdTree::new(a), KdTree::new(b));
    Ok(mean_nearest(a, |p| tb.nearest_dist2(p)) + mean_nearest(b, |p| ta.nearest_dist2(p)))
}

/// [`chamfer_distance`] by a direct double loop.
pub fn chamfer_distance_brute(a: &[Point], b: &[Point]) -> Result<f64> {
    check_nonempty(a)?;
    check_nonempty(b)?;
    let scan = |set: &[Point], q: &Point| {
        set.iter()
            .map(|p| dist2(q, p))
            .fold(f64::INFINITY, f64::min)
    };
    Ok(mean_nearest(a, |p| scan(b, p)) + mean_nearest(b, |p| scan(a, p)))
}
