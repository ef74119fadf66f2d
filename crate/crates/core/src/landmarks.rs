//! 2-D landmark sets, Bowyer–Watson Delaunay triangulation, Laplacian (differential)
//! coordinates and the Laplacian smoothness loss.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Mlp;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Point<T> = [T; 2];

/// Ordered landmark coordinates (pixels) and the subset the smoothness loss uses.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet<T> {
    points: Vec<Point<T>>,
    selected: Vec<usize>,
}

impl<T: Scalar> LandmarkSet<T> {
    /// Validates coordinates against the `width × height` image rectangle.
    pub fn new(points: Vec<Point<T>>, selected: Vec<usize>, width: T, height: T) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::Invalid(format!("landmark {i} is not finite")));
            }
            if p[0] < T::zero() || p[0] > width || p[1] < T::zero() || p[1] > height {
                return Err(Error::Invalid(format!(
                    "landmark {i} = ({}, {}) outside the image",
                    p[0], p[1]
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for &s in &selected {
            if s >= points.len() || !seen.insert(s) {
                return Err(Error::Invalid(format!("selected index {s} invalid or repeated")));
            }
        }
        Ok(Self { points, selected })
    }

    pub fn points(&self) -> &[Point<T>] {
        &self.points
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `index,x,y` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,x,y\n");
        for (i, p) in self.points.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{}", p[0], p[1]);
        }
        s
    }

    pub fn from_csv(text: &str, selected: Vec<usize>, width: T, height: T) -> Result<Self> {
        let mut points = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Invalid(format!("line {}: {e}", n + 1)))
            };
            if f.len() != 3 || parse(f[0])? as usize != points.len() {
                return Err(Error::Invalid(format!("line {}: expected index,x,y", n + 1)));
            }
            points.push([T::lit(parse(f[1])?), T::lit(parse(f[2])?)]);
        }
        Self::new(points, selected, width, height)
    }
}

/// Triangles (counter-clockwise index triples) and the symmetric edge-neighbor map.
#[derive(Clone, Debug, PartialEq)]
pub struct Triangulation {
    triangles: Vec<[usize; 3]>,
    neighbors: Vec<Vec<usize>>,
}

impl Triangulation {
    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Sorted neighbor indices of every vertex.
    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    /// `a,b,c` rows, one triangle per line.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for t in &self.triangles {
            let _ = writeln!(s, "{},{},{}", t[0], t[1], t[2]);
        }
        s
    }
}

fn orient<T: Scalar>(a: Point<T>, b: Point<T>, c: Point<T>) -> T {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Positive when `d` lies strictly inside the circumcircle of the CCW triangle `abc`.
pub fn in_circle<T: Scalar>(a: Point<T>, b: Point<T>, c: Point<T>, d: Point<T>) -> T {
    let (adx, ady) = (a[0] - d[0], a[1] - d[1]);
    let (bdx, bdy) = (b[0] - d[0], b[1] - d[1]);
    let (cdx, cdy) = (c[0] - d[0], c[1] - d[1]);
    let ad = adx * adx + ady * ady;
    let bd = bdx * bdx + bdy * bdy;
    let cd = cdx * cdx + cdy * cdy;
    adx * (bdy * cd - bd * cdy) - ady * (bdx * cd - bd * cdx) + ad * (bdx * cdy - bdy * cdx)
}

/// Bowyer–Watson incremental Delaunay triangulation with an enclosing super-triangle.
///
/// Rejects fewer than three points, exact duplicates, and fully collinear input.
pub fn delaunay<T: Scalar>(points: &[Point<T>]) -> Result<Triangulation> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Geometry(format!("need at least 3 points, got {n}")));
    }
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::Geometry("non-finite point".into()));
    }
    for i in 0..n {
        for j in 0..i {
            if points[i] == points[j] {
                return Err(Error::Geometry(format!("points {j} and {i} coincide")));
            }
        }
    }
    let (mut lo, mut hi) = (points[0], points[0]);
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let far = points
        .iter()
        .map(|p| (p[0] - points[0][0]).hypot(p[1] - points[0][1]))
        .enumerate()
        .fold((0, T::zero()), |m, (i, d)| if d > m.1 { (i, d) } else { m })
        .0;
    let tol = T::lit(1e-12) * span * span;
    if points
        .iter()
        .all(|&p| orient(points[0], points[far], p).abs() <= tol)
    {
        return Err(Error::Geometry("all points are collinear".into()));
    }

    let cx = (lo[0] + hi[0]) / T::lit(2.0);
    let cy = (lo[1] + hi[1]) / T::lit(2.0);
    let big = T::lit(1e3) * span;
    let mut verts: Vec<Point<T>> = points.to_vec();
    verts.push([cx - big, cy - big]);
    verts.push([cx + big, cy - big]);
    verts.push([cx, cy + big]);
    let mut tris: Vec<[usize; 3]> = vec![[n, n + 1, n + 2]];

    for pi in 0..n {
        let p = verts[pi];
        let (bad, good): (Vec<[usize; 3]>, Vec<[usize; 3]>) = tris
            .into_iter()
            .partition(|t| in_circle(verts[t[0]], verts[t[1]], verts[t[2]], p) > T::zero());
        tris = good;
        // Boundary of the cavity: directed edges of bad triangles whose twin is not bad.
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for t in &bad {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let shared = bad
                    .iter()
                    .any(|u| (0..3).any(|m| u[m] == b && u[(m + 1) % 3] == a));
                if !shared {
                    edges.push((a, b));
                }
            }
        }
        for (a, b) in edges {
            if orient(verts[a], verts[b], p) > T::zero() {
                tris.push([a, b, pi]);
            } else {
                return Err(Error::Geometry(format!(
                    "cavity edge ({a},{b}) does not see point {pi}"
                )));
            }
        }
    }

    tris.retain(|t| t.iter().all(|&v| v < n));
    tris.sort_unstable();
    let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for t in &tris {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            neighbors[a].insert(b);
            neighbors[b].insert(a);
        }
    }
    Ok(Triangulation {
        triangles: tris,
        neighbors: neighbors.into_iter().map(|s| s.into_iter().collect()).collect(),
    })
}

/// `v_i − mean_{j∈N_i} v_j`.
pub fn laplacian_coords<T: Scalar>(
    points: &[Point<T>],
    neighbors: &[Vec<usize>],
    i: usize,
) -> Result<Point<T>> {
    let nb = neighbors
        .get(i)
        .ok_or_else(|| Error::Invalid(format!("vertex {i} out of range")))?;
    if nb.is_empty() {
        return Err(Error::Invalid(format!("vertex {i} has no neighbors")));
    }
    let k = T::from_usize(nb.len()).unwrap();
    let mut mean = [T::zero(); 2];
    for &j in nb {
        mean[0] += points[j][0];
        mean[1] += points[j][1];
    }
    Ok([points[i][0] - mean[0] / k, points[i][1] - mean[1] / k])
}

/// Rows of the Laplacian operator restricted to `rows`: `Δv_rows = L·v` for `v: [K, 2]`.
pub fn laplacian_rows<T: Scalar>(
    neighbors: &[Vec<usize>],
    rows: &[usize],
) -> Result<Tensor<T>> {
    let k = neighbors.len();
    let mut d = vec![T::zero(); rows.len() * k];
    for (r, &i) in rows.iter().enumerate() {
        let nb = neighbors
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("vertex {i} out of range")))?;
        if nb.is_empty() {
            return Err(Error::Invalid(format!("vertex {i} has no neighbors")));
        }
        let w = T::one() / T::from_usize(nb.len()).unwrap();
        d[r * k + i] = T::one();
        for &j in nb {
            d[r * k + j] -= w;
        }
    }
    Tensor::matrix(rows.len(), k, d)
}

/// Mean over the selected landmarks of `‖Δv_o^i − Δv_p^i‖₂`, with neighbors from `tri`.
pub fn laplacian_loss<T: Scalar>(
    v_o: &LandmarkSet<T>,
    v_p: &LandmarkSet<T>,
    tri: &Triangulation,
) -> Result<T> {
    if v_o.len() != v_p.len() || v_o.selected() != v_p.selected() {
        return Err(Error::Invalid("landmark sets do not correspond".into()));
    }
    if tri.neighbors().len() != v_o.len() {
        return Err(Error::Invalid("triangulation built for a different set".into()));
    }
    if v_o.selected().is_empty() {
        return Err(Error::Invalid("no selected landmarks".into()));
    }
    let mut total = T::zero();
    for &i in v_o.selected() {
        let a = laplacian_coords(v_o.points(), tri.neighbors(), i)?;
        let b = laplacian_coords(v_p.points(), tri.neighbors(), i)?;
        total += (a[0] - b[0]).hypot(a[1] - b[1]);
    }
    Ok(total / T::from_usize(v_o.selected().len()).unwrap())
}

/// Fixed per-sample data for the tape version of the smoothness loss.
#[derive(Clone, Debug)]
pub struct SmoothnessFixture<T> {
    /// `L` restricted to the selected rows, `[|K|, K]`.
    pub operator: Tensor<T>,
    /// `Δv_o` on the selected rows, `[|K|, 2]`.
    pub target: Tensor<T>,
}

impl<T: Scalar> SmoothnessFixture<T> {
    pub fn new(v_o: &[Point<T>], tri: &Triangulation, selected: &[usize]) -> Result<Self> {
        if tri.neighbors().len() != v_o.len() {
            return Err(Error::Invalid("triangulation built for a different set".into()));
        }
        let operator = laplacian_rows(tri.neighbors(), selected)?;
        let flat: Vec<T> = v_o.iter().flat_map(|p| [p[0], p[1]]).collect();
        let v = Tensor::matrix(v_o.len(), 2, flat)?;
        let (r, k) = operator.dims2();
        let target = Tensor::matrix(
            r,
            2,
            crate::tensor::matmul(operator.data(), v.data(), r, k, 2),
        )?;
        Ok(Self { operator, target })
    }
}

/// Batch smoothness loss on the tape. `v_p` is `[B, 2K]` (x, y interleaved); one
/// fixture per batch row. Returns the mean over rows of the per-sample loss.
pub fn laplacian_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    v_p: Var,
    fixtures: &[SmoothnessFixture<T>],
) -> Result<Var> {
    let (rows, cols) = g.value(v_p).dims2();
    if rows != fixtures.len() || rows == 0 {
        return Err(Error::shape(
            "laplacian_loss",
            format!("{rows} rows for {} fixtures", fixtures.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (b, fx) in fixtures.iter().enumerate() {
        let row = g.slice_rows(v_p, b, b + 1)?;
        let pts = g.reshape(row, vec![cols / 2, 2])?;
        let op = g.constant(fx.operator.clone());
        let dp = g.matmul(op, pts)?;
        let dt = g.constant(fx.target.clone());
        let diff = g.sub(dt, dp)?;
        let norms = g.row_norms(diff)?;
        let m = g.mean(norms)?;
        total = Some(match total {
            None => m,
            Some(acc) => g.add(acc, m)?,
        });
    }
    g.scale(total.unwrap(), T::one() / T::from_usize(rows).unwrap())
}

/// Frozen image → landmark regressor. The network emits coordinates in units of
/// the image size; `scale` converts to pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkRegressor<T> {
    pub net: Mlp<T>,
    pub scale: T,
    pub selected: Vec<usize>,
}

impl<T: Scalar> LandmarkRegressor<T> {
    pub fn num_landmarks(&self) -> usize {
        self.net.output_dim() / 2
    }

    /// Pixel coordinates `[B, 2K]` recorded on the tape with frozen weights.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let b = self.net.params().bind_frozen(g);
        let y = self.net.forward(g, &b, x)?;
        g.scale(y, self.scale)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.net.infer(x)?.map(|v| v * self.scale))
    }
}

/// Landmarks of a single image (`[1, D]` or `[D]`), clamped into the image rectangle.
pub fn regress_landmarks<T: Scalar>(
    x: &Tensor<T>,
    reg: &LandmarkRegressor<T>,
    width: T,
    height: T,
) -> Result<LandmarkSet<T>> {
    let row = if x.shape().len() == 1 {
        x.clone().reshaped(vec![1, x.len()])?
    } else {
        x.clone()
    };
    if row.dims2().0 != 1 {
        return Err(Error::shape("regress_landmarks", "expected a single image"));
    }
    let y = reg.predict(&row)?;
    let pts = y
        .data()
        .chunks(2)
        .map(|c| [c[0].max(T::zero()).min(width), c[1].max(T::zero()).min(height)])
        .collect();
    LandmarkSet::new(pts, reg.selected.clone(), width, height)
}
