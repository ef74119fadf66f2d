//! Independent oracles shared by the oracle suite and the acceptance runner.

use std::collections::BTreeSet;

use emoshield::diffusion::{
    denoise_from, reverse_chain, standard_normal, FixedNoise, NoisePredictor, VarianceSchedule,
};
use emoshield::graph::{Graph, Var};
use emoshield::landmarks::{delaunay, Point};
use emoshield::{Result, Tensor};
use rand::Rng;

use super::{random_points, rng};

fn circumcircle(a: Point<f64>, b: Point<f64>, c: Point<f64>) -> Option<([f64; 2], f64)> {
    let d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]));
    if d.abs() < 1e-12 {
        return None;
    }
    let sq = |p: Point<f64>| p[0] * p[0] + p[1] * p[1];
    let ux = (sq(a) * (b[1] - c[1]) + sq(b) * (c[1] - a[1]) + sq(c) * (a[1] - b[1])) / d;
    let uy = (sq(a) * (c[0] - b[0]) + sq(b) * (a[0] - c[0]) + sq(c) * (b[0] - a[0])) / d;
    let r2 = (a[0] - ux).powi(2) + (a[1] - uy).powi(2);
    Some(([ux, uy], r2))
}

fn strictly_inside(p: Point<f64>, centre: [f64; 2], r2: f64) -> bool {
    let d2 = (p[0] - centre[0]).powi(2) + (p[1] - centre[1]).powi(2);
    d2 < r2 * (1.0 - 1e-9)
}

/// Triangles whose circumcircle strictly contains another input point, plus
/// triangles that brute-force enumeration finds but the triangulation misses.
pub fn delaunay_violations(seed: u64) -> usize {
    let mut r = rng(seed);
    let n = r.gen_range(3..=20);
    let pts = random_points(&mut r, n);
    let tri = delaunay(&pts).expect("random points are in general position");
    let mut bad = 0;
    let mut got = BTreeSet::new();
    for t in tri.triangles() {
        let Some((c, r2)) = circumcircle(pts[t[0]], pts[t[1]], pts[t[2]]) else {
            bad += 1;
            continue;
        };
        bad += (0..n)
            .filter(|i| !t.contains(i) && strictly_inside(pts[*i], c, r2))
            .count();
        let mut s = *t;
        s.sort_unstable();
        got.insert(s);
    }
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let Some((c, r2)) = circumcircle(pts[i], pts[j], pts[k]) else {
                    continue;
                };
                let empty = (0..n)
                    .filter(|&m| m != i && m != j && m != k)
                    .all(|m| !strictly_inside(pts[m], c, r2));
                if empty && !got.contains(&[i, j, k]) {
                    bad += 1;
                }
            }
        }
    }
    bad
}

/// `‖reverse_chain(x) − x‖∞` for a network that predicts the forward-noise draw exactly.
pub fn perfect_inversion_error(seed: u64) -> f64 {
    let sched = VarianceSchedule::linear(50, 1e-4, 0.02).unwrap();
    let mut r = rng(seed);
    let dim = r.gen_range(1..12);
    let tau = r.gen_range(1..=50);
    let x: Tensor<f64> = standard_normal(&mut r, &[2, dim]);
    let noise: Tensor<f64> = standard_normal(&mut r, &[2, dim]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let nv = g.constant(noise.clone());
    let out = reverse_chain(&mut g, xv, tau, nv, &FixedNoise { noise }, &sched).unwrap();
    g.value(out).max_abs_diff(&x)
}

/// Exact posterior-mean noise predictor for data drawn from `N(μ, diag σ²)`.
pub struct GaussianOracle {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub sched: VarianceSchedule<f64>,
}

impl NoisePredictor<f64> for GaussianOracle {
    fn predict(&self, g: &mut Graph<f64>, x: Var, t: usize) -> Result<Var> {
        let ab = self.sched.alpha_bar(t)?;
        let (rows, cols) = g.value(x).dims2();
        let xv = g.value(x).clone();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for (j, &v) in xv.row(i).iter().enumerate() {
                let s = ab * self.var[j] + 1.0 - ab;
                out.push((1.0 - ab).sqrt() * (v - ab.sqrt() * self.mean[j]) / s);
            }
        }
        Ok(g.constant(Tensor::matrix(rows, cols, out)?))
    }
}

/// Largest relative errors of the sample mean and variance after DDIM sampling
/// from the exact terminal marginal of a Gaussian toy.
pub fn gaussian_toy(seed: u64, samples: usize) -> (f64, f64) {
    let sched = VarianceSchedule::linear(200, 1e-4, 0.02).unwrap();
    let mean = vec![3.0, -2.0, 1.5];
    let var = vec![0.25, 0.64, 1.0];
    let t = sched.t_total();
    let ab: f64 = sched.alpha_bar(t).unwrap();
    let mut r = rng(seed);
    let z: Tensor<f64> = standard_normal(&mut r, &[samples, mean.len()]);
    let mut init = Vec::with_capacity(z.len());
    for i in 0..samples {
        for (j, &v) in z.row(i).iter().enumerate() {
            let sd = (ab * var[j] + 1.0 - ab).sqrt();
            init.push(ab.sqrt() * mean[j] + sd * v);
        }
    }
    let oracle = GaussianOracle {
        mean: mean.clone(),
        var: var.clone(),
        sched: sched.clone(),
    };
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(samples, mean.len(), init).unwrap());
    let out = denoise_from(&mut g, x, t, &oracle, &sched).unwrap();
    let y = g.value(out);
    let (mut worst_m, mut worst_v) = (0.0f64, 0.0f64);
    for j in 0..mean.len() {
        let col: Vec<f64> = (0..samples).map(|i| y.row(i)[j]).collect();
        let m = col.iter().sum::<f64>() / samples as f64;
        let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (samples - 1) as f64;
        worst_m = worst_m.max((m - mean[j]).abs() / mean[j].abs());
        worst_v = worst_v.max((v - var[j]).abs() / var[j]);
    }
    (worst_m, worst_v)
}
