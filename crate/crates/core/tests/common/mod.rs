#![allow(dead_code)]

pub mod cases;
pub mod checks;

use std::collections::HashMap;

use emoshield::diffusion::{Parameterization, ScoreNetwork, VarianceSchedule};
use emoshield::graph::{Graph, Var};
use emoshield::landmarks::{delaunay, LandmarkRegressor, Point, SmoothnessFixture};
use emoshield::nn::Mlp;
use emoshield::objectives::{
    EmotionDirection, Encoder, EncoderRole, EncoderSet, ExpressionEncoder, PerceptualNet,
};
use emoshield::prep::{FrozenModels, GateReport};
use emoshield::trainer::TrainData;
use emoshield::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TINY_DIM: usize = 16;
pub const TINY_LANDMARKS: usize = 6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn encoder(name: &str, role: EncoderRole, rng: &mut ChaCha8Rng) -> Encoder<f64> {
    Encoder {
        name: name.into(),
        role,
        net: Mlp::new(name, &[TINY_DIM, 12, 8], rng).unwrap(),
    }
}

/// Randomly initialized stand-ins for the frozen models over 16-pixel images.
pub fn tiny_models(seed: u64) -> FrozenModels {
    let mut r = rng(seed);
    let encoders = EncoderSet::new(vec![
        encoder("s0", EncoderRole::Surrogate, &mut r),
        encoder("s1", EncoderRole::Surrogate, &mut r),
        encoder("bb", EncoderRole::BlackBox, &mut r),
    ])
    .unwrap();
    let vis = ExpressionEncoder {
        embed: Mlp::new("vis", &[TINY_DIM, 8, 4], &mut r).unwrap(),
        head: Mlp::new("vis_head", &[4, 1], &mut r).unwrap(),
    };
    let dir: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
    let direction = EmotionDirection::new(&dir).unwrap();
    let regressor = LandmarkRegressor {
        net: Mlp::new("landmarks", &[TINY_DIM, 8, 2 * TINY_LANDMARKS], &mut r).unwrap(),
        scale: 8.0,
        selected: vec![1, 3, 4],
    };
    let perceptual = PerceptualNet::new(TINY_DIM, &mut r).unwrap();
    let schedule = VarianceSchedule::linear(10, 1e-3, 0.05).unwrap();
    let score = ScoreNetwork::with_head(
        TINY_DIM,
        8,
        Parameterization::Data(schedule.clone()),
        &mut r,
    )
    .unwrap();
    FrozenModels {
        encoders,
        vis,
        direction,
        regressor,
        perceptual,
        score,
        schedule,
        gates: GateReport::default(),
    }
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point<f64>> {
    (0..n)
        .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
        .collect()
}

pub fn fixture(rng: &mut ChaCha8Rng, selected: &[usize]) -> SmoothnessFixture<f64> {
    loop {
        let pts = random_points(rng, TINY_LANDMARKS);
        if let Ok(tri) = delaunay(&pts) {
            return SmoothnessFixture::new(&pts, &tri, selected).unwrap();
        }
    }
}

pub fn tiny_data(n: usize, seed: u64) -> TrainData {
    let mut r = rng(seed.wrapping_add(1000));
    let images = uniform(&mut r, &[n, TINY_DIM], 0.0, 1.0);
    let fixtures = (0..n).map(|_| fixture(&mut r, &[1, 3, 4])).collect();
    let target = uniform(&mut r, &[1, TINY_DIM], 0.0, 1.0);
    TrainData {
        images,
        fixtures,
        landmark_unit: 8.0,
        target,
    }
}

/// Largest relative error between the tape gradient of `out` with respect to the
/// named input `x` and central differences of step `h`.
pub fn gradcheck(g: &Graph<f64>, out: Var, name: &str, x: Var, h: f64) -> f64 {
    let analytic = g.backward(out).unwrap().wrt(x);
    let base = g.value(x).clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let eval = |delta: f64| {
            let mut t = base.clone();
            t.data_mut()[i] += delta;
            let mut ov = HashMap::new();
            ov.insert(name.to_string(), t);
            g.evaluate(out, &ov).unwrap().item()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max(rel_err(a, numeric));
    }
    worst
}

/// Like [`gradcheck`] but over `picks` randomly chosen entries of a bound parameter store.
pub fn param_gradcheck(
    g: &Graph<f64>,
    out: Var,
    params: &emoshield::nn::ParamStore<f64>,
    picks: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let grads = g.backward(out).unwrap().layer_map();
    let mut worst: f64 = 0.0;
    for _ in 0..picks {
        let li = rng.gen_range(0..params.layers().len());
        let layer = &params.layers()[li];
        let ti = rng.gen_range(0..layer.tensors.len());
        let (name, t) = &layer.tensors[ti];
        let k = rng.gen_range(0..t.len());
        let offset: usize = layer.tensors[..ti].iter().map(|(_, t)| t.len()).sum();
        let a = grads.get(&layer.id).unwrap()[offset + k];
        let key = format!("{}/{}", layer.id, name);
        let eval = |delta: f64| {
            let mut p = t.clone();
            p.data_mut()[k] += delta;
            let mut ov = HashMap::new();
            ov.insert(key.clone(), p);
            g.evaluate(out, &ov).unwrap().item()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        worst = worst.max(rel_err(a, numeric));
    }
    worst
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
