//! Small random instances of every differentiable loss, each returning the
//! worst relative error between tape and central-difference gradients.

use emoshield::diffusion::{reverse_chain, score_matching_loss, NoiseDraws};
use emoshield::graph::Graph;
use emoshield::landmarks::laplacian_loss_var;
use emoshield::objectives::{
    angular_from_embeddings, angular_loss_to, combined_loss_var, emotion_loss, l1_loss,
    lpips_proxy_loss, LossWeights,
};
use emoshield::tensor::normalize;
use rand::Rng;

use super::{fixture, gradcheck, param_gradcheck, rng, tiny_data, tiny_models, uniform, TINY_DIM};

const H: f64 = 1e-5;

pub fn angular(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, d, m) = (r.gen_range(1..4), r.gen_range(2..7), r.gen_range(1..4));
    let mut g = Graph::new();
    let mut names = Vec::new();
    let mut embs = Vec::new();
    let mut targets = Vec::new();
    for i in 0..m {
        let name = format!("z{i}");
        embs.push(g.input(&name, uniform(&mut r, &[b, d], -1.0, 1.0)));
        names.push(name);
        let t: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        targets.push(normalize(&t).unwrap());
    }
    let loss = angular_from_embeddings(&mut g, &embs, &targets).unwrap();
    names
        .iter()
        .zip(&embs)
        .map(|(n, &z)| gradcheck(&g, loss, n, z, H))
        .fold(0.0, f64::max)
}

pub fn angular_through_encoders(seed: u64) -> f64 {
    let models = tiny_models(seed);
    let mut r = rng(seed);
    let sur = models.encoders.surrogates();
    let target = uniform(&mut r, &[1, TINY_DIM], 0.0, 1.0);
    let targets = sur.target_directions(&target).unwrap();
    let mut g = Graph::new();
    let x = g.input("x", uniform(&mut r, &[2, TINY_DIM], 0.0, 1.0));
    let loss = angular_loss_to(&mut g, x, &targets, &sur).unwrap();
    gradcheck(&g, loss, "x", x, H)
}

pub fn emotion(seed: u64) -> f64 {
    let models = tiny_models(seed);
    let mut r = rng(seed);
    let b = r.gen_range(1..4);
    let x_o = uniform(&mut r, &[b, TINY_DIM], 0.0, 1.0);
    let mut g = Graph::new();
    let x = g.input("x", uniform(&mut r, &[b, TINY_DIM], 0.0, 1.0));
    let term = emotion_loss(&mut g, x, &x_o, &models.vis, &models.direction).unwrap();
    gradcheck(&g, term.loss, "x", x, H)
}

pub fn laplacian(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = r.gen_range(1..4);
    let fixtures: Vec<_> = (0..b).map(|_| fixture(&mut r, &[0, 2, 5])).collect();
    let mut g = Graph::new();
    let v = g.input("v", uniform(&mut r, &[b, 2 * super::TINY_LANDMARKS], 0.0, 1.0));
    let loss = laplacian_loss_var(&mut g, v, &fixtures).unwrap();
    gradcheck(&g, loss, "v", v, H)
}

pub fn score_matching(seed: u64) -> f64 {
    let models = tiny_models(seed);
    let mut r = rng(seed);
    let b = r.gen_range(1..4);
    let tau = r.gen_range(1..5);
    let batch = uniform(&mut r, &[b, TINY_DIM], 0.0, 1.0);
    let noise = NoiseDraws::sample(&mut r, tau, b, TINY_DIM);
    let mut g = Graph::new();
    let net = models.score.bind(&mut g).unwrap();
    let loss = score_matching_loss(&mut g, &batch, &net, &models.schedule, tau, &noise).unwrap();
    param_gradcheck(&g, loss, models.score.params(), 40, H, &mut r)
}

pub fn l1(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = r.gen_range(1..4);
    let mut g = Graph::new();
    let x = g.input("x", uniform(&mut r, &[b, TINY_DIM], 0.0, 1.0));
    let o = g.constant(uniform(&mut r, &[b, TINY_DIM], 0.0, 1.0));
    let loss = l1_loss(&mut g, x, o).unwrap();
    gradcheck(&g, loss, "x", x, H)
}

pub fn lpips(seed: u64) -> f64 {
    let models = tiny_models(seed);
    let mut r = rng(seed);
    let b = r.gen_range(1..4);
    let mut g = Graph::new();
    let x = g.input("x", uniform(&mut r, &[b, TINY_DIM], 0.0, 1.0));
    let o = g.constant(uniform(&mut r, &[b, TINY_DIM], 0.0, 1.0));
    let loss = lpips_proxy_loss(&mut g, x, o, &models.perceptual).unwrap();
    gradcheck(&g, loss, "x", x, H)
}

/// Every term through a short DDIM chain, checked against the score-network parameters.
pub fn combined(seed: u64) -> f64 {
    let models = tiny_models(seed);
    let data = tiny_data(2, seed);
    let mut r = rng(seed);
    let tau = r.gen_range(1..4);
    let sched = &models.schedule;
    let sur = models.encoders.surrogates();
    let targets = sur.target_directions(&data.target).unwrap();
    let mut g = Graph::new();
    let net = models.score.bind(&mut g).unwrap();
    let x_o = g.constant(data.images.clone());
    let noise = g.constant(uniform(&mut r, &[2, TINY_DIM], -1.0, 1.0));
    let x_p = reverse_chain(&mut g, x_o, tau, noise, &net, sched).unwrap();
    let ang = angular_loss_to(&mut g, x_p, &targets, &sur).unwrap();
    let emo = emotion_loss(&mut g, x_p, &data.images, &models.vis, &models.direction)
        .unwrap()
        .loss;
    let lp = lpips_proxy_loss(&mut g, x_p, x_o, &models.perceptual).unwrap();
    let l1v = l1_loss(&mut g, x_p, x_o).unwrap();
    let lm = models.regressor.forward(&mut g, x_p).unwrap();
    let lm = g.scale(lm, 1.0 / data.landmark_unit).unwrap();
    let sm = laplacian_loss_var(&mut g, lm, &data.fixtures).unwrap();
    let draws = NoiseDraws::sample(&mut r, tau, 2, TINY_DIM);
    let sc = score_matching_loss(&mut g, &data.images, &net, sched, tau, &draws).unwrap();
    let total = combined_loss_var(
        &mut g,
        [Some(ang), Some(emo), Some(lp), Some(l1v), Some(sm), Some(sc)],
        &LossWeights::reference_defaults(),
    )
    .unwrap();
    param_gradcheck(&g, total, models.score.params(), 40, H, &mut r)
}

pub const ALL: [(&str, fn(u64) -> f64); 8] = [
    ("angular", angular),
    ("angular through encoders", angular_through_encoders),
    ("emotion", emotion),
    ("laplacian smoothness", laplacian),
    ("score matching", score_matching),
    ("l1", l1),
    ("lpips proxy", lpips),
    ("combined objective", combined),
];
