//! Fitting and gating of the frozen models: identity encoders, the expression
//! encoder and its direction, the landmark regressor, the perceptual net and the
//! pretrained score network.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::checkpoint::CheckpointFile;
use crate::diffusion::{
    forward_noise, standard_normal, NoisePredictor, Parameterization, ScoreNetwork,
    VarianceSchedule,
};
use crate::error::{Error, Result};
use crate::eval::{cosine, roc_auc};
use crate::faces::{expression_landmarks, stream_rng, FaceDataset, FaceGenerator};
use crate::faces::{IMAGE_DIM, IMAGE_SIZE, NUM_LANDMARKS};
use crate::graph::{GradientMap, Graph, Var};
use crate::landmarks::LandmarkRegressor;
use crate::nn::{Adam, Layer, Mlp, ParamStore};
use crate::objectives::{
    EmotionDirection, Encoder, EncoderRole, EncoderSet, ExpressionEncoder, PerceptualNet,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PrepConfig {
    pub dataset_seed: u64,
    pub n_identities: usize,
    pub train_per_id: usize,
    pub holdout_per_id: usize,
    pub embed_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub blackbox: usize,
    pub encoder_steps: usize,
    pub vis_steps: usize,
    pub regressor_steps: usize,
    pub score_hidden: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub t_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            dataset_seed: 0,
            n_identities: 20,
            train_per_id: 30,
            holdout_per_id: 10,
            embed_dim: 16,
            encoder_widths: vec![48, 64, 80, 96],
            blackbox: 3,
            encoder_steps: 600,
            vis_steps: 600,
            regressor_steps: 1500,
            score_hidden: 32,
            pretrain_steps: 2000,
            pretrain_batch: 8,
            t_total: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl PrepConfig {
    pub fn hash(&self) -> String {
        hex_digest(format!("{self:?}").as_bytes())
    }

    pub fn schedule(&self) -> Result<VarianceSchedule<f64>> {
        VarianceSchedule::linear(self.t_total, self.beta_start, self.beta_end)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Measured accuracy of each frozen model on held-out faces.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateReport {
    pub encoder_auc: Vec<f64>,
    pub vis_r2: f64,
    pub regressor_px: f64,
}

pub const MIN_AUC: f64 = 0.9;
pub const MIN_R2: f64 = 0.8;
pub const MAX_LANDMARK_PX: f64 = 1.5;

impl GateReport {
    pub fn check(&self, cfg: &PrepConfig) -> Result<()> {
        for (i, &a) in self.encoder_auc.iter().enumerate() {
            if !(a >= MIN_AUC) {
                return Err(Error::Gate {
                    model: encoder_name(i, cfg.blackbox),
                    detail: format!("verification AUC {a:.4} < {MIN_AUC}"),
                });
            }
        }
        if !(self.vis_r2 >= MIN_R2) {
            return Err(Error::Gate {
                model: "expression".into(),
                detail: format!("R^2 {:.4} < {MIN_R2}", self.vis_r2),
            });
        }
        if !(self.regressor_px <= MAX_LANDMARK_PX) {
            return Err(Error::Gate {
                model: "landmarks".into(),
                detail: format!("mean error {:.3}px > {MAX_LANDMARK_PX}px", self.regressor_px),
            });
        }
        Ok(())
    }
}

fn encoder_name(i: usize, blackbox: usize) -> String {
    if i == blackbox {
        format!("blackbox{i}")
    } else {
        format!("surrogate{i}")
    }
}

/// Everything held fixed while the score network is fine-tuned.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenModels {
    pub encoders: EncoderSet<f64>,
    pub vis: ExpressionEncoder<f64>,
    pub direction: EmotionDirection<f64>,
    pub regressor: LandmarkRegressor<f64>,
    pub perceptual: PerceptualNet<f64>,
    pub score: ScoreNetwork<f64>,
    pub schedule: VarianceSchedule<f64>,
    pub gates: GateReport,
}

/// `n` unit vectors in `ℝ^d` pushed apart so their pairwise cosines are small.
pub fn spread_codes<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let unit = |v: &mut Vec<f64>| {
        let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= s);
    };
    let mut c: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            unit(&mut v);
            v
        })
        .collect();
    for _ in 0..300 {
        let prev = c.clone();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let k = cosine(&prev[i], &prev[j]).max(0.0);
                for (a, b) in c[i].iter_mut().zip(&prev[j]) {
                    *a -= 0.1 * k * k * b;
                }
            }
            unit(&mut c[i]);
        }
    }
    c
}

fn pick<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

fn rows(t: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let (_, c) = t.dims2();
    let mut d = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        d.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), c, d).expect("row gather")
}

fn mse(g: &mut Graph<f64>, y: Var, target: Tensor<f64>) -> Result<Var> {
    let t = g.constant(target);
    let d = g.sub(y, t)?;
    let s = g.square(d)?;
    g.mean(s)
}

/// Minibatch Adam on mean squared error.
pub fn fit_mlp<R: Rng + ?Sized>(
    net: &mut Mlp<f64>,
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    steps: usize,
    batch: usize,
    lr: f64,
    rng: &mut R,
) -> Result<()> {
    let mut opt = Adam::new(lr);
    let n = x.dims2().0;
    for _ in 0..steps {
        let idx = pick(n, batch, rng);
        let mut g = Graph::new();
        let b = net.params().bind(&mut g)?;
        let xv = g.constant(rows(x, &idx));
        let out = net.forward(&mut g, &b, xv)?;
        let loss = mse(&mut g, out, rows(y, &idx))?;
        let grads = g.backward(loss)?.layer_map();
        opt.step(net.params_mut(), &grads)?;
    }
    Ok(())
}

fn subset(map: &GradientMap<f64>, store: &ParamStore<f64>) -> GradientMap<f64> {
    GradientMap::from_layers(
        store
            .layers()
            .iter()
            .map(|l| (l.id.clone(), map.get(&l.id).expect("bound layer").to_vec()))
            .collect(),
    )
}

fn r_squared(pred: &[f64], truth: &[f64]) -> f64 {
    let m = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    let ss_tot: f64 = truth.iter().map(|t| (t - m).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// Genuine and impostor cosines over `pairs` random pairs each.
pub fn verification_scores<R: Rng + ?Sized>(
    emb: &Tensor<f64>,
    labels: &[usize],
    pairs: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let n = labels.len();
    let (mut gen, mut imp) = (Vec::new(), Vec::new());
    while gen.len() < pairs || imp.len() < pairs {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if i == j {
            continue;
        }
        let s = cosine(emb.row(i), emb.row(j));
        if labels[i] == labels[j] {
            if gen.len() < pairs {
                gen.push(s);
            }
        } else if imp.len() < pairs {
            imp.push(s);
        }
    }
    (gen, imp)
}

fn landmark_targets(ds: &FaceDataset) -> Tensor<f64> {
    let s = IMAGE_SIZE as f64;
    let mut d = Vec::with_capacity(ds.len() * 2 * NUM_LANDMARKS);
    for f in &ds.samples {
        for p in &f.landmarks {
            d.push(p[0] / s);
            d.push(p[1] / s);
        }
    }
    Tensor::matrix(ds.len(), 2 * NUM_LANDMARKS, d).expect("landmark width")
}

/// Mean Euclidean landmark error in pixels.
pub fn landmark_error_px(reg: &LandmarkRegressor<f64>, ds: &FaceDataset) -> Result<f64> {
    let pred = reg.predict(&ds.all_images())?;
    let mut total = 0.0;
    for (i, f) in ds.samples.iter().enumerate() {
        let r = pred.row(i);
        for (k, p) in f.landmarks.iter().enumerate() {
            total += (r[2 * k] - p[0]).hypot(r[2 * k + 1] - p[1]);
        }
    }
    Ok(total / (ds.len() * NUM_LANDMARKS) as f64)
}

/// Pretrains the score network on `data` with single-level estimates of the
/// score-matching sum (one uniformly drawn level per step).
pub fn pretrain_score<R: Rng + ?Sized>(
    net: &mut ScoreNetwork<f64>,
    data: &Tensor<f64>,
    sched: &VarianceSchedule<f64>,
    steps: usize,
    batch: usize,
    lr: f64,
    rng: &mut R,
) -> Result<()> {
    let mut opt = Adam::new(lr);
    let n = data.dims2().0;
    for _ in 0..steps {
        let idx = pick(n, batch, rng);
        let x0 = rows(data, &idx);
        let t = rng.gen_range(1..=sched.t_total());
        let eps = standard_normal(rng, &[batch, data.dims2().1]);
        let xt = forward_noise(&x0, t, &eps, sched)?;
        let mut g = Graph::new();
        let bound = net.bind(&mut g)?;
        let xv = g.constant(xt);
        let pred = bound.predict(&mut g, xv, t)?;
        let ev = g.constant(eps);
        let d = g.sub(ev, pred)?;
        let norms = g.row_norms(d)?;
        let loss = g.mean(norms)?;
        let grads = g.backward(loss)?.layer_map();
        opt.step(net.params_mut(), &grads)?;
    }
    Ok(())
}

/// Trains every frozen model from the generator behind `cfg.dataset_seed` and
/// checks the accuracy gates.
pub fn train_frozen_models(cfg: &PrepConfig) -> Result<FrozenModels> {
    if cfg.blackbox >= cfg.encoder_widths.len() || cfg.encoder_widths.len() < 2 {
        return Err(Error::Invalid(
            "need at least two encoders and a valid black-box index".into(),
        ));
    }
    let gen = FaceGenerator::new(cfg.n_identities, cfg.dataset_seed)?;
    let train = gen.batch(cfg.train_per_id, 2);
    let hold = gen.batch(cfg.holdout_per_id, 3);
    let x = train.all_images();
    let xh = hold.all_images();
    let labels = train.labels();
    let hlabels = hold.labels();
    let mut gates = GateReport::default();

    let mut encoders = Vec::new();
    for (i, &w) in cfg.encoder_widths.iter().enumerate() {
        let mut rng = stream_rng(cfg.dataset_seed, 100 + i as u64);
        let codes = spread_codes(cfg.n_identities, cfg.embed_dim, &mut rng);
        let y = Tensor::from_rows(&labels.iter().map(|&l| codes[l].clone()).collect::<Vec<_>>())?;
        let name = encoder_name(i, cfg.blackbox);
        let mut net = Mlp::new(&name, &[IMAGE_DIM, w, cfg.embed_dim], &mut rng)?;
        fit_mlp(&mut net, &x, &y, cfg.encoder_steps, 32, 3e-3, &mut rng)?;
        let emb = net.infer(&xh)?;
        let (gen_s, imp_s) = verification_scores(&emb, &hlabels, 250, &mut rng);
        gates.encoder_auc.push(roc_auc(&gen_s, &imp_s)?);
        encoders.push(Encoder {
            name,
            role: if i == cfg.blackbox {
                EncoderRole::BlackBox
            } else {
                EncoderRole::Surrogate
            },
            net,
        });
    }

    let mut rng = stream_rng(cfg.dataset_seed, 200);
    let mut embed = Mlp::new("vis", &[IMAGE_DIM, 32, 16], &mut rng)?;
    let mut head = Mlp::new("vis_head", &[16, 1], &mut rng)?;
    let e = Tensor::matrix(
        train.len(),
        1,
        train.samples.iter().map(|s| s.expression).collect(),
    )?;
    let (mut oe, mut oh) = (Adam::new(3e-3), Adam::new(3e-3));
    for _ in 0..cfg.vis_steps {
        let idx = pick(train.len(), 32, &mut rng);
        let mut g = Graph::new();
        let be = embed.params().bind(&mut g)?;
        let bh = head.params().bind(&mut g)?;
        let xv = g.constant(rows(&x, &idx));
        let z = embed.forward(&mut g, &be, xv)?;
        let out = head.forward(&mut g, &bh, z)?;
        let loss = mse(&mut g, out, rows(&e, &idx))?;
        let grads = g.backward(loss)?.layer_map();
        let (ge, gh) = (subset(&grads, embed.params()), subset(&grads, head.params()));
        oe.step(embed.params_mut(), &ge)?;
        oh.step(head.params_mut(), &gh)?;
    }
    let vis = ExpressionEncoder { embed, head };
    let pred = vis.intensity(&xh)?;
    let truth: Vec<f64> = hold.samples.iter().map(|s| s.expression).collect();
    gates.vis_r2 = r_squared(pred.data(), &truth);

    let mut prng = stream_rng(cfg.dataset_seed, 4);
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for id in 0..cfg.n_identities {
        for _ in 0..4 {
            let nuis = FaceGenerator::sample_nuisance(&mut prng);
            on.push(gen.render(id, 1.0, &nuis).pixels);
            off.push(gen.render(id, 0.0, &nuis).pixels);
        }
    }
    let direction = EmotionDirection::from_pairs(
        &vis.embed_batch(&Tensor::from_rows(&on)?)?,
        &vis.embed_batch(&Tensor::from_rows(&off)?)?,
    )?;

    let mut rng = stream_rng(cfg.dataset_seed, 300);
    let mut rnet = Mlp::new("landmarks", &[IMAGE_DIM, 64, 2 * NUM_LANDMARKS], &mut rng)?;
    fit_mlp(
        &mut rnet,
        &x,
        &landmark_targets(&train),
        cfg.regressor_steps,
        32,
        2e-3,
        &mut rng,
    )?;
    let regressor = LandmarkRegressor {
        net: rnet,
        scale: IMAGE_SIZE as f64,
        selected: expression_landmarks(),
    };
    gates.regressor_px = landmark_error_px(&regressor, &hold)?;

    let mut rng = stream_rng(cfg.dataset_seed, 400);
    let perceptual = PerceptualNet::new(IMAGE_DIM, &mut rng)?;

    let schedule = cfg.schedule()?;
    let mut rng = stream_rng(cfg.dataset_seed, 500);
    let mut score = ScoreNetwork::with_head(
        IMAGE_DIM,
        cfg.score_hidden,
        Parameterization::Data(schedule.clone()),
        &mut rng,
    )?;
    pretrain_score(
        &mut score,
        &x,
        &schedule,
        cfg.pretrain_steps,
        cfg.pretrain_batch,
        2e-3,
        &mut rng,
    )?;

    let models = FrozenModels {
        encoders: EncoderSet::new(encoders)?,
        vis,
        direction,
        regressor,
        perceptual,
        score,
        schedule,
        gates,
    };
    models.gates.check(cfg)?;
    Ok(models)
}

/// Loads the models for `cfg` from `dir` if present, otherwise trains and stores them.
pub fn prepare_cached(cfg: &PrepConfig, dir: &Path) -> Result<FrozenModels> {
    let path = dir.join(format!("prep-{}.ckpt", &cfg.hash()[..16]));
    if path.exists() {
        let file = CheckpointFile::load(&path)?;
        if file.text("prep_hash")? == cfg.hash() {
            return models_from_file(&file, cfg);
        }
    }
    let m = train_frozen_models(cfg)?;
    std::fs::create_dir_all(dir)?;
    let mut file = models_to_file(&m);
    file.put_text("prep_hash", &cfg.hash());
    file.save(&path)?;
    Ok(m)
}

/// Writes a parameter store under `prefix`.
pub fn put_params(file: &mut CheckpointFile, prefix: &str, store: &ParamStore<f64>) {
    let layout: Vec<String> = store
        .layers()
        .iter()
        .map(|l| {
            let names: Vec<&str> = l.tensors.iter().map(|(n, _)| n.as_str()).collect();
            format!("{}:{}", l.id, names.join(","))
        })
        .collect();
    file.put_text(&format!("{prefix}/layout"), &layout.join(";"));
    for l in store.layers() {
        for (n, t) in &l.tensors {
            file.put_array(&format!("{prefix}/{}/{n}", l.id), t.clone());
        }
    }
}

pub fn get_params(file: &CheckpointFile, prefix: &str) -> Result<ParamStore<f64>> {
    let layout = file.text(&format!("{prefix}/layout"))?;
    let mut layers = Vec::new();
    for entry in layout.split(';').filter(|s| !s.is_empty()) {
        let (id, names) = entry
            .split_once(':')
            .ok_or_else(|| Error::Checkpoint(format!("bad layout entry {entry}")))?;
        let mut tensors = Vec::new();
        for n in names.split(',') {
            tensors.push((
                n.to_string(),
                file.array(&format!("{prefix}/{id}/{n}"))?.clone(),
            ));
        }
        layers.push(Layer {
            id: id.to_string(),
            tensors,
        });
    }
    ParamStore::new(layers)
}

fn models_to_file(m: &FrozenModels) -> CheckpointFile {
    let mut f = CheckpointFile::new();
    for (i, e) in m.encoders.all().iter().enumerate() {
        put_params(&mut f, &format!("encoder{i}"), e.net.params());
        f.put_text(&format!("encoder{i}/name"), &e.name);
        f.put_u64(
            &format!("encoder{i}/blackbox"),
            (e.role == EncoderRole::BlackBox) as u64,
        );
    }
    f.put_u64("encoders", m.encoders.all().len() as u64);
    put_params(&mut f, "vis", m.vis.embed.params());
    put_params(&mut f, "vis_head", m.vis.head.params());
    f.put_array(
        "direction",
        Tensor::vector(m.direction.as_slice().to_vec()),
    );
    put_params(&mut f, "regressor", m.regressor.net.params());
    put_params(&mut f, "perceptual", m.perceptual.mlp().params());
    put_params(&mut f, "score", m.score.params());
    f.put_array("schedule/betas", Tensor::vector(m.schedule.betas().to_vec()));
    f.put_array("gates/auc", Tensor::vector(m.gates.encoder_auc.clone()));
    f.put_array(
        "gates/other",
        Tensor::vector(vec![m.gates.vis_r2, m.gates.regressor_px]),
    );
    f
}

fn models_from_file(f: &CheckpointFile, cfg: &PrepConfig) -> Result<FrozenModels> {
    let n = f.u64("encoders")? as usize;
    let mut encoders = Vec::with_capacity(n);
    for i in 0..n {
        encoders.push(Encoder {
            name: f.text(&format!("encoder{i}/name"))?.to_string(),
            role: if f.u64(&format!("encoder{i}/blackbox"))? == 1 {
                EncoderRole::BlackBox
            } else {
                EncoderRole::Surrogate
            },
            net: Mlp::from_params(get_params(f, &format!("encoder{i}"))?)?,
        });
    }
    let schedule = VarianceSchedule::from_betas(f.array("schedule/betas")?.data().to_vec())?;
    let other = f.array("gates/other")?.data();
    Ok(FrozenModels {
        encoders: EncoderSet::new(encoders)?,
        vis: ExpressionEncoder {
            embed: Mlp::from_params(get_params(f, "vis")?)?,
            head: Mlp::from_params(get_params(f, "vis_head")?)?,
        },
        direction: EmotionDirection::new(f.array("direction")?.data())?,
        regressor: LandmarkRegressor {
            net: Mlp::from_params(get_params(f, "regressor")?)?,
            scale: IMAGE_SIZE as f64,
            selected: expression_landmarks(),
        },
        perceptual: PerceptualNet::from_mlp(Mlp::from_params(get_params(f, "perceptual")?)?),
        score: ScoreNetwork::from_params(
            get_params(f, "score")?,
            Parameterization::Data(schedule.clone()),
        )?,
        schedule,
        gates: GateReport {
            encoder_auc: f.array("gates/auc")?.data().to_vec(),
            vis_r2: other[0],
            regressor_px: other[1],
        },
    })
    .and_then(|m| {
        if m.schedule != cfg.schedule()? {
            return Err(Error::Checkpoint("cached schedule differs from config".into()));
        }
        Ok(m)
    })
}

/// Shuffled copy of `0..n` drawn from `rng`.
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}
