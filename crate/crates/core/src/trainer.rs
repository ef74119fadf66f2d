//! Fine-tuning loop: alternating score-matching steps and adversarial steps whose
//! identity and expression gradients go through per-layer surgery, SGD with an
//! inverse-square-root or constant learning rate, per-epoch checkpoints and a
//! per-step metrics log.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::CheckpointFile;
use crate::diffusion::{
    reverse_chain, score_matching_loss, standard_normal, NoiseDraws, Parameterization,
    ScoreNetwork, VarianceSchedule,
};
use crate::error::{Error, Result};
use crate::faces::stream_rng;
use crate::graph::{GradientMap, Graph, Var};
use crate::landmarks::{laplacian_loss_var, SmoothnessFixture};
use crate::nn::ParamStore;
use crate::objectives::{
    angular_loss_to, combined_loss_var, emotion_loss, l1_loss, lpips_proxy_loss, LossTerms,
    LossWeights, SurrogateSet,
};
use crate::prep::{get_params, hex_digest, put_params, FrozenModels};
use crate::surgery::{surgery_step, EmaTracker, GradientLedger, ProjectionMode};
use crate::tensor::Tensor;

/// `w ← w − η·g` per layer.
pub fn sgd_step(params: &mut ParamStore<f64>, grads: &GradientMap<f64>, eta: f64) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient passed to sgd_step".into()));
    }
    params.add_scaled(-eta, grads)
}

/// `η_t = η_0/√t` for `t ≥ 1`.
pub fn lr_schedule(t: u64, eta0: f64) -> Result<f64> {
    if t == 0 {
        return Err(Error::Invalid("learning-rate schedule starts at t = 1".into()));
    }
    Ok(eta0 / (t as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    InvSqrt,
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub eta0: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Every `period`-th step is a pure score-matching step.
    pub period: usize,
    pub tau: usize,
    pub lambda: f64,
    pub weights: LossWeights<f64>,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub projection: ProjectionMode,
    /// One noise draw per training image for the whole run instead of one per step.
    pub fixed_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta0: 4e-6,
            epochs: 10,
            batch: 4,
            period: 2,
            tau: 25,
            lambda: 0.95,
            weights: LossWeights::reference_defaults(),
            seed: 0,
            schedule: LrSchedule::InvSqrt,
            projection: ProjectionMode::Ema,
            fixed_noise: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::Invalid(format!("eta0 {} must be > 0", self.eta0)));
        }
        if self.batch == 0 || self.period == 0 || self.epochs == 0 {
            return Err(Error::Invalid("batch, period and epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::Invalid(format!("lambda {} outside [0,1)", self.lambda)));
        }
        self.weights.validate()
    }
}

/// Images to fine-tune on, their smoothness fixtures, and the target reference.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub images: Tensor<f64>,
    /// Built from landmarks expressed in units of `landmark_unit` pixels.
    pub fixtures: Vec<SmoothnessFixture<f64>>,
    pub landmark_unit: f64,
    pub target: Tensor<f64>,
}

impl TrainData {
    pub fn len(&self) -> usize {
        self.images.dims2().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&self.landmark_unit.to_le_bytes());
        for t in [&self.images, &self.target] {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for f in &self.fixtures {
            for v in f.operator.data().iter().chain(f.target.data()) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        hex_digest(&bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Adversarial,
    Score,
}

/// One row of the metrics log. Loss terms are unweighted; terms not computed
/// at a step are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub kind: StepKind,
    pub lr: f64,
    pub terms: LossTerms<f64>,
    pub conflict_rate: f64,
    pub conflict_rate_a: f64,
    pub conflict_rate_e: f64,
    /// Fraction of the two streams flagged as conflicting, per layer.
    pub layer_conflict: Vec<f64>,
    pub grad_norm_a: f64,
    pub grad_norm_e: f64,
    pub grad_norm_update: f64,
    pub skipped_emotion: usize,
}

/// Append-only per-step log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub layers: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::Invalid(format!(
                    "metrics step {} after {}",
                    row.step, last.step
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, other: MetricsLog) -> Result<()> {
        for r in other.rows {
            self.push(r)?;
        }
        Ok(())
    }

    pub fn skipped_emotion(&self) -> usize {
        self.rows.iter().map(|r| r.skipped_emotion).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "step,kind,lr,angular,emotion,lpips,l1,smooth,score,conflict_rate,conflict_rate_a,\
             conflict_rate_e,grad_norm_a,grad_norm_e,grad_norm_update,skipped_emotion",
        );
        for l in &self.layers {
            let _ = write!(s, ",conflict[{l}]");
        }
        s.push('\n');
        for r in &self.rows {
            let kind = match r.kind {
                StepKind::Adversarial => "adv",
                StepKind::Score => "score",
            };
            let t = r.terms;
            let _ = write!(
                s,
                "{},{kind},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.lr,
                t.angular,
                t.emotion,
                t.lpips,
                t.l1,
                t.smooth,
                t.score,
                r.conflict_rate,
                r.conflict_rate_a,
                r.conflict_rate_e,
                r.grad_norm_a,
                r.grad_norm_e,
                r.grad_norm_update,
                r.skipped_emotion
            );
            for v in &r.layer_conflict {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Score-network parameters, ledger and step counter, tagged with the config hash.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub score: ScoreNetwork<f64>,
    pub ledger: GradientLedger<f64>,
    pub step: u64,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn to_file(&self) -> CheckpointFile {
        let mut f = CheckpointFile::new();
        put_params(&mut f, "score", self.score.params());
        if let Parameterization::Data(s) = self.score.head() {
            f.put_array("schedule/betas", Tensor::vector(s.betas().to_vec()));
        }
        for (tag, tr) in [("a", &self.ledger.a), ("e", &self.ledger.e)] {
            for (id, v) in tr.moments().iter() {
                f.put_array(&format!("ledger/{tag}/{id}"), Tensor::vector(v.to_vec()));
            }
            f.put_u64(&format!("ledger/{tag}/steps"), tr.steps());
            f.put_array(&format!("ledger/{tag}/lambda"), Tensor::scalar(tr.lambda()));
        }
        f.put_u64("ledger/step", self.ledger.step());
        f.put_u64("step", self.step);
        f.put_text("config_hash", &self.config_hash);
        f
    }

    pub fn from_file(f: &CheckpointFile) -> Result<Self> {
        let params = get_params(f, "score")?;
        let head = match f.array("schedule/betas") {
            Ok(b) => Parameterization::Data(VarianceSchedule::from_betas(b.data().to_vec())?),
            Err(_) => Parameterization::Noise,
        };
        let score = ScoreNetwork::from_params(params, head)?;
        let ids = score.layer_ids();
        let tracker = |tag: &str| -> Result<EmaTracker<f64>> {
            let layers = ids
                .iter()
                .map(|id| {
                    Ok((
                        id.clone(),
                        f.array(&format!("ledger/{tag}/{id}"))?.data().to_vec(),
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            EmaTracker::from_parts(
                f.array(&format!("ledger/{tag}/lambda"))?.item(),
                GradientMap::from_layers(layers),
                f.u64(&format!("ledger/{tag}/steps"))?,
            )
        };
        Ok(Self {
            ledger: GradientLedger::from_parts(tracker("a")?, tracker("e")?, f.u64("ledger/step")?),
            score,
            step: f.u64("step")?,
            config_hash: f.text("config_hash")?.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&CheckpointFile::load(path)?)
    }
}

/// A configured fine-tuning run over fixed data and frozen models.
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a TrainData,
    models: &'a FrozenModels,
    surrogates: SurrogateSet<f64>,
    targets: Vec<Vec<f64>>,
    fixed_noise: Option<Tensor<f64>>,
    hash: String,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, data: &'a TrainData, models: &'a FrozenModels) -> Result<Self> {
        cfg.validate()?;
        if !(data.landmark_unit > 0.0) {
            return Err(Error::Invalid("landmark unit must be > 0".into()));
        }
        if data.is_empty() || data.fixtures.len() != data.len() {
            return Err(Error::Invalid("training data needs one fixture per image".into()));
        }
        if cfg.tau > models.schedule.t_total() {
            return Err(Error::Invalid(format!(
                "tau {} exceeds schedule length {}",
                cfg.tau,
                models.schedule.t_total()
            )));
        }
        let surrogates = models.encoders.surrogates();
        let targets = surrogates.target_directions(&data.target)?;
        let fixed_noise = cfg.fixed_noise.then(|| {
            let mut rng = stream_rng(cfg.seed, 1 << 41);
            standard_normal(&mut rng, &[data.len(), data.images.dims2().1])
        });
        let hash = hex_digest(
            format!(
                "{cfg:?}|{}|{}",
                data.fingerprint(),
                hex_digest(&crate::checkpoint::CheckpointFile::to_bytes(&{
                    let mut f = CheckpointFile::new();
                    put_params(&mut f, "score", models.score.params());
                    f
                }))
            )
            .as_bytes(),
        );
        Ok(Self {
            cfg,
            data,
            models,
            surrogates,
            targets,
            fixed_noise,
            hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.cfg.batch) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.epochs as u64
    }

    pub fn initial(&self) -> Result<Checkpoint> {
        let template = self.models.score.params().flat();
        Ok(Checkpoint {
            score: self.models.score.clone(),
            ledger: GradientLedger::new(self.cfg.lambda, &GradientMap::zeros_like(&template))?,
            step: 0,
            config_hash: self.hash.clone(),
        })
    }

    fn batch_indices(&self, t: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = (t - 1) / spe;
        let pos = ((t - 1) % spe) as usize;
        let mut rng = stream_rng(self.cfg.seed, (1 << 40) | epoch);
        let perm = crate::prep::permutation(self.data.len(), &mut rng);
        let b = self.cfg.batch;
        perm[pos * b..((pos + 1) * b).min(perm.len())].to_vec()
    }

    fn gather(&self, t: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
        let (_, c) = t.dims2();
        let mut d = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            d.extend_from_slice(t.row(i));
        }
        Tensor::matrix(idx.len(), c, d).expect("row gather")
    }

    /// Runs from `state` until `stop_after` (or the configured end), calling
    /// `on_epoch` at every epoch boundary.
    pub fn run(
        &self,
        mut state: Checkpoint,
        stop_after: Option<u64>,
        on_epoch: &mut dyn FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<(Checkpoint, MetricsLog)> {
        if state.config_hash != self.hash {
            return Err(Error::HashMismatch {
                expected: self.hash.clone(),
                found: state.config_hash.clone(),
            });
        }
        let end = stop_after
            .unwrap_or(u64::MAX)
            .min(self.total_steps());
        let mut log = MetricsLog {
            layers: state.score.layer_ids(),
            rows: Vec::new(),
        };
        while state.step < end {
            let t = state.step + 1;
            let row = self.step(&mut state, t).map_err(|e| Error::Stage {
                stage: format!("fine_tune step {t}"),
                source: Box::new(e),
            })?;
            state.step = t;
            log.push(row)?;
            if t % self.steps_per_epoch() == 0 {
                on_epoch(&state)?;
            }
        }
        Ok((state, log))
    }

    fn step(&self, state: &mut Checkpoint, t: u64) -> Result<MetricsRow> {
        let cfg = self.cfg;
        let lr = match cfg.schedule {
            LrSchedule::InvSqrt => lr_schedule(t, cfg.eta0)?,
            LrSchedule::Constant => cfg.eta0,
        };
        let idx = self.batch_indices(t);
        let x_o = self.gather(&self.data.images, &idx);
        let mut rng = stream_rng(cfg.seed, t);
        let dim = x_o.dims2().1;
        let w = &cfg.weights;

        if t % cfg.period as u64 == 0 {
            let noise = NoiseDraws::sample(&mut rng, cfg.tau.max(1), idx.len(), dim);
            let mut g = Graph::new();
            let net = state.score.bind(&mut g)?;
            let loss = score_matching_loss(
                &mut g,
                &x_o,
                &net,
                &self.models.schedule,
                cfg.tau.max(1),
                &noise,
            )?;
            let grads = g.backward(loss)?.layer_map().scaled(w.score);
            let value = g.value(loss).item();
            drop(net);
            sgd_step(state.score.params_mut(), &grads, lr)?;
            return Ok(MetricsRow {
                step: t,
                kind: StepKind::Score,
                lr,
                terms: LossTerms {
                    score: value,
                    ..Default::default()
                },
                conflict_rate: 0.0,
                conflict_rate_a: 0.0,
                conflict_rate_e: 0.0,
                layer_conflict: vec![0.0; state.score.layer_ids().len()],
                grad_norm_a: 0.0,
                grad_norm_e: 0.0,
                grad_norm_update: grads.norm(),
                skipped_emotion: 0,
            });
        }

        let r = match &self.fixed_noise {
            Some(n) => self.gather(n, &idx),
            None => standard_normal(&mut rng, &[idx.len(), dim]),
        };
        let mut g = Graph::new();
        let net = state.score.bind(&mut g)?;
        let xo = g.constant(x_o.clone());
        let rv = g.constant(r);
        let x_p = reverse_chain(&mut g, xo, cfg.tau, rv, &net, &self.models.schedule)?;
        let zero = GradientMap::zeros_like(&state.score.params().flat());
        let mut terms = LossTerms::default();

        let grad_of = |g: &Graph<f64>, v: Var| -> Result<GradientMap<f64>> {
            Ok(g.backward(v)?.layer_map())
        };

        let g_a = if w.angular > 0.0 {
            let la = angular_loss_to(&mut g, x_p, &self.targets, &self.surrogates)?;
            terms.angular = g.value(la).item();
            grad_of(&g, la)?
        } else {
            zero.clone()
        };

        let mut skipped = 0;
        let g_e = if w.emotion > 0.0 {
            match emotion_loss(&mut g, x_p, &x_o, &self.models.vis, &self.models.direction) {
                Ok(term) => {
                    skipped = term.skipped;
                    terms.emotion = g.value(term.loss).item();
                    grad_of(&g, term.loss)?
                }
                Err(Error::Degenerate { .. }) => {
                    skipped = idx.len();
                    zero.clone()
                }
                Err(e) => return Err(e),
            }
        } else {
            zero.clone()
        };

        let mut perceptual: [Option<Var>; 6] = [None; 6];
        if w.lpips > 0.0 {
            let v = lpips_proxy_loss(&mut g, x_p, xo, &self.models.perceptual)?;
            terms.lpips = g.value(v).item();
            perceptual[2] = Some(v);
        }
        if w.l1 > 0.0 {
            let v = l1_loss(&mut g, x_p, xo)?;
            terms.l1 = g.value(v).item();
            perceptual[3] = Some(v);
        }
        if w.smooth > 0.0 {
            let px = self.models.regressor.forward(&mut g, x_p)?;
            let lm = g.scale(px, 1.0 / self.data.landmark_unit)?;
            let fx: Vec<SmoothnessFixture<f64>> =
                idx.iter().map(|&i| self.data.fixtures[i].clone()).collect();
            let v = laplacian_loss_var(&mut g, lm, &fx)?;
            terms.smooth = g.value(v).item();
            perceptual[4] = Some(v);
        }
        let g_p = if perceptual.iter().any(Option::is_some) {
            let p = combined_loss_var(&mut g, perceptual, w)?;
            grad_of(&g, p)?
        } else {
            zero.clone()
        };
        drop(net);

        let (pa, pe, report) = surgery_step(&mut state.ledger, &g_a, &g_e, cfg.projection)?;
        let mut update = g_p;
        update.add_scaled(w.angular, &pa)?;
        update.add_scaled(w.emotion, &pe)?;
        let update_norm = update.norm();
        if !update.all_finite() || !terms.as_array().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "step {t}: terms {terms:?}, update norm {update_norm}"
            )));
        }
        sgd_step(state.score.params_mut(), &update, lr)?;
        Ok(MetricsRow {
            step: t,
            kind: StepKind::Adversarial,
            lr,
            terms,
            conflict_rate: report.conflict_rate(),
            conflict_rate_a: report.conflict_rate_a(),
            conflict_rate_e: report.conflict_rate_e(),
            layer_conflict: report
                .layers
                .iter()
                .map(|l| (l.a.conflict as u8 + l.e.conflict as u8) as f64 / 2.0)
                .collect(),
            grad_norm_a: g_a.norm(),
            grad_norm_e: g_e.norm(),
            grad_norm_update: update_norm,
            skipped_emotion: skipped,
        })
    }
}

/// Full run from the pretrained score network.
pub fn fine_tune(
    cfg: &TrainConfig,
    data: &TrainData,
    models: &FrozenModels,
) -> Result<(Checkpoint, MetricsLog)> {
    let tr = Trainer::new(cfg, data, models)?;
    tr.run(tr.initial()?, None, &mut |_| Ok(()))
}

/// Continues a run from `ckpt`; the checkpoint must come from the same config,
/// data and initial network.
pub fn resume(
    ckpt: Checkpoint,
    cfg: &TrainConfig,
    data: &TrainData,
    models: &FrozenModels,
    stop_after: Option<u64>,
) -> Result<(Checkpoint, MetricsLog)> {
    let tr = Trainer::new(cfg, data, models)?;
    tr.run(ckpt, stop_after, &mut |_| Ok(()))
}
