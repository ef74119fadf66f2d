//! Experiment orchestration: manifest parsing, the protocol split, and the
//! prep → train → protect → eval stages with their on-disk artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::CheckpointFile;
use crate::diffusion::{reverse_chain, standard_normal};
use crate::error::{Error, Result};
use crate::eval::{
    cosine, far_threshold, impostor_scores, psr_rank_n, psr_verification, sign_test, Gallery,
};
use crate::faces::{stream_rng, synth_dataset, FaceDataset, IMAGE_SIZE};
use crate::graph::Graph;
use crate::landmarks::{delaunay, SmoothnessFixture};
use crate::objectives::{lpips_proxy_loss, Encoder};
use crate::prep::{hex_digest, prepare_cached, FrozenModels, PrepConfig};
use crate::spectrum::azimuthal_spectrum;
use crate::surgery::ProjectionMode;
use crate::tensor::Tensor;
use crate::trainer::{Checkpoint, LrSchedule, MetricsLog, TrainConfig, TrainData, Trainer};

pub const FAR_LEVELS: [f64; 3] = [0.1, 0.01, 0.001];

/// Keys that locate files rather than define the run; excluded from the hash.
const LOCATION_KEYS: [&str; 2] = ["out_dir", "cache_dir"];

/// Flat `key = value` manifest. `#` starts a comment; a `config = PATH` line
/// pulls in another manifest whose keys the including file overrides.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("manifest line {}: expected key = value", n + 1)))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    /// Reads `path`, resolving `config` includes relative to the including file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_depth(path, 0)
    }

    fn load_depth(path: &Path, depth: usize) -> Result<Self> {
        if depth > 8 {
            return Err(Error::Invalid("manifest includes nest too deeply".into()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut own = Self::parse(&text)?;
        let Some(inc) = own.entries.remove("config") else {
            return Ok(own);
        };
        let base = path.parent().unwrap_or(Path::new("."));
        let mut merged = Self::load_depth(&base.join(inc), depth + 1)?;
        merged.entries.extend(own.entries);
        Ok(merged)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the sorted entries, location keys excluded.
    pub fn hash(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            if !LOCATION_KEYS.contains(&k.as_str()) {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        hex_digest(s.as_bytes())
    }
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub prep: PrepConfig,
    pub train: TrainConfig,
    pub images_per_id: usize,
    pub target: usize,
    pub train_per_id: usize,
    pub eval_probes: usize,
    pub out_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub tag: String,
    pub manifest_hash: String,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Invalid(format!("manifest key {key}: cannot parse `{v}`")))
}

fn switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Invalid(format!("manifest key {key}: expected on/off, got `{v}`"))),
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            prep: PrepConfig::default(),
            train: TrainConfig {
                eta0: 3e-3,
                epochs: 10,
                batch: 4,
                tau: 10,
                ..TrainConfig::default()
            },
            images_per_id: 10,
            target: 0,
            train_per_id: 5,
            eval_probes: 50,
            out_dir: PathBuf::from("out"),
            cache_dir: PathBuf::from("cache"),
            tag: "baseline".into(),
            manifest_hash: Manifest::default().hash(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let mut c = Self::default();
        let (mut projection, mut ema) = (true, true);
        for (k, v) in m.entries() {
            let v = v.as_str();
            let w = &mut c.train.weights;
            match k.as_str() {
                "dataset_seed" => c.prep.dataset_seed = parse(k, v)?,
                "n_identities" => c.prep.n_identities = parse(k, v)?,
                "images_per_id" => c.images_per_id = parse(k, v)?,
                "target" => c.target = parse(k, v)?,
                "train_per_id" => c.train_per_id = parse(k, v)?,
                "eval_probes" => c.eval_probes = parse(k, v)?,
                "prep_pretrain_steps" => c.prep.pretrain_steps = parse(k, v)?,
                "prep_score_hidden" => c.prep.score_hidden = parse(k, v)?,
                "t_total" => c.prep.t_total = parse(k, v)?,
                "seed" => c.train.seed = parse(k, v)?,
                "eta0" => c.train.eta0 = parse(k, v)?,
                "epochs" => c.train.epochs = parse(k, v)?,
                "batch" => c.train.batch = parse(k, v)?,
                "period" => c.train.period = parse(k, v)?,
                "tau" => c.train.tau = parse(k, v)?,
                "lambda" => c.train.lambda = parse(k, v)?,
                "lr_schedule" => {
                    c.train.schedule = match v {
                        "inv_sqrt" => LrSchedule::InvSqrt,
                        "constant" => LrSchedule::Constant,
                        _ => return Err(Error::Invalid(format!("lr_schedule `{v}`"))),
                    }
                }
                "projection" => projection = switch(k, v)?,
                "ema" => ema = switch(k, v)?,
                "smoothness" | "emotion" => {
                    switch(k, v)?;
                }
                "gamma_angular" => w.angular = parse(k, v)?,
                "gamma_emotion" => w.emotion = parse(k, v)?,
                "gamma_lpips" => w.lpips = parse(k, v)?,
                "gamma_l1" => w.l1 = parse(k, v)?,
                "gamma_smooth" => w.smooth = parse(k, v)?,
                "gamma_score" => w.score = parse(k, v)?,
                "tag" => c.tag = v.to_string(),
                "out_dir" => c.out_dir = PathBuf::from(v),
                "cache_dir" => c.cache_dir = PathBuf::from(v),
                _ => return Err(Error::Invalid(format!("unknown manifest key `{k}`"))),
            }
        }
        // Switches win over explicit weights regardless of key order.
        if m.get("smoothness").is_some_and(|v| !switch("smoothness", v).unwrap_or(true)) {
            c.train.weights.smooth = 0.0;
        }
        if m.get("emotion").is_some_and(|v| !switch("emotion", v).unwrap_or(true)) {
            c.train.weights.emotion = 0.0;
        }
        c.train.projection = match (projection, ema) {
            (false, _) => ProjectionMode::Off,
            (true, true) => ProjectionMode::Ema,
            (true, false) => ProjectionMode::Minibatch,
        };
        c.manifest_hash = m.hash();
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prep.n_identities < 2 {
            return Err(Error::Invalid("need at least two identities".into()));
        }
        if self.target >= self.prep.n_identities {
            return Err(Error::Invalid(format!("target {} out of range", self.target)));
        }
        if self.train_per_id == 0 || self.train_per_id >= self.images_per_id {
            return Err(Error::Invalid(
                "train_per_id must leave evaluation images per identity".into(),
            ));
        }
        if self.eval_probes == 0 {
            return Err(Error::Invalid("eval_probes must be >= 1".into()));
        }
        self.train.validate()
    }
}

/// Protocol dataset and its split.
#[derive(Clone, Debug)]
pub struct Split {
    pub dataset: FaceDataset,
    /// First image of the target identity.
    pub reference: usize,
    pub train: Vec<usize>,
    /// Non-target evaluation images, interleaved across identities.
    pub probes: Vec<usize>,
}

pub fn make_split(cfg: &ExperimentConfig) -> Result<Split> {
    let ds = synth_dataset(cfg.prep.n_identities, cfg.images_per_id, cfg.prep.dataset_seed)?;
    let per = cfg.images_per_id;
    let others: Vec<usize> = (0..cfg.prep.n_identities).filter(|&i| i != cfg.target).collect();
    let train = others
        .iter()
        .flat_map(|&id| (0..cfg.train_per_id).map(move |k| id * per + k))
        .collect();
    let mut pool = Vec::new();
    for k in cfg.train_per_id..per {
        for &id in &others {
            pool.push(id * per + k);
        }
    }
    if pool.len() < cfg.eval_probes {
        return Err(Error::Invalid(format!(
            "{} evaluation images available, {} requested",
            pool.len(),
            cfg.eval_probes
        )));
    }
    pool.truncate(cfg.eval_probes);
    Ok(Split {
        dataset: ds,
        reference: cfg.target * per,
        train,
        probes: pool,
    })
}

/// Fixture for image `i` with landmarks in units of the image side.
pub fn smoothness_fixture(ds: &FaceDataset, i: usize) -> Result<SmoothnessFixture<f64>> {
    let set = ds.landmark_set(i)?;
    let tri = delaunay(set.points())?;
    let unit = IMAGE_SIZE as f64;
    let pts: Vec<[f64; 2]> = set.points().iter().map(|p| [p[0] / unit, p[1] / unit]).collect();
    SmoothnessFixture::new(&pts, &tri, set.selected())
}

pub fn train_data(split: &Split) -> Result<TrainData> {
    Ok(TrainData {
        images: split.dataset.images(&split.train),
        fixtures: split
            .train
            .iter()
            .map(|&i| smoothness_fixture(&split.dataset, i))
            .collect::<Result<_>>()?,
        landmark_unit: IMAGE_SIZE as f64,
        target: split.dataset.images(&[split.reference]),
    })
}

/// Runs the fine-tune, saving a checkpoint into `out` after every epoch when given.
pub fn train_stage(
    cfg: &ExperimentConfig,
    split: &Split,
    models: &FrozenModels,
    out: Option<&Path>,
) -> Result<(Checkpoint, MetricsLog)> {
    let data = train_data(split)?;
    let tr = Trainer::new(&cfg.train, &data, models)?;
    let mut save = |c: &Checkpoint| -> Result<()> {
        if let Some(dir) = out {
            c.save(&dir.join("checkpoint.ckpt"))?;
        }
        Ok(())
    };
    tr.run(tr.initial()?, None, &mut save)
}

/// Protected images `[P, D]` for the evaluation probes: one noise draw per probe.
pub fn protect_stage(cfg: &ExperimentConfig, split: &Split, ckpt: &Checkpoint, models: &FrozenModels) -> Result<Tensor<f64>> {
    let x_o = split.dataset.images(&split.probes);
    let mut rng = stream_rng(cfg.train.seed, 1 << 42);
    let r = standard_normal(&mut rng, x_o.shape());
    let mut g = Graph::new();
    let net = ckpt.score.bind_frozen(&mut g);
    let xv = g.constant(x_o);
    let rv = g.constant(r);
    let out = reverse_chain(&mut g, xv, cfg.train.tau, rv, &net, &models.schedule)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FarEntry {
    pub far: f64,
    pub threshold: f64,
    pub psr: f64,
    pub clean_psr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualityProxies {
    pub l1: f64,
    pub lpips_proxy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumSummary {
    pub radius: usize,
    pub edit_high_fraction: f64,
    pub control_high_fraction: f64,
    pub max_conservation_error: f64,
}

/// Evaluation report; field order is the JSON key order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PsrReport {
    pub manifest_hash: String,
    pub tag: String,
    pub seed: u64,
    pub blackbox: String,
    pub probes: usize,
    pub train_steps: u64,
    pub far: Vec<FarEntry>,
    pub rank1: f64,
    pub rank5: f64,
    pub clean_rank1: f64,
    pub mean_cosine_target: f64,
    pub clean_mean_cosine_target: f64,
    pub quality: QualityProxies,
    pub spectrum: SpectrumSummary,
    pub skipped_emotion: usize,
}

impl PsrReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn psr_at(&self, far: f64) -> Option<f64> {
        self.far.iter().find(|e| e.far == far).map(|e| e.psr)
    }
}

/// Mean azimuthal profiles of protected edits and of the gain control.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectraTable {
    pub edit: Vec<f64>,
    pub control: Vec<f64>,
}

impl SpectraTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("radius,edit,control\n");
        for (r, (a, b)) in self.edit.iter().zip(&self.control).enumerate() {
            let _ = writeln!(s, "{r},{a},{b}");
        }
        s
    }
}

/// Relative gap between annulus power sums and `n²·Σx²`.
pub fn conservation_error(image: &[f64], n: usize) -> Result<f64> {
    let s = azimuthal_spectrum(image, n)?;
    let parseval = (n * n) as f64 * image.iter().map(|v| v * v).sum::<f64>();
    let annuli = s.total_power();
    if parseval == 0.0 {
        return Ok(annuli.abs());
    }
    Ok((annuli - parseval).abs() / parseval)
}

/// Brightness-gain control edit of the same mean-absolute size as `edit`.
fn control_edit(x_o: &[f64], edit: &[f64]) -> Vec<f64> {
    let ex = edit.iter().map(|v| v.abs()).sum::<f64>();
    let ox = x_o.iter().map(|v| v.abs()).sum::<f64>();
    let k = if ox > 0.0 { ex / ox } else { 0.0 };
    x_o.iter().map(|v| v * k).collect()
}

fn embed_rows(enc: &Encoder<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    enc.embed(x)
}

pub fn eval_stage(
    cfg: &ExperimentConfig,
    split: &Split,
    models: &FrozenModels,
    protected: &Tensor<f64>,
    train_steps: u64,
    skipped_emotion: usize,
) -> Result<(PsrReport, SpectraTable)> {
    let bb = models
        .encoders
        .blackbox()
        .ok_or_else(|| Error::Invalid("no black-box encoder".into()))?;
    let ds = &split.dataset;
    let labels = ds.labels();
    let all = embed_rows(bb, &ds.all_images())?;
    let impostor = impostor_scores(&all, &labels);
    let target = all.row(split.reference).to_vec();

    let clean_idx: Vec<usize> = (0..ds.len()).filter(|&i| labels[i] != cfg.target).collect();
    let clean = embed_rows(bb, &ds.images(&clean_idx))?;
    let prot = embed_rows(bb, protected)?;

    let mut far = Vec::new();
    for &f in &FAR_LEVELS {
        let thr = far_threshold(&impostor, f)?;
        far.push(FarEntry {
            far: f,
            threshold: thr,
            psr: psr_verification(&prot, &target, thr)?,
            clean_psr: psr_verification(&clean, &target, thr)?,
        });
    }
    let gallery = Gallery::from_embeddings(&all, &labels)?;
    let mean_cos = |e: &Tensor<f64>| {
        let n = e.dims2().0;
        (0..n).map(|i| cosine(e.row(i), &target)).sum::<f64>() / n as f64
    };

    let x_o = ds.images(&split.probes);
    let mut g = Graph::new();
    let pv = g.constant(protected.clone());
    let ov = g.constant(x_o.clone());
    let lp = lpips_proxy_loss(&mut g, pv, ov, &models.perceptual)?;
    let lpips = g.value(lp).item();
    let l1 = protected
        .data()
        .iter()
        .zip(x_o.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / protected.len() as f64;

    let n = IMAGE_SIZE;
    let radius = n / 8;
    let (mut edit_hi, mut ctrl_hi, mut worst) = (0.0, 0.0, 0.0f64);
    let mut edit_prof = vec![0.0; n / 2];
    let mut ctrl_prof = vec![0.0; n / 2];
    let p = split.probes.len();
    for i in 0..p {
        let xo = x_o.row(i);
        let edit: Vec<f64> = protected.row(i).iter().zip(xo).map(|(a, b)| a - b).collect();
        let ctrl = control_edit(xo, &edit);
        let se = azimuthal_spectrum(&edit, n)?;
        let sc = azimuthal_spectrum(&ctrl, n)?;
        edit_hi += se.energy_fraction_above(radius) / p as f64;
        ctrl_hi += sc.energy_fraction_above(radius) / p as f64;
        for r in 0..n / 2 {
            edit_prof[r] += se.profile[r] / p as f64;
            ctrl_prof[r] += sc.profile[r] / p as f64;
        }
        worst = worst
            .max(conservation_error(&edit, n)?)
            .max(conservation_error(&ctrl, n)?);
    }

    let report = PsrReport {
        manifest_hash: cfg.manifest_hash.clone(),
        tag: cfg.tag.clone(),
        seed: cfg.train.seed,
        blackbox: bb.name.clone(),
        probes: p,
        train_steps,
        far,
        rank1: psr_rank_n(&prot, &gallery, cfg.target, 1)?,
        rank5: psr_rank_n(&prot, &gallery, cfg.target, 5.min(gallery.len()))?,
        clean_rank1: psr_rank_n(&clean, &gallery, cfg.target, 1)?,
        mean_cosine_target: mean_cos(&prot),
        clean_mean_cosine_target: mean_cos(&clean),
        quality: QualityProxies {
            l1,
            lpips_proxy: lpips,
        },
        spectrum: SpectrumSummary {
            radius,
            edit_high_fraction: edit_hi,
            control_high_fraction: ctrl_hi,
            max_conservation_error: worst,
        },
        skipped_emotion,
    };
    Ok((
        report,
        SpectraTable {
            edit: edit_prof,
            control: ctrl_prof,
        },
    ))
}

/// Everything a full run produces.
pub struct RunOutput {
    pub report: PsrReport,
    pub spectra: SpectraTable,
    pub metrics: MetricsLog,
    pub checkpoint: Checkpoint,
    pub protected: Tensor<f64>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Runs every stage in memory with the given frozen models.
pub fn run_with_models(cfg: &ExperimentConfig, models: &FrozenModels) -> Result<RunOutput> {
    let split = stage("split", make_split(cfg))?;
    let (checkpoint, metrics) = stage("train", train_stage(cfg, &split, models, None))?;
    let protected = stage("protect", protect_stage(cfg, &split, &checkpoint, models))?;
    let (report, spectra) = stage(
        "eval",
        eval_stage(
            cfg,
            &split,
            models,
            &protected,
            checkpoint.step,
            metrics.skipped_emotion(),
        ),
    )?;
    Ok(RunOutput {
        report,
        spectra,
        metrics,
        checkpoint,
        protected,
    })
}

pub fn prep_stage(cfg: &ExperimentConfig) -> Result<FrozenModels> {
    stage("prep", prepare_cached(&cfg.prep, &cfg.cache_dir))
}

/// Writes the artifacts of a run into `cfg.out_dir`.
pub fn write_outputs(cfg: &ExperimentConfig, manifest: &Manifest, out: &RunOutput) -> Result<()> {
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), out.report.to_json())?;
    std::fs::write(dir.join("metrics.csv"), out.metrics.to_csv())?;
    std::fs::write(dir.join("spectra.csv"), out.spectra.to_csv())?;
    std::fs::write(dir.join("manifest.echo"), manifest.to_text())?;
    out.checkpoint.save(&dir.join("checkpoint.ckpt"))?;
    save_images(&dir.join("protected.ckpt"), &out.protected)?;
    Ok(())
}

pub fn save_images(path: &Path, images: &Tensor<f64>) -> Result<()> {
    let mut f = CheckpointFile::new();
    f.put_array("images", images.clone());
    f.save(path)
}

pub fn load_images(path: &Path) -> Result<Tensor<f64>> {
    Ok(CheckpointFile::load(path)?.array("images")?.clone())
}

/// Full pipeline from a manifest: prep (cached), train, protect, eval, write.
pub fn run_experiment(manifest: &Manifest) -> Result<RunOutput> {
    let cfg = ExperimentConfig::from_manifest(manifest)?;
    let models = prep_stage(&cfg)?;
    let out = run_with_models(&cfg, &models)?;
    stage("write", write_outputs(&cfg, manifest, &out))?;
    Ok(out)
}

/// Ablation variants: name and the manifest overrides that define it.
pub const ABLATION_VARIANTS: [(&str, &[(&str, &str)]); 3] = [
    ("baseline", &[]),
    ("no_projection", &[("projection", "off")]),
    ("no_smoothness", &[("smoothness", "off")]),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub psr: f64,
    pub lpips_proxy: f64,
    pub l1: f64,
    pub mean_cosine_target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub against: String,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    /// Baseline PSR ≥ no-projection PSR, per seed.
    pub projection: Comparison,
    /// Baseline LPIPS-proxy ≤ no-smoothness LPIPS-proxy, per seed.
    pub smoothness: Comparison,
    /// Largest per-seed PSR gap between baseline and no-smoothness, in points.
    pub smoothness_max_psr_gap: f64,
}

impl AblationSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,psr,lpips_proxy,l1,mean_cosine_target\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.variant, r.seed, r.psr, r.lpips_proxy, r.l1, r.mean_cosine_target
            );
        }
        s
    }
}

fn compare(against: &str, pairs: &[(f64, f64)], better: impl Fn(f64, f64) -> bool) -> Comparison {
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for &(a, b) in pairs {
        if a == b {
            ties += 1;
        } else if better(a, b) {
            wins += 1;
        } else {
            losses += 1;
        }
    }
    Comparison {
        against: against.to_string(),
        wins,
        losses,
        ties,
        p_value: sign_test(wins, losses),
    }
}

/// Runs every variant for every seed against one shared prep and summarizes
/// the paired comparisons at FAR 0.01.
pub fn ablate(base: &Manifest, seeds: &[u64], out_dir: Option<&Path>) -> Result<AblationSummary> {
    let cfg0 = ExperimentConfig::from_manifest(base)?;
    let models = prep_stage(&cfg0)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for (name, overrides) in ABLATION_VARIANTS {
            let mut m = base.clone();
            m.set("seed", &seed.to_string());
            m.set("tag", name);
            for (k, v) in overrides {
                m.set(k, v);
            }
            let cfg = ExperimentConfig::from_manifest(&m)?;
            let out = run_with_models(&cfg, &models)
                .map_err(|e| e.in_stage(&format!("ablation {name} seed {seed}")))?;
            if let Some(dir) = out_dir {
                let mut c = cfg.clone();
                c.out_dir = dir.join(format!("{name}-seed{seed}"));
                write_outputs(&c, &m, &out)?;
            }
            rows.push(AblationRow {
                variant: name.to_string(),
                seed,
                psr: out.report.psr_at(0.01).unwrap_or(f64::NAN),
                lpips_proxy: out.report.quality.lpips_proxy,
                l1: out.report.quality.l1,
                mean_cosine_target: out.report.mean_cosine_target,
            });
        }
    }
    let get = |v: &str, s: u64| rows.iter().find(|r| r.variant == v && r.seed == s).unwrap();
    let pairs = |v: &str, f: &dyn Fn(&AblationRow) -> f64| -> Vec<(f64, f64)> {
        seeds
            .iter()
            .map(|&s| (f(get("baseline", s)), f(get(v, s))))
            .collect()
    };
    let projection = compare("no_projection", &pairs("no_projection", &|r| r.psr), |a, b| a > b);
    let smoothness = compare(
        "no_smoothness",
        &pairs("no_smoothness", &|r| r.lpips_proxy),
        |a, b| a < b,
    );
    let smoothness_max_psr_gap = pairs("no_smoothness", &|r| r.psr)
        .iter()
        .map(|(a, b)| 100.0 * (a - b).abs())
        .fold(0.0, f64::max);
    let summary = AblationSummary {
        rows,
        projection,
        smoothness,
        smoothness_max_psr_gap,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), summary.to_csv())?;
        std::fs::write(
            dir.join("ablation.json"),
            serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
        )?;
    }
    Ok(summary)
}
