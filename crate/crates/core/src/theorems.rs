//! Empirical harnesses for the momentum bound (EMA error shrinking with the
//! learning rate) and the `log T/√T` convergence envelope.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::{median, ols_slope};
use crate::faces::stream_rng;
use crate::graph::GradientMap;
use crate::prep::FrozenModels;
use crate::surgery::{
    lambda_from_constants, surgery_step, GradientLedger, ProjectionMode, TheoremConstants,
};
use crate::tensor;
use crate::trainer::{LrSchedule, MetricsLog, StepKind, TrainConfig, TrainData, Trainer};

const LAYER: &str = "w";

fn map(v: Vec<f64>) -> GradientMap<f64> {
    GradientMap::from_layers(vec![(LAYER.to_string(), v)])
}

fn unmap(m: &GradientMap<f64>) -> &[f64] {
    m.get(LAYER).expect("single-layer map")
}

/// One least-squares task `½·mean_i (⟨x_i, w⟩ − y_i)²`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTask {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl LinearTask {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn sample_grad(&self, w: &[f64], i: usize) -> Vec<f64> {
        let r = tensor::dot(&self.x[i], w) - self.y[i];
        self.x[i].iter().map(|v| r * v).collect()
    }

    /// Mean gradient over `idx`.
    pub fn batch_grad(&self, w: &[f64], idx: &[usize]) -> Vec<f64> {
        let mut g = vec![0.0; w.len()];
        for &i in idx {
            for (a, b) in g.iter_mut().zip(self.sample_grad(w, i)) {
                *a += b;
            }
        }
        g.iter().map(|v| v / idx.len() as f64).collect()
    }

    /// Exact full-data gradient.
    pub fn full_grad(&self, w: &[f64]) -> Vec<f64> {
        self.batch_grad(w, &(0..self.len()).collect::<Vec<_>>())
    }

    /// `E‖g_B − ∇L‖²` for a uniformly drawn batch of `b` distinct samples.
    pub fn batch_variance(&self, w: &[f64], b: usize) -> f64 {
        let n = self.len();
        let full = self.full_grad(w);
        let spread = (0..n)
            .map(|i| {
                let g = self.sample_grad(w, i);
                g.iter().zip(&full).map(|(a, c)| (a - c) * (a - c)).sum::<f64>()
            })
            .sum::<f64>()
            / n as f64;
        if n <= 1 {
            return 0.0;
        }
        spread / b as f64 * (n - b) as f64 / (n - 1) as f64
    }

    /// Largest eigenvalue of `XᵀX/n` by power iteration.
    pub fn lipschitz(&self) -> f64 {
        let d = self.x[0].len();
        let mut v = vec![1.0 / (d as f64).sqrt(); d];
        let mut lam = 0.0;
        for _ in 0..500 {
            let mut u = vec![0.0; d];
            for row in &self.x {
                let s = tensor::dot(row, &v);
                for (a, b) in u.iter_mut().zip(row) {
                    *a += s * b / self.len() as f64;
                }
            }
            lam = tensor::norm(&u);
            if lam == 0.0 {
                return 0.0;
            }
            v = u.iter().map(|x| x / lam).collect();
        }
        lam
    }
}

/// Two least-squares tasks on a shared parameter with different optima.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyProblem {
    pub a: LinearTask,
    pub e: LinearTask,
    pub dim: usize,
    pub batch: usize,
}

impl ToyProblem {
    pub fn new(n: usize, dim: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 || dim == 0 || batch == 0 || batch > n {
            return Err(Error::Invalid(format!("toy problem n={n} d={dim} B={batch}")));
        }
        let mut rng = stream_rng(seed, 0);
        let task = |rng: &mut rand_chacha::ChaCha8Rng| {
            let w_star: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let y = x
                .iter()
                .map(|r| tensor::dot(r, &w_star) + 0.1 * rng.gen_range(-1.0..1.0))
                .collect();
            LinearTask { x, y }
        };
        let a = task(&mut rng);
        let e = task(&mut rng);
        Ok(Self { a, e, dim, batch })
    }

    fn draw(&self, rng: &mut impl Rng) -> Vec<usize> {
        rand::seq::index::sample(rng, self.a.len(), self.batch).into_vec()
    }

    fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, 1);
        (0..self.dim).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    /// `G`, `L`, `M` measured along a pilot projected-SGD run.
    pub fn estimate_constants(&self, eta: f64, steps: usize, delta: f64) -> Result<TheoremConstants<f64>> {
        let mut w = self.init(0);
        let mut rng = stream_rng(0, 2);
        let mut ledger = GradientLedger::new(0.9, &map(vec![0.0; self.dim]))?;
        let (mut g_max, mut m_max) = (0.0f64, 0.0f64);
        for _ in 0..steps {
            for t in [&self.a, &self.e] {
                g_max = g_max.max(tensor::norm(&t.full_grad(&w)));
                m_max = m_max.max(t.batch_variance(&w, self.batch));
            }
            let (ga, ge) = (
                self.a.batch_grad(&w, &self.draw(&mut rng)),
                self.e.batch_grad(&w, &self.draw(&mut rng)),
            );
            let (pa, pe, _) = surgery_step(&mut ledger, &map(ga), &map(ge), ProjectionMode::Ema)?;
            for ((wi, a), b) in w.iter_mut().zip(unmap(&pa)).zip(unmap(&pe)) {
                *wi -= eta * (a + b);
            }
        }
        Ok(TheoremConstants {
            grad_bound: g_max,
            lipschitz: self.a.lipschitz().max(self.e.lipschitz()),
            variance: m_max,
            delta,
            eta,
        })
    }
}

/// One row of the momentum harness.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumRow {
    pub eta: f64,
    pub lambda: f64,
    pub seed: u64,
    pub steps: u64,
    pub terminal_error: f64,
}

/// Projected SGD for `steps` steps; returns the mean over both tasks of
/// `‖m^T − ∇L(w^T)‖` where `w^T` is the point of the last gradient evaluation.
pub fn momentum_run(p: &ToyProblem, eta: f64, lambda: f64, steps: u64, seed: u64) -> Result<f64> {
    let mut w = p.init(seed);
    let mut rng = stream_rng(seed, 3);
    let mut ledger = GradientLedger::new(lambda, &map(vec![0.0; p.dim]))?;
    for t in 1..=steps {
        let ga = p.a.batch_grad(&w, &p.draw(&mut rng));
        let ge = p.e.batch_grad(&w, &p.draw(&mut rng));
        let (pa, pe, _) = surgery_step(&mut ledger, &map(ga), &map(ge), ProjectionMode::Ema)?;
        if t == steps {
            let err = |m: &GradientMap<f64>, task: &LinearTask| {
                let full = task.full_grad(&w);
                let diff: Vec<f64> = unmap(m).iter().zip(&full).map(|(a, b)| a - b).collect();
                tensor::norm(&diff)
            };
            return Ok(0.5 * (err(ledger.a.moments(), &p.a) + err(ledger.e.moments(), &p.e)));
        }
        for ((wi, a), b) in w.iter_mut().zip(unmap(&pa)).zip(unmap(&pe)) {
            *wi -= eta * (a + b);
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("momentum run diverged at step {t}")));
        }
    }
    Err(Error::Invalid("momentum run needs at least one step".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentumHarness {
    pub constants: TheoremConstants<f64>,
    pub c_prime: f64,
    pub rows: Vec<MomentumRow>,
}

impl MomentumHarness {
    /// Median terminal error per η, in the order the grid was given.
    pub fn medians(&self) -> Vec<(f64, f64)> {
        let mut etas: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !etas.contains(&r.eta) {
                etas.push(r.eta);
            }
        }
        etas.into_iter()
            .map(|eta| {
                let errs: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.eta == eta)
                    .map(|r| r.terminal_error)
                    .collect();
                (eta, median(&errs))
            })
            .collect()
    }

    /// True when the median error strictly decreases as η decreases.
    pub fn strictly_decreasing(&self) -> bool {
        let mut m = self.medians();
        m.sort_by(|a, b| b.0.total_cmp(&a.0));
        m.windows(2).all(|w| w[1].1 < w[0].1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("eta,lambda,seed,T,terminal_error\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.eta, r.lambda, r.seed, r.steps, r.terminal_error
            );
        }
        s
    }
}

/// Runs every `(η, seed)` pair with `λ` from the theorem formula and
/// `T = ceil(C′·η^{−2/3})`. Constants are measured once at the smallest η.
pub fn momentum_error_harness(
    p: &ToyProblem,
    etas: &[f64],
    seeds: &[u64],
    c_prime: f64,
) -> Result<MomentumHarness> {
    if etas.is_empty() || !(c_prime > 0.0) {
        return Err(Error::Invalid("momentum harness needs etas and C' > 0".into()));
    }
    let pilot_eta = etas.iter().cloned().fold(f64::INFINITY, f64::min);
    let constants = p.estimate_constants(pilot_eta, 200, 0.05)?;
    let mut rows = Vec::new();
    for &eta in etas {
        let lambda = lambda_from_constants(&TheoremConstants { eta, ..constants })?;
        let steps = (c_prime * eta.powf(-2.0 / 3.0)).ceil() as u64;
        for &seed in seeds {
            rows.push(MomentumRow {
                eta,
                lambda,
                seed,
                steps,
                terminal_error: momentum_run(p, eta, lambda, steps, seed)?,
            });
        }
    }
    Ok(MomentumHarness {
        constants,
        c_prime,
        rows,
    })
}

/// Result of fitting `C·log t/√t` over the second half of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeFit {
    /// Smallest `C` with `R_t ≤ C·log t/√t` on the second half.
    pub c: f64,
    /// OLS slope of the normalized residual `C − R_t/φ(t)` against `t`.
    pub residual_slope: f64,
    pub ok: bool,
}

/// Fits the envelope to per-step gradient norms `norms[t−1]`, `t = 1..=T`,
/// using the running mean `R_t = (1/t)·Σ_{s≤t} norms[s−1]`.
pub fn envelope_fit(norms: &[f64]) -> Result<EnvelopeFit> {
    let t_total = norms.len();
    if t_total < 500 {
        return Err(Error::Invalid(format!(
            "run of {t_total} steps is too short for an envelope fit (need >= 500)"
        )));
    }
    if norms.iter().any(|v| !v.is_finite()) {
        return Ok(EnvelopeFit {
            c: f64::INFINITY,
            residual_slope: f64::NAN,
            ok: false,
        });
    }
    let mut sum = 0.0;
    let mut ts = Vec::new();
    let mut rho = Vec::new();
    for (i, &v) in norms.iter().enumerate() {
        let t = (i + 1) as f64;
        sum += v;
        if i + 1 >= t_total / 2 {
            let phi = t.ln() / t.sqrt();
            ts.push(t);
            rho.push(sum / t / phi);
        }
    }
    let c = rho.iter().cloned().fold(0.0, f64::max);
    if !c.is_finite() {
        return Ok(EnvelopeFit {
            c,
            residual_slope: f64::NAN,
            ok: false,
        });
    }
    let resid: Vec<f64> = rho.iter().map(|r| c - r).collect();
    let residual_slope = ols_slope(&ts, &resid);
    Ok(EnvelopeFit {
        c,
        residual_slope,
        ok: residual_slope >= 0.0,
    })
}

/// Per-step norms of a convergence run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvergenceTrace {
    pub grad_norm_a: Vec<f64>,
    pub grad_norm_e: Vec<f64>,
    pub conflict_rate: Vec<f64>,
}

impl ConvergenceTrace {
    /// Adversarial-step rows of a fine-tune log.
    pub fn from_metrics(log: &MetricsLog) -> Self {
        let mut t = Self::default();
        for r in log.rows.iter().filter(|r| r.kind == StepKind::Adversarial) {
            t.grad_norm_a.push(r.grad_norm_a);
            t.grad_norm_e.push(r.grad_norm_e);
            t.conflict_rate.push(r.conflict_rate);
        }
        t
    }

    /// `(‖∇L_A‖ + ‖∇L_E‖)/2` per step.
    pub fn combined(&self) -> Vec<f64> {
        self.grad_norm_a
            .iter()
            .zip(&self.grad_norm_e)
            .map(|(a, e)| 0.5 * (a + e))
            .collect()
    }

    pub fn fit(&self) -> Result<EnvelopeFit> {
        envelope_fit(&self.combined())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,grad_norm_A,grad_norm_E,conflict_rate\n");
        for i in 0..self.grad_norm_a.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                i + 1,
                self.grad_norm_a[i],
                self.grad_norm_e[i],
                self.conflict_rate[i]
            );
        }
        s
    }
}

/// Two diagonal quadratics `½·Σ h_i (w_i − a_i)²` sharing the minimizer `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticToy {
    pub h_a: Vec<f64>,
    pub h_e: Vec<f64>,
    pub minimizer: Vec<f64>,
}

impl QuadraticToy {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 5);
        let mut h = || (0..dim).map(|_| rng.gen_range(0.2..1.0)).collect::<Vec<f64>>();
        let h_a = h();
        let h_e = h();
        let minimizer = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self { h_a, h_e, minimizer }
    }

    pub fn grad(&self, h: &[f64], w: &[f64]) -> Vec<f64> {
        h.iter()
            .zip(w)
            .zip(&self.minimizer)
            .map(|((h, w), a)| h * (w - a))
            .collect()
    }

    /// Largest curvature of the summed objective.
    pub fn max_curvature(&self) -> f64 {
        self.h_a
            .iter()
            .zip(&self.h_e)
            .map(|(a, e)| a + e)
            .fold(0.0, f64::max)
    }

    /// Projected SGD on the exact gradients from `w0`.
    pub fn run(&self, w0: &[f64], eta0: f64, steps: usize, schedule: LrSchedule) -> Result<ConvergenceTrace> {
        let mut w = w0.to_vec();
        let mut ledger = GradientLedger::new(0.95, &map(vec![0.0; w.len()]))?;
        let mut trace = ConvergenceTrace::default();
        for t in 1..=steps {
            let ga = self.grad(&self.h_a, &w);
            let ge = self.grad(&self.h_e, &w);
            trace.grad_norm_a.push(tensor::norm(&ga));
            trace.grad_norm_e.push(tensor::norm(&ge));
            let (pa, pe, rep) = surgery_step(&mut ledger, &map(ga), &map(ge), ProjectionMode::Ema)?;
            trace.conflict_rate.push(rep.conflict_rate());
            let eta = match schedule {
                LrSchedule::InvSqrt => eta0 / (t as f64).sqrt(),
                LrSchedule::Constant => eta0,
            };
            for ((wi, a), b) in w.iter_mut().zip(unmap(&pa)).zip(unmap(&pe)) {
                *wi -= eta * (a + b);
            }
        }
        Ok(trace)
    }
}

/// Settings for the fine-tune convergence run: the training set is one batch
/// with fixed per-image noise, so every step sees the exact full-data
/// gradient; score-matching and perceptual terms are off.
pub fn convergence_config(steps: u64, eta0: f64, seed: u64) -> TrainConfig {
    let mut weights = crate::objectives::LossWeights::zero();
    weights.angular = 0.5;
    weights.emotion = 0.08;
    TrainConfig {
        eta0,
        epochs: steps as usize,
        batch: 4,
        period: usize::MAX,
        tau: 5,
        lambda: 0.95,
        weights,
        seed,
        schedule: LrSchedule::InvSqrt,
        projection: ProjectionMode::Ema,
        fixed_noise: true,
    }
}

/// Runs the fine-tune convergence check on `data` (which must hold exactly one batch).
pub fn convergence_finetune(
    cfg: &TrainConfig,
    data: &TrainData,
    models: &FrozenModels,
) -> Result<(ConvergenceTrace, EnvelopeFit)> {
    if data.len() != cfg.batch {
        return Err(Error::Invalid(
            "convergence run needs the training set to be exactly one batch".into(),
        ));
    }
    let tr = Trainer::new(cfg, data, models)?;
    let (_, log) = tr.run(tr.initial()?, None, &mut |_| Ok(()))?;
    let trace = ConvergenceTrace::from_metrics(&log);
    let fit = trace.fit()?;
    Ok((trace, fit))
}

/// Default learning rate of the fine-tune convergence run.
pub const CONVERGENCE_ETA0: f64 = 1e-2;

/// Summary of every harness; field order is the JSON key order.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TheoremSummary {
    pub momentum_medians: Vec<(f64, f64)>,
    pub momentum_strictly_decreasing: bool,
    pub quadratic_c: f64,
    pub quadratic_ok: bool,
    pub constant_lr_control_ok: bool,
    pub finetune_steps: usize,
    pub finetune_c: f64,
    pub finetune_residual_slope: f64,
    pub finetune_ok: bool,
}

impl TheoremSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }
}

/// Outputs of [`run_all`].
pub struct TheoremOutputs {
    pub summary: TheoremSummary,
    pub momentum: MomentumHarness,
    pub quadratic: ConvergenceTrace,
    pub control: ConvergenceTrace,
    pub finetune: ConvergenceTrace,
}

/// Momentum harness (200 samples, `d = 8`, `B = 4`, η ∈ {1e-1, 1e-2, 1e-3},
/// seeds 0..10, `C′ = 10`), the quadratic toy with its constant-rate control,
/// and a `finetune_steps`-step fine-tune on `data`.
pub fn run_all(
    data: &TrainData,
    models: &FrozenModels,
    finetune_steps: u64,
    seed: u64,
) -> Result<TheoremOutputs> {
    let toy = ToyProblem::new(200, 8, 4, seed)?;
    let seeds: Vec<u64> = (0..10).collect();
    let momentum = momentum_error_harness(&toy, &[1e-1, 1e-2, 1e-3], &seeds, 10.0)?;
    let q = QuadraticToy::new(8, seed);
    let eta0 = 2.5 / q.max_curvature();
    let w0 = vec![3.0; 8];
    let quadratic = q.run(&w0, eta0, 2000, LrSchedule::InvSqrt)?;
    let control = q.run(&w0, eta0, 1000, LrSchedule::Constant)?;
    let (qfit, cfit) = (quadratic.fit()?, control.fit()?);
    let cfg = convergence_config(finetune_steps, CONVERGENCE_ETA0, seed);
    let (finetune, ffit) = convergence_finetune(&cfg, data, models)?;
    Ok(TheoremOutputs {
        summary: TheoremSummary {
            momentum_medians: momentum.medians(),
            momentum_strictly_decreasing: momentum.strictly_decreasing(),
            quadratic_c: qfit.c,
            quadratic_ok: qfit.ok,
            constant_lr_control_ok: cfit.ok,
            finetune_steps: finetune.grad_norm_a.len(),
            finetune_c: ffit.c,
            finetune_residual_slope: ffit.residual_slope,
            finetune_ok: ffit.ok,
        },
        momentum,
        quadratic,
        control,
        finetune,
    })
}
