//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Failing criteria are reported without aborting; set `ACCEPTANCE_STRICT=1` to
//! turn any FAIL into a non-zero exit. Errors (crashes) always abort.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::cases;
use common::checks::{delaunay_violations, gaussian_toy, perfect_inversion_error};
use emoshield::checkpoint::CheckpointFile;
use emoshield::experiment::{
    ablate, make_split, prep_stage, run_with_models, train_data, ExperimentConfig, Manifest,
};
use emoshield::landmarks::{delaunay, laplacian_coords, laplacian_loss, LandmarkSet, Point};
use emoshield::surgery::project;
use emoshield::tensor::{dot, norm, normalize};
use emoshield::theorems::run_all;
use emoshield::trainer::{resume, Checkpoint, Trainer};
use emoshield::Result;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const ABLATION_SEEDS: u64 = 8;
const CONVERGENCE_STEPS: u64 = 5000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed <= Duration::from_secs(secs)
}

fn scratch() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn base_manifest() -> Manifest {
    let mut m = Manifest::default();
    m.set("cache_dir", &scratch().join("cache").display().to_string());
    m.set("out_dir", &scratch().join("out").display().to_string());
    m
}

fn projection_invariants() -> Result<Verdict> {
    let t = Instant::now();
    let mut r = common::rng(100);
    let mut bad = 0;
    let mut n = 0;
    for &dim in &[2usize, 16, 512] {
        for _ in 0..1000 {
            let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let m: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let p = project(&g, &m)?;
            let u = normalize(&m)?;
            let again = project(&p, &m)?;
            let ok = dot(&p, &u) >= -1e-12
                && norm(&p) <= norm(&g)
                && again.iter().zip(&p).all(|(a, b)| (a - b).abs() <= 1e-12)
                && (dot(&g, &m) < 0.0 || p == g);
            bad += !ok as usize;
            n += 1;
        }
    }
    let e = t.elapsed();
    verdict(
        bad == 0 && within(e, 5),
        format!("{bad} violations over {n} pairs, {:.2}s", e.as_secs_f64()),
    )
}

fn gradient_correctness() -> Result<Verdict> {
    let t = Instant::now();
    let mut worst = Vec::new();
    for (name, f) in cases::ALL {
        let w = (0..20).map(f).fold(0.0, f64::max);
        worst.push(format!("{name} {w:.1e}"));
        if !(w < 1e-4) {
            return verdict(false, format!("{name}: relative error {w:e}"));
        }
    }
    let e = t.elapsed();
    verdict(
        within(e, 60),
        format!("20 instances each, worst: {}; {:.2}s", worst.join(", "), e.as_secs_f64()),
    )
}

fn delaunay_oracle() -> Result<Verdict> {
    let t = Instant::now();
    let v: usize = (0..200).map(delaunay_violations).sum();
    let e = t.elapsed();
    verdict(
        v == 0 && within(e, 10),
        format!("{v} violations over 200 sets, {:.2}s", e.as_secs_f64()),
    )
}

fn laplacian_properties() -> Result<Verdict> {
    let mut r = common::rng(101);
    let (mut ident, mut trans, mut scale) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = r.gen_range(4..=20);
        let pts: Vec<Point<f64>> = (0..n)
            .map(|_| [r.gen_range(20.0..60.0), r.gen_range(20.0..60.0)])
            .collect();
        let tri = delaunay(&pts)?;
        let sel: Vec<usize> = (0..n).filter(|i| i % 2 == 0).collect();
        let set = |p: Vec<Point<f64>>| LandmarkSet::new(p, sel.clone(), 200.0, 200.0);
        let vo = set(pts.clone())?;
        let (dx, dy) = (r.gen_range(-15.0..15.0), r.gen_range(-15.0..15.0));
        let moved = set(pts.iter().map(|p| [p[0] + dx, p[1] + dy]).collect())?;
        let doubled = set(pts.iter().map(|p| [2.0 * p[0], 2.0 * p[1]]).collect())?;
        ident = ident.max(laplacian_loss(&vo, &vo, &tri)?);
        trans = trans.max(laplacian_loss(&vo, &moved, &tri)?);
        let mut want = 0.0;
        for &i in &sel {
            let d = laplacian_coords(&pts, tri.neighbors(), i)?;
            want += d[0].hypot(d[1]);
        }
        want /= sel.len() as f64;
        scale = scale.max((laplacian_loss(&vo, &doubled, &tri)? - want).abs());
    }
    verdict(
        ident <= 1e-12 && trans <= 1e-12 && scale <= 1e-10,
        format!("identity {ident:.1e}, translation {trans:.1e}, scaling gap {scale:.1e}"),
    )
}

fn ddim_inversion() -> Result<Verdict> {
    let t = Instant::now();
    let inv = (0..50).map(perfect_inversion_error).fold(0.0, f64::max);
    let (m, v) = gaussian_toy(0, 500);
    let e = t.elapsed();
    verdict(
        inv < 1e-6 && m < 0.05 && v < 0.15 && within(e, 120),
        format!(
            "inversion max error {inv:.1e}; Gaussian toy mean error {:.2}%, variance error {:.2}%; {:.2}s",
            100.0 * m,
            100.0 * v,
            e.as_secs_f64()
        ),
    )
}

struct Shared {
    cfg: ExperimentConfig,
    models: emoshield::prep::FrozenModels,
}

fn theorem_harnesses(sh: &Shared) -> Result<(Verdict, Verdict)> {
    let t = Instant::now();
    let mut split = make_split(&sh.cfg)?;
    split.train.truncate(sh.cfg.train.batch);
    let data = train_data(&split)?;
    let out = run_all(&data, &sh.models, CONVERGENCE_STEPS, sh.cfg.train.seed)?;
    let e = t.elapsed();
    let s = &out.summary;
    let med: Vec<String> = s
        .momentum_medians
        .iter()
        .map(|(eta, err)| format!("eta {eta:e}: {err:.3e}"))
        .collect();
    let momentum = Verdict {
        pass: s.momentum_strictly_decreasing,
        detail: format!("median terminal error {}", med.join(", ")),
    };
    let convergence = Verdict {
        pass: s.finetune_ok && s.finetune_steps as u64 == CONVERGENCE_STEPS && within(e, 300),
        detail: format!(
            "{} steps, C = {:.3}, residual slope {:.3e}; quadratic toy ok = {}, constant-rate control ok = {}; {:.1}s (with momentum harness)",
            s.finetune_steps,
            s.finetune_c,
            s.finetune_residual_slope,
            s.quadratic_ok,
            s.constant_lr_control_ok,
            e.as_secs_f64()
        ),
    };
    Ok((momentum, convergence))
}

fn read_report(dir: &std::path::Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(dir.join("report.json"))?;
    serde_json::from_str(&text)
        .map_err(|e| emoshield::Error::Invalid(format!("report.json: {e}")))
}

fn far01(report: &serde_json::Value, key: &str) -> f64 {
    report["far"]
        .as_array()
        .and_then(|a| a.iter().find(|f| f["far"].as_f64() == Some(0.01)))
        .and_then(|f| f[key].as_f64())
        .unwrap_or(f64::NAN)
}

fn ablation_and_runs() -> Result<(Verdict, Verdict, Verdict)> {
    let t = Instant::now();
    let dir = scratch().join("ablation");
    let seeds: Vec<u64> = (0..ABLATION_SEEDS).collect();
    let s = ablate(&base_manifest(), &seeds, Some(&dir))?;
    let e = t.elapsed();
    let p = &s.projection;
    let q = &s.smoothness;
    let smooth_ok = q.losses == 0 && q.p_value < 0.1 && s.smoothness_max_psr_gap <= 5.0;
    let ablation = Verdict {
        pass: p.p_value < 0.1 && p.losses == 0 && smooth_ok && within(e, 1800),
        detail: format!(
            "{} seeds; PSR@0.01 projection vs none: {}W/{}L/{}T p = {:.4}; LPIPS-proxy smoothness vs none: {}W/{}L/{}T p = {:.4}, max PSR gap {:.1} points; {:.1}s",
            seeds.len(),
            p.wins,
            p.losses,
            p.ties,
            p.p_value,
            q.wins,
            q.losses,
            q.ties,
            q.p_value,
            s.smoothness_max_psr_gap,
            e.as_secs_f64()
        ),
    };

    let (mut protocol_ok, mut spectrum_ok) = (true, true);
    let (mut max_clean, mut min_margin) = (0.0f64, f64::INFINITY);
    let (mut min_gap, mut max_cons) = (f64::INFINITY, 0.0f64);
    for &seed in &seeds {
        let r = read_report(&dir.join(format!("baseline-seed{seed}")))?;
        let clean = far01(&r, "clean_psr");
        let margin = r["mean_cosine_target"].as_f64().unwrap_or(f64::NAN)
            - r["clean_mean_cosine_target"].as_f64().unwrap_or(f64::NAN);
        protocol_ok &= (0.0..=0.03).contains(&clean) && margin > 0.0;
        max_clean = max_clean.max(clean);
        min_margin = min_margin.min(margin);
        let sp = &r["spectrum"];
        let gap = sp["edit_high_fraction"].as_f64().unwrap_or(f64::NAN)
            - sp["control_high_fraction"].as_f64().unwrap_or(f64::NAN);
        let cons = sp["max_conservation_error"].as_f64().unwrap_or(f64::NAN);
        spectrum_ok &= gap > 0.0 && cons <= 1e-6;
        min_gap = min_gap.min(gap);
        max_cons = max_cons.max(cons);
    }
    let protocol = Verdict {
        pass: protocol_ok,
        detail: format!(
            "{} runs; max clean PSR@0.01 {max_clean:.3}; min cosine margin over clean {min_margin:.3}",
            seeds.len()
        ),
    };
    let spectrum = Verdict {
        pass: spectrum_ok,
        detail: format!(
            "{} runs; min high-frequency fraction gap (edit − control) {min_gap:.3}; max conservation error {max_cons:.1e}",
            seeds.len()
        ),
    };
    Ok((ablation, protocol, spectrum))
}

fn reproducibility(sh: &Shared) -> Result<Verdict> {
    let a = run_with_models(&sh.cfg, &sh.models)?;
    let b = run_with_models(&sh.cfg, &sh.models)?;
    let json_same = a.report.to_json() == b.report.to_json();

    let split = make_split(&sh.cfg)?;
    let data = train_data(&split)?;
    let tr = Trainer::new(&sh.cfg.train, &data, &sh.models)?;
    let half = tr.total_steps() / 2 + 1;
    let (mid, _) = tr.run(tr.initial()?, Some(half), &mut |_| Ok(()))?;
    let path = scratch().join("resume.ckpt");
    std::fs::create_dir_all(scratch())?;
    mid.save(&path)?;
    let (done, _) = resume(Checkpoint::load(&path)?, &sh.cfg.train, &data, &sh.models, None)?;
    let resume_same =
        CheckpointFile::to_bytes(&done.to_file()) == CheckpointFile::to_bytes(&a.checkpoint.to_file());
    verdict(
        json_same && resume_same,
        format!(
            "report JSON byte-identical: {json_same}; resume from step {half} of {} bit-exact: {resume_same}",
            tr.total_steps()
        ),
    )
}

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut record = |name: &'static str, v: Result<Verdict>| match v {
        Ok(v) => {
            println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
            results.push((name, v));
        }
        Err(e) => panic!("{name} crashed: {e}"),
    };

    record("projection invariants", projection_invariants());
    record("gradient correctness", gradient_correctness());
    record("delaunay oracle", delaunay_oracle());
    record("laplacian properties", laplacian_properties());
    record("ddim inversion and gaussian sampling", ddim_inversion());

    let t = Instant::now();
    let cfg = ExperimentConfig::from_manifest(&base_manifest()).expect("default manifest");
    let models = prep_stage(&cfg).unwrap_or_else(|e| panic!("prep crashed: {e}"));
    println!("prep ready in {:.1}s", t.elapsed().as_secs_f64());
    let shared = Shared { cfg, models };

    match theorem_harnesses(&shared) {
        Ok((m, c)) => {
            record("momentum bound trend", Ok(m));
            record("convergence envelope", Ok(c));
        }
        Err(e) => panic!("theorem harnesses crashed: {e}"),
    }
    match ablation_and_runs() {
        Ok((a, p, s)) => {
            record("ablation ordering", Ok(a));
            record("protocol sanity", Ok(p));
            record("spectrum check", Ok(s));
        }
        Err(e) => panic!("ablation crashed: {e}"),
    }
    record("reproducibility", reproducibility(&shared));

    let failed: Vec<&str> = results.iter().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if strict && !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
