use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use emoshield::experiment::{
    ablate, eval_stage, load_images, make_split, prep_stage, protect_stage, save_images,
    train_data, ExperimentConfig, Manifest,
};
use emoshield::theorems::run_all;
use emoshield::trainer::{Checkpoint, Trainer};
use emoshield::Result;

#[derive(Parser)]
#[command(name = "emoshield", version, about = "Identity-protecting expression edits with a fine-tuned toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Manifest file (flat key = value).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Training seed; overrides the manifest's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the manifest's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` manifest entries, applied last.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and train (or load cached) frozen models.
    Prep(Common),
    /// Fine-tune the score network.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop once this global step is reached.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Protect the evaluation split with the trained checkpoint.
    Protect(Common),
    /// Score protected images: PSR, rank-N, quality proxies, spectra.
    Eval(Common),
    /// Baseline / no-projection / no-smoothness runs over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at `--seed` (default 0).
        #[arg(long, default_value_t = 8)]
        seeds: u64,
    },
    /// Momentum-bound and convergence harnesses.
    Theorems {
        #[command(flatten)]
        common: Common,
        /// Steps of the fine-tune convergence run.
        #[arg(long, default_value_t = 5000)]
        steps: u64,
    },
    /// prep, train, protect and eval in one go.
    Run(Common),
}

fn manifest(c: &Common) -> Result<Manifest> {
    let mut m = match &c.manifest {
        Some(p) => Manifest::load(p)?,
        None => Manifest::default(),
    };
    if let Some(s) = c.seed {
        m.set("seed", &s.to_string());
    }
    if let Some(o) = &c.out {
        m.set("out_dir", &o.display().to_string());
    }
    for kv in &c.overrides {
        m.apply_override(kv)?;
    }
    Ok(m)
}

fn setup(c: &Common) -> Result<(Manifest, ExperimentConfig)> {
    let m = manifest(c)?;
    let cfg = ExperimentConfig::from_manifest(&m)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("manifest.echo"), m.to_text())?;
    Ok((m, cfg))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn skipped_from_metrics(path: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let Some(col) = header.split(',').position(|h| h == "skipped_emotion") else {
        return Ok(0);
    };
    Ok(lines
        .filter_map(|l| l.split(',').nth(col)?.parse::<usize>().ok())
        .sum())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prep(c) => {
            let (_, cfg) = setup(&c)?;
            let models = prep_stage(&cfg)?;
            let g = &models.gates;
            write(
                &cfg.out_dir.join("gates.json"),
                &format!(
                    "{{\n  \"encoder_auc\": {:?},\n  \"vis_r2\": {},\n  \"regressor_px\": {}\n}}\n",
                    g.encoder_auc, g.vis_r2, g.regressor_px
                ),
            )?;
            let split = make_split(&cfg)?;
            let ds = &split.dataset;
            let set = ds.landmark_set(split.reference)?;
            let tri = emoshield::landmarks::delaunay(set.points())?;
            write(&cfg.out_dir.join("landmarks.csv"), &set.to_csv())?;
            write(&cfg.out_dir.join("triangles.csv"), &tri.to_csv())?;
        }
        Command::Train {
            common,
            resume: res,
            stop_after,
        } => {
            let (_, cfg) = setup(&common)?;
            let models = prep_stage(&cfg)?;
            let split = make_split(&cfg)?;
            let data = train_data(&split)?;
            let ckpt_path = cfg.out_dir.join("checkpoint.ckpt");
            let (start, metrics_name) = if res {
                let c = Checkpoint::load(&ckpt_path)?;
                let name = format!("metrics-from-{}.csv", c.step);
                (Some(c), name)
            } else {
                (None, "metrics.csv".to_string())
            };
            let tr = Trainer::new(&cfg.train, &data, &models)?;
            let start = match start {
                Some(c) => c,
                None => tr.initial()?,
            };
            let mut save = |c: &Checkpoint| c.save(&ckpt_path);
            let (ckpt, log) = tr.run(start, stop_after, &mut save)?;
            ckpt.save(&ckpt_path)?;
            println!("wrote {} (step {})", ckpt_path.display(), ckpt.step);
            write(&cfg.out_dir.join(metrics_name), &log.to_csv())?;
        }
        Command::Protect(c) => {
            let (_, cfg) = setup(&c)?;
            let models = prep_stage(&cfg)?;
            let split = make_split(&cfg)?;
            let ckpt = Checkpoint::load(&cfg.out_dir.join("checkpoint.ckpt"))?;
            let prot = protect_stage(&cfg, &split, &ckpt, &models)?;
            let path = cfg.out_dir.join("protected.ckpt");
            save_images(&path, &prot)?;
            println!("wrote {}", path.display());
        }
        Command::Eval(c) => {
            let (_, cfg) = setup(&c)?;
            let models = prep_stage(&cfg)?;
            let split = make_split(&cfg)?;
            let ckpt = Checkpoint::load(&cfg.out_dir.join("checkpoint.ckpt"))?;
            let prot = load_images(&cfg.out_dir.join("protected.ckpt"))?;
            let metrics = cfg.out_dir.join("metrics.csv");
            let skipped = if metrics.exists() {
                skipped_from_metrics(&metrics)?
            } else {
                0
            };
            let (report, spectra) = eval_stage(&cfg, &split, &models, &prot, ckpt.step, skipped)?;
            write(&cfg.out_dir.join("report.json"), &report.to_json())?;
            write(&cfg.out_dir.join("spectra.csv"), &spectra.to_csv())?;
        }
        Command::Ablate { common, seeds } => {
            let m = manifest(&common)?;
            let cfg = ExperimentConfig::from_manifest(&m)?;
            let start = common.seed.unwrap_or(0);
            let list: Vec<u64> = (start..start + seeds).collect();
            let s = ablate(&m, &list, Some(&cfg.out_dir))?;
            print!("{}", s.to_csv());
            for c in [&s.projection, &s.smoothness] {
                println!(
                    "baseline vs {}: {} wins, {} losses, {} ties, p = {:.4}",
                    c.against, c.wins, c.losses, c.ties, c.p_value
                );
            }
        }
        Command::Theorems { common, steps } => {
            let (_, cfg) = setup(&common)?;
            let models = prep_stage(&cfg)?;
            let mut split = make_split(&cfg)?;
            split.train.truncate(cfg.train.batch);
            let data = train_data(&split)?;
            let out = run_all(&data, &models, steps, cfg.train.seed)?;
            let d = &cfg.out_dir;
            write(&d.join("momentum.csv"), &out.momentum.to_csv())?;
            write(&d.join("convergence_quadratic.csv"), &out.quadratic.to_csv())?;
            write(&d.join("convergence_control.csv"), &out.control.to_csv())?;
            write(&d.join("convergence_finetune.csv"), &out.finetune.to_csv())?;
            write(
                &d.join("theorems.json"),
                &out.summary.to_json(),
            )?;
        }
        Command::Run(c) => {
            let m = manifest(&c)?;
            let out = emoshield::experiment::run_experiment(&m)?;
            let cfg = ExperimentConfig::from_manifest(&m)?;
            println!("wrote {}", cfg.out_dir.join("report.json").display());
            print!("{}", out.report.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
