use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use equiada::adapter::FusedDenoiser;
use equiada::diffusion::{sample, SeededNoise};
use equiada::harness::{
    audit_checkpoints, evaluate, finetune, finetune_example, pretrain, pretrain_example, schedule, Checkpoint,
    EvalOptions, RunConfig,
};
use equiada::simdata::{make_dataset, read_split, simulate_charged, write_dataset_dir, SimParams, Split};

#[derive(Parser)]
#[command(
    name = "equiada",
    version,
    about = "Equivariant adapters for trajectory diffusion models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a charged-particle dataset into a directory.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a base denoiser.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an adapter on a frozen base.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw one trajectory.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory holding the context record; a fresh record is
        /// simulated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Test record used as context.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Write a metric report.
    Eval {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Check equivariance of stored models.
    Audit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::desk()),
    }
}

fn read_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate { config: c, out } => {
            let cfg = config(c.as_deref())?;
            let data = make_dataset(&cfg.dataset_config())?;
            write_dataset_dir(&out, &data)?;
            log::info!(
                "wrote {} / {} / {} records to {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                out.display()
            );
        }
        Command::Pretrain { config: c, data, out } => {
            let cfg = config(c.as_deref())?;
            let report = pretrain(&cfg, &read_split(&data, Split::Train)?, &read_split(&data, Split::Val)?)?;
            report.best.write(&out)?;
            println!("best_val_loss\t{:?}", report.best_val_loss());
        }
        Command::Finetune {
            base,
            config: c,
            data,
            out,
        } => {
            let cfg = config(c.as_deref())?;
            let base = read_ckpt(&base)?;
            let report = finetune(
                &base,
                &cfg,
                &read_split(&data, Split::Train)?,
                &read_split(&data, Split::Val)?,
            )?;
            report.best.write(&out)?;
            println!("best_val_loss\t{:?}", report.best_val_loss());
        }
        Command::Sample {
            ckpt,
            adapter,
            seed,
            out,
            data,
            index,
        } => {
            let base = read_ckpt(&ckpt)?;
            let ad = adapter.as_deref().map(read_ckpt).transpose()?;
            let cfg = ad.as_ref().map_or(&base.config, |a| &a.config);
            let record = match data {
                Some(d) => {
                    let test = read_split(&d, Split::Test)?;
                    match test.get(index) {
                        Some(r) => r.clone(),
                        None => bail!("test split has {} records, index {index} requested", test.len()),
                    }
                }
                None => simulate_charged(cfg.particles, cfg.record_frames(), &SimParams::default(), seed)?,
            };
            let sched = schedule(&base.config)?;
            let mut noise = SeededNoise::new(seed);
            let x = match &ad {
                Some(a) => {
                    let (model, stack) = a.stack(&base)?;
                    let ex = finetune_example(&record, &a.config)?;
                    sample(
                        &FusedDenoiser::new(&model, &stack),
                        &ex.input(),
                        &sched,
                        &mut noise,
                        &mut |_, _| {},
                    )?
                }
                None => {
                    let ex = pretrain_example(&record, &base.config)?;
                    sample(&base.model()?, &ex.input(), &sched, &mut noise, &mut |_, _| {})?
                }
            };
            let (n, t) = (x.shape()[0], x.shape()[1]);
            let mut text = String::from("node\tframe\tx\ty\tz\n");
            for i in 0..n {
                for f in 0..t {
                    let o = (i * t + f) * 3;
                    let d = x.data();
                    let _ = writeln!(text, "{i}\t{f}\t{:?}\t{:?}\t{:?}", d[o], d[o + 1], d[o + 2]);
                }
            }
            std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Eval {
            base,
            adapter,
            data,
            report,
        } => {
            let base = read_ckpt(&base)?;
            let ad = adapter.as_deref().map(read_ckpt).transpose()?;
            let test = read_split(&data, Split::Test)?;
            let opts = EvalOptions::from_config(ad.as_ref().map_or(&base.config, |a| &a.config));
            let r = evaluate(&base, ad.as_ref(), &test, &opts)?;
            std::fs::write(&report, r.render()).with_context(|| format!("writing {}", report.display()))?;
            print!("{}", r.render());
        }
        Command::Audit {
            ckpt,
            adapter,
            trials,
            tol,
            seed,
        } => {
            let base = read_ckpt(&ckpt)?;
            let ad = adapter.as_deref().map(read_ckpt).transpose()?;
            let cfg = ad.as_ref().map_or(&base.config, |a| &a.config);
            let record = simulate_charged(cfg.particles, cfg.record_frames(), &SimParams::default(), seed)?;
            let reports = audit_checkpoints(&base, ad.as_ref(), &record, trials, tol, seed)?;
            let mut ok = true;
            for (name, r) in &reports {
                println!(
                    "{name}\t{}\t{:e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.max_deviation
                );
                ok &= r.passed;
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
