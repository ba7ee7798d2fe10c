use std::path::PathBuf;
use std::process::ExitCode;

use cilcomp::experiments::{self, RunConfig};
use cilcomp::tasks::Scope;
use cilcomp::{Error, Result};
use clap::{Args, Parser, Subcommand};
use log::error;

/// Class-incremental learning with compressed exemplar buffers.
#[derive(Parser)]
#[command(name = "cilcomp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration value, e.g. `--set train.lr=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config, &self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Load the dataset, build the task sequence and price the budget.
    Prepare(Common),
    /// Rate-distortion curves of the candidate codecs.
    RdCurve(Common),
    /// Forgetting probe over each candidate's quality grid.
    ProbeRate(Common),
    /// Probe rates, then pick the codec with the lowest feature distortion.
    SelectCodec(Common),
    /// Full pipeline: select a codec if needed, train every task, report.
    Train(Common),
    /// One trajectory evaluated on processed and unprocessed test data.
    DomainShift(Common),
    /// Recompute the report of a run from its saved predictions.
    Report(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(c) => {
            let cfg = c.load()?;
            let p = experiments::prepare(&cfg)?;
            println!(
                "{}: {} classes in {} tasks, {} train / {} test samples, {:.3} bpp, budget {} bytes ({} images)",
                p.dataset.name,
                p.dataset.num_classes(),
                p.sequence.num_tasks(),
                p.dataset.train.len(),
                p.dataset.test.len(),
                p.bpp_ori,
                p.budget.bytes,
                p.budget.reference_image_count
            );
        }
        Command::RdCurve(c) => {
            for r in experiments::rd_stage(&c.load()?)? {
                println!("{}\t{:.4} bpp\t{:.2} dB", r.codec, r.mean_bpp, r.mean_psnr);
            }
        }
        Command::ProbeRate(c) => {
            let cfg = c.load()?;
            let p = experiments::prepare(&cfg)?;
            let out = experiments::probe_rates(&cfg, &p)?;
            for r in &out.results {
                println!("{}\t{:.4} bpp\t{} exemplars\tforgetting {:+.4}", r.codec, r.bpp, r.exemplars, r.forgetting);
            }
            for r in &out.selected {
                println!("selected {}", r.codec);
            }
        }
        Command::SelectCodec(c) => {
            let cfg = c.load()?;
            let p = experiments::prepare(&cfg)?;
            let probes = experiments::probe_rates(&cfg, &p)?;
            let sel = experiments::select_codec_stage(&cfg, &p, &probes)?;
            for s in &sel.scores {
                println!("{}\tF_MSE {:.6}\t{:.4} bpp\t{:.2} dB", s.codec, s.f_mse, s.mean_bpp, s.mean_psnr);
            }
            println!("selected {}", sel.selected);
        }
        Command::Train(c) => {
            let rec = experiments::run_pipeline(&c.load()?)?;
            println!("{}", serde_json::to_string_pretty(&rec)?);
        }
        Command::DomainShift(c) => {
            let mut matched = c.load()?;
            if matched.compression.scope != Scope::ExemplarsOnly {
                return Err(Error::Config("domain-shift needs compression.scope = \"exemplars_only\"".into()));
            }
            matched.compression.compress_test = true;
            let mut mismatched = matched.clone();
            mismatched.compression.compress_test = false;
            let rep = experiments::domain_shift_report(&matched, &mismatched)?;
            println!("step\tmatched_old\tmismatched_old");
            for i in 0..rep.steps.len() {
                let f = |v: Option<f64>| v.map(|x| format!("{:.4}", x)).unwrap_or_else(|| "-".into());
                println!("{}\t{}\t{}", rep.steps[i], f(rep.matched_old[i]), f(rep.mismatched_old[i]));
            }
        }
        Command::Report(c) => {
            let cfg = c.load()?;
            let check = experiments::report(&cfg.output_dir)?;
            println!(
                "{} of {} steps, avg {}, last {}, max deviation {:e}, budget {}",
                check.record.steps.len(),
                check.record.num_tasks,
                check.record.avg_accuracy.map(|v| format!("{:.4}", v)).unwrap_or_else(|| "-".into()),
                check.record.last_accuracy.map(|v| format!("{:.4}", v)).unwrap_or_else(|| "-".into()),
                check.max_deviation,
                if check.budget_ok { "ok" } else { "exceeded" }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
