use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use protodetect::commands;
use protodetect::config::LoadedConfig;
use protodetect::inference::ProtocolMode;
use protodetect::Result;

#[derive(Parser)]
#[command(
    name = "protodetect",
    version,
    about = "Prototype-based few-shot and open-set detection head"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value by dot path, e.g. `train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for scene-parallel inference.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic proposal dataset.
    GenData(Common),
    /// Two-stage training; writes checkpoint, bank and run log.
    Train(Common),
    /// Run one evaluation protocol and write detections and reports.
    Eval {
        #[command(flatten)]
        common: Common,
        /// fewshot, openset, zs-uo, zs-mpu or zs-mps; defaults to protocol.mode.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck(Common),
}

fn load(c: &Common) -> Result<LoadedConfig> {
    LoadedConfig::load(&c.config, &c.overrides)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let ctx = load(&c)?;
            let s = commands::gen_data(&ctx)?;
            println!("wrote {} ({} scenes)", s.path.display(), s.scenes);
            println!("config_hash {}", ctx.hash);
            println!("dataset_digest {}", s.digest);
        }
        Command::Train(c) => {
            let ctx = load(&c)?;
            let s = commands::train(&ctx)?;
            if let Some(r) = &s.metrics.final_step {
                println!(
                    "step {} stage {} l_total {:.6} accuracy {:.4}",
                    r.step, r.stage, r.l_total, r.accuracy
                );
            }
            if let Some(a) = s.metrics.heldout_accuracy {
                println!("heldout_accuracy {a:.4}");
            }
            println!("wrote {} and {}", s.checkpoint.display(), s.log.display());
        }
        Command::Eval { common, mode } => {
            let ctx = load(&common)?;
            let mode = mode.as_deref().map(ProtocolMode::parse).transpose()?;
            let s = commands::eval(&ctx, mode, common.threads)?;
            for a in &s.report.aggregates {
                let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
                println!(
                    "{} {}: mAP {} mAR {}",
                    s.report.protocol,
                    a.group,
                    fmt(a.map),
                    fmt(a.mar)
                );
            }
            println!("wrote {} and {}", s.csv.display(), s.json.display());
        }
        Command::Gradcheck(c) => {
            let ctx = load(&c)?;
            commands::gradcheck(&ctx, |report| {
                print!("{}", report.table());
                for (loss, worst) in report.max_per_loss() {
                    println!("max {} {:.3e}", loss.name(), worst);
                }
            })?;
            println!("all gradients within tolerance");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
