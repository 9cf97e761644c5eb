use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffalloc::pipeline::{self, ExperimentConfig};
use diffalloc::store::{read_buffers, read_buffers_for, read_dataset, write_json};
use diffalloc::trainer::trace_csv;
use diffalloc::{Checkpoint, Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "diffalloc", version, about = "Diffusion-model power allocation experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Preset name (`desk`, `full`) or path to an experiment JSON file.
    #[arg(long, global = true, default_value = "desk")]
    config: String,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-network work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the network dataset and calibrate the rate requirement.
    Netgen,
    /// Run dual descent on every network and store the primal iterates.
    Expert {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit the noise predictor to the expert buffers.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        buffers: PathBuf,
    },
    /// Roll out GDM, expert replay and both baselines on the test networks.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        buffers: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "T")]
        steps: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
    },
    /// Run every stage, reusing up-to-date artifacts in `--out`.
    Pipeline,
    /// Dump two-node scatter data of expert and generated samples.
    Slice {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        buffers: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        network: usize,
        /// Node pairs such as `0-1,2-5`.
        #[arg(long, value_delimiter = ',', value_parser = parse_pair, default_value = "0-1")]
        pairs: Vec<(usize, usize)>,
        #[arg(long, default_value_t = 500)]
        samples: usize,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once('-').ok_or_else(|| format!("expected i-j, got {s}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

fn out_or(global: &Global, default: &str) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = ExperimentConfig::load(&g.config)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Netgen => {
            let path = out_or(g, pipeline::NETWORKS_FILE);
            ensure_parent(&path)?;
            let dataset = pipeline::run_netgen(&cfg, g.jobs)?;
            write_json(&path, &dataset)?;
            println!(
                "{} networks, f_min = {:.6} -> {}",
                dataset.networks.len(),
                dataset.network.f_min,
                path.display()
            );
        }
        Command::Expert { data } => {
            let path = out_or(g, pipeline::BUFFERS_FILE);
            ensure_parent(&path)?;
            let dataset = read_dataset(&data)?;
            let digest = diffalloc::store::file_digest(&data)?;
            let set = pipeline::run_expert_stage(&cfg, &dataset, &digest, g.jobs)?;
            write_json(&path, &set)?;
            let feasible =
                set.buffers.iter().map(|b| b.report.satisfied_fraction).sum::<f64>() / set.buffers.len() as f64;
            println!(
                "{} buffers, in-run satisfaction {:.3} -> {}",
                set.buffers.len(),
                feasible,
                path.display()
            );
        }
        Command::Train { data, buffers } => {
            let dir = out_or(g, ".");
            std::fs::create_dir_all(&dir)?;
            let dataset = read_dataset(&data)?;
            let set = read_buffers_for(&buffers, &data)?;
            let outcome = pipeline::run_train_stage(&cfg, &dataset, &set)?;
            outcome.best.save(&dir.join(pipeline::CHECKPOINT_FILE))?;
            std::fs::write(dir.join(pipeline::TRACE_FILE), trace_csv(&outcome.trace))?;
            if let Some(reason) = outcome.diverged {
                return Err(Error::Numerical(format!(
                    "training diverged at {reason}; last good checkpoint kept"
                )));
            }
            println!("best checkpoint from epoch {} -> {}", outcome.best.epoch, dir.display());
        }
        Command::Eval {
            data,
            buffers,
            ckpt,
            steps,
            horizons,
        } => {
            if let Some(t) = steps {
                cfg.eval.steps = t;
            }
            if let Some(h) = horizons {
                cfg.eval.horizons = h;
            }
            cfg.validate()?;
            let dir = out_or(g, ".");
            let dataset = read_dataset(&data)?;
            let set = read_buffers_for(&buffers, &data)?;
            let checkpoint = Checkpoint::load(&ckpt)?;
            let eval = pipeline::run_eval_stage(&cfg, &dataset, &set, &checkpoint, g.jobs)?;
            pipeline::write_eval(&dir, &eval)?;
            print!("{}", eval.summary.table.to_csv());
        }
        Command::Pipeline => {
            let dir = out_or(g, "run");
            let outcome = pipeline::run_pipeline(&cfg, &dir, g.jobs)?;
            println!(
                "ran: [{}]  skipped: [{}]",
                outcome.ran.join(", "),
                outcome.skipped.join(", ")
            );
            let table = std::fs::read_to_string(dir.join(pipeline::COMPARISON_CSV))?;
            print!("{table}");
        }
        Command::Slice {
            data,
            buffers,
            ckpt,
            network,
            pairs,
            samples,
        } => {
            let dataset = read_dataset(&data)?;
            let set = read_buffers(&buffers)?;
            let checkpoint = Checkpoint::load(&ckpt)?;
            let csv = pipeline::slice(&dataset, &set, &checkpoint, network, &pairs, samples, cfg.seed)?;
            match &g.out {
                Some(path) => {
                    ensure_parent(path)?;
                    std::fs::write(path, csv)?;
                }
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
