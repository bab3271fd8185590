//! `hpm` command line: pretraining, probing, kNN, visualization, mask
//! ablation sweeps, and the gradient self-test. Exit codes: 0 success,
//! 2 contract/config error, 3 IO error.

use clap::{Parser, Subcommand};
use hpm::commands;
use hpm::config::RunConfig;
use hpm::engine::mask::MaskPolicy;
use hpm::error::{HpmError, Result};
use hpm::eval::SubsetRule;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "hpm", about = "Masked visual pretraining with hard-patch mining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run pretraining from a config file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint produced by the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on frozen features.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// all | top50_pred_loss | bottom50_pred_loss | random50
        #[arg(long, default_value = "all")]
        subset: String,
    },
    /// Cosine kNN on frozen features.
    Knn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated neighbor counts.
        #[arg(long, default_value = "1,5,10")]
        k: String,
    },
    /// Write the input/heatmap/mask image triple for one image.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Policy x schedule sweep with shared seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated: random,argmax,argmin
        #[arg(long, default_value = "random,argmax")]
        policies: String,
        /// Comma-separated alpha0:alphaT pairs, e.g. 0:0.5,0.5:0
        #[arg(long, default_value = "0:0.5")]
        schedules: String,
    },
    /// Finite-difference check of every primitive and one train step.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var("HPM_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| HpmError::Config(format!("HPM_SEED '{v}' is not an integer"))),
        Err(_) => Ok(None),
    }
}

fn parse_list<T, F: Fn(&str) -> Result<T>>(s: &str, what: &str, f: F) -> Result<Vec<T>> {
    let items: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    if items.is_empty() {
        return Err(HpmError::Config(format!("empty {what} list")));
    }
    items.into_iter().map(f).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, resume } => {
            let cfg = load_config(&config)?;
            let out = commands::cmd_pretrain(&cfg, resume.as_deref())?;
            println!(
                "pretrain done: {} (held-out l_rec {} -> {})",
                out.final_checkpoint.display(),
                out.initial_heldout_l_rec,
                out.final_heldout_l_rec
            );
        }
        Command::Probe { ckpt, data, subset } => {
            let rule = SubsetRule::parse(&subset)?;
            let report = commands::cmd_probe(&ckpt, &data, rule)?;
            println!("{} = {}", report.metric, report.value);
        }
        Command::Knn { ckpt, data, k } => {
            let ks = parse_list(&k, "k", |p| {
                p.parse::<usize>()
                    .map_err(|_| HpmError::Config(format!("bad k '{p}'")))
            })?;
            for report in commands::cmd_knn(&ckpt, &data, &ks)? {
                match report.k {
                    Some(k) => println!("knn k={k} accuracy = {}", report.value),
                    None => println!("knn best = {}", report.value),
                }
            }
        }
        Command::Viz { ckpt, image, out } => {
            let paths = commands::cmd_visualize(&ckpt, &image, &out)?;
            println!(
                "wrote {} {} {}",
                paths.input.display(),
                paths.heatmap.display(),
                paths.masked.display()
            );
        }
        Command::Ablate { config, policies, schedules } => {
            let cfg = load_config(&config)?;
            let pols = parse_list(&policies, "policy", MaskPolicy::parse)?;
            let scheds = parse_list(&schedules, "schedule", |p| {
                let (a, b) = p.split_once(':').ok_or_else(|| {
                    HpmError::Config(format!("schedule '{p}' is not alpha0:alphaT"))
                })?;
                let a0 = a
                    .parse::<f64>()
                    .map_err(|_| HpmError::Config(format!("bad alpha0 '{a}'")))?;
                let at = b
                    .parse::<f64>()
                    .map_err(|_| HpmError::Config(format!("bad alphaT '{b}'")))?;
                Ok((a0, at))
            })?;
            for cell in commands::cmd_ablate(&cfg, &pols, &scheds)? {
                println!(
                    "{} {} a0={} aT={}: l_rec={} probe={}",
                    cell.policy.as_str(),
                    cell.label,
                    cell.alpha0,
                    cell.alpha_t,
                    cell.final_l_rec,
                    cell.probe_accuracy
                );
            }
        }
        Command::Gradcheck { config } => {
            let cfg = load_config(&config)?;
            let gc = commands::cmd_gradcheck(&cfg)?;
            print!("{}", gc.report());
            if !gc.passed() {
                return Err(HpmError::Contract(format!(
                    "gradient check failed: {}",
                    gc.failures().join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
