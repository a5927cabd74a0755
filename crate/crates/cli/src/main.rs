//! Command-line front end: data generation, static pre-training, search,
//! cell training, fine-tuning, evaluation and reporting.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cellsearch::checkpoint;
use cellsearch::config::Config;
use cellsearch::genotype::{cell_param_count, describe, emit_dot, space_size, Genotype};
use cellsearch::pipeline::{self, Workspace};
use cellsearch::search::{report, RunLog};
use cellsearch::Error;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "cellsearch", version, about = "Search recurrent decoder cells for video segmentation")]
struct Cli {
    /// TOML config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into <out-dir>/data.
    GenData,
    /// Pre-train the static network.
    PretrainStatic,
    /// Run the controller search over cells.
    Search {
        /// After the search, also print this many cells sampled from the
        /// trained controller.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Train one cell on the meta splits.
    TrainCell { genotype: Genotype },
    /// Fine-tune a cell together with the static network.
    Finetune { genotype: Genotype },
    /// Score a static or cell checkpoint on the validation split.
    Eval { checkpoint: PathBuf },
    /// Print a genotype's graph, parameter count and DOT source.
    Decode { tokens: String },
    /// Write reward and sampling-proportion tables for a run log.
    Report {
        runlog: PathBuf,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Print the effective config.
    Config,
}

fn load_config(cli: &Cli) -> Result<Config, Error> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.data.seed = s;
        cfg.search.seed = s;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let ws = Workspace::new(&cli.out_dir);
    match &cli.command {
        Command::GenData => {
            let ds = pipeline::gen_data(&cfg, &ws)?;
            println!("wrote {} sequences to {}", ds.len(), ws.data_dir().display());
        }
        Command::PretrainStatic => {
            let data = pipeline::load_data(&cfg, &ws)?;
            let (_, rep) = pipeline::pretrain(&cfg, &ws, &data)?;
            println!(
                "static val reward {:.4} (majority class {:.4}); saved {}",
                rep.val.reward,
                rep.majority.reward,
                ws.static_ckpt().display()
            );
        }
        Command::Search { sample } => {
            let data = pipeline::load_data(&cfg, &ws)?;
            let net = pipeline::load_static(&ws)?;
            let (_, summary) = pipeline::search(&cfg, &ws, &data, &net)?;
            print_json(&summary)?;
            if *sample > 0 {
                let (ctrl, _) = checkpoint::load_controller(&ws.controller_ckpt())?;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5A3B_1E);
                for _ in 0..*sample {
                    let (g, trace) = ctrl.sample_genotype(&mut rng)?;
                    println!("{g}  logp {:.3}", trace.total_logprob());
                }
            }
        }
        Command::TrainCell { genotype } => {
            check_k(genotype, &cfg);
            let data = pipeline::load_data(&cfg, &ws)?;
            let net = pipeline::load_static(&ws)?;
            let (_, run) = pipeline::train_one(&cfg, &ws, &data, &net, genotype)?;
            print_json(&run.report)?;
            println!("saved {}", ws.cell_ckpt(genotype).display());
        }
        Command::Finetune { genotype } => {
            let data = pipeline::load_data(&cfg, &ws)?;
            let s = pipeline::finetune_one(&cfg, &ws, &data, genotype)?;
            println!(
                "reward {:.4} -> {:.4}; copy-forward {:.4}; margin {:+.4}",
                s.before.reward, s.after.reward, s.copy_forward.reward, s.margin
            );
            println!("saved {}", ws.finetune_dir(genotype).display());
        }
        Command::Eval { checkpoint } => {
            let data = pipeline::load_data(&cfg, &ws)?;
            print_json(&pipeline::evaluate_checkpoint(&ws, &data, checkpoint)?)?;
        }
        Command::Decode { tokens } => {
            let g: Genotype = tokens.parse()?;
            println!("{}", describe(&g));
            println!(
                "parameters: {}",
                cell_param_count(&g, &cfg.net.cell_dims())
            );
            println!("search space size at K={}: {}", g.k(), space_size(g.k())?);
            println!();
            print!("{}", emit_dot(&g));
        }
        Command::Report { runlog, window } => {
            let log = RunLog::read_jsonl(runlog)?;
            let rep = report(&log, window.unwrap_or(cfg.report_window))?;
            let dir = runlog.parent().unwrap_or(Path::new(".")).join("report");
            rep.write(&dir)?;
            println!("{} candidates; tables in {}", log.records.len(), dir.display());
        }
        Command::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn check_k(g: &Genotype, cfg: &Config) {
    if g.k() != cfg.search.k {
        log::warn!("genotype has K={} but the search config uses K={}", g.k(), cfg.search.k);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) => 3,
        _ => 1,
    }
}
