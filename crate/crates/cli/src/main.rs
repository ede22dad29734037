use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pathnet_cli::run;
use pathnet_cli::sobol::{self, SobolOptions};
use pathnet_cli::{ExperimentConfig, Failure};

#[derive(Parser)]
#[command(name = "pathnet", version, about = "Train and analyse sparse networks built from paths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump Sobol' points or permutation blocks as CSV.
    Sobol(SobolArgs),
    /// Generate a path topology container.
    GenTopology(Common),
    /// Train a model and write metrics and containers.
    Train(Common),
    /// Evaluate a saved model on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Sample a sparse network from a trained dense model.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Report valence, coalesced edges and bank conflicts of a topology.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Saved topology; without it the configured topology is generated.
        #[arg(long)]
        topology: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SobolArgs {
    #[arg(long, default_value_t = 1)]
    dims: usize,
    #[arg(long)]
    count: Option<u64>,
    #[arg(long)]
    block_log2: Option<u32>,
    #[arg(long, default_value_t = 0)]
    scramble_seed: u64,
    #[arg(long)]
    matrix_file: Option<PathBuf>,
    /// Read a dump from standard input and print the recovered indices.
    #[arg(long)]
    inverse: bool,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.lr=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset directory (defaults to $PATHNET_DATA).
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the topology, the initialization and the example order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Failure> {
        let mut overrides = Vec::new();
        if let Some(s) = self.seed {
            overrides.extend([format!("topology.seed={s}"), format!("train.init_seed={s}"), format!("train.shuffle_seed={s}")]);
        }
        if self.deterministic {
            overrides.push("train.deterministic=true".into());
        }
        overrides.extend(self.overrides.iter().cloned());
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), &overrides)?;
        if let Some(root) = &self.data_root {
            cfg.data.root = root.clone();
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    match cli.command {
        Command::Sobol(a) => {
            let opts = SobolOptions {
                dims: a.dims,
                count: a.count,
                block_log2: a.block_log2,
                scramble_seed: a.scramble_seed,
                matrix_file: a.matrix_file,
            };
            if a.inverse {
                sobol::write_inverse(&opts, io::stdin().lock(), &mut out)?;
            } else {
                sobol::write_points(&opts, &mut out)?;
            }
        }
        Command::GenTopology(c) => {
            let (t, path) = run::cmd_gen_topology(&c.resolve()?)?;
            writeln!(out, "{} paths over {:?} -> {}", t.num_paths(), t.layers().sizes(), path.display())?;
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let outcome = run::cmd_train(&cfg, |m| {
                eprintln!(
                    "epoch {:>3}  train_loss {:.4}  test_loss {:.4}  test_acc {:.2}%  ({:.1}s)",
                    m.epoch,
                    m.train_loss,
                    m.test_loss,
                    100.0 * m.test_accuracy,
                    m.seconds
                )
            })?;
            out.write_all(run::metrics_csv(&outcome.metrics).as_bytes())?;
        }
        Command::Eval { common, model } => {
            let r = run::cmd_eval(&common.resolve()?, &model)?;
            writeln!(out, "count,test_loss,test_accuracy\n{},{:.6},{:.4}", r.count, r.mean_loss, 100.0 * r.accuracy)?;
        }
        Command::Prune { common, model } => {
            let cfg = common.resolve()?;
            run::cmd_prune(&cfg, &model)?;
            out.write_all(&std::fs::read(cfg.output.dir.join(run::PRUNE_FILE))?)?;
        }
        Command::Analyze { common, topology } => {
            out.write_all(run::cmd_analyze(&common.resolve()?, topology.as_deref())?.as_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pathnet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
