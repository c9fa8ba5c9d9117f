use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use graphbridge::baselines::ReducerKind;
use graphbridge::graph::{generate_synthetic, save_graph, SyntheticSpec};
use graphbridge::gradsuite::{run_gradient_suite, GradModel};
use graphbridge::pipeline::{
    cmd_ablate, cmd_account, cmd_linkpred, cmd_reference, cmd_run, cmd_sweep, DataSource, ExperimentConfig, SweepParam,
};

#[derive(Parser)]
#[command(name = "graphbridge", version, about = "Token-reduced text encoding plus GNN on text-attributed graphs")]
struct Cli {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (and the synthetic graph seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts and reports.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Overrides the token reducer.
    #[arg(long, global = true)]
    reducer: Option<ReducerKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-partition graph as nodes.jsonl and edges.txt.
    GenSynthetic,
    /// Run the full staged pipeline once.
    Run,
    /// One run per value of a parameter.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Every reducer under every seed.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        reducers: Vec<ReducerKind>,
    },
    /// Link prediction AUC over several seeds.
    Linkpred {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Sequence-length accounting with and without reduction.
    Account {
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        walk_steps: Vec<usize>,
    },
    /// Finite-difference checks of every hand-written gradient.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        fixtures: usize,
    },
    /// Text-only and bag-of-words reference models.
    Reference,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.reseeded(seed);
    }
    if let Some(reducer) = cli.reducer {
        config.reducer = reducer;
    }
    config.validate()?;
    Ok(config)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: &Cli) -> Result<bool> {
    let config = load_config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::GenSynthetic => {
            let spec = match &config.data {
                DataSource::Synthetic(spec) => spec.clone(),
                DataSource::Files { .. } => SyntheticSpec {
                    seed: config.seed,
                    ..SyntheticSpec::default()
                },
            };
            let (graph, split) = generate_synthetic(&spec)?;
            create_dir(out)?;
            save_graph(&graph, &split, &out.join("nodes.jsonl"), &out.join("edges.txt"))?;
            log::info!("wrote {} nodes and {} edges to {}", graph.num_nodes(), graph.num_edges(), out.display());
        }
        Command::Run => print_json(&cmd_run(&config, out)?)?,
        Command::Sweep { param, values } => {
            let rows = cmd_sweep(&config, *param, values, out)?;
            for r in &rows {
                println!("{}={}\ttest={:.4}\tmean_seq={:.1}", param.name(), r.value, r.test, r.mean_sequence);
            }
        }
        Command::Ablate { seeds, reducers } => {
            let reducers = if reducers.is_empty() { ReducerKind::ALL.to_vec() } else { reducers.clone() };
            for r in cmd_ablate(&config, &reducers, seeds, out)? {
                println!("{}\t{:.4} ± {:.4}\t{:?}", r.reducer, r.mean, r.std, r.test);
            }
        }
        Command::Linkpred { seeds } => {
            let table = cmd_linkpred(&config, seeds, out)?;
            for r in &table.rows {
                println!("seed {}\ttest AUC {:.4}", r.seed, r.auc.test);
            }
            println!("mean {:.4} ± {:.4}", table.mean_test, table.std_test);
        }
        Command::Account { walk_steps } => print_json(&cmd_account(&config, walk_steps)?)?,
        Command::GradCheck { fixtures } => {
            if *fixtures == 0 {
                bail!("--fixtures must be positive");
            }
            let mut ok = true;
            for model in GradModel::ALL {
                let r = run_gradient_suite(model, *fixtures, config.seed)?;
                println!("{model:?}\t{}/{} passed\tmax rel err {:.2e}", r.passed, r.fixtures, r.max_rel_err);
                for f in &r.failures {
                    println!("  {f}");
                }
                ok &= r.all_passed();
            }
            return Ok(ok);
        }
        Command::Reference => print_json(&cmd_reference(&config)?)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
