use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cadence_cli::commands;
use cadence_cli::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(
    name = "cadence",
    version,
    about = "Diversified recommendation with LightGCN, an item graph and counterfactual re-ranking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Train embeddings and write a checkpoint and history.
    Train,
    /// Re-rank with the item graph and counterfactual exposure.
    Rerank,
    /// Score a recommendations file.
    Eval,
    /// Check the norm-popularity law and its concentration bound.
    VerifyNorm,
    /// Re-rank one checkpoint over a list of alpha or k_global values.
    Sweep {
        /// alpha or k_global
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated values.
        #[arg(long)]
        values: Option<String>,
    },
}

#[derive(Args)]
struct Overrides {
    /// Flat `key = value` config file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Any config key, as `key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    interactions: Option<PathBuf>,
    #[arg(long, global = true)]
    categories: Option<PathBuf>,
    /// Use the seeded synthetic corpus instead of an interactions file.
    #[arg(long, global = true)]
    synthetic: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    recs: Option<PathBuf>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    l2: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[arg(long, global = true)]
    lii: Option<usize>,
    #[arg(long, global = true)]
    kg: Option<usize>,
    #[arg(long, global = true)]
    kc: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    list_length: Option<usize>,
    #[arg(long, global = true)]
    decay_ratio: Option<f64>,
    #[arg(long, global = true)]
    edge_budget: Option<usize>,
    #[arg(long, global = true)]
    beta_f: Option<f64>,
    #[arg(long, global = true)]
    eval_k: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    patience: Option<usize>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// symmetric or random_walk
    #[arg(long, global = true)]
    normalization: Option<String>,
    /// category or item
    #[arg(long, global = true)]
    coverage_mode: Option<String>,
    /// SGD steps for verify-norm.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Trajectories for the bound check; 0 skips it.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Comma-separated seeds for the verify-norm stability run.
    #[arg(long, global = true)]
    seeds: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        macro_rules! push {
            ($($field:ident => $key:literal),* $(,)?) => {
                $(if let Some(v) = &self.$field {
                    out.push(($key.to_string(), v.to_string()));
                })*
            };
        }
        macro_rules! push_path {
            ($($field:ident => $key:literal),* $(,)?) => {
                $(if let Some(v) = &self.$field {
                    out.push(($key.to_string(), v.display().to_string()));
                })*
            };
        }
        push_path!(interactions => "interactions", categories => "categories", out => "out",
            checkpoint => "checkpoint", recs => "recommendations");
        if self.synthetic {
            out.push(("synthetic".into(), "true".into()));
        }
        push!(lr => "lr", l2 => "l2", batch_size => "batch_size", dim => "dim", layers => "layers",
            lii => "lii", kg => "kg", kc => "kc", alpha => "alpha", list_length => "list_length",
            decay_ratio => "decay_ratio", edge_budget => "edge_budget", beta_f => "beta_f",
            eval_k => "eval_k", seed => "seed", epochs => "epochs", patience => "patience",
            threads => "threads", normalization => "normalization", coverage_mode => "coverage_mode",
            steps => "steps", trials => "trials", seeds => "seeds");
        out
    }
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &cli.opts.config {
        config.apply_file(path)?;
    }
    for kv in &cli.opts.set {
        let (k, v) =
            kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {kv:?}")))?;
        config.set(k, v)?;
    }
    for (k, v) in cli.opts.pairs() {
        config.set(&k, &v)?;
    }
    if let Command::Sweep { param, values } = &cli.command {
        if let Some(p) = param {
            config.set("sweep_param", p)?;
        }
        if let Some(v) = values {
            config.set("sweep_values", v)?;
        }
    }
    Ok(config)
}

fn run(cli: &Cli) -> CliResult<()> {
    let config = resolve(cli)?;
    if config.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train => {
            let s = commands::train(&config)?;
            println!(
                "trained {} epochs, best epoch {} with recall@{} = {:.4}; checkpoint {}",
                s.history.len(),
                s.best_epoch,
                config.eval_k,
                s.best_recall,
                s.checkpoint.display()
            );
            if let Some(e) = s.graph_edges {
                println!("item graph: {e} edges after truncation ({:.2}s)", s.graph_seconds);
            }
        }
        Command::Rerank => {
            let lists = commands::rerank(&config)?;
            println!("wrote {} lists to {}", lists.len(), config.recommendations_path().display());
        }
        Command::Eval => {
            let r = commands::eval(&config)?;
            println!(
                "recall@{k} = {:.4}, coverage@{k} = {:.4}, f_{} = {:.4}",
                r.recall_at_k,
                r.coverage_at_k,
                r.beta,
                r.f_beta,
                k = r.k
            );
        }
        Command::VerifyNorm => {
            let s = commands::verify_norm(&config)?;
            if let Some(a) = s.reports.first().and_then(|r| r.azuma.as_ref()) {
                println!(
                    "bound check: {} of {} trajectories exceed eps = {:.4} (frequency {:.4}, bound {:.4}); max step ratio {:.3}",
                    a.exceedances, a.trials, a.params.epsilon, a.exceedance_frequency, a.bound, a.max_step_ratio
                );
            }
            println!("pearson r spread over {} seeds: {:.4}", s.seeds.len(), s.pearson_spread);
            if !s.passes() {
                return Err(CliError::Verification(s.failures.join("; ")));
            }
            println!("all norm checks passed");
        }
        Command::Sweep { .. } => {
            let rows = commands::sweep(&config)?;
            println!("{}", commands::SWEEP_CSV_HEADER);
            for r in rows {
                println!("{},{:.6},{:.6},{:.6}", r.value, r.recall, r.coverage, r.f_beta);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
