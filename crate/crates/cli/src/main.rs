use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use feddat::benchgen::{generate, heterogeneity_index, write_client, write_jsonl, Regime};
use feddat::config::RunConfig;
use feddat::experiments::{ablation_suite, motivational_grid, resume, run_experiment, scalability_sweep};
use feddat::model::{Backbone, ClientModel, PeftMode};
use feddat::rng::substream;

#[derive(Parser)]
#[command(name = "feddat", version, about = "Federated parameter-efficient finetuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed and write metrics, checkpoints and a summary.
    Run(RunArgs),
    /// Seven-row component ablation of the dual-adapter method.
    Ablate(CommonArgs),
    /// Head-only vs adapter, local vs federated, on a feature-shift benchmark.
    Motiv(CommonArgs),
    /// Feddat and adapter across client counts.
    Sweep(SweepArgs),
    /// Continue an interrupted run from its checkpoint.
    Resume {
        /// Path to a `checkpoint.fdt` inside a seed directory.
        checkpoint: PathBuf,
    },
    /// Write the benchmark's client datasets (binary and JSONL).
    GenData(CommonArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run with this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// adapter, feddat, lora, prompt, bias, head_only or full.
    #[arg(long)]
    mode: Option<PeftMode>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Client workers per round; 0 means one per client.
    #[arg(long)]
    workers: Option<usize>,
    /// Print the resolved configuration and parameter counts, then exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Stop the first seed after this many rounds (leaves a checkpoint).
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated client counts, e.g. `5,10,25`.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
}

fn resolve(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(mode) = args.mode {
        cfg.peft.mode = mode;
    }
    if let Some(rounds) = args.rounds {
        cfg.train.rounds = rounds;
    }
    if let Some(clients) = args.clients {
        cfg.benchmark.clients = clients;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(workers) = args.workers {
        cfg.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dry_run(cfg: &RunConfig) -> Result<()> {
    println!("{}", cfg.to_toml());
    println!("# config hash: {}", cfg.hash());
    let backbone = Arc::new(Backbone::new(cfg.model.clone())?);
    let model = ClientModel::new(backbone.clone(), cfg.peft.clone(), 2, &mut substream(0, "dry-run", &[]))?;
    let per_client = model.trainable_params().count;
    let k = cfg.benchmark.clients;
    println!("# backbone scalars: {}", backbone.params().scalar_count());
    println!("# communicated scalars per client per round: {per_client}");
    println!("# uplink scalars per round: {}", per_client * k);
    println!("# uplink scalars per seed: {}", per_client * k * cfg.train.rounds);
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    if args.common.dry_run {
        return dry_run(&cfg);
    }
    match run_experiment(&cfg, &cfg.out, args.stop_after)? {
        Some(s) => println!(
            "{}: client-average accuracy {:.4} ± {:.4} over {} seed(s) -> {}",
            s.mode,
            s.average.mean,
            s.average.std,
            s.seeds.len(),
            cfg.out.display()
        ),
        None => println!(
            "stopped after round {}; resume from {}",
            args.stop_after.unwrap_or(0),
            cfg.out
                .join(format!("seed_{}", cfg.seeds[0]))
                .join(feddat::experiments::CHECKPOINT_FILE)
                .display()
        ),
    }
    Ok(())
}

fn cmd_ablate(args: &CommonArgs) -> Result<()> {
    let cfg = resolve(args)?;
    if args.dry_run {
        return dry_run(&cfg);
    }
    let result = ablation_suite(&cfg)?;
    let csv = result.table.to_csv();
    write_file(&cfg.out.join("ablation.csv"), &csv)?;
    write_file(&cfg.out.join("ablation.json"), &serde_json::to_string_pretty(&result.table)?)?;
    print!("{csv}");
    Ok(())
}

fn cmd_motiv(args: &CommonArgs) -> Result<()> {
    let cfg = resolve(args)?;
    if cfg.benchmark.regime != Regime::FeatureShift {
        bail!(
            "invalid config: motiv needs benchmark.regime = \"feature_shift\", got \"{}\"",
            cfg.benchmark.regime.name()
        );
    }
    if args.dry_run {
        return dry_run(&cfg);
    }
    let table = motivational_grid(&cfg)?;
    let csv = table.to_csv();
    write_file(&cfg.out.join("motivational.csv"), &csv)?;
    write_file(&cfg.out.join("motivational.json"), &serde_json::to_string_pretty(&table)?)?;
    print!("{csv}");
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(counts) = &args.counts {
        cfg.sweep.client_counts = counts.clone();
        cfg.validate()?;
    }
    if args.common.dry_run {
        return dry_run(&cfg);
    }
    let table = scalability_sweep(&cfg)?;
    let csv = table.to_csv();
    write_file(&cfg.out.join("sweep.csv"), &csv)?;
    write_file(&cfg.out.join("sweep.json"), &serde_json::to_string_pretty(&table)?)?;
    print!("{csv}");
    Ok(())
}

fn cmd_gen_data(args: &CommonArgs) -> Result<()> {
    let cfg = resolve(args)?;
    if args.dry_run {
        return dry_run(&cfg);
    }
    let dir = cfg.out.join("data");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for &seed in &cfg.seeds {
        let spec = cfg.benchmark_for_seed(seed);
        let clients = generate(&spec)?;
        for c in &clients {
            write_client(&dir.join(format!("seed_{seed}_client_{}.bin", c.client)), &spec, c)?;
            write_jsonl(&dir.join(format!("seed_{seed}_client_{}.jsonl", c.client)), c)?;
        }
        let h = if clients.len() >= 2 {
            format!("{:.4}", heterogeneity_index(&clients)?)
        } else {
            "n/a".into()
        };
        println!("seed {seed}: {} clients, heterogeneity index {h}", clients.len());
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Motiv(a) => cmd_motiv(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Resume { checkpoint } => resume(checkpoint)
            .map(|s| {
                println!(
                    "{}: client-average accuracy {:.4} ± {:.4} over {} seed(s)",
                    s.mode,
                    s.average.mean,
                    s.average.std,
                    s.seeds.len()
                )
            })
            .map_err(Into::into),
        Command::GenData(a) => cmd_gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
