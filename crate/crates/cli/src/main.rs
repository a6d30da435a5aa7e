//! `negstream` command-line driver.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 I/O or file
//! format failure, 3 invariant violation or failed check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use negstream::config::ExperimentConfig;
use negstream::engine::Checkpoint;
use negstream::experiment::{build_engine, run, world_stream, RunSummary};
use negstream::gradcheck;
use negstream::io::{read_json, save_world, write_json, write_records, EmbeddingFormat, RecordFormat};
use negstream::negatives::{mine_negatives, IdModel};
use negstream::rng::Rng;
use negstream::theorem::verify_theorem;
use negstream::world::StreamPlan;
use negstream::{Error, Result};

#[derive(Parser)]
#[command(name = "negstream", version, about = "Test-time negative-semantics OOD detection over embedding streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    JsonLines,
}

impl From<FormatArg> for RecordFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => RecordFormat::Csv,
            FormatArg::JsonLines => RecordFormat::JsonLines,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbeddingFormatArg {
    Binary,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and save it as a world directory.
    GenWorld {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "binary")]
        embedding_format: EmbeddingFormatArg,
    },
    /// Mine the static negatives and write them sorted by distance.
    MineNegatives {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Run the streaming detector and write per-sample results and metrics.
    RunStream {
        #[command(flatten)]
        common: Common,
        /// Disable negative learning (β = 0): the static baseline.
        #[arg(long)]
        no_dynamic: bool,
        /// Resume engine state from a checkpoint.
        #[arg(long)]
        checkpoint_in: Option<PathBuf>,
        /// Write engine state after the run.
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
        /// Only process samples of this stream phase.
        #[arg(long)]
        phase: Option<usize>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Compare analytic and finite-difference inversion gradients.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Search for counterexamples to the balanced-grouping ordering.
    VerifyTheorem {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
        /// Comma-separated group counts.
        #[arg(long, value_delimiter = ',')]
        groups: Option<Vec<usize>>,
    },
}

/// Config with command-line overrides applied.
fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.output {
        cfg.output.dir = Some(dir.clone());
    }
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.output
        .dir
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("no output directory: pass --output or set output.dir".into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenWorld {
            common,
            embedding_format,
        } => gen_world(&load_config(&common)?, embedding_format),
        Command::MineNegatives { common, format } => {
            let mut cfg = load_config(&common)?;
            if let Some(f) = format {
                cfg.output.format = f.into();
            }
            mine(&cfg)
        }
        Command::RunStream {
            common,
            no_dynamic,
            checkpoint_in,
            checkpoint_out,
            phase,
            format,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(f) = format {
                cfg.output.format = f.into();
            }
            if no_dynamic {
                cfg.engine.beta = 0.0;
            }
            run_stream(&cfg, checkpoint_in.as_deref(), checkpoint_out.as_deref(), phase)
        }
        Command::GradCheck { common, points } => {
            let mut cfg = load_config(&common)?;
            if let Some(p) = points {
                cfg.grad_check.points = p;
            }
            grad_check(&cfg)
        }
        Command::VerifyTheorem {
            common,
            trials,
            groups,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = trials {
                cfg.theorem.trials = t;
            }
            if let Some(g) = groups {
                cfg.theorem.groups = g;
            }
            theorem(&cfg)
        }
    }
}

fn gen_world(cfg: &ExperimentConfig, format: EmbeddingFormatArg) -> Result<()> {
    if cfg.world_dir.is_some() {
        return Err(Error::InvalidConfig("gen-world needs a synthetic [world], not world_dir".into()));
    }
    let dir = output_dir(cfg)?;
    let world = cfg.build_world()?;
    let format = match format {
        EmbeddingFormatArg::Binary => EmbeddingFormat::Binary,
        EmbeddingFormatArg::Text => EmbeddingFormat::Text,
    };
    save_world(&world, dir, format)?;
    println!(
        "wrote world: {} classes, {} vocabulary words, {} ID + {} OOD samples -> {}",
        world.class_names.len(),
        world.vocabulary.len(),
        world.pools.id.len(),
        world.pools.ood.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct NegativeRecord<'a> {
    rank: usize,
    vocab_index: usize,
    token_id: &'a str,
    distance: f64,
}

fn mine(cfg: &ExperimentConfig) -> Result<()> {
    let dir = output_dir(cfg)?;
    let world = cfg.build_world()?;
    let model = IdModel::from_shots(world.class_names.clone(), world.class_text.clone(), &world.shots)?;
    let negatives = mine_negatives(&world.vocabulary, &model, cfg.engine.static_count)?;
    let records: Vec<_> = negatives
        .entries()
        .iter()
        .enumerate()
        .map(|(rank, m)| NegativeRecord {
            rank,
            vocab_index: m.vocab_index,
            token_id: &m.entry.token_id,
            distance: m.distance,
        })
        .collect();
    let format = cfg.output.format;
    let path = dir.join(format!("negatives.{}", format.extension()));
    write_records(&path, &records, format)?;
    let d = negatives.distances();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    println!(
        "mined {} of {} words: distance max {:.4}, min {:.4}, mean {:.4} -> {}",
        d.len(),
        world.vocabulary.len(),
        d[0],
        d[d.len() - 1],
        mean,
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunRecord {
    id_ratio: usize,
    ood_ratio: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    phase: Option<usize>,
    results: String,
    summary: RunSummary,
}

#[derive(Serialize)]
struct MetricsFile {
    seed: u64,
    dynamic: bool,
    runs: Vec<RunRecord>,
}

fn run_stream(
    cfg: &ExperimentConfig,
    checkpoint_in: Option<&Path>,
    checkpoint_out: Option<&Path>,
    phase: Option<usize>,
) -> Result<()> {
    let dir = output_dir(cfg)?;
    let plans: Vec<(StreamPlan, String)> = match &cfg.sweep {
        Some(sweep) => {
            if checkpoint_in.is_some() || checkpoint_out.is_some() || phase.is_some() {
                return Err(Error::InvalidConfig(
                    "ratio sweeps cannot be combined with checkpoints or --phase".into(),
                ));
            }
            sweep
                .ratios
                .iter()
                .map(|&[a, b]| {
                    let plan = StreamPlan {
                        id_ratio: a,
                        ood_ratio: b,
                        ..cfg.plan.clone()
                    };
                    (plan, format!("results-{a}x{b}"))
                })
                .collect()
        }
        None => vec![(cfg.plan.clone(), "results".to_string())],
    };
    let checkpoint: Option<Checkpoint> = checkpoint_in.map(read_json).transpose()?;

    let world = cfg.build_world()?;
    let format = cfg.output.format;
    let mut runs = Vec::new();
    for (plan, stem) in plans {
        let mut stream = world_stream(&world, &plan, cfg.seed)?;
        if let Some(p) = phase {
            stream.retain(|s| s.phase == p);
            if stream.is_empty() {
                return Err(Error::InvalidConfig(format!("stream has no phase {p}")));
            }
        }
        let mut engine = build_engine(&world, &cfg.engine, cfg.seed)?;
        if let Some(cp) = &checkpoint {
            engine.restore(cp.clone())?;
        }
        let outcome = run(&mut engine, &world, &stream, cfg.output.per_phase)?;
        let file = format!("{stem}.{}", format.extension());
        write_records(&dir.join(&file), &outcome.results, format)?;
        if let Some(path) = checkpoint_out {
            write_json(path, &outcome.checkpoint)?;
        }
        let m = &outcome.summary.metrics;
        println!(
            "{}:{} {} samples: AUROC {:.4}, FPR95 {:.4}, bank {} (accepted {}, flashes {})",
            plan.id_ratio,
            plan.ood_ratio,
            outcome.results.len(),
            m.auroc,
            m.fpr95,
            outcome.summary.bank_size,
            outcome.summary.stats.accepted,
            outcome.summary.stats.flashes
        );
        runs.push(RunRecord {
            id_ratio: plan.id_ratio,
            ood_ratio: plan.ood_ratio,
            phase,
            results: file,
            summary: outcome.summary,
        });
    }
    write_json(
        &dir.join("metrics.json"),
        &MetricsFile {
            seed: cfg.seed,
            dynamic: cfg.engine.beta > 0.0,
            runs,
        },
    )
}

fn grad_check(cfg: &ExperimentConfig) -> Result<()> {
    let report = gradcheck::run(&cfg.grad_check, cfg.seed)?;
    if let Some(dir) = &cfg.output.dir {
        write_json(&dir.join("grad_check.json"), &report)?;
    }
    println!(
        "grad-check: {} points, max relative error {:.3e} (tolerance {:.0e})",
        report.points, report.max_relative_error, report.tolerance
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Invariant(format!("{} points exceeded the tolerance", report.failures.len())))
    }
}

fn theorem(cfg: &ExperimentConfig) -> Result<()> {
    let report = verify_theorem(&cfg.theorem, &mut Rng::new(cfg.seed))?;
    if let Some(dir) = &cfg.output.dir {
        write_json(&dir.join("theorem.json"), &report)?;
    }
    println!(
        "verify-theorem: {} pairs, {} transfers, {} lemma points, {} convexity points, {} violations",
        report.pairs_checked,
        report.transfers_checked,
        report.lemma_points,
        report.convexity_points,
        report.violation_count
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Invariant(format!("{} violations found", report.violation_count)))
    }
}
