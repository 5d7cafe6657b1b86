//! Command-line front end for the graphgen pipeline.
//!
//! Exit codes: 0 on success, 1 on a stage failure or missing artifact,
//! 2 on a configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graphgen_core::assess::loss_histogram;
use graphgen_core::config::{load_config, Mode, PipelineConfig};
use graphgen_core::metrics::{
    dataset_stats, render_report, score_dataset, BoundsSet, RawExternalScores,
};
use graphgen_core::pipeline::{
    load_graph, load_records, load_subgraphs, run_pipeline_until, RunReport, Stage,
};
use graphgen_core::qagen::{QARecord, SubgraphRef};
use graphgen_core::token::DefaultTokenCounter;
use graphgen_core::traverse::{QaForm, Seed};

#[derive(Parser)]
#[command(name = "graphgen", version, about = "Knowledge-graph-guided QA data synthesis")]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured run mode.
    #[arg(long, global = true, value_parser = ["live", "record", "replay"])]
    mode: Option<String>,
    /// Override the configured cache directory.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest and chunk the corpus.
    Ingest,
    /// Knowledge graph operations.
    Kg {
        #[command(subcommand)]
        command: KgCommand,
    },
    /// Trainee comprehension assessment.
    Assess {
        #[command(subcommand)]
        command: AssessCommand,
    },
    /// Subgraph traversal planning.
    Traverse {
        #[command(subcommand)]
        command: TraverseCommand,
    },
    /// Generate the QA dataset from planned subgraphs.
    Generate,
    /// Score a dataset (lexical diversity plus ingested external scores).
    Score {
        /// QA dataset JSONL (alpaca or sharegpt lines).
        #[arg(long)]
        dataset: PathBuf,
        /// JSONL with raw nat/coh/und/ind/deb values, one object per record.
        #[arg(long)]
        external_scores: Option<PathBuf>,
        /// JSON file overriding the default normalization bounds.
        #[arg(long)]
        bounds: Option<PathBuf>,
    },
    /// Run the full pipeline.
    Run,
}

#[derive(Subcommand)]
enum KgCommand {
    /// Extract and merge the knowledge graph.
    Build,
    /// Print entity/relation counts and the degree histogram.
    Stats,
    /// Write the cached graph to a standalone JSON file.
    Export {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum AssessCommand {
    /// Probe the trainee model and score every relation.
    Run,
    /// Print the comprehension-loss histogram as CSV.
    Hist {
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TraverseCommand {
    /// Plan the subgraph cover and write a manifest.
    Plan {
        /// Write the JSONL manifest here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path).map_err(|e| e.to_string())?,
        None => PipelineConfig::default(),
    };
    if let Some(mode) = &cli.mode {
        cfg.mode = match mode.as_str() {
            "live" => Mode::Live,
            "record" => Mode::Record,
            _ => Mode::Replay,
        };
    }
    if let Some(dir) = &cli.cache_dir {
        cfg.cache_dir = dir.clone();
    }
    Ok(cfg)
}

fn print_report(report: &RunReport) {
    println!("config hash: {}", report.config_hash);
    for stage in &report.stages {
        let status = if let Some(err) = &stage.error {
            format!("FAILED: {err}")
        } else if stage.cached {
            "cached".to_string()
        } else {
            "ok".to_string()
        };
        let counts = stage
            .counts
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        println!("{:<10} {:<8} {:>6} ms  {}", stage.name, status, stage.wall_ms, counts);
    }
    println!("llm calls: {}", report.llm_calls);
}

fn run_stages(cfg: &PipelineConfig, stop_after: Stage) -> ExitCode {
    match run_pipeline_until(cfg, stop_after, None) {
        Ok(report) => {
            print_report(&report);
            if report.succeeded() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn require_graph(cfg: &PipelineConfig) -> Result<graphgen_core::kg::KnowledgeGraph, ExitCode> {
    load_graph(cfg).ok_or_else(|| {
        eprintln!(
            "error: no cached knowledge graph under {} (run `graphgen kg build` first)",
            cfg.cache_dir.display()
        );
        ExitCode::from(1)
    })
}

fn parse_dataset_line(line: &str) -> Result<QARecord, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let (question, answer) = if let Some(instruction) = value.get("instruction") {
        (
            instruction.as_str().ok_or("instruction is not a string")?.to_string(),
            value
                .get("output")
                .and_then(|v| v.as_str())
                .ok_or("output is not a string")?
                .to_string(),
        )
    } else if let Some(conversations) = value.get("conversations").and_then(|v| v.as_array()) {
        let human = conversations
            .iter()
            .find(|c| c["from"] == "human")
            .and_then(|c| c["value"].as_str())
            .ok_or("no human turn")?;
        let gpt = conversations
            .iter()
            .find(|c| c["from"] == "gpt")
            .and_then(|c| c["value"].as_str())
            .ok_or("no gpt turn")?;
        (human.to_string(), gpt.to_string())
    } else {
        return Err("line is neither alpaca nor sharegpt shaped".into());
    };
    Ok(QARecord {
        question,
        answer,
        form: QaForm::Atomic,
        subgraph_ref: SubgraphRef {
            seed: Seed::Node(String::new()),
            edges: Vec::new(),
        },
        max_loss: None,
        mean_loss: None,
    })
}

fn cmd_score(
    dataset: &PathBuf,
    external_scores: Option<&PathBuf>,
    bounds: Option<&PathBuf>,
) -> ExitCode {
    let text = match std::fs::read_to_string(dataset) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", dataset.display());
            return ExitCode::from(1);
        }
    };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_dataset_line(line) {
            Ok(record) => records.push(record),
            Err(e) => {
                eprintln!("error: {} line {}: {e}", dataset.display(), i + 1);
                return ExitCode::from(1);
            }
        }
    }

    let mut external = Vec::new();
    if let Some(path) = external_scores {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                return ExitCode::from(1);
            }
        };
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<RawExternalScores>(line) {
                Ok(scores) => external.push(scores),
                Err(e) => {
                    eprintln!("error: {} line {}: {e}", path.display(), i + 1);
                    return ExitCode::from(1);
                }
            }
        }
    }

    let bounds_set = match bounds {
        None => BoundsSet::default(),
        Some(path) => match std::fs::read_to_string(path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
        {
            Ok(b) => b,
            Err(e) => {
                eprintln!("error: cannot load bounds {}: {e}", path.display());
                return ExitCode::from(2);
            }
        },
    };

    let stats = dataset_stats(&records, &DefaultTokenCounter);
    let (row, composite) = score_dataset(&records, &external, &bounds_set);
    let label = dataset
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset");
    print!("{}", render_report(label, &stats, &row, &composite));
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    // `score` works on plain files and needs no pipeline config.
    if let Command::Score { dataset, external_scores, bounds } = &cli.command {
        return cmd_score(dataset, external_scores.as_ref(), bounds.as_ref());
    }

    let cfg = match effective_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };

    match &cli.command {
        Command::Ingest => run_stages(&cfg, Stage::Ingest),
        Command::Kg { command } => match command {
            KgCommand::Build => run_stages(&cfg, Stage::KgBuild),
            KgCommand::Stats => {
                let graph = match require_graph(&cfg) {
                    Ok(g) => g,
                    Err(code) => return code,
                };
                println!("entities:  {}", graph.entities.len());
                println!("relations: {}", graph.relations.len());
                println!("isolated:  {}", graph.isolated_entities().len());
                println!("type conflicts: {}", graph.type_conflicts);
                println!("degree histogram:");
                for (degree, count) in graph.degree_histogram() {
                    println!("  {degree:>4}: {count}");
                }
                ExitCode::SUCCESS
            }
            KgCommand::Export { out } => {
                let graph = match require_graph(&cfg) {
                    Ok(g) => g,
                    Err(code) => return code,
                };
                match graph.save(out) {
                    Ok(()) => {
                        println!("graph written to {}", out.display());
                        ExitCode::SUCCESS
                    }
                    Err(e) => {
                        eprintln!("error: {e}");
                        ExitCode::from(1)
                    }
                }
            }
        },
        Command::Assess { command } => match command {
            AssessCommand::Run => run_stages(&cfg, Stage::Assess),
            AssessCommand::Hist { bins, out } => {
                let graph = match require_graph(&cfg) {
                    Ok(g) => g,
                    Err(code) => return code,
                };
                let mut csv = String::from("bin_start,bin_end,count\n");
                for (start, end, count) in loss_histogram(&graph, *bins) {
                    csv.push_str(&format!("{start:.6},{end:.6},{count}\n"));
                }
                match out {
                    Some(path) => {
                        if let Err(e) = std::fs::write(path, csv) {
                            eprintln!("error: cannot write {}: {e}", path.display());
                            return ExitCode::from(1);
                        }
                        ExitCode::SUCCESS
                    }
                    None => {
                        print!("{csv}");
                        ExitCode::SUCCESS
                    }
                }
            }
        },
        Command::Traverse { command } => match command {
            TraverseCommand::Plan { out } => {
                let code = run_stages(&cfg, Stage::Traverse);
                if code != ExitCode::SUCCESS {
                    return code;
                }
                let Some(subgraphs) = load_subgraphs(&cfg) else {
                    eprintln!("error: traversal produced no cached plan");
                    return ExitCode::from(1);
                };
                let mut manifest = String::new();
                for subgraph in &subgraphs {
                    manifest.push_str(&serde_json::to_string(subgraph).expect("serializable"));
                    manifest.push('\n');
                }
                match out {
                    Some(path) => {
                        if let Err(e) = std::fs::write(path, manifest) {
                            eprintln!("error: cannot write {}: {e}", path.display());
                            return ExitCode::from(1);
                        }
                    }
                    None => print!("{manifest}"),
                }
                ExitCode::SUCCESS
            }
        },
        Command::Generate | Command::Run => {
            let code = run_stages(&cfg, Stage::Generate);
            if code == ExitCode::SUCCESS {
                if let Some(records) = load_records(&cfg) {
                    println!("{} records -> {}", records.len(), cfg.output.path.display());
                }
            }
            code
        }
        Command::Score { .. } => unreachable!("handled above"),
    }
}
