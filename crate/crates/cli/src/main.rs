use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use judgerank::bm25::Bm25Params;
use judgerank::config::RunConfig;
use judgerank::eval::{render_tsv, EvalOptions};
use judgerank::exec::Execution;
use judgerank::scoring::DEFAULT_ALPHA;
use judgerank::workflow::{self, EvalInput, ResolvedBackends};

/// Zero-shot LLM reranking on top of BM25.
#[derive(Parser)]
#[command(name = "judgerank", version)]
struct Cli {
    /// Run CPU-bound stages on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a BM25 index from a JSONL corpus.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.2)]
        k1: f64,
        #[arg(long, default_value_t = 0.75)]
        b: f64,
    },
    /// Retrieve the top k documents per query into a run file.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill the query-analysis cache for every query in a config.
    AnalyzeQueries(ConfigArg),
    /// First stage, judgments and reranked runs for every configured judge.
    Rerank(ConfigArg),
    /// Combine judgment files from several judges into one hybrid run.
    Ensemble {
        #[arg(long)]
        first_stage: PathBuf,
        /// Judgment file (JSONL); repeat once per judge.
        #[arg(long = "judgments", required = true)]
        judgments: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Yes/No contingency table between two judgment files.
    Agreement { a: PathBuf, b: PathBuf },
    /// nDCG per run, printed as a dataset x run table.
    Eval {
        /// Dataset name, run file and qrels file; repeat for more runs.
        #[arg(long = "input", num_args = 3, value_names = ["DATASET", "RUN", "QRELS"], required = true)]
        input: Vec<String>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Leave out queries without any relevant document.
        #[arg(long)]
        exclude_no_relevant: bool,
        /// Also write the reports, one per run tag, as a JSON array.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

fn load_config(path: &Path) -> Result<(RunConfig, ResolvedBackends)> {
    let config = RunConfig::from_file(path).with_context(|| format!("loading {}", path.display()))?;
    let backends = ResolvedBackends::from_config(&config)?;
    Ok((config, backends))
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match cli.command {
        Command::Index { corpus, out, k1, b } => {
            let index = workflow::cmd_index(&corpus, Bm25Params::new(k1, b)?, &out, exec)?;
            log::info!("indexed {} documents, {} terms", index.doc_count(), index.term_count());
        }
        Command::Retrieve { index, queries, k, out } => {
            let index = workflow::load_index(&index)?;
            let lists = workflow::cmd_retrieve(&index, &queries, k, &out, exec)?;
            log::info!("retrieved candidates for {} queries", lists.len());
        }
        Command::AnalyzeQueries(args) => {
            let (config, backends) = load_config(&args.config)?;
            let added = runtime()?.block_on(workflow::cmd_analyze_queries(&config, &backends))?;
            log::info!("{added} new query analyses cached");
        }
        Command::Rerank(args) => {
            let (config, backends) = load_config(&args.config)?;
            let summary = runtime()?.block_on(workflow::cmd_rerank(&config, &backends, exec))?;
            println!("{}", summary.first_stage.display());
            for m in &summary.members {
                log::info!(
                    "{}: {} judgments reused, {} generated, {} stale dropped",
                    m.label,
                    m.reused,
                    m.generated,
                    m.dropped_stale
                );
                for f in &m.run_files {
                    println!("{}", f.display());
                }
            }
        }
        Command::Ensemble {
            first_stage,
            judgments,
            alpha,
            out,
        } => {
            let runs = workflow::cmd_ensemble(&judgments, &first_stage, alpha, &out)?;
            log::info!("wrote {} queries to {}", runs.len(), out.display());
        }
        Command::Agreement { a, b } => {
            let m = workflow::cmd_agreement(&a, &b)?;
            print!("{}", m.render(&a.display().to_string(), &b.display().to_string()));
        }
        Command::Eval {
            input,
            k,
            exclude_no_relevant,
            json,
        } => {
            if input.len() % 3 != 0 {
                bail!("--input takes DATASET RUN QRELS");
            }
            let inputs: Vec<EvalInput> = input
                .chunks(3)
                .map(|c| EvalInput {
                    dataset: c[0].clone(),
                    run: c[1].clone().into(),
                    qrels: c[2].clone().into(),
                })
                .collect();
            let options = EvalOptions { k, exclude_no_relevant };
            let reports = workflow::cmd_eval(&inputs, options, exec)?;
            print!("{}", render_tsv(&reports));
            if let Some(path) = json {
                let items: Vec<String> = reports.iter().map(|r| r.to_json()).collect();
                let text = format!("[\n{}\n]\n", items.join(",\n"));
                workflow::write_atomic(&path, text.as_bytes())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
