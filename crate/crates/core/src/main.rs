use std::path::PathBuf;
use std::process::ExitCode;

use attrsim::commands::{self, parse_ids, parse_split, StageSelection, TrainArgs};
use attrsim::selftest::run_selftest;
use attrsim::Result;
use clap::{Parser, Subcommand};

/// Attribute-specific image embeddings: synthetic data, training, retrieval and evaluation.
#[derive(Parser)]
#[command(name = "attrsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic attribute dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// `name:count,...` or `count,...`
        #[arg(long)]
        attributes: String,
        #[arg(long)]
        per_value: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train stage 1, stage 2 or both, checkpointing after every epoch.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// 1, 2 or both
        #[arg(long, default_value = "both")]
        stage: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Embed every image of a split under every attribute.
    Embed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Localization settings; defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the top-K candidates for one query as a rank-file line.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: u32,
        #[arg(long)]
        attribute: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        lambda: Option<f64>,
        /// Also print each candidate's score.
        #[arg(long)]
        scores: bool,
    },
    /// MAP and Recall@K report for an index.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Reorder the head of each baseline ranking by fine-grained similarity.
    Rerank {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        /// Comma-separated attribute ids.
        #[arg(long)]
        attributes: String,
        #[arg(long, default_value_t = 10)]
        top_n: usize,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Write the attention map, binary mask and RoI for one image.
    Attention {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: u32,
        #[arg(long)]
        attribute: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Gradient checks and oracle comparisons.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        quick: bool,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            out,
            attributes,
            per_value,
            side,
            noise,
            seed,
        } => {
            let m = commands::gen_data(&out, &attributes, per_value, side, noise, seed)?;
            println!("wrote {} images to {}", m.records.len(), out.display());
        }
        Command::Train {
            data,
            config,
            stage,
            out,
            resume,
            seed,
            quiet,
        } => {
            let args = TrainArgs {
                data,
                config,
                stage: StageSelection::parse(&stage)?,
                out,
                resume,
                seed,
                verbose: !quiet,
            };
            let trace = commands::train(&args)?;
            println!(
                "trained {} epochs; checkpoint {}, losses {}",
                trace.len(),
                args.out.display(),
                commands::loss_trace_path(&args.out).display()
            );
        }
        Command::Embed {
            data,
            ckpt,
            split,
            out,
            config,
        } => {
            let index =
                commands::embed(&data, &ckpt, parse_split(&split)?, &out, config.as_deref())?;
            println!(
                "indexed {} entries into {}",
                index.n_entries(),
                out.display()
            );
        }
        Command::Retrieve {
            index,
            query,
            attribute,
            k,
            lambda,
            scores,
        } => {
            let list = commands::retrieve_cmd(&index, query, attribute, k, lambda)?;
            println!("{}", list.to_line());
            if scores {
                for (id, s) in &list.items {
                    println!("{id}\t{s:.6}");
                }
            }
        }
        Command::Eval {
            index,
            split,
            k,
            lambda,
        } => {
            let (report, index) = commands::eval_cmd(&index, parse_split(&split)?, k, lambda)?;
            print!("{}", report.render(&index.attributes));
        }
        Command::Rerank {
            index,
            baseline,
            attributes,
            top_n,
            lambda,
        } => {
            for list in
                commands::rerank_cmd(&index, &baseline, &parse_ids(&attributes)?, top_n, lambda)?
            {
                println!("{}", list.to_line());
            }
        }
        Command::Attention {
            data,
            ckpt,
            image,
            attribute,
            out,
            config,
        } => {
            for p in
                commands::attention_cmd(&data, &ckpt, image, attribute, &out, config.as_deref())?
            {
                println!("{}", p.display());
            }
        }
        Command::Selftest { seed, quick } => {
            let results = run_selftest(seed, quick)?;
            for r in &results {
                println!(
                    "{} {}: {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
            }
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
