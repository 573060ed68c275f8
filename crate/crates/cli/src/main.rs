use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tandem::pipeline::{self, PipelineConfig, PipelineError, Study, Workspace};

#[derive(Parser)]
#[command(name = "tandem", version, about = "Two-tower retrieval pipeline")]
struct Cli {
    /// Pipeline config; output paths are relative to its directory.
    #[arg(short, long, default_value = "tandem.toml", global = true)]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a config file with every default spelled out.
    Init {
        #[arg(long)]
        force: bool,
    },
    /// Generate the synthetic corpus and interaction logs.
    Gen,
    /// Train both stages and the rerank head.
    Train,
    /// Embed all documents with the trained document tower.
    Embed {
        /// Re-embed only documents changed since this embedding set id.
        #[arg(long)]
        since: Option<String>,
    },
    /// Build and guard one index per configured cut and precision.
    Index,
    /// Evaluate every index and the reranker on the held-out queries.
    Eval,
    /// Run a named study: input-format, mrl-vs-fc, loss-batch-sensitivity,
    /// rerank-lift (or B, D, E, F), or `all`.
    Ablate { study: String },
    /// Activate an index by label (e.g. `16-int8`) or roll back to standby.
    Swap {
        #[arg(required_unless_present = "rollback")]
        label: Option<String>,
        #[arg(long, conflicts_with = "label")]
        rollback: bool,
    },
    /// Reconstruct and check the lineage of every artifact.
    Report,
    /// gen, train, embed, index, eval and report in sequence.
    Run,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    if let Command::Init { force } = cli.command {
        if cli.config.exists() && !force {
            return Err(PipelineError::Config(format!(
                "{} exists; pass --force to overwrite",
                cli.config.display()
            )));
        }
        PipelineConfig::default().save(&cli.config)?;
        println!("wrote {}", cli.config.display());
        return Ok(());
    }
    let ws = Workspace::open(&cli.config)?;
    match cli.command {
        Command::Init { .. } => unreachable!(),
        Command::Gen => gen(&ws)?,
        Command::Train => train(&ws)?,
        Command::Embed { since } => embed(&ws, since.as_deref())?,
        Command::Index => index(&ws)?,
        Command::Eval => eval(&ws)?,
        Command::Ablate { study } => {
            let studies = if study == "all" {
                Study::ALL.to_vec()
            } else {
                vec![study.parse()?]
            };
            for s in studies {
                print!("{}", s.run(&ws)?);
            }
        }
        Command::Swap { label, rollback } => {
            let reg = if rollback {
                pipeline::rollback(&ws)?
            } else {
                pipeline::swap(&ws, label.as_deref().expect("clap enforces a label"))?
            };
            for (name, slot) in [("active", &reg.active), ("standby", &reg.standby)] {
                match slot {
                    Some(s) => println!(
                        "{name:<8} {} ({}, probe recall {:.4})",
                        s.label, s.tte_id, s.probe_recall
                    ),
                    None => println!("{name:<8} -"),
                }
            }
        }
        Command::Report => report(&ws)?,
        Command::Run => {
            gen(&ws)?;
            train(&ws)?;
            embed(&ws, None)?;
            index(&ws)?;
            eval(&ws)?;
            report(&ws)?;
        }
    }
    Ok(())
}

fn gen(ws: &Workspace) -> Result<(), PipelineError> {
    let c = pipeline::gen(ws)?;
    println!(
        "corpus {}: {} documents, {} queries, {} interaction rows",
        c.corpus.id, c.documents, c.queries, c.interaction_rows
    );
    Ok(())
}

fn train(ws: &Workspace) -> Result<(), PipelineError> {
    print!("{}", pipeline::train(ws)?.table());
    Ok(())
}

fn embed(ws: &Workspace, since: Option<&str>) -> Result<(), PipelineError> {
    let e = pipeline::embed(ws, since)?;
    println!(
        "embeddings {} by {}: {} reused, {} recomputed",
        e.set_id, e.tte_id, e.reused, e.recomputed
    );
    Ok(())
}

fn index(ws: &Workspace) -> Result<(), PipelineError> {
    let out = pipeline::index(ws)?;
    for e in &out.entries {
        println!(
            "index {:<10} probe recall {:.4}  {}",
            e.label,
            e.probe_recall,
            e.file.path.display()
        );
    }
    Ok(())
}

fn eval(ws: &Workspace) -> Result<(), PipelineError> {
    let out = pipeline::eval(ws)?;
    for r in out.reports.iter().chain([&out.dot, &out.rerank]) {
        let cells: Vec<String> =
            r.ks.iter()
                .zip(&r.overall)
                .map(|(k, x)| format!("R@{k} {x:.4}"))
                .collect();
        println!("{:<10} {}", r.meta.label, cells.join("  "));
    }
    Ok(())
}

fn report(ws: &Workspace) -> Result<(), PipelineError> {
    let l = pipeline::report(ws)?;
    print!("{}", l.text());
    if let Some(first) = l.problems.first() {
        return Err(PipelineError::Version(first.clone()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
