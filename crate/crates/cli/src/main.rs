use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vcil_core::datagen::{export_corpus, import_corpus, Corpus, SplitStyle};
use vcil_core::harness::{run_experiment, ExperimentConfig};
use vcil_core::Error;

mod report;

#[derive(Parser)]
#[command(name = "vcil", version, about = "Class-incremental video learning lab on synthetic clips")]
struct Cli {
    /// Seed applied to the corpus, the task split and training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus and write it with a JSON index.
    Datagen {
        /// Experiment config whose `corpus` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the incremental protocol and write a run directory.
    Train {
        /// Experiment config (JSON); defaults apply to missing keys.
        config: Option<PathBuf>,
        /// Run directory, overriding `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exported corpus to train on, overriding `corpus_dir`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Render and export the corpus when the corpus directory is missing.
        #[arg(long)]
        generate: bool,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long, value_enum)]
        split: Option<Split>,
        /// Training epochs per task.
        #[arg(long)]
        epochs: Option<usize>,
        /// Disable a mechanism; repeatable.
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        #[arg(long)]
        quiet: bool,
    },
    /// Summarize the gradient relation curves of a run.
    Analyze {
        run_dir: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print accuracy, forgetting and budget tables; several runs form an ablation grid.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Balanced,
    HeadHeavy,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    /// Plain fine-tuning of the MLPs and heads instead of separate adapters.
    NoSepAda,
    /// No relation-guided recovery losses.
    NoRr,
    /// No conflict compensation.
    NoCc,
    /// No cross-task attention.
    NoCta,
    /// One adapter on each MLP instead of separate spatial/temporal adapters.
    MlpAdapter,
    /// Per-sample recovery instead of the top-K hybrid.
    NaiveRr,
    NoFinetune,
    NoAnalyzer,
}

enum Failure {
    User(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

fn user(msg: impl Into<String>) -> Failure {
    Failure::User(msg.into())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| user(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| user(format!("invalid config {}: {e}", path.display())))
}

fn apply_ablation(cfg: &mut ExperimentConfig, a: Ablation) -> &'static str {
    let t = &mut cfg.train;
    match a {
        Ablation::NoSepAda => {
            t.expansion.separate_adapters = false;
            t.expansion.mlp_adapter = false;
            t.expansion.cross_task_attention = false;
            "separate adapters off; MLPs and heads train on each task"
        }
        Ablation::NoRr => {
            t.causal.relation_recovery = false;
            "relation recovery off; L_T and L_S pinned to 0"
        }
        Ablation::NoCc => {
            t.causal.compensation = false;
            "compensation off; E_S and E_T pinned to 0"
        }
        Ablation::NoCta => {
            t.expansion.cross_task_attention = false;
            "cross-task attention off"
        }
        Ablation::MlpAdapter => {
            t.expansion.mlp_adapter = true;
            "one adapter per MLP replaces the spatial/temporal pair"
        }
        Ablation::NaiveRr => {
            t.causal.hybrid = false;
            "per-sample recovery replaces the top-K hybrid"
        }
        Ablation::NoFinetune => {
            t.finetune = false;
            "classifier fine-tuning off"
        }
        Ablation::NoAnalyzer => {
            t.analyzer.enabled = false;
            "relation curves off"
        }
    }
}

fn obtain_corpus(cfg: &ExperimentConfig, generate: bool) -> Result<Corpus, Failure> {
    match &cfg.corpus_dir {
        None => Ok(Corpus::generate(&cfg.corpus)?),
        Some(dir) if dir.join("index.json").is_file() => Ok(import_corpus(dir)?),
        Some(dir) if generate => {
            let c = Corpus::generate(&cfg.corpus)?;
            export_corpus(&c, dir).map_err(|e| user(format!("cannot write corpus to {}: {e}", dir.display())))?;
            Ok(c)
        }
        Some(dir) => Err(user(format!(
            "no corpus at {} (pass --generate to create it)",
            dir.display()
        ))),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Datagen { config, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.set_seed(s);
            }
            let corpus = Corpus::generate(&cfg.corpus)?;
            export_corpus(&corpus, &out).map_err(|e| user(format!("cannot write corpus to {}: {e}", out.display())))?;
            println!(
                "wrote {} classes ({} train, {} test clips) to {}",
                corpus.specs.len(),
                corpus.train.len(),
                corpus.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            out,
            corpus,
            generate,
            tasks,
            split,
            epochs,
            ablate,
            quiet,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.set_seed(s);
            }
            if let Some(o) = out {
                cfg.output = o;
            }
            if let Some(c) = corpus {
                cfg.corpus_dir = Some(c);
            }
            if let Some(t) = tasks {
                cfg.stream.tasks = t;
            }
            if let Some(s) = split {
                cfg.stream.split = match s {
                    Split::Balanced => SplitStyle::Balanced,
                    Split::HeadHeavy => SplitStyle::HeadHeavy,
                };
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            for a in ablate {
                let note = apply_ablation(&mut cfg, a);
                if !quiet {
                    eprintln!("{note}");
                }
            }
            cfg.validate()?;
            let corpus = obtain_corpus(&cfg, generate)?;
            let out = cfg.output.clone();
            let mut progress = |line: &str| {
                if !quiet {
                    eprintln!("{line}");
                }
            };
            let outcome = run_experiment(&cfg, &corpus, &out, &mut progress)?;
            let s = &outcome.summary;
            println!(
                "{}: Acc_N {} BWF {} avg {}",
                out.display(),
                vcil_core::fmt_sig(s.acc_n),
                s.bwf.map_or("n/a".into(), vcil_core::fmt_sig),
                vcil_core::fmt_sig(s.avg_acc)
            );
            Ok(())
        }
        Command::Analyze { run_dir, csv } => {
            let (text, table) = report::analyze(&run_dir)?;
            print!("{text}");
            if let Some(p) = csv {
                fs::write(&p, table).map_err(|e| user(format!("cannot write {}: {e}", p.display())))?;
            }
            Ok(())
        }
        Command::Report { runs, csv } => {
            let (text, table) = report::report(&runs)?;
            print!("{text}");
            if let Some(p) = csv {
                fs::write(&p, table).map_err(|e| user(format!("cannot write {}: {e}", p.display())))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}

impl From<report::ReportError> for Failure {
    fn from(e: report::ReportError) -> Self {
        Failure::User(e.0)
    }
}
