use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prccf::config::RunConfig;
use prccf::fixtures::write_fixture_set;
use prccf::Result;
use prccf_cli::{
    ablation_variants, cmd_ablate, cmd_chat, cmd_eval, cmd_index, cmd_ingest, cmd_sweep_pairs,
    cmd_train, emit, exit_code, ChatOptions,
};

#[derive(Parser)]
#[command(name = "prccf", version, about = "Persona-guided, cause-aware emotional support generation")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set retriever.pairs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Print the resolved configuration with provenance tags and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic fixture corpus, personas and knowledge table.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        dialogues: usize,
    },
    /// Load, split and tokenize the corpus.
    Ingest,
    /// Build the retrieval index over the training split.
    Index,
    /// Train and keep the lowest-validation-perplexity checkpoint.
    Train,
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and score the full model and the five ablations.
    Ablate,
    /// Train and score one model per demonstration count.
    SweepPairs {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3, 4, 5, 6])]
        values: Vec<usize>,
    },
    /// Interactive session on stdin.
    Chat {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "")]
        persona: String,
        #[arg(long, default_value = "")]
        problem: String,
        #[arg(long, default_value = "sadness")]
        emotion: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if cli.dump_config {
        return emit(&mut out, &cfg.dump_with_provenance());
    }
    let Some(command) = cli.command else {
        return Err(prccf::Error::Config(vec!["no command given (see --help)".into()]));
    };
    match command {
        Command::Fixtures { out: dir, dialogues } => {
            let p = write_fixture_set(&dir, dialogues, cfg.seed)?;
            emit(
                &mut out,
                &format!(
                    "corpus: {}\npersonas: {}\nknowledge: {}\n",
                    p.corpus.display(),
                    p.personas.display(),
                    p.knowledge.display()
                ),
            )
        }
        Command::Ingest => {
            let s = cmd_ingest(&cfg)?;
            emit(
                &mut out,
                &format!(
                    "ingested {} dialogues: train {}, val {}, test {}; vocab {}; {} warnings\n",
                    s.dialogues,
                    s.train,
                    s.val,
                    s.test,
                    s.vocab_size,
                    s.warnings.len()
                ),
            )
        }
        Command::Index => {
            let s = cmd_index(&cfg)?;
            emit(
                &mut out,
                &format!(
                    "indexed {} entries in {} buckets -> {}\n",
                    s.entries,
                    s.buckets,
                    s.path.display()
                ),
            )
        }
        Command::Train => {
            let s = cmd_train(&cfg)?;
            emit(
                &mut out,
                &format!(
                    "{} steps, loss {:.4} -> {:.4}, best epoch {}\n",
                    s.steps, s.first_loss, s.last_loss, s.best_epoch
                ),
            )
        }
        Command::Eval { checkpoint } => {
            let (_, report) = cmd_eval(&cfg, checkpoint.as_deref())?;
            emit(&mut out, &report)
        }
        Command::Ablate => {
            let run = cmd_ablate(&cfg, &ablation_variants())?;
            emit(&mut out, &run.report)
        }
        Command::SweepPairs { values } => {
            let (_, text) = cmd_sweep_pairs(&cfg, &values)?;
            emit(&mut out, &text)
        }
        Command::Chat {
            checkpoint,
            persona,
            problem,
            emotion,
        } => {
            let opts = ChatOptions {
                persona,
                problem_type: problem,
                emotion,
            };
            let stdin = io::stdin();
            let mut input = stdin.lock();
            cmd_chat(&cfg, checkpoint.as_deref(), &opts, &mut input, &mut out).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(io::stderr(), "error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
