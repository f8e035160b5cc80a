use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use synalign::atoms::AtomStore;
use synalign::encoders::{load_locator, serve};
use synalign::evalreport::TableStyle;
use synalign::experiment::{replay, report, Command, ExperimentConfig, Run};
use synalign::synth::{synthesize, SynthSpec};
use synalign::Error;

/// Exit codes by error category.
const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_RUNTIME: u8 = 5;
const EXIT_REPLAY_MISMATCH: u8 = 6;

#[derive(Parser, Debug)]
#[command(
    name = "synalign",
    version,
    about = "Synonymy prediction experiments over vocabulary atoms"
)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args, Debug, Clone)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; defaults to runs/<config hash>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the global seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Parse and validate an atom file.
    Ingest {
        /// Atom file; taken from the config when omitted.
        atoms: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also record the summary in this run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Generate labeled pairs and the train/test split.
    GenPairs(RunArgs),
    /// Build the embedding table (contextual encoder or random init).
    Extract(RunArgs),
    /// Train the Siamese model.
    Train(RunArgs),
    /// Evaluate the trained model on the test split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Zero-shot cross-encoder evaluation in both input orders.
    CrossEval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Every step in order: ingest, gen-pairs, extract, train, eval, cross-eval.
    Pipeline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Merge metric tables of several run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-execute a run manifest into a new directory and compare outputs.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write a seeded synthetic atom corpus.
    Synth {
        #[arg(long, default_value_t = 200)]
        concepts: usize,
        #[arg(long, default_value_t = SynthSpec::default().seed)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Serve an encoder over the JSON-lines protocol on stdin/stdout.
    ServeEncoder { locator: String },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Config(_)
        | Error::Parse { .. }
        | Error::DuplicateAui(_)
        | Error::EmptyString(_)
        | Error::UnknownAui(_)
        | Error::Json(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut c = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn open_run(args: &RunArgs) -> Result<Run, Error> {
    let config = load_config(args)?;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(&config.hash()[..12]));
    Run::open(dir, config, args.force)
}

fn step(run: &Run, command: Command, threshold: Option<f64>) -> Result<(), Error> {
    let outcome = run.run(command, threshold)?;
    eprintln!("{} → {}", command.as_str(), run.dir().display());
    println!("{}", outcome.summary.trim_end());
    Ok(())
}

fn write_new(path: &Path, force: bool) -> Result<BufWriter<File>, Error> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "refusing to overwrite {} (pass --force)",
            path.display()
        )));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn execute(cmd: Cmd) -> Result<u8, Error> {
    match cmd {
        Cmd::Ingest {
            atoms,
            config,
            out,
            force,
        } => {
            let mut cfg = match (&config, &atoms) {
                (Some(c), _) => ExperimentConfig::load(c)?,
                (None, Some(a)) => ExperimentConfig::with_atoms(a),
                (None, None) => return Err(Error::Config("give an atom file or --config".into())),
            };
            if let (Some(_), Some(a)) = (&config, &atoms) {
                cfg.atoms = a.clone();
            }
            match out {
                Some(dir) => step(&Run::open(dir, cfg, force)?, Command::Ingest, None)?,
                None => {
                    let r = AtomStore::from_path(&cfg.atoms)?.validate();
                    println!("{}", serde_json::to_string_pretty(&r)?);
                }
            }
        }
        Cmd::GenPairs(a) => step(&open_run(&a)?, Command::GenPairs, None)?,
        Cmd::Extract(a) => step(&open_run(&a)?, Command::Extract, None)?,
        Cmd::Train(a) => step(&open_run(&a)?, Command::Train, None)?,
        Cmd::Eval { run, threshold } => step(&open_run(&run)?, Command::Eval, threshold)?,
        Cmd::CrossEval { run, threshold } => step(&open_run(&run)?, Command::CrossEval, threshold)?,
        Cmd::Pipeline { run, threshold } => {
            let r = open_run(&run)?;
            let cfg = r.config().clone();
            step(&r, Command::Ingest, None)?;
            step(&r, Command::GenPairs, None)?;
            if cfg.vectors.is_none() {
                step(&r, Command::Extract, None)?;
            }
            step(&r, Command::Train, None)?;
            step(&r, Command::Eval, threshold)?;
            if cfg.encoder.is_some() {
                step(&r, Command::CrossEval, threshold)?;
            }
        }
        Cmd::Report { runs, format, out } => {
            let style = match format {
                Format::Markdown => TableStyle::Markdown,
                Format::Csv => TableStyle::Csv,
            };
            let table = report(&runs, style)?;
            match out {
                Some(p) => fs::write(p, table)?,
                None => print!("{table}"),
            }
        }
        Cmd::Replay { manifest, out, force } => {
            let rep = replay(&manifest, &out, force)?;
            println!(
                "replayed {} command(s) into {}; {} output(s) compared",
                rep.commands,
                out.display(),
                rep.compared
            );
            if !rep.identical() {
                for (cmd, path, want, got) in &rep.mismatches {
                    println!(
                        "MISMATCH {cmd} {path}: recorded {} replayed {}",
                        &want[..12],
                        &got[..12]
                    );
                }
                return Ok(EXIT_REPLAY_MISMATCH);
            }
            println!("all outputs identical");
        }
        Cmd::Synth {
            concepts,
            seed,
            out,
            force,
        } => {
            let store = synthesize(&SynthSpec {
                concepts,
                seed,
                ..SynthSpec::default()
            })?;
            let mut w = write_new(&out, force)?;
            store.write_to(&mut w)?;
            w.flush()?;
            println!(
                "{} atoms over {} concepts → {}",
                store.len(),
                store.num_concepts(),
                out.display()
            );
        }
        Cmd::ServeEncoder { locator } => {
            let enc = load_locator(&locator)?;
            let pair = enc.pair_classifier()?;
            let stdin = io::stdin();
            serve(pair.as_ref(), stdin.lock(), io::stdout().lock())?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
