//! The `mixq` command line: knowledge-database management, estimation,
//! search, training, quantization, evaluation and the end-to-end pipeline.

use std::io::Write;

use clap::{CommandFactory, FromArgMatches};

mod args;
mod commands;
mod pipeline;

pub use args::Cli;
use args::Command;

/// Misuse of the command line: bad flag values or combinations.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

/// Output streams and global flags shared by every command.
pub(crate) struct Ctx<'a> {
    pub json: bool,
    pub seed: u64,
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
    pool: rayon::ThreadPool,
}

impl Ctx<'_> {
    /// Runs numeric work inside the command's thread budget.
    pub fn compute<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}

fn version_text() -> &'static str {
    static TEXT: std::sync::OnceLock<String> = std::sync::OnceLock::new();
    TEXT.get_or_init(|| {
        format!(
            "{} (knowledge database schema {}, model format {})",
            env!("CARGO_PKG_VERSION"),
            mixq_core::kb::FORMAT_VERSION,
            mixq_core::model::MODEL_FORMAT_VERSION
        )
    })
}

/// Maps an error to the documented exit code.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    use mixq_core::model::ModelError;
    use mixq_core::train::TrainError;
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if matches!(cause.downcast_ref::<ModelError>(), Some(ModelError::Overflow { .. }))
            || matches!(cause.downcast_ref::<TrainError>(), Some(TrainError::Model(ModelError::Overflow { .. })))
        {
            return EXIT_INTERNAL;
        }
        if cause.is::<mixq_core::kb::KbError>()
            || cause.is::<mixq_core::search::SearchError>()
            || cause.is::<mixq_core::data::DataError>()
            || cause.is::<ModelError>()
            || cause.is::<TrainError>()
            || cause.is::<mixq_core::quant::QuantError>()
            || cause.is::<std::io::Error>()
            || cause.is::<serde_json::Error>()
        {
            return EXIT_DATA;
        }
    }
    EXIT_INTERNAL
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Results go to `out`, diagnostics to `err`.
pub fn run(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let version = version_text();
    let matches = match Cli::command().version(version).try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return EXIT_USAGE;
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            let _ = writeln!(err, "error: {e:#}");
            code
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<()> {
    // training keeps a single thread unless asked otherwise
    let default_threads = match cli.command {
        Command::Train(_) => 1,
        _ => 0,
    };
    let threads = match cli.threads {
        Some(0) => return Err(UsageError("--threads must be positive".into()).into()),
        Some(t) => t,
        None => default_threads,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let mut ctx = Ctx { json: cli.json, seed: cli.seed, out, err, pool };
    match cli.command {
        Command::Kb { action } => commands::kb(&mut ctx, action),
        Command::Estimate(a) => commands::estimate(&mut ctx, a),
        Command::Search(a) => commands::search(&mut ctx, a),
        Command::Train(a) => commands::train(&mut ctx, a),
        Command::Quantize(a) => commands::quantize(&mut ctx, a),
        Command::Eval(a) => commands::eval(&mut ctx, a),
        Command::Infer(a) => commands::infer(&mut ctx, a),
        Command::Synth(a) => commands::synth(&mut ctx, a),
        Command::Pipeline(a) => pipeline::pipeline(&mut ctx, a),
    }
}
