//! `gkrls` command-line front end.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage error, 3 invalid data or
//! specification, 4 convergence failure (a fitted artifact is still written
//! and flagged when one exists).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use gkrls_core::data::{load_csv, ColumnRoles, Dataset};
use gkrls_core::spec::{parse_spec, ModelSpec};
use gkrls_core::GkrlsError;
use serde::Serialize;

pub mod commands;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CONVERGENCE: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] GkrlsError),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => core_exit_code(e),
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Write { .. } => EXIT_OTHER,
        }
    }
}

fn core_exit_code(e: &GkrlsError) -> i32 {
    match e {
        GkrlsError::FoldFit { source, .. } => core_exit_code(source),
        GkrlsError::Convergence(_) => EXIT_CONVERGENCE,
        GkrlsError::InvalidArgument(_) => EXIT_USAGE,
        e if e.is_data_error() => EXIT_DATA,
        _ => EXIT_OTHER,
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser, Serialize)]
#[command(name = "gkrls", version, about = "Kernel regularized least squares with sketching, REML tuning and inference")]
pub struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Base seed for every random choice.
    #[arg(long, global = true, env = "GKRLS_SEED", default_value_t = 1)]
    pub seed: u64,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Fit a model and write a .gkm artifact plus a JSON report.
    Fit(commands::fit::FitArgs),
    /// Predict from a saved model.
    Predict(commands::predict::PredictArgs),
    /// Marginal effects from a saved model.
    Effects(commands::effects::EffectsArgs),
    /// Double machine learning (partially linear or ATE).
    Dml(commands::causal::DmlArgs),
    /// R-learner for heterogeneous effects.
    Rlearner(commands::causal::RlearnerArgs),
    /// Replicated simulation studies.
    Simulate(commands::simulate::SimulateArgs),
    /// Pointwise interval coverage study.
    Coverage(commands::coverage::CoverageArgs),
    /// Wall-clock scaling benchmark with log-log slope fits.
    Bench(commands::bench::BenchArgs),
}

/// Columns of the input CSV and their roles.
#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file with column roles (outcome, covariates, cluster, weights, folds, categorical).
    #[arg(long)]
    pub roles: Option<PathBuf>,
    /// Cluster identifier column.
    #[arg(long)]
    pub cluster: Option<String>,
    /// Prior weights column.
    #[arg(long)]
    pub weights: Option<String>,
    /// Columns to treat as categorical (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
}

impl DataArgs {
    pub fn roles(&self, outcome: &str) -> CliResult<ColumnRoles> {
        let mut roles = match &self.roles {
            Some(p) => ColumnRoles::from_json_file(p)?,
            None => ColumnRoles::default(),
        };
        if roles.outcome.is_empty() {
            roles.outcome = outcome.to_string();
        }
        if self.cluster.is_some() {
            roles.cluster = self.cluster.clone();
        }
        if self.weights.is_some() {
            roles.weights = self.weights.clone();
        }
        for c in &self.categorical {
            if !roles.categorical.contains(c) {
                roles.categorical.push(c.clone());
            }
        }
        Ok(roles)
    }

    pub fn load(&self, outcome: &str) -> CliResult<Dataset> {
        let roles = self.roles(outcome)?;
        Ok(load_csv(&self.data, &roles)?)
    }
}

/// Inline formula or JSON when the text contains `~` or starts with `{`,
/// otherwise a path to a file holding either.
pub fn read_spec(text: &str) -> CliResult<ModelSpec> {
    let t = text.trim();
    if t.contains('~') || t.starts_with('{') {
        return Ok(parse_spec(t)?);
    }
    let path = Path::new(t);
    let body = std::fs::read_to_string(path).map_err(|source| GkrlsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(parse_spec(&body)?)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(GkrlsError::from)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

/// JSON to `path`, or to stdout when no path is given.
pub fn emit_json<T: Serialize>(path: Option<&Path>, value: &T) -> CliResult<()> {
    match path {
        Some(p) => write_json_file(p, value),
        None => {
            let s = serde_json::to_string_pretty(value).map_err(GkrlsError::from)?;
            println!("{s}");
            Ok(())
        }
    }
}

/// CSV rows to `path`, or to stdout when no path is given.
pub fn emit_csv<T: Serialize>(path: Option<&Path>, rows: &[T]) -> CliResult<()> {
    match path {
        Some(p) => Ok(gkrls_simlab::output::write_csv(p, rows)?),
        None => {
            let out = std::io::stdout();
            let mut lock = out.lock();
            gkrls_simlab::output::write_csv_to(&mut lock, rows)?;
            lock.flush().map_err(|source| CliError::Write {
                path: PathBuf::from("<stdout>"),
                source,
            })
        }
    }
}

fn init_logging(cli: &Cli) {
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            2 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("GKRLS_LOG")
        .format_timestamp(None)
        .try_init();
}

/// Parse arguments, run the subcommand and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(&cli);
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return EXIT_USAGE;
    }
    // Fails harmlessly when a pool already exists (repeated in-process runs).
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    match serde_json::to_string(&cli) {
        Ok(s) => log::info!("resolved config: {s}"),
        Err(e) => log::warn!("cannot serialize config: {e}"),
    }
    let result = match &cli.command {
        Command::Fit(a) => commands::fit::run(a, cli.seed),
        Command::Predict(a) => commands::predict::run(a),
        Command::Effects(a) => commands::effects::run(a),
        Command::Dml(a) => commands::causal::run_dml(a, cli.seed),
        Command::Rlearner(a) => commands::causal::run_rlearner(a, cli.seed),
        Command::Simulate(a) => commands::simulate::run(a, cli.seed),
        Command::Coverage(a) => commands::coverage::run(a, cli.seed),
        Command::Bench(a) => commands::bench::run(a, cli.seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        let code = |e: GkrlsError| CliError::from(e).exit_code();
        assert_eq!(code(GkrlsError::Data("x".into())), EXIT_DATA);
        assert_eq!(code(GkrlsError::Spec("x".into())), EXIT_DATA);
        assert_eq!(code(GkrlsError::MissingValues { rows: vec![1] }), EXIT_DATA);
        assert_eq!(code(GkrlsError::InvalidArgument("x".into())), EXIT_USAGE);
        assert_eq!(code(GkrlsError::Convergence("x".into())), EXIT_CONVERGENCE);
        assert_eq!(
            code(GkrlsError::FoldFit {
                fold: 1,
                source: Box::new(GkrlsError::Convergence("x".into()))
            }),
            EXIT_CONVERGENCE
        );
        assert_eq!(code(GkrlsError::HashMismatch), EXIT_OTHER);
        assert_eq!(CliError::Usage("x".into()).exit_code(), EXIT_USAGE);
    }

    #[test]
    fn spec_is_read_inline_or_from_file() {
        let inline = read_spec("y ~ fixed(x1) + kernel(x1, x2)").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.txt");
        std::fs::write(&path, "y ~ fixed(x1) + kernel(x1, x2)\n").unwrap();
        let from_file = read_spec(path.to_str().unwrap()).unwrap();
        assert_eq!(inline, from_file);
        assert!(read_spec("/no/such/spec").unwrap_err().exit_code() == EXIT_DATA);
    }

    #[test]
    fn help_and_bad_flags() {
        assert_eq!(run(["gkrls", "--help"]), 0);
        assert_eq!(run(["gkrls", "fit", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["gkrls", "bench", "--threads", "0"]), EXIT_USAGE);
    }
}
