use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rblod::experiment::{
    cmd_convergence, cmd_offline, cmd_online, cmd_richards, emit_tables, parse_config_text, sig5, ErrorReport,
    ExperimentConfig, TableFormat,
};
use rblod::persist::{load_compatible, DbIdentity};
use rblod::rboffline::OfflineDb;
use rblod::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "rblod", version, about = "Reduced basis LOD experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the localized reduced bases and store them with --db.
    Offline(Settings),
    /// Solve a linear problem at --mu and compare with a fine reference.
    Online(Settings),
    /// Run offline and online phases for every row of --rows and report EOCs.
    Convergence(Settings),
    /// Solve the Richards problem with Newton's method in the reduced space.
    Richards(Settings),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

#[derive(Args, Debug)]
struct Settings {
    /// key=value file; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// mp1 or mp2.
    #[arg(long)]
    problem: Option<String>,
    /// Coarse cells per direction.
    #[arg(long)]
    coarse_n: Option<usize>,
    /// Uniform refinements of the coarse mesh.
    #[arg(long)]
    fine_levels: Option<usize>,
    /// Patch layers.
    #[arg(long)]
    k: Option<usize>,
    /// Greedy tolerance.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    /// Convergence rows as n:k,n:k,...
    #[arg(long)]
    rows: Option<String>,
    /// Offline database directory.
    #[arg(long)]
    db: Option<PathBuf>,
    /// Output directory for tables and solution arrays.
    #[arg(long)]
    out: Option<PathBuf>,
    /// full or precomputed.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    newton_tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// training-min or per-parameter.
    #[arg(long)]
    alpha_rule: Option<String>,
    /// Table format printed to standard output.
    #[arg(long, value_enum, default_value = "markdown")]
    format: Format,
}

impl Settings {
    fn flag_pairs(&self) -> Vec<(String, String)> {
        let mut pairs = Vec::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                pairs.push((key.to_string(), v));
            }
        };
        push("problem", self.problem.clone());
        push("coarse-n", self.coarse_n.map(|v| v.to_string()));
        push("fine-levels", self.fine_levels.map(|v| v.to_string()));
        push("k", self.k.map(|v| v.to_string()));
        push("tol", self.tol.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("train-size", self.train_size.map(|v| v.to_string()));
        push("mu", self.mu.map(|v| v.to_string()));
        push("rows", self.rows.clone());
        push("db", self.db.as_ref().map(|p| p.display().to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        push("variant", self.variant.clone());
        push("threads", self.threads.map(|v| v.to_string()));
        push("newton-tol", self.newton_tol.map(|v| v.to_string()));
        push("max-iter", self.max_iter.map(|v| v.to_string()));
        push("alpha-rule", self.alpha_rule.clone());
        pairs
    }

    fn resolve(&self) -> Result<ExperimentConfig> {
        let file = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
                parse_config_text(&text)?
            }
            None => Vec::new(),
        };
        ExperimentConfig::resolve(&file, &self.flag_pairs())
    }

    fn table_format(&self) -> TableFormat {
        match self.format {
            Format::Markdown => TableFormat::Markdown,
            Format::Csv => TableFormat::Csv,
        }
    }
}

fn configure_threads(cfg: &ExperimentConfig) {
    if let Some(n) = cfg.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
}

/// Loads the database at `cfg.db` when it exists, otherwise builds it (and
/// stores it when a path was given).
fn database(cfg: &ExperimentConfig) -> Result<OfflineDb> {
    if let Some(path) = &cfg.db {
        if path.join("manifest.txt").is_file() {
            log::info!("loading offline database {}", path.display());
            return load_compatible(
                path,
                &DbIdentity {
                    problem: cfg.problem.clone(),
                    n_coarse: cfg.n_coarse,
                    levels: cfg.fine_levels,
                    k: Some(cfg.k),
                },
            );
        }
    }
    let run = cmd_offline(cfg)?;
    log::info!("offline phase took {} s", sig5(run.seconds));
    Ok(run.db)
}

fn single_row(cfg: &ExperimentConfig, row: rblod::experiment::ErrorRow) -> ErrorReport {
    ErrorReport {
        problem: cfg.problem.clone(),
        rows: vec![row],
    }
}

fn run(command: &Command) -> Result<()> {
    match command {
        Command::Offline(s) => {
            let cfg = s.resolve()?;
            configure_threads(&cfg);
            let run = cmd_offline(&cfg)?;
            print!("{}", run.summary);
            println!("t_off_total={}", sig5(run.seconds));
            if let Some(path) = &cfg.db {
                println!("db={}", path.display());
            }
        }
        Command::Online(s) => {
            let cfg = s.resolve()?;
            configure_threads(&cfg);
            let db = database(&cfg)?;
            let run = cmd_online(&cfg, &db)?;
            print!("{}", emit_tables(&single_row(&cfg, run.row), s.table_format()));
            report_out(cfg.out.as_deref());
        }
        Command::Convergence(s) => {
            let cfg = s.resolve()?;
            configure_threads(&cfg);
            let report = cmd_convergence(&cfg)?;
            print!("{}", emit_tables(&report, s.table_format()));
            report_out(cfg.out.as_deref());
        }
        Command::Richards(s) => {
            let cfg = s.resolve()?;
            configure_threads(&cfg);
            let db = database(&cfg)?;
            let run = cmd_richards(&cfg, &db)?;
            print!("{}", emit_tables(&single_row(&cfg, run.row), s.table_format()));
            let trace: Vec<String> = run.trace.iter().map(|&t| sig5(t)).collect();
            println!("newton_iterations={}", run.trace.len());
            println!("newton_trace={}", trace.join(","));
            println!("clamped_parameters={}", run.clamped);
            if let Some(d) = run.variant_difference {
                println!("variant_difference={}", sig5(d));
            }
            report_out(cfg.out.as_deref());
        }
    }
    Ok(())
}

fn report_out(out: Option<&Path>) {
    if let Some(dir) = out {
        println!("out={}", dir.display());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
