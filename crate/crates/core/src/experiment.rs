//! Experiment drivers: offline builds, online error measurements,
//! convergence studies and Richards runs, with table output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::coeffs::{problem_by_name, ModelOptions};
use crate::error::{Error, Result};
use crate::fem::{fem_reference_solve, relative_error, NormKind, SpdFactorization};
use crate::lod::Discretization;
use crate::persist::{save_offline, write_array};
use crate::rboffline::{build_offline, generate_training_set, AlphaRule, OfflineConfig, OfflineDb};
use crate::rbonline::{
    assemble_global, assemble_global_load, fine_newton_reference, newton_richards, online_basis, NewtonSettings,
    NewtonVariant, OnlineSolution, ParameterAssignment,
};

/// Settings of one experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: String,
    pub n_coarse: usize,
    pub fine_levels: usize,
    pub k: usize,
    pub tol: f64,
    pub seed: u64,
    pub train_size: usize,
    /// Online parameter of linear problems.
    pub mu: f64,
    /// `(n_coarse, k)` rows of a convergence study; the fine mesh of the
    /// base configuration is kept for every row.
    pub rows: Vec<(usize, usize)>,
    pub db: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub variant: NewtonVariant,
    pub threads: Option<usize>,
    pub newton_tol: f64,
    pub max_iter: usize,
    pub newton_initial: Option<f64>,
    /// Also runs the other Newton variant and reports the difference.
    pub compare_variants: bool,
    pub alpha_rule: AlphaRule,
    pub first_parameter: Option<f64>,
    pub epsilon: Option<f64>,
    pub j_max: usize,
}

impl ExperimentConfig {
    /// Defaults of the built-in problems.
    pub fn defaults(problem: &str) -> Result<Self> {
        let base = ExperimentConfig {
            problem: problem.to_string(),
            n_coarse: 8,
            fine_levels: 4,
            k: 2,
            tol: 0.1,
            seed: 1,
            train_size: 100,
            mu: 2.012,
            rows: vec![(4, 2), (8, 3), (16, 4)],
            db: None,
            out: None,
            variant: NewtonVariant::Full,
            threads: None,
            newton_tol: 1e-5,
            max_iter: 15,
            newton_initial: None,
            compare_variants: true,
            alpha_rule: AlphaRule::TrainingMin,
            first_parameter: None,
            epsilon: None,
            j_max: 50,
        };
        match problem {
            "mp1" => Ok(base),
            // the training minimum of the coercivity constant is tiny at the
            // dry end of the domain
            "mp2" => Ok(ExperimentConfig {
                fine_levels: 3,
                tol: 0.01,
                rows: vec![(4, 1), (8, 2), (16, 3)],
                alpha_rule: AlphaRule::PerParameter,
                ..base
            }),
            other => Err(Error::InvalidArgument(format!("unknown problem '{other}'"))),
        }
    }

    /// Builds a configuration from the defaults of the named problem, then
    /// `file` entries, then `flags`; later sources win. The problem itself is
    /// taken from the flags, the file, or `mp1`, in that order.
    pub fn resolve(file: &[(String, String)], flags: &[(String, String)]) -> Result<Self> {
        let problem = flags
            .iter()
            .chain(file)
            .find(|(k, _)| k == "problem")
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| "mp1".to_string());
        let mut cfg = Self::defaults(&problem)?;
        for (k, v) in file.iter().chain(flags) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one `key=value` entry; keys are the long flag names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value '{value}' for '{key}'")))
        }
        match key {
            "problem" => {
                if value != self.problem {
                    return Err(Error::InvalidArgument(format!(
                        "problem '{value}' set after defaults for '{}'",
                        self.problem
                    )));
                }
            }
            "coarse-n" => self.n_coarse = num(key, value)?,
            "fine-levels" => self.fine_levels = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "tol" => self.tol = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "train-size" => self.train_size = num(key, value)?,
            "mu" => self.mu = num(key, value)?,
            "rows" => self.rows = parse_rows(value)?,
            "db" => self.db = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "variant" => self.variant = NewtonVariant::parse(value)?,
            "threads" => self.threads = Some(num(key, value)?),
            "newton-tol" => self.newton_tol = num(key, value)?,
            "max-iter" => self.max_iter = num(key, value)?,
            "initial" => self.newton_initial = Some(num(key, value)?),
            "compare-variants" => self.compare_variants = num(key, value)?,
            "alpha-rule" => self.alpha_rule = AlphaRule::parse(value)?,
            "first-parameter" => self.first_parameter = Some(num(key, value)?),
            "epsilon" => self.epsilon = Some(num(key, value)?),
            "j-max" => self.j_max = num(key, value)?,
            other => return Err(Error::InvalidArgument(format!("unknown setting '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coarse == 0 {
            return Err(Error::InvalidArgument("coarse-n must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be positive, got {}", self.tol)));
        }
        if self.train_size == 0 {
            return Err(Error::InvalidArgument("train-size must be positive".into()));
        }
        if !(self.newton_tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidArgument("newton-tol and max-iter must be positive".into()));
        }
        if self.j_max == 0 {
            return Err(Error::InvalidArgument("j-max must be positive".into()));
        }
        Ok(())
    }

    /// Fine cells per direction.
    pub fn fine_n(&self) -> usize {
        self.n_coarse << self.fine_levels
    }

    fn options(&self) -> ModelOptions {
        ModelOptions {
            epsilon: self.epsilon,
            ..ModelOptions::default()
        }
    }

    pub fn discretization(&self) -> Result<Discretization> {
        Discretization::new(problem_by_name(&self.problem, &self.options())?, self.n_coarse, self.fine_levels)
    }

    fn newton_settings(&self) -> NewtonSettings {
        NewtonSettings {
            tol: self.newton_tol,
            max_iter: self.max_iter,
            initial: self.newton_initial,
        }
    }

    /// The configuration of one convergence row on the same fine mesh.
    pub fn row(&self, n_coarse: usize, k: usize) -> Result<Self> {
        let fine = self.fine_n();
        if n_coarse == 0 || fine % n_coarse != 0 || !(fine / n_coarse).is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "coarse-n {n_coarse} does not divide the fine mesh of {fine} cells by a power of two"
            )));
        }
        Ok(ExperimentConfig {
            n_coarse,
            k,
            fine_levels: (fine / n_coarse).trailing_zeros() as usize,
            ..self.clone()
        })
    }
}

/// Parses `n:k,n:k,...`.
pub fn parse_rows(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            let (n, k) = t
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::InvalidArgument(format!("row '{t}' is not n:k")))?;
            let n = n.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad row '{t}'")))?;
            let k = k.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad row '{t}'")))?;
            Ok((n, k))
        })
        .collect()
}

/// Parses `key=value` lines; `#` starts a comment line.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("config line {} is not key=value", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Errors and timings of one `(H, k)` configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub n_coarse: usize,
    pub k: usize,
    pub fine_levels: usize,
    /// Relative L2 error of the coarse part.
    pub coarse_l2: f64,
    pub l2: f64,
    /// Relative error in the full H1 norm.
    pub h1: f64,
    pub t_off_local_avg: f64,
    pub t_on_local_avg: f64,
    pub t_on_global_avg: f64,
    pub mean_dimension: f64,
    pub newton_iterations: Option<usize>,
}

impl ErrorRow {
    /// Coarse cell side.
    pub fn h(&self) -> f64 {
        1.0 / self.n_coarse as f64
    }
}

/// Average experimental orders of convergence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eoc {
    pub coarse_l2: Option<f64>,
    pub l2: Option<f64>,
    pub h1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorReport {
    pub problem: String,
    pub rows: Vec<ErrorRow>,
}

/// Mean of `log(e_i / e_{i+1}) / log(H_i / H_{i+1})` over successive rows;
/// `None` when a row has a zero error.
pub fn average_eoc(h: &[f64], e: &[f64]) -> Option<f64> {
    if h.len() < 2 || h.len() != e.len() || e.iter().any(|&x| !(x > 0.0)) {
        return None;
    }
    let rates: Vec<f64> = (0..h.len() - 1)
        .map(|i| (e[i] / e[i + 1]).ln() / (h[i] / h[i + 1]).ln())
        .collect();
    Some(rates.iter().sum::<f64>() / rates.len() as f64)
}

impl ErrorReport {
    /// Defined for two or more rows.
    pub fn eoc(&self) -> Option<Eoc> {
        if self.rows.len() < 2 {
            return None;
        }
        let h: Vec<f64> = self.rows.iter().map(ErrorRow::h).collect();
        let col = |f: fn(&ErrorRow) -> f64| average_eoc(&h, &self.rows.iter().map(f).collect::<Vec<_>>());
        Some(Eoc {
            coarse_l2: col(|r| r.coarse_l2),
            l2: col(|r| r.l2),
            h1: col(|r| r.h1),
        })
    }
}

/// Five significant digits.
pub fn sig5(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let e = x.abs().log10().floor() as i32;
    if (-4..=5).contains(&e) {
        format!("{:.*}", (4 - e).max(0) as usize, x)
    } else {
        format!("{x:.4e}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

const COLUMNS: [&str; 8] = [
    "H",
    "k",
    "coarse_l2",
    "l2",
    "h1",
    "t_off_local_avg",
    "t_on_local_avg",
    "t_on_global_avg",
];

fn row_cells(r: &ErrorRow) -> Vec<String> {
    vec![
        sig5(r.h()),
        r.k.to_string(),
        sig5(r.coarse_l2),
        sig5(r.l2),
        sig5(r.h1),
        sig5(r.t_off_local_avg),
        sig5(r.t_on_local_avg),
        sig5(r.t_on_global_avg),
    ]
}

fn eoc_cells(e: &Eoc) -> Vec<String> {
    [e.coarse_l2, e.l2, e.h1]
        .iter()
        .map(|v| v.map_or_else(|| "undefined".to_string(), sig5))
        .collect()
}

/// Renders the error table; an EOC line follows when defined.
pub fn emit_tables(report: &ErrorReport, format: TableFormat) -> String {
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str(&COLUMNS.join(","));
            out.push('\n');
            for r in &report.rows {
                out.push_str(&row_cells(r).join(","));
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            let _ = writeln!(out, "| {} |", COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(COLUMNS.len()));
            for r in &report.rows {
                let _ = writeln!(out, "| {} |", row_cells(r).join(" | "));
            }
            if let Some(e) = report.eoc() {
                let _ = writeln!(out, "\n| EOC coarse_l2 | EOC l2 | EOC h1 |\n|---|---|---|");
                let _ = writeln!(out, "| {} |", eoc_cells(&e).join(" | "));
            }
        }
    }
    out
}

/// Writes `errors.csv`, `errors.md` and, when defined, `eoc.csv` to `dir`.
pub fn write_tables(report: &ErrorReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    };
    write("errors.csv", emit_tables(report, TableFormat::Csv))?;
    write("errors.md", emit_tables(report, TableFormat::Markdown))?;
    if let Some(e) = report.eoc() {
        write("eoc.csv", format!("coarse_l2,l2,h1\n{}\n", eoc_cells(&e).join(",")))?;
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Result of an offline build.
#[derive(Debug)]
pub struct OfflineRun {
    pub db: OfflineDb,
    pub seconds: f64,
    pub summary: String,
}

/// Per-node dimensions and greedy histories as `key=value` text.
pub fn offline_summary(db: &OfflineDb) -> String {
    let dims = db.dimensions();
    let mut out = String::new();
    let _ = writeln!(out, "problem={}", db.disc.problem.id);
    let _ = writeln!(out, "n_coarse={} levels={} k={} tol={} seed={}", db.n_coarse, db.levels, db.k, db.tol, db.seed);
    let _ = writeln!(
        out,
        "nodes={} mean_dimension={} min_dimension={} max_dimension={} unconverged={}",
        dims.len(),
        sig5(dims.iter().sum::<usize>() as f64 / dims.len().max(1) as f64),
        dims.iter().min().copied().unwrap_or(0),
        dims.iter().max().copied().unwrap_or(0),
        db.spaces.iter().filter(|s| !s.converged).count()
    );
    let _ = writeln!(out, "t_off_local_avg={}", sig5(db.average_node_seconds()));
    let coarse = db.disc.hier.coarse();
    for s in &db.spaces {
        let x = coarse.nodes()[s.node];
        let history: Vec<String> = s.history.iter().map(|r| sig5(r.max_relative)).collect();
        let _ = writeln!(
            out,
            "node={} x={} y={} dimension={} converged={} history={}",
            s.interior_index,
            sig5(x[0]),
            sig5(x[1]),
            s.dim(),
            s.converged,
            history.join(",")
        );
    }
    out
}

/// Runs the offline phase and writes the database when `db` is set.
pub fn cmd_offline(cfg: &ExperimentConfig) -> Result<OfflineRun> {
    cfg.validate()?;
    let start = Instant::now();
    let disc = cfg.discretization()?;
    let training = generate_training_set(&disc.problem.parameter_domain, cfg.train_size, cfg.seed)?;
    let mut config = OfflineConfig::new(cfg.k, cfg.tol, training);
    config.alpha_rule = cfg.alpha_rule;
    config.first_parameter = cfg.first_parameter;
    config.j_max = cfg.j_max;
    log::info!(
        "offline {}: n_coarse={} levels={} k={} tol={}",
        cfg.problem,
        cfg.n_coarse,
        cfg.fine_levels,
        cfg.k,
        cfg.tol
    );
    let db = build_offline(disc, cfg.n_coarse, cfg.fine_levels, &config)?;
    let seconds = start.elapsed().as_secs_f64();
    if let Some(path) = &cfg.db {
        save_offline(&db, path)?;
    }
    let summary = offline_summary(&db);
    Ok(OfflineRun { db, seconds, summary })
}

fn check_db(cfg: &ExperimentConfig, db: &OfflineDb) -> Result<()> {
    if db.disc.problem.id != cfg.problem || db.n_coarse != cfg.n_coarse || db.levels != cfg.fine_levels || db.k != cfg.k
    {
        return Err(Error::IncompatibleDatabase(format!(
            "database ({}, n_coarse={}, levels={}, k={}) does not match the configuration ({}, n_coarse={}, levels={}, k={})",
            db.disc.problem.id, db.n_coarse, db.levels, db.k, cfg.problem, cfg.n_coarse, cfg.fine_levels, cfg.k
        )));
    }
    Ok(())
}

fn errors(db: &OfflineDb, solution: &OnlineSolution, reference: &[f64]) -> Result<(f64, f64, f64)> {
    let mesh = db.disc.hier.fine();
    let fine = solution.fine(db);
    let coarse = solution.coarse_part(&db.disc);
    Ok((
        relative_error(mesh, &coarse, reference, NormKind::L2)?,
        relative_error(mesh, &fine, reference, NormKind::L2)?,
        relative_error(mesh, &fine, reference, NormKind::H1)?,
    ))
}

/// Result of a linear online run.
#[derive(Debug)]
pub struct OnlineRun {
    pub row: ErrorRow,
    pub solution: OnlineSolution,
    pub reference: Vec<f64>,
}

/// Online solve at `cfg.mu` measured against a fresh fine reference.
pub fn cmd_online(cfg: &ExperimentConfig, db: &OfflineDb) -> Result<OnlineRun> {
    check_db(cfg, db)?;
    if db.disc.problem.nonlinear {
        return Err(Error::InvalidArgument(format!("problem '{}' is nonlinear; use richards", cfg.problem)));
    }
    let basis = online_basis(db, &ParameterAssignment::Uniform(cfg.mu))?;
    let mu = basis.parameters.first().copied().unwrap_or(cfg.mu);
    let start = Instant::now();
    let s = assemble_global(db, &basis);
    let f = assemble_global_load(db, &basis, &db.disc.load(mu));
    let coefficients = SpdFactorization::new(&s)?.solve(&f);
    let t_global = start.elapsed().as_secs_f64();
    let t_local = mean(&basis.local_seconds);
    let solution = OnlineSolution { coefficients, basis };
    let reference = fem_reference_solve(&db.disc.problem, mu, &db.disc.hier)?;
    let (coarse_l2, l2, h1) = errors(db, &solution, &reference)?;
    let row = ErrorRow {
        n_coarse: db.n_coarse,
        k: db.k,
        fine_levels: db.levels,
        coarse_l2,
        l2,
        h1,
        t_off_local_avg: db.average_node_seconds(),
        t_on_local_avg: t_local,
        t_on_global_avg: t_global,
        mean_dimension: mean(&db.dimensions().iter().map(|&d| d as f64).collect::<Vec<_>>()),
        newton_iterations: None,
    };
    if let Some(dir) = &cfg.out {
        write_solution(dir, db, &solution, &reference)?;
        write_tables(
            &ErrorReport {
                problem: cfg.problem.clone(),
                rows: vec![row.clone()],
            },
            dir,
        )?;
    }
    Ok(OnlineRun {
        row,
        solution,
        reference,
    })
}

/// Writes coefficient, fine solution and reference arrays.
pub fn write_solution(dir: &Path, db: &OfflineDb, solution: &OnlineSolution, reference: &[f64]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let fine = solution.fine(db);
    write_array(&dir.join("coefficients.f64"), &[solution.coefficients.len()], &solution.coefficients)?;
    write_array(&dir.join("solution_fine.f64"), &[fine.len()], &fine)?;
    let coarse = solution.coarse_part(&db.disc);
    write_array(&dir.join("solution_coarse.f64"), &[coarse.len()], &coarse)?;
    write_array(&dir.join("reference.f64"), &[reference.len()], reference)?;
    Ok(())
}

/// Result of a Richards run.
#[derive(Debug)]
pub struct RichardsRun {
    pub row: ErrorRow,
    pub solution: OnlineSolution,
    pub trace: Vec<f64>,
    /// Node parameters clamped over all iterations.
    pub clamped: usize,
    /// Relative Euclidean difference of the fine solutions of both variants.
    pub variant_difference: Option<f64>,
    pub reference_trace: Vec<f64>,
}

/// Newton's method in the reduced space against the fine Newton reference.
pub fn cmd_richards(cfg: &ExperimentConfig, db: &OfflineDb) -> Result<RichardsRun> {
    check_db(cfg, db)?;
    if !db.disc.problem.nonlinear {
        return Err(Error::InvalidArgument(format!("problem '{}' is linear; use online", cfg.problem)));
    }
    let settings = cfg.newton_settings();
    let outcome = newton_richards(db, &settings, cfg.variant)?;
    let variant_difference = if cfg.compare_variants {
        let other = match cfg.variant {
            NewtonVariant::Full => NewtonVariant::Precomputed,
            NewtonVariant::Precomputed => NewtonVariant::Full,
        };
        let b = newton_richards(db, &settings, other)?.solution.fine(db);
        let a = outcome.solution.fine(db);
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        Some(if den > 0.0 { num / den } else { num })
    } else {
        None
    };
    let reference = fine_newton_reference(&db.disc, &settings)?;
    let (coarse_l2, l2, h1) = errors(db, &outcome.solution, &reference.solution)?;
    let row = ErrorRow {
        n_coarse: db.n_coarse,
        k: db.k,
        fine_levels: db.levels,
        coarse_l2,
        l2,
        h1,
        t_off_local_avg: db.average_node_seconds(),
        t_on_local_avg: mean(&outcome.local_seconds),
        t_on_global_avg: mean(&outcome.global_seconds),
        mean_dimension: mean(&db.dimensions().iter().map(|&d| d as f64).collect::<Vec<_>>()),
        newton_iterations: Some(outcome.trace.len()),
    };
    if let Some(dir) = &cfg.out {
        write_solution(dir, db, &outcome.solution, &reference.solution)?;
        write_array(&dir.join("newton_trace.f64"), &[outcome.trace.len()], &outcome.trace)?;
        write_tables(
            &ErrorReport {
                problem: cfg.problem.clone(),
                rows: vec![row.clone()],
            },
            dir,
        )?;
    }
    Ok(RichardsRun {
        row,
        solution: outcome.solution,
        trace: outcome.trace,
        clamped: outcome.clamped,
        variant_difference,
        reference_trace: reference.trace,
    })
}

/// Offline and online phases for every row of `cfg.rows` on the fine mesh
/// of the base configuration.
pub fn cmd_convergence(cfg: &ExperimentConfig) -> Result<ErrorReport> {
    if cfg.rows.len() < 2 {
        return Err(Error::InvalidArgument("a convergence study needs at least two rows".into()));
    }
    let mut report = ErrorReport {
        problem: cfg.problem.clone(),
        rows: Vec::with_capacity(cfg.rows.len()),
    };
    for &(n, k) in &cfg.rows {
        let row_cfg = ExperimentConfig {
            db: None,
            out: None,
            ..cfg.row(n, k)?
        };
        let run = cmd_offline(&row_cfg)?;
        let row = if run.db.disc.problem.nonlinear {
            cmd_richards(
                &ExperimentConfig {
                    compare_variants: false,
                    ..row_cfg.clone()
                },
                &run.db,
            )?
            .row
        } else {
            cmd_online(&row_cfg, &run.db)?.row
        };
        log::info!("row n_coarse={n} k={k}: h1 error {}", sig5(row.h1));
        report.rows.push(row);
    }
    if let Some(dir) = &cfg.out {
        write_tables(&report, dir)?;
    }
    Ok(report)
}
