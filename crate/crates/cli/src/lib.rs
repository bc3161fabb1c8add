//! `scate` command-line front end: bound estimation on a data file, the
//! simulation study and the oracle battery.
//!
//! Every flag may also be set in a TOML file passed with `--config`, using the
//! flag name in snake case (`clip_eps = 0.02`). Flags win over the file.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use scate_core::bounds::{estimate_from_nuisances, BoundsOptions, BoundsReport, InfluenceComponents};
use scate_core::data::{load_dataset, Schema};
use scate_core::learners::{FoldAssignment, LearnerSpec};
use scate_core::nuisance::{fit_nuisances, DEFAULT_CLIP_EPSILON};
use scate_core::oracle::{run_battery, BatteryOptions, ClaimResult, DiscreteDGP, SupportPoint};
use scate_core::sensitivity::{evaluate_grid, write_grid, DEFAULT_RESOLUTION};
use scate_core::simulation::{run_study, CovariateMode, StudyConfig, StudyTable};

/// Exit status for a run whose checks did not all pass.
pub const EXIT_FAILED: i32 = 1;
/// Exit status for configuration, input and estimation errors.
pub const EXIT_ERROR: i32 = 2;

pub const DEFAULT_FOLDS: usize = 5;
/// Seed used by `estimate` when none is configured.
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Parser)]
#[command(name = "scate", version, about = "Bounds and sensitivity analysis for survivor-complier effects")]
pub struct Cli {
    /// TOML file with default values for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true, env = "SCATE_WORKERS")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate bounds and the sensitivity grid from a delimited data file.
    Estimate(EstimateArgs),
    /// Run the principal-strata simulation study.
    Simulate(SimulateArgs),
    /// Run the exact-law oracle battery.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub z_col: Option<String>,
    #[arg(long)]
    pub s_col: Option<String>,
    #[arg(long)]
    pub a_col: Option<String>,
    #[arg(long)]
    pub y_col: Option<String>,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    #[arg(long)]
    pub delimiter: Option<char>,
    #[arg(long)]
    pub missing_token: Option<String>,
    /// `marginal-mean`, `logistic[:max_iter=..,tol=..,ridge=..]` or `knn[:k=..]`.
    #[arg(long)]
    pub learner: Option<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub clip_eps: Option<f64>,
    /// Points per axis of the sensitivity lattice.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Comma list or `start:stop:step`.
    #[arg(long, allow_hyphen_values = true)]
    pub alpha_grid: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub psi_grid: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Comma list of `none`, `weak`, `strong`, or `all`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Overrides each mode's default learner.
    #[arg(long)]
    pub learner: Option<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub clip_eps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the full-scale grid and replication count.
    #[arg(long)]
    pub full_scale: bool,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also evaluate a discrete law given as a TOML table of support points.
    #[arg(long)]
    pub dgp: Option<PathBuf>,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub z_col: Option<String>,
    pub s_col: Option<String>,
    pub a_col: Option<String>,
    pub y_col: Option<String>,
    pub covariates: Option<Vec<String>>,
    pub delimiter: Option<char>,
    pub missing_token: Option<String>,
    pub learner: Option<String>,
    pub folds: Option<usize>,
    pub clip_eps: Option<f64>,
    pub grid: Option<usize>,
    pub alpha_grid: Option<String>,
    pub psi_grid: Option<String>,
    pub reps: Option<usize>,
    pub n: Option<usize>,
    pub mode: Option<String>,
    pub seed: Option<u64>,
    pub full_scale: Option<bool>,
    pub workers: Option<usize>,
    pub dgp: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub workers: Option<usize>,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
pub enum Task {
    Estimate(EstimateConfig),
    Simulate(SimulateConfig),
    Check(CheckConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateConfig {
    pub input: PathBuf,
    pub output_dir: PathBuf,
    pub schema: Schema,
    pub learner: LearnerSpec,
    pub folds: usize,
    pub clip_eps: f64,
    pub grid: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateConfig {
    pub output_dir: PathBuf,
    pub studies: Vec<StudyConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckConfig {
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    pub dgp: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve(cli: Cli) -> Result<Self> {
        let file = match &cli.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let workers = cli.workers.or(file.workers);
        if workers == Some(0) {
            bail!("workers must be at least 1");
        }
        let task = match cli.command {
            Command::Estimate(a) => Task::Estimate(resolve_estimate(a, file)?),
            Command::Simulate(a) => Task::Simulate(resolve_simulate(a, file)?),
            Command::Check(a) => Task::Check(CheckConfig {
                output_dir: a.output_dir.or(file.output_dir),
                seed: a.seed.or(file.seed).unwrap_or(BatteryOptions::default().seed),
                dgp: a.dgp.or(file.dgp),
            }),
        };
        Ok(Self { workers, task })
    }

    /// TOML echo of the resolved settings.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing resolved config")
    }
}

fn parse_learner(s: &str) -> Result<LearnerSpec> {
    let spec: LearnerSpec = s.parse()?;
    spec.validate()?;
    Ok(spec)
}

fn resolve_estimate(a: EstimateArgs, f: FileConfig) -> Result<EstimateConfig> {
    let defaults = Schema::default();
    let schema = Schema {
        z: a.z_col.or(f.z_col).unwrap_or(defaults.z),
        s: a.s_col.or(f.s_col).unwrap_or(defaults.s),
        a: a.a_col.or(f.a_col).unwrap_or(defaults.a),
        y: a.y_col.or(f.y_col).unwrap_or(defaults.y),
        covariates: a.covariates.or(f.covariates).unwrap_or_default(),
        delimiter: a.delimiter.or(f.delimiter).unwrap_or(defaults.delimiter),
        missing_token: a.missing_token.or(f.missing_token).unwrap_or(defaults.missing_token),
    };
    // Without covariates every learner reduces to the arm mean.
    let learner = match a.learner.or(f.learner) {
        Some(s) => parse_learner(&s)?,
        None if schema.covariates.is_empty() => LearnerSpec::MarginalMean,
        None => LearnerSpec::logistic(),
    };
    let clip_eps = a.clip_eps.or(f.clip_eps).unwrap_or(DEFAULT_CLIP_EPSILON);
    let grid = a.grid.or(f.grid).unwrap_or(DEFAULT_RESOLUTION);
    if grid < 2 {
        bail!("grid resolution must be at least 2, got {grid}");
    }
    Ok(EstimateConfig {
        input: a.input.or(f.input).context("--input is required for estimate")?,
        output_dir: a.output_dir.or(f.output_dir).context("--output-dir is required for estimate")?,
        schema,
        learner,
        folds: a.folds.or(f.folds).unwrap_or(DEFAULT_FOLDS),
        clip_eps,
        grid,
        seed: a.seed.or(f.seed).unwrap_or(DEFAULT_SEED),
    })
}

fn resolve_simulate(a: SimulateArgs, f: FileConfig) -> Result<SimulateConfig> {
    let seed = a
        .seed
        .or(f.seed)
        .context("--seed is required for simulate so that the study is reproducible")?;
    let full_scale = a.full_scale || f.full_scale.unwrap_or(false);
    let modes = parse_modes(a.mode.or(f.mode).as_deref().unwrap_or("all"))?;
    let alpha_grid = a.alpha_grid.or(f.alpha_grid).map(|s| parse_grid(&s)).transpose()?;
    let psi_grid = a.psi_grid.or(f.psi_grid).map(|s| parse_grid(&s)).transpose()?;
    let learner = a.learner.or(f.learner).map(|s| parse_learner(&s)).transpose()?;
    let reps = a.reps.or(f.reps);
    let n = a.n.or(f.n);
    let folds = a.folds.or(f.folds);
    let clip_eps = a.clip_eps.or(f.clip_eps);
    let studies = modes
        .into_iter()
        .map(|mode| {
            let base = if full_scale {
                StudyConfig::full_scale(mode, seed)
            } else {
                StudyConfig::desk(mode, seed)
            };
            let cfg = StudyConfig {
                alpha_grid: alpha_grid.clone().unwrap_or(base.alpha_grid.clone()),
                psi_grid: psi_grid.clone().unwrap_or(base.psi_grid.clone()),
                reps: reps.unwrap_or(base.reps),
                n: n.unwrap_or(base.n),
                learner: learner.unwrap_or(base.learner),
                folds: folds.unwrap_or(base.folds),
                clip_epsilon: clip_eps.unwrap_or(base.clip_epsilon),
                ..base
            };
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulateConfig {
        output_dir: a.output_dir.or(f.output_dir).context("--output-dir is required for simulate")?,
        studies,
    })
}

/// `all`, or a comma list of covariate modes in the order given.
pub fn parse_modes(s: &str) -> Result<Vec<CovariateMode>> {
    if s.trim() == "all" {
        return Ok(CovariateMode::ALL.to_vec());
    }
    let modes = s
        .split(',')
        .map(|m| m.trim().parse::<CovariateMode>())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if modes.is_empty() {
        bail!("no covariate mode given");
    }
    Ok(modes)
}

/// A comma list of values, or `start:stop:step` with both ends included.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let num = |v: &str| -> Result<f64> {
        let x: f64 = v.trim().parse().with_context(|| format!("grid value `{v}` is not a number"))?;
        if !x.is_finite() {
            bail!("grid value `{v}` is not finite");
        }
        Ok(x)
    };
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if step <= 0.0 || stop < start {
                bail!("grid `{s}` needs start <= stop and a positive step");
            }
            let m = ((stop - start) / step).round() as usize;
            if m == 0 {
                return Ok(vec![start]);
            }
            if ((stop - start) / m as f64 - step).abs() > 1e-9 * step.max(1.0) {
                bail!("grid `{s}`: step does not divide the range");
            }
            Ok((0..=m).map(|k| start + (stop - start) * k as f64 / m as f64).collect())
        }
        [list] => list.split(',').map(num).collect(),
        _ => bail!("grid `{s}` must be a comma list or start:stop:step"),
    }
}

/// Runs the resolved command and returns the process exit status.
pub fn execute(cfg: &RunConfig) -> Result<i32> {
    if let Some(workers) = cfg.workers {
        // Fails only if a pool already exists, which keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
    match &cfg.task {
        Task::Estimate(e) => cmd_estimate(e, cfg),
        Task::Simulate(s) => cmd_simulate(s, cfg),
        Task::Check(c) => cmd_check(c),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_echo(dir: &Path, cfg: &RunConfig) -> Result<()> {
    // Worker count does not affect results and would break byte-identical reruns.
    let echo = RunConfig {
        workers: None,
        task: cfg.task.clone(),
    };
    let mut w = create(dir, "config.toml")?;
    w.write_all(echo.to_toml()?.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Warnings a reader of the estimate must see.
pub fn report_warnings(report: &BoundsReport) -> Vec<String> {
    let mut out = report.warnings.clone();
    let f = &report.flags;
    if f.psi_l_truncated {
        out.push("psi_l truncated to -1".into());
    }
    if f.psi_u_truncated {
        out.push("psi_u truncated to 1".into());
    }
    if f.alpha_isotonized || f.beta_isotonized {
        out.push("crossed bound estimates were reordered".into());
    }
    if f.diagnostic_mode {
        out.push("nuisances fitted without sample splitting (folds = 1)".into());
    }
    if report.margins.as_ref().is_some_and(|m| m.fragile()) {
        out.push("nuisance contrasts concentrate near zero; bound estimates may be unstable".into());
    }
    out
}

pub fn cmd_estimate(e: &EstimateConfig, cfg: &RunConfig) -> Result<i32> {
    let ds = load_dataset(&e.input, &e.schema).with_context(|| format!("loading {}", e.input.display()))?;
    let folds = FoldAssignment::new(ds.len(), e.folds, e.seed)?;
    let ns = fit_nuisances(&ds, &e.learner, &folds, e.clip_eps)?;
    let report = estimate_from_nuisances(&ns, &ds, BoundsOptions::default())?;
    let ic = InfluenceComponents::new(&ns, &ds);
    let grid = evaluate_grid(&ic, e.grid, e.grid)?;
    let warnings = report_warnings(&report);

    prepare_dir(&e.output_dir)?;
    let mut w = create(&e.output_dir, "report.txt")?;
    writeln!(w, "input={}", e.input.display())?;
    writeln!(w, "learner={}", e.learner)?;
    writeln!(w, "folds={}", e.folds)?;
    writeln!(w, "clip_eps={}", e.clip_eps)?;
    writeln!(w, "seed={}", e.seed)?;
    for (k, v) in report.record() {
        writeln!(w, "{k}={v}")?;
    }
    if let Some(m) = &report.margins {
        write!(w, "{m}")?;
    }
    for msg in &warnings {
        writeln!(w, "warning={msg}")?;
    }
    w.flush()?;
    let mut w = create(&e.output_dir, "bounds.csv")?;
    report.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&e.output_dir, "grid.csv")?;
    write_grid(&grid, &mut w)?;
    w.flush()?;
    let mut w = create(&e.output_dir, "nuisances.csv")?;
    ns.write_audit(&mut w)?;
    w.flush()?;
    write_echo(&e.output_dir, cfg)?;

    for msg in &warnings {
        eprintln!("warning: {msg}");
    }
    println!(
        "psi in [{}, {}]  alpha in [{}, {}]  beta in [{}, {}]",
        report.psi_l.estimate,
        report.psi_u.estimate,
        report.alpha_l.estimate,
        report.alpha_u.estimate,
        report.beta_l.estimate,
        report.beta_u.estimate
    );
    Ok(0)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn cmd_simulate(s: &SimulateConfig, cfg: &RunConfig) -> Result<i32> {
    prepare_dir(&s.output_dir)?;
    let mut tables: Vec<StudyTable> = Vec::new();
    for study in &s.studies {
        let table = run_study(study)?;
        let mode = table.mode;
        let mut w = create(&s.output_dir, &format!("study_{mode}.csv"))?;
        table.write_csv(&mut w)?;
        w.flush()?;
        let mut w = create(&s.output_dir, &format!("population_{mode}.csv"))?;
        table.write_population_csv(&mut w)?;
        w.flush()?;
        let failed = table.cells.iter().filter(|c| c.fail_rate > 0.0).count();
        if failed > 0 {
            eprintln!("warning: mode {mode}: {failed} of {} cells had failed replications", table.cells.len());
        }
        tables.push(table);
    }
    let mut w = create(&s.output_dir, "summary.txt")?;
    for t in &tables {
        let mode = t.mode;
        let failed = t.cells.iter().filter(|c| c.fail_rate >= 1.0).count();
        writeln!(w, "{mode}.mean_length={}", fmt_opt(t.mean_length()))?;
        writeln!(w, "{mode}.population_mean_length={}", fmt_opt(t.population_mean_length()))?;
        writeln!(w, "{mode}.cells={}", t.cells.len())?;
        writeln!(w, "{mode}.failed_cells={failed}")?;
        println!(
            "{mode}: mean length {} (population {}) over {} cells",
            fmt_opt(t.mean_length()),
            fmt_opt(t.population_mean_length()),
            t.cells.len()
        );
    }
    w.flush()?;
    write_echo(&s.output_dir, cfg)?;
    let all_failed = tables.iter().flat_map(|t| &t.cells).all(|c| c.fail_rate >= 1.0);
    if all_failed {
        eprintln!("error: every simulation cell failed");
        return Ok(EXIT_FAILED);
    }
    Ok(0)
}

/// Support points of a user-supplied law, as read from TOML.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LawFile {
    points: Vec<SupportPoint>,
}

pub fn load_dgp(path: &Path) -> Result<DiscreteDGP> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading law {}", path.display()))?;
    let law: LawFile = toml::from_str(&text).with_context(|| format!("parsing law {}", path.display()))?;
    Ok(DiscreteDGP::new(law.points)?)
}

/// Population estimands of `dgp`, with a claim that they lie within their bounds.
pub fn check_law(dgp: &DiscreteDGP) -> Result<(Vec<(String, String)>, ClaimResult)> {
    let e = dgp.estimands()?;
    let b = &e.bounds;
    let rows = [
        ("alpha", e.alpha),
        ("beta", e.beta),
        ("psi", e.psi.unwrap_or(f64::NAN)),
        ("alpha_l", b.alpha_l),
        ("alpha_u", b.alpha_u),
        ("beta_l", b.beta_l),
        ("beta_u", b.beta_u),
        ("psi_l", b.psi_l),
        ("psi_u", b.psi_u),
    ]
    .into_iter()
    .map(|(k, v)| (format!("law.{k}"), v.to_string()))
    .collect();
    let passed = e.bounds_contain_truth();
    let claim = ClaimResult {
        name: "supplied law bounds contain truth",
        passed,
        detail: if passed {
            "every estimand lies within its bounds".into()
        } else {
            "some estimand lies outside its bounds".into()
        },
    };
    Ok((rows, claim))
}

pub fn cmd_check(c: &CheckConfig) -> Result<i32> {
    let mut claims = run_battery(&BatteryOptions {
        seed: c.seed,
        ..BatteryOptions::default()
    });
    let mut law_rows = Vec::new();
    if let Some(path) = &c.dgp {
        let (rows, claim) = check_law(&load_dgp(path)?)?;
        law_rows = rows;
        claims.push(claim);
    }
    for claim in &claims {
        println!("{claim}");
    }
    for (k, v) in &law_rows {
        println!("{k}={v}");
    }
    if let Some(dir) = &c.output_dir {
        prepare_dir(dir)?;
        let mut w = create(dir, "check.txt")?;
        writeln!(w, "seed={}", c.seed)?;
        for claim in &claims {
            writeln!(w, "{claim}")?;
        }
        for (k, v) in &law_rows {
            writeln!(w, "{k}={v}")?;
        }
        w.flush()?;
    }
    Ok(if claims.iter().all(|c| c.passed) { 0 } else { EXIT_FAILED })
}
