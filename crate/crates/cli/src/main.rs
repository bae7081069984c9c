//! `fair-itr`: train, apply and study fairness-constrained treatment rules
//! from JSON run configurations.
//!
//! Results go to stdout (and to `--out` when given); logs and errors go to
//! stderr. Exit codes: 0 success, 2 configuration or input error, 3 numerical
//! failure.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use fair_itr::kernel::median_heuristic_sigma;
use fair_itr::policy::{decision_values, evaluate, parse_proxy_choice, sgn, FitOptions, FitProblem, PolicyModel};
use fair_itr::qp::check_psd;
use fair_itr::simgen::{replicate, SimulatedSource};
use fair_itr::tuning::{cross_validate, most_cost_effective_c, sweep_c, BootstrapSource, CvResult, GridPoint, Hyper, ReplicateSource, SweepMethod};
use fair_itr::{Dataset, Error, Exec, KernelKind, ProxyKind};

use config::{load_config, load_data, Budgets, Choice, DataSource, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn config(msg: String) -> CliError {
        CliError::Config(msg)
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            3 => "numerical",
            _ => "config",
        }
    }
}

#[derive(Parser)]
#[command(name = "fair-itr", version, about = "Fairness-aware individualized treatment rules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set method.kappa=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Seed for simulation and data splitting; replaces the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Fit a rule and write the model and a training report.
    Train,
    /// Decision values and assignments for `data` under `model`.
    Predict,
    /// Value, unfairness and group acceptance rates of `model` on `data`.
    Evaluate,
    /// Replication study of a simulated design over `tuning.c_grid`.
    Simulate,
    /// Fairness-budget sweep over `tuning.c_grid`.
    Sweep,
    /// Twofold cross-validation of `(kappa, sigma)`.
    Tune,
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    cli_seed: Option<u64>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn exec(&self) -> Exec {
        Exec::parallel(self.cfg.parallelism)
    }

    fn data(&self) -> Result<Dataset, CliError> {
        load_data(self.cfg.require_data()?, self.cli_seed)
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        if let Some(dir) = &self.out {
            fs::create_dir_all(dir).map_err(Error::from)?;
            fs::write(dir.join(name), contents).map_err(Error::from)?;
        }
        Ok(())
    }

    fn proxy(&self) -> Result<Option<ProxyKind>, CliError> {
        parse_proxy_choice(&self.cfg.method.proxy).map_err(|e| CliError::config(format!("config field `method.proxy`: {e}")))
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions { intercept: self.cfg.method.intercept, standardize: self.cfg.method.standardize, ..FitOptions::default() }
    }
}

fn json<T: Serialize>(v: &T) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(v).map_err(Error::from)?)
}

fn budgets(c: &Budgets, k: usize) -> Result<Vec<f64>, CliError> {
    let v = match c {
        Budgets::One(c) => vec![*c; k],
        Budgets::Many(v) if v.len() == 1 => vec![v[0]; k],
        Budgets::Many(v) if v.len() == k => v.clone(),
        Budgets::Many(v) => {
            return Err(CliError::config(format!("config field `method.c`: expected 1 or {k} budgets, got {}", v.len())));
        }
    };
    if v.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(CliError::config("config field `method.c`: budgets must be finite and nonnegative".into()));
    }
    Ok(v)
}

fn positive(choice: &Choice, field: &str) -> Result<Option<f64>, CliError> {
    match choice {
        Choice::Value(v) if *v > 0.0 && v.is_finite() => Ok(Some(*v)),
        Choice::Value(v) => Err(CliError::config(format!("config field `{field}`: must be positive, got {v}"))),
        Choice::Named(_) => Ok(None),
    }
}

fn named(choice: &Choice) -> Option<&str> {
    match choice {
        Choice::Named(s) => Some(s.as_str()),
        Choice::Value(_) => None,
    }
}

/// Resolves `(kappa, sigma)` for `d`, cross-validating when either is `"cv"`.
fn resolve_hyper(ctx: &Ctx, d: &Dataset, proxy: Option<ProxyKind>, c: &[f64]) -> Result<(GridPoint, Option<CvResult>), CliError> {
    let m = &ctx.cfg.method;
    let kappa = positive(&m.kappa, "method.kappa")?;
    if kappa.is_none() && named(&m.kappa) != Some("cv") {
        return Err(CliError::config("config field `method.kappa`: expected a positive number or \"cv\"".into()));
    }
    let sigma = match (&m.sigma, m.kernel) {
        (_, KernelKind::Linear) => Some(1.0),
        (Choice::Named(s), _) if s == "median" => Some(median_heuristic_sigma(&d.features())?),
        (Choice::Named(s), _) if s == "cv" => None,
        (Choice::Named(s), _) => return Err(CliError::config(format!("config field `method.sigma`: expected a number, \"median\" or \"cv\", got \"{s}\""))),
        (choice, _) => positive(choice, "method.sigma")?,
    };
    if let (Some(kappa), Some(sigma)) = (kappa, sigma) {
        return Ok((GridPoint { kappa, sigma }, None));
    }
    let kappas = match kappa {
        Some(k) => vec![k],
        None => ctx.cfg.tuning.kappas.clone(),
    };
    let grid: Vec<GridPoint> = match sigma {
        Some(s) => kappas.iter().map(|&kappa| GridPoint { kappa, sigma: s }).collect(),
        None => fair_itr::tuning::median_grid(d, &kappas, &ctx.cfg.tuning.sigma_factors)?,
    };
    let result = cross_validate(d, m.kernel, proxy, c, &grid, &ctx.fit_options(), ctx.seed, &ctx.exec())?;
    Ok((result.best, Some(result)))
}

#[derive(Serialize)]
struct TrainReport {
    converged: bool,
    polished: bool,
    iterations: usize,
    objective: f64,
    min_eig: f64,
    train_proxy: Vec<f64>,
    n_support: usize,
    kappa: f64,
    sigma: f64,
    b0: f64,
    c: Vec<f64>,
    kkt: fair_itr::qp::KktResiduals,
    cv: Option<CvResult>,
}

fn cmd_train(ctx: &Ctx) -> Result<String, CliError> {
    let d = ctx.data()?;
    let proxy = ctx.proxy()?;
    let c = if proxy.is_some() { budgets(&ctx.cfg.method.c, d.k())? } else { Vec::new() };
    let (point, cv) = resolve_hyper(ctx, &d, proxy, &c)?;
    let kernel = point.spec(ctx.cfg.method.kernel)?;
    let mut problem = FitProblem::new(&d, kernel, proxy, point.kappa, &ctx.fit_options())?;
    let model = problem.fit(&c)?;
    let min_eig = check_psd(&problem.qp().d)?;
    let dg = &model.diagnostics;
    let report = TrainReport {
        converged: dg.converged,
        polished: dg.polished,
        iterations: dg.iterations,
        objective: dg.objective,
        min_eig,
        train_proxy: dg.train_proxy.clone(),
        n_support: dg.n_support,
        kappa: model.kappa,
        sigma: model.sigma,
        b0: model.b0,
        c: model.c.clone(),
        kkt: dg.kkt,
        cv,
    };
    ctx.write("model.json", &model.to_json()?)?;
    let text = json(&report)?;
    ctx.write("train_report.json", &text)?;
    Ok(text)
}

fn load_model(ctx: &Ctx) -> Result<PolicyModel, CliError> {
    let path = ctx.cfg.model.as_ref().ok_or_else(|| CliError::config("config field `model` is required".into()))?;
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read model {}: {e}", path.display())))?;
    PolicyModel::from_json(&text).map_err(|e| CliError::config(format!("model {}: {e}", path.display())))
}

fn cmd_predict(ctx: &Ctx) -> Result<String, CliError> {
    let model = load_model(ctx)?;
    let d = ctx.data()?;
    let f = decision_values(&model, d.x(), d.s())?;
    let mut text = String::from("row,decision,assignment\n");
    for (i, v) in f.iter().enumerate() {
        text.push_str(&format!("{i},{},{}\n", fair_itr::dataset::fmt_f64(*v), sgn(*v)));
    }
    ctx.write("predictions.csv", &text)?;
    Ok(text)
}

fn cmd_evaluate(ctx: &Ctx) -> Result<String, CliError> {
    let model = load_model(ctx)?;
    let d = ctx.data()?;
    let proxy = model.proxy_kind.or(ctx.proxy()?).unwrap_or(ProxyKind::Nonlinear);
    let report = evaluate(&d, &model, proxy)?;
    let text = json(&report)?;
    ctx.write("report.json", &text)?;
    Ok(text)
}

fn sweep_method(ctx: &Ctx, proxy: ProxyKind, probe: &Dataset) -> Result<SweepMethod, CliError> {
    let m = &ctx.cfg.method;
    let wants_cv = named(&m.kappa) == Some("cv") || (m.kernel == KernelKind::Gaussian && named(&m.sigma) == Some("cv"));
    let hyper = if wants_cv {
        Hyper::Cv {
            kappas: match positive(&m.kappa, "method.kappa")? {
                Some(k) => vec![k],
                None => ctx.cfg.tuning.kappas.clone(),
            },
            sigma_factors: match (&m.sigma, m.kernel) {
                (Choice::Named(s), KernelKind::Gaussian) if s == "cv" => ctx.cfg.tuning.sigma_factors.clone(),
                _ => vec![1.0],
            },
            seed: ctx.seed,
        }
    } else {
        let (point, _) = resolve_hyper(ctx, probe, None, &[])?;
        Hyper::Fixed(point)
    };
    Ok(SweepMethod { kernel: m.kernel, proxy, hyper, fit: ctx.fit_options() })
}

fn sweep_proxy(ctx: &Ctx) -> Result<ProxyKind, CliError> {
    ctx.proxy()?.ok_or_else(|| CliError::config("config field `method.proxy`: a sweep needs a fairness proxy, not \"none\"".into()))
}

fn reps(ctx: &Ctx, default: usize) -> Result<usize, CliError> {
    match ctx.cfg.reps.unwrap_or(default) {
        0 => Err(CliError::config("config field `reps`: must be at least 1".into())),
        r => Ok(r),
    }
}

fn experiment(ctx: &Ctx) -> Result<fair_itr::simgen::ExperimentConfig, CliError> {
    match ctx.cfg.require_data()? {
        DataSource::Experiment(cfg) => {
            let mut cfg = cfg.clone();
            if let Some(s) = ctx.cli_seed {
                cfg.seed = s;
            }
            if let Some(r) = ctx.cfg.reps {
                cfg.reps = r;
            }
            cfg.validate()?;
            Ok(cfg)
        }
        DataSource::Csv { .. } => Err(CliError::config("config field `data`: `simulate` needs an `experiment` source".into())),
    }
}

fn cmd_simulate(ctx: &Ctx) -> Result<String, CliError> {
    let cfg = experiment(ctx)?;
    let proxy = sweep_proxy(ctx)?;
    let probe = fair_itr::simgen::generate(&cfg)?;
    let method = sweep_method(ctx, proxy, &probe)?;
    let summary = replicate(&cfg, &method, &ctx.cfg.tuning.c_grid, &ctx.exec())?;
    let mut buf = Vec::new();
    summary.write_csv(&mut buf)?;
    let text = String::from_utf8(buf).expect("csv output is utf-8");
    ctx.write("summary.csv", &text)?;
    Ok(text)
}

fn cmd_sweep(ctx: &Ctx) -> Result<String, CliError> {
    let proxy = sweep_proxy(ctx)?;
    let (source, probe): (Box<dyn ReplicateSource>, Dataset) = match ctx.cfg.require_data()? {
        DataSource::Experiment(_) => {
            let cfg = experiment(ctx)?;
            let probe = fair_itr::simgen::generate(&cfg)?;
            (Box::new(SimulatedSource { cfg }), probe)
        }
        DataSource::Csv { .. } => {
            let train = ctx.data()?;
            let test_src = ctx.cfg.test_data.as_ref().ok_or_else(|| CliError::config("config field `test_data` is required for a CSV sweep".into()))?;
            let test = load_data(test_src, ctx.cli_seed)?;
            (Box::new(BootstrapSource { train: train.clone(), test, seed: ctx.seed }), train)
        }
    };
    let method = sweep_method(ctx, proxy, &probe)?;
    let n_reps = match ctx.cfg.require_data()? {
        DataSource::Experiment(_) => experiment(ctx)?.reps,
        DataSource::Csv { .. } => reps(ctx, 20)?,
    };
    let outcome = sweep_c(source.as_ref(), &method, &ctx.cfg.tuning.c_grid, n_reps, &ctx.exec())?;
    let mut buf = Vec::new();
    outcome.curve.write_csv(&mut buf)?;
    let text = String::from_utf8(buf).expect("csv output is utf-8");
    ctx.write("sweep.csv", &text)?;
    if outcome.curve.points.len() > ctx.cfg.tuning.degree {
        match most_cost_effective_c(&outcome.curve, ctx.cfg.tuning.degree) {
            Ok(ce) => {
                log::info!("most cost-effective c = {} (crossing found: {})", ce.c0, !ce.not_found);
                ctx.write("cost_effective.json", &json(&ce)?)?;
            }
            Err(e) => log::warn!("cost-effective point unavailable: {e}"),
        }
    }
    Ok(text)
}

fn cmd_tune(ctx: &Ctx) -> Result<String, CliError> {
    let d = ctx.data()?;
    let proxy = ctx.proxy()?;
    let m = &ctx.cfg.method;
    let c = if proxy.is_some() { budgets(&m.c, d.k())? } else { Vec::new() };
    let kappas = match positive(&m.kappa, "method.kappa")? {
        Some(k) => vec![k],
        None => ctx.cfg.tuning.kappas.clone(),
    };
    let grid = match (m.kernel, &m.sigma) {
        (KernelKind::Linear, _) => kappas.iter().map(|&kappa| GridPoint { kappa, sigma: 1.0 }).collect(),
        (_, Choice::Value(s)) => kappas.iter().map(|&kappa| GridPoint { kappa, sigma: *s }).collect(),
        (_, Choice::Named(s)) if s == "median" => fair_itr::tuning::median_grid(&d, &kappas, &[1.0])?,
        _ => fair_itr::tuning::median_grid(&d, &kappas, &ctx.cfg.tuning.sigma_factors)?,
    };
    let result = cross_validate(&d, m.kernel, proxy, &c, &grid, &ctx.fit_options(), ctx.seed, &ctx.exec())?;
    let text = json(&result)?;
    ctx.write("tune.json", &text)?;
    Ok(text)
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = load_config(cli.config.as_deref(), &cli.set)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let ctx = Ctx { cfg, seed, cli_seed: cli.seed, out: cli.out.clone() };
    match cli.command {
        Command::Train => cmd_train(&ctx),
        Command::Predict => cmd_predict(&ctx),
        Command::Evaluate => cmd_evaluate(&ctx),
        Command::Simulate => cmd_simulate(&ctx),
        Command::Sweep => cmd_sweep(&ctx),
        Command::Tune => cmd_tune(&ctx),
    }
}

fn report_error(err: &CliError) {
    let doc = serde_json::json!({ "error": err.kind(), "message": err.to_string(), "exit_code": err.exit_code() });
    eprintln!("{doc}");
}

fn ensure_dir(p: &Path) -> bool {
    !p.exists() || p.is_dir()
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).target(env_logger::Target::Stderr).init();
    let cli = Cli::parse();
    if let Some(out) = &cli.out {
        if !ensure_dir(out) {
            report_error(&CliError::config(format!("--out {} is not a directory", out.display())));
            std::process::exit(2);
        }
    }
    match run(&cli) {
        Ok(mut text) => {
            if !text.ends_with('\n') {
                text.push('\n');
            }
            let mut out = std::io::stdout().lock();
            match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                Err(e) => {
                    report_error(&CliError::Core(Error::from(e)));
                    std::process::exit(2);
                }
            }
        }
        Err(err) => {
            report_error(&err);
            std::process::exit(err.exit_code());
        }
    }
}
