use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use rollcall_vem::io::{
    load_rollcall, read_result, write_long_csv, write_matrix_csv, write_result, InputFormat, ResultDocument,
    RunConfig,
};
use rollcall_vem::model::{align_to_scale, Estimator, RollCall};
use rollcall_vem::pg_vem::{fit_pg_vem, initial_params, InitStrategy};
use rollcall_vem::pipeline::{self, SeRequest};
use rollcall_vem::quadrature::{fisher_numeric, map_onto, mle_direct, QuadConfig};
use rollcall_vem::report::{emit_report, ReportEntry, TimingRow};
use rollcall_vem::sim::{generate_scenario_one, generate_scenario_two, ScenarioOneConfig};
use rollcall_vem::{par, stats, Error};

const WORKERS_ENV: &str = "ROLLCALL_VEM_WORKERS";

#[derive(Parser)]
#[command(name = "rollcall-vem", version, about = "Ideal point estimation for roll-call data")]
struct Cli {
    /// Worker threads (ROLLCALL_VEM_WORKERS takes precedence).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// TOML file whose entries override the command-line settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic roll call.
    Simulate(SimulateArgs),
    /// Fit ideal points.
    Fit(FitArgs),
    /// Fit and compute standard errors.
    Se(SeArgs),
    /// Compare against the quadrature oracle on tiny instances.
    OracleCheck(OracleArgs),
    /// Time PG-VEM + Louis against JJ-VEM + parametric bootstrap.
    Bench(BenchArgs),
    /// Tables and plots from result documents.
    Report(ReportArgs),
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Long)]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Long,
    Matrix,
}

impl From<FormatArg> for InputFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Long => InputFormat::Long,
            FormatArg::Matrix => InputFormat::Matrix,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    PgVem,
    JjVem,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::PgVem => Estimator::PgVem,
            EstimatorArg::JjVem => Estimator::JjVem,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    One,
    Two,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = Scenario::One)]
    scenario: Scenario,
    #[arg(long, default_value_t = 100)]
    legislators: usize,
    #[arg(long, default_value_t = 250)]
    bills: usize,
    /// Scenario II: roll call whose fit and missingness pattern are reused.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Long)]
    format: FormatArg,
    /// Output roll call; the true ideal points go to `<stem>_truth.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, value_enum, default_value_t = EstimatorArg::PgVem)]
    estimator: EstimatorArg,
    #[arg(long)]
    out: PathBuf,
    /// Record wall time in the result document.
    #[arg(long)]
    timing: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SeMethod {
    Louis,
    Bootstrap,
    Both,
}

#[derive(Args)]
struct SeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, value_enum, default_value_t = EstimatorArg::PgVem)]
    estimator: EstimatorArg,
    #[arg(long, value_enum, default_value_t = SeMethod::Louis)]
    method: SeMethod,
    #[arg(long, default_value_t = 2000)]
    mc_samples: usize,
    #[arg(long, default_value_t = 100)]
    replicates: usize,
    #[arg(long)]
    include_schur: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 5)]
    instances: usize,
    #[arg(long, default_value_t = 10)]
    legislators: usize,
    #[arg(long, default_value_t = 15)]
    bills: usize,
    #[arg(long, default_value_t = 2000)]
    mc_samples: usize,
    /// CSV with one row per legislator of every accepted instance.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 400)]
    legislators: usize,
    /// Bill counts to time.
    #[arg(long, value_delimiter = ',', default_values_t = [800, 1000, 1200, 1400, 1600, 1800, 2000])]
    bills: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    replicates: usize,
    #[arg(long, default_value_t = 2000)]
    mc_samples: usize,
    /// Timing CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Result documents; the file stem labels each one.
    #[arg(long = "result", required_unless_present = "timings")]
    results: Vec<PathBuf>,
    /// Roll call the results were fitted on (for missing rates).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Long)]
    format: FormatArg,
    /// CSV with columns `legislator_id,theta` (as written by `simulate`).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Timing CSV written by `bench`.
    #[arg(long)]
    timings: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Exit statuses.
enum Failure {
    Usage(String),
    Data(Error),
    NotConverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(m) => Failure::Usage(m),
            Error::BootstrapDropout { .. } => Failure::NotConverged(e.to_string()),
            other => Failure::Data(other),
        }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let workers = match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => {
                eprintln!("error: {WORKERS_ENV} must be a positive integer, got {v:?}");
                return ExitCode::from(1);
            }
        },
        Err(_) => cli.workers,
    };
    let outcome = par::with_workers(workers, || dispatch(&cli));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::NotConverged(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Fit(a) => fit(cli, a),
        Command::Se(a) => se(cli, a),
        Command::OracleCheck(a) => oracle_check(cli, a),
        Command::Bench(a) => bench(cli, a),
        Command::Report(a) => report(a),
    }
}

/// Recursively overlays `over` on `base`.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Flags first, then the `--config` file on top.
fn resolve_config(cli: &Cli, base: RunConfig) -> Result<RunConfig, Failure> {
    let base = base.with_seed(cli.seed);
    let Some(path) = &cli.config else { return Ok(base) };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(e.into()))?;
    let over: toml::Value = toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut value = toml::Value::try_from(&base).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(seed) = over.get("seed").and_then(toml::Value::as_integer) {
        // a top-level seed re-seeds everything, as --seed does
        let reseeded = base.clone().with_seed(seed as u64);
        value = toml::Value::try_from(&reseeded).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    merge(&mut value, over);
    let cfg: RunConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| Failure::Usage(format!("{}: {e}", path.display())))?;
    cfg.codes.validate()?;
    Ok(cfg)
}

fn load(cfg: &RunConfig, input: &InputArgs) -> Result<(RollCall, rollcall_vem::model::DropManifest), Failure> {
    Ok(load_rollcall(&input.input, input.format.into(), &cfg.codes)?)
}

fn finish(doc: &ResultDocument, out: &Path) -> CliResult {
    write_result(out, doc)?;
    if doc.diagnostics.convergence_flags.fit_converged {
        Ok(())
    } else {
        Err(Failure::NotConverged(format!(
            "fit did not converge; partial results written to {}",
            out.display()
        )))
    }
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> CliResult {
    let cfg = resolve_config(cli, RunConfig::default())?;
    let sim = match a.scenario {
        Scenario::One => generate_scenario_one(&ScenarioOneConfig::new(a.legislators, a.bills, cfg.seed))?,
        Scenario::Two => {
            let path = a
                .input
                .as_ref()
                .ok_or_else(|| Failure::Usage("scenario two needs --input".into()))?;
            let (data, _) = load_rollcall(path, a.format.into(), &cfg.codes)?;
            let template = fit_pg_vem(&data, &cfg.pg)?;
            let mut sim = generate_scenario_two(&template, data.observed(), cfg.seed)?;
            sim.data = RollCall::new(
                sim.data.votes().clone(),
                sim.data.observed().clone(),
                data.legislator_ids().to_vec(),
                data.bill_ids().to_vec(),
            )?;
            sim
        }
    };
    match a.format {
        FormatArg::Long => write_long_csv(&a.out, &sim.data)?,
        FormatArg::Matrix => write_matrix_csv(&a.out, &sim.data)?,
    }
    let truth_path = sibling(&a.out, "_truth.csv");
    let mut w = csv::Writer::from_path(&truth_path).map_err(|e| Failure::Data(e.into()))?;
    let write = |w: &mut csv::Writer<std::fs::File>| -> csv::Result<()> {
        w.write_record(["legislator_id", "theta"])?;
        for (id, t) in sim.data.legislator_ids().iter().zip(&sim.theta) {
            w.write_record([id.clone(), format!("{t:.16e}")])?;
        }
        w.flush()?;
        Ok(())
    };
    write(&mut w).map_err(|e| Failure::Data(e.into()))?;
    info!("wrote {} and {}", a.out.display(), truth_path.display());
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn fit(cli: &Cli, a: &FitArgs) -> CliResult {
    let cfg = resolve_config(
        cli,
        RunConfig {
            estimator: a.estimator.into(),
            ..RunConfig::default()
        },
    )?;
    let (data, manifest) = load(&cfg, &a.input)?;
    let out = pipeline::run(data, manifest, &cfg, SeRequest::default(), a.timing)?;
    finish(&out.document, &a.out)
}

fn se(cli: &Cli, a: &SeArgs) -> CliResult {
    let mut base = RunConfig {
        estimator: a.estimator.into(),
        ..RunConfig::default()
    };
    base.louis.mc_samples = a.mc_samples;
    base.louis.include_schur = a.include_schur;
    base.bootstrap.replicates = a.replicates;
    let cfg = resolve_config(cli, base)?;
    let (data, manifest) = load(&cfg, &a.input)?;
    let request = SeRequest {
        louis: matches!(a.method, SeMethod::Louis | SeMethod::Both),
        bootstrap: matches!(a.method, SeMethod::Bootstrap | SeMethod::Both),
    };
    let fit = pipeline::fit(&data, &cfg)?;
    let mut doc = ResultDocument::from_fit(&fit, &data, &manifest, &cfg)?;
    if a.timing {
        doc.diagnostics.wall_time_ms = Some(fit.diagnostics.wall_time_ms);
    }
    if !fit.converged() {
        return finish(&doc, &a.out);
    }
    if request.louis {
        let l = pipeline::louis(&fit, &data, &cfg)?;
        doc.set_se_louis(data.legislator_ids(), &l.se)?;
    }
    if request.bootstrap {
        match pipeline::bootstrap(&fit, &data, &cfg) {
            Ok(b) => doc.set_se_bootstrap(data.legislator_ids(), &b.se, b.dropped)?,
            Err(e @ Error::BootstrapDropout { .. }) => {
                write_result(&a.out, &doc)?;
                return Err(Failure::NotConverged(format!("{e}; partial results written")));
            }
            Err(e) => return Err(e.into()),
        }
    }
    finish(&doc, &a.out)
}

fn oracle_check(cli: &Cli, a: &OracleArgs) -> CliResult {
    let mut base = RunConfig::default();
    base.louis.mc_samples = a.mc_samples;
    let cfg = resolve_config(cli, base)?;
    let quad = QuadConfig::default();
    let mut rows = Vec::new();
    let mut accepted = 0;
    let mut offset = 0u64;
    let mut all_pass = true;
    while accepted < a.instances {
        if offset >= 50 * a.instances as u64 {
            return Err(Failure::NotConverged("too few instances with a finite maximum likelihood estimate".into()));
        }
        let seed = cfg.seed.wrapping_add(offset);
        offset += 1;
        let sim = generate_scenario_one(&ScenarioOneConfig::new(a.legislators, a.bills, seed))?;
        let init = initial_params(&sim.data, &InitStrategy::DoubleCenteredSvd)?;
        let mle = mle_direct(&sim.data, &init, &quad)?;
        if mle.diverged || !mle.converged {
            println!("instance seed {seed}: no finite maximizer, skipped");
            continue;
        }
        accepted += 1;
        let mut pg_cfg = cfg.clone();
        pg_cfg.estimator = Estimator::PgVem;
        let fit = pipeline::fit(&sim.data, &pg_cfg)?;
        let louis = pipeline::louis(&fit, &sim.data, &pg_cfg)?;
        let mle_theta = align_to_scale(&mle.params.theta, &fit.params.theta)?;
        let fisher = fisher_numeric(&map_onto(&mle.params, &fit.params.theta)?, &sim.data, &quad)?;
        let fisher_se = fisher.theta_block_se()?;
        let za = rollcall_vem::align_estimates(&fit.params.theta, &fit.params.theta)?;
        let zb = rollcall_vem::align_estimates(&mle_theta, &fit.params.theta)?;
        let corr = stats::pearson(&za, &zb);
        let max_diff = za.iter().zip(&zb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let rel: Vec<f64> = louis
            .se
            .iter()
            .zip(&fisher_se)
            .map(|(l, f)| match (l, f) {
                (Some(l), Some(f)) => (l - f).abs() / f,
                _ => f64::INFINITY,
            })
            .collect();
        let max_rel = rel.iter().copied().fold(0.0, f64::max);
        let pass = corr > 0.98 && max_diff < 0.15 && max_rel < 0.25;
        all_pass &= pass;
        println!(
            "instance seed {seed}: corr {corr:.5} max |diff| {max_diff:.4} max SE rel {max_rel:.4} {}",
            if pass { "ok" } else { "FAIL" }
        );
        for (i, id) in sim.data.legislator_ids().iter().enumerate() {
            rows.push([
                seed.to_string(),
                id.clone(),
                format!("{:.16e}", fit.params.theta[i]),
                format!("{:.16e}", mle_theta[i]),
                louis.se[i].map_or("NA".into(), |v| format!("{v:.16e}")),
                fisher_se[i].map_or("NA".into(), |v| format!("{v:.16e}")),
            ]);
        }
    }
    if let Some(out) = &a.out {
        let mut w = csv::Writer::from_path(out).map_err(|e| Failure::Data(e.into()))?;
        let mut write = || -> csv::Result<()> {
            w.write_record(["seed", "legislator_id", "theta_pg_vem", "theta_mle", "se_louis", "se_fisher"])?;
            for r in &rows {
                w.write_record(r)?;
            }
            w.flush()?;
            Ok(())
        };
        write().map_err(|e| Failure::Data(e.into()))?;
    }
    if all_pass {
        Ok(())
    } else {
        Err(Failure::NotConverged("oracle agreement outside tolerance".into()))
    }
}

fn bench(cli: &Cli, a: &BenchArgs) -> CliResult {
    let mut base = RunConfig::default();
    base.louis.mc_samples = a.mc_samples;
    base.bootstrap.replicates = a.replicates;
    let cfg = resolve_config(cli, base)?;
    let mut rows = Vec::new();
    for &n_bills in &a.bills {
        let sim = generate_scenario_one(&ScenarioOneConfig::new(a.legislators, n_bills, cfg.seed))?;
        let mut pg = cfg.clone();
        pg.estimator = Estimator::PgVem;
        let t = Instant::now();
        let fit = pipeline::fit(&sim.data, &pg)?;
        pipeline::louis(&fit, &sim.data, &pg)?;
        let pg_secs = t.elapsed().as_secs_f64();
        let mut jj = cfg.clone();
        jj.estimator = Estimator::JjVem;
        let t = Instant::now();
        let fit = pipeline::fit(&sim.data, &jj)?;
        pipeline::bootstrap(&fit, &sim.data, &jj)?;
        let jj_secs = t.elapsed().as_secs_f64();
        println!("J = {n_bills}: pg-vem + louis {pg_secs:.2} s, jj-vem + bootstrap {jj_secs:.2} s");
        for (method, seconds) in [("pg-vem+louis", pg_secs), ("jj-vem+bootstrap", jj_secs)] {
            rows.push(TimingRow {
                n_legislators: a.legislators,
                n_bills,
                method: method.into(),
                seconds,
            });
        }
    }
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| Failure::Data(e.into()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Failure::Data(e.into()))?;
    }
    w.flush().map_err(|e| Failure::Data(e.into()))?;
    Ok(())
}

fn read_truth(path: &Path) -> Result<std::collections::HashMap<String, f64>, Failure> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Failure::Data(e.into()))?;
    let mut out = std::collections::HashMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Failure::Data(e.into()))?;
        let value = rec
            .get(1)
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Failure::Data(Error::InvalidData(format!("{}: bad truth row", path.display()))))?;
        out.insert(rec[0].to_string(), value);
    }
    Ok(out)
}

fn report(a: &ReportArgs) -> CliResult {
    let data = match &a.input {
        Some(p) => Some(load_rollcall(p, a.format.into(), &Default::default())?.0),
        None => None,
    };
    let truth = a.truth.as_deref().map(read_truth).transpose()?;
    let mut entries = Vec::new();
    for path in &a.results {
        let doc = read_result(path)?;
        let ids: Vec<String> = doc.theta.keys().cloned().collect();
        let estimate: Vec<f64> = doc.theta.values().map(|e| e.estimate).collect();
        let missing_rates = match &data {
            Some(d) => {
                let rates = d.missing_rates();
                let index: std::collections::HashMap<&str, usize> =
                    d.legislator_ids().iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
                ids.iter()
                    .map(|id| index.get(id.as_str()).map(|&k| rates[k]).unwrap_or(f64::NAN))
                    .collect()
            }
            None => vec![f64::NAN; ids.len()],
        };
        let truth = match &truth {
            Some(t) => {
                let raw: Option<Vec<f64>> = ids.iter().map(|id| t.get(id).copied()).collect();
                match raw {
                    Some(raw) => Some(align_to_scale(&raw, &estimate)?),
                    None => {
                        warn!("truth file does not cover every legislator in {}", path.display());
                        None
                    }
                }
            }
            None => None,
        };
        let mut se = Vec::new();
        if doc.theta.values().any(|e| e.se_louis.is_some()) {
            se.push(("louis".to_string(), doc.theta.values().map(|e| e.se_louis).collect()));
        }
        if doc.theta.values().any(|e| e.se_bootstrap.is_some()) {
            se.push(("bootstrap".to_string(), doc.theta.values().map(|e| e.se_bootstrap).collect()));
        }
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "result".into());
        entries.push(ReportEntry {
            label,
            legislator_ids: ids,
            estimate,
            truth,
            missing_rates,
            se,
        });
    }
    let timings = match &a.timings {
        Some(p) => {
            let mut r = csv::Reader::from_path(p).map_err(|e| Failure::Data(e.into()))?;
            r.deserialize().collect::<csv::Result<Vec<TimingRow>>>().map_err(|e| Failure::Data(e.into()))?
        }
        None => Vec::new(),
    };
    for path in emit_report(&entries, &timings, &a.out)? {
        println!("{}", path.display());
    }
    Ok(())
}
