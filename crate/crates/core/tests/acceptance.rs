//! Acceptance suite: one line per criterion.
//!
//! Runs every criterion in order and prints `criterion N: PASS|FAIL ...`.
//! `ACCEPTANCE_ONLY=4,5` restricts the run. The process exits nonzero only
//! when `ACCEPTANCE_STRICT` is set, so failures are reported without
//! aborting the rest of the workspace tests.

mod common;

use std::time::{Duration, Instant};

use rand::Rng;
use rollcall_vem::io::{result_to_string, write_long_csv, InputFormat, RunConfig};
use rollcall_vem::louis::{expected_gradient, hessian_cross_block, hessian_nu_block, hessian_theta_block, louis_se, louis_se_variant, LouisConfig, LouisVariant};
use rollcall_vem::model::{align_estimates, elbo, expected_complete_loglik, sigmoid, Estimator, FitResult, ModelParams, RollCall};
use rollcall_vem::par::with_workers;
use rollcall_vem::pg_vem::{cavi_update_beta, cavi_update_w, fit_pg_vem, initial_params, m_step_sigma, m_step_theta, InitStrategy, PGVemConfig};
use rollcall_vem::pipeline::{run_file, SeRequest};
use rollcall_vem::quadrature::{fisher_numeric, map_onto, mle_direct, QuadConfig};
use rollcall_vem::report::{emit_report, ReportEntry};
use rollcall_vem::sim::{generate_scenario_one, generate_scenario_two, random_mask, ScenarioOneConfig, Simulated};
use rollcall_vem::stats::{median, pearson, spearman};
use rollcall_vem::{fit_jj_vem, parametric_bootstrap, BootstrapConfig, JJVemConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.1}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

fn c1_pg_identity() -> Outcome {
    let start = Instant::now();
    let worst = (0..=600)
        .map(|k| -30.0 + 0.1 * k as f64)
        .map(|x: f64| (sigmoid(x) * 2.0 * (x / 2.0).cosh() * (-x / 2.0).exp() - 1.0).abs())
        .fold(0.0, f64::max);
    let (fast, t) = within(Duration::from_secs(1), start);
    outcome(worst < 1e-12 && fast, format!("max |error| {worst:.2e} < 1e-12, {t}"))
}

/// Records a relative decrease of the ELBO larger than the slack.
fn step(prev: &mut f64, next: f64, worst: &mut f64) {
    let drop = (*prev - next) / prev.abs().max(1.0);
    *worst = worst.max(drop);
    *prev = next;
}

fn c2_elbo_monotone() -> Outcome {
    let start = Instant::now();
    let mut rng = common::rng(2);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..20 {
        let (n, m) = common::random_sizes(&mut rng, 50, 80);
        let s = common::masked_instance(n, m, 0.3, 100 + k);
        let data = &s.data;
        let mut params = initial_params(data, &InitStrategy::DoubleCenteredSvd).unwrap();
        let mut bill_q = rollcall_vem::model::BillVariational::uniform(m, params.nu);
        let mut pg_q = cavi_update_w(&bill_q, &params, data).unwrap();
        let mut current = elbo(&params, &bill_q, &pg_q, data).unwrap();
        for _ in 0..15 {
            for _ in 0..3 {
                bill_q = cavi_update_beta(&pg_q, &params, data).unwrap();
                step(&mut current, elbo(&params, &bill_q, &pg_q, data).unwrap(), &mut worst);
                pg_q = cavi_update_w(&bill_q, &params, data).unwrap();
                step(&mut current, elbo(&params, &bill_q, &pg_q, data).unwrap(), &mut worst);
            }
            params.theta = m_step_theta(&bill_q, &pg_q, data).unwrap();
            step(&mut current, elbo(&params, &bill_q, &pg_q, data).unwrap(), &mut worst);
            params.nu = m_step_sigma(&bill_q);
            step(&mut current, elbo(&params, &bill_q, &pg_q, data).unwrap(), &mut worst);
        }
    }
    let (fast, t) = within(Duration::from_secs(30), start);
    outcome(
        worst <= 1e-8 && fast,
        format!("largest relative decrease {worst:.2e} <= 1e-8 over 20 instances, {t}"),
    )
}

fn with_tau(params: &ModelParams, tau: [f64; 3]) -> ModelParams {
    ModelParams::new(params.theta.clone(), common::sigma_from_tau(tau))
}

/// Largest relative error of the gradient, the Θ/τ Hessian blocks and the
/// cross block against central differences, at a point away from the optimum.
fn derivative_errors(fit: &FitResult, data: &RollCall, rng: &mut rand_chacha::ChaCha8Rng) -> [f64; 4] {
    let (bill_q, pg_q) = (&fit.bill_q, &fit.pg_q);
    let mut at = fit.params.clone();
    for t in &mut at.theta {
        *t += 0.3 * (rng.random::<f64>() - 0.5);
    }
    at.nu = at.nu.scale(1.3);
    let n = at.theta.len();
    let tau = common::tau_of(&at.nu);
    let f = |p: &ModelParams| expected_complete_loglik(p, bill_q, pg_q, data).unwrap();
    let g = |p: &ModelParams| expected_gradient(p, bill_q, pg_q, data).unwrap();
    let shift = |k: usize, d: f64| -> ModelParams {
        if k < n {
            let mut p = at.clone();
            p.theta[k] += d;
            p
        } else {
            let mut t = tau;
            t[k - n] += d;
            with_tau(&at, t)
        }
    };
    let scale = |k: usize| if k < n { 1.0 } else { tau[k - n].abs().max(0.1) };

    let analytic = g(&at);
    let numeric: Vec<f64> = (0..n + 3)
        .map(|k| {
            let h = 1e-5 * scale(k);
            (f(&shift(k, h)) - f(&shift(k, -h))) / (2.0 * h)
        })
        .collect();
    let rel = |a: &[f64], b: &[f64]| {
        let den = a.iter().map(|x| x.abs()).fold(0.0, f64::max);
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / den
    };
    let grad_err = rel(&analytic, &numeric);

    // Column k of the negative Hessian by differencing the analytic gradient.
    let column = |k: usize| -> Vec<f64> {
        let h = 1e-5 * scale(k);
        let (gp, gm) = (g(&shift(k, h)), g(&shift(k, -h)));
        gp.iter().zip(&gm).map(|(a, b)| -(a - b) / (2.0 * h)).collect()
    };
    let h_theta = hessian_theta_block(fit, data).unwrap();
    let h_nu = hessian_nu_block(&at.nu, data.n_bills()).unwrap();
    let cross = hessian_cross_block(n);
    let (mut theta_num, mut theta_ana) = (Vec::new(), Vec::new());
    let (mut nu_num, mut nu_ana) = (Vec::new(), Vec::new());
    let mut cross_abs: f64 = 0.0;
    let mut block_scale: f64 = 0.0;
    for k in 0..n + 3 {
        let col = column(k);
        for (r, v) in col.iter().enumerate() {
            match (r < n, k < n) {
                (true, true) => {
                    theta_num.push(*v);
                    theta_ana.push(if r == k { h_theta[r] } else { 0.0 });
                }
                (false, false) => {
                    nu_num.push(*v);
                    nu_ana.push(h_nu[(r - n, k - n)]);
                }
                (true, false) => cross_abs = cross_abs.max((v - cross[(r, k - n)]).abs()),
                (false, true) => cross_abs = cross_abs.max((v - cross[(k, r - n)]).abs()),
            }
            block_scale = block_scale.max(v.abs());
        }
    }
    [
        grad_err,
        rel(&theta_ana, &theta_num),
        rel(&nu_ana, &nu_num),
        cross_abs / block_scale,
    ]
}

fn c3_derivatives() -> Outcome {
    let start = Instant::now();
    let mut rng = common::rng(3);
    let mut worst = [0.0f64; 4];
    for k in 0..10 {
        let (n, m) = common::random_sizes(&mut rng, 40, 60);
        let s = common::masked_instance(n, m, 0.2, 300 + k);
        let fit = fit_pg_vem(&s.data, &PGVemConfig { max_outer_iters: 5, ..Default::default() }).unwrap();
        let e = derivative_errors(&fit, &s.data, &mut rng);
        for (w, x) in worst.iter_mut().zip(e) {
            *w = w.max(x);
        }
    }
    let (fast, t) = within(Duration::from_secs(30), start);
    outcome(
        worst.iter().all(|&e| e < 1e-5) && fast,
        format!(
            "relative errors gradient {:.1e}, Θ block {:.1e}, τ block {:.1e}, cross block {:.1e} (< 1e-5), {t}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

/// A tiny complete instance whose marginal likelihood has a finite maximizer.
struct OracleInstance {
    seed: u64,
    sim: Simulated,
    mle: ModelParams,
}

/// Scenario I at 10 × 15 for seeds 1, 2, ... keeping the first five whose
/// direct maximization converges without diverging.
fn oracle_instances() -> (Vec<OracleInstance>, Vec<u64>) {
    let cfg = QuadConfig::default();
    let mut found = Vec::new();
    let mut skipped = Vec::new();
    for seed in 1..=60u64 {
        if found.len() == 5 {
            break;
        }
        let sim = generate_scenario_one(&ScenarioOneConfig::new(10, 15, seed)).unwrap();
        let init = initial_params(&sim.data, &InitStrategy::DoubleCenteredSvd).unwrap();
        let mle = mle_direct(&sim.data, &init, &cfg).unwrap();
        if mle.converged && !mle.diverged {
            found.push(OracleInstance { seed, sim, mle: mle.params });
        } else {
            skipped.push(seed);
        }
    }
    (found, skipped)
}

fn c4_c5_oracle() -> (Outcome, Outcome) {
    let start = Instant::now();
    let (instances, skipped) = oracle_instances();
    let search = start.elapsed();
    let mut min_corr = f64::INFINITY;
    let mut max_diff: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut missing_se = 0;
    for inst in &instances {
        let data = &inst.sim.data;
        let pg = fit_pg_vem(data, &PGVemConfig::default()).unwrap();
        let mle = align_estimates(&inst.mle.theta, &inst.sim.theta).unwrap();
        let est = align_estimates(&pg.params.theta, &mle).unwrap();
        min_corr = min_corr.min(pearson(&est, &mle));
        max_diff = est.iter().zip(&mle).map(|(a, b)| (a - b).abs()).fold(max_diff, f64::max);

        let at = map_onto(&inst.mle, &pg.params.theta).unwrap();
        let fisher = fisher_numeric(&at, data, &QuadConfig::default()).unwrap().theta_block_se().unwrap();
        let louis = louis_se(&pg, data, &LouisConfig::default()).unwrap().se;
        for (l, f) in louis.iter().zip(&fisher) {
            match (l, f) {
                (Some(l), Some(f)) => max_rel = max_rel.max((l - f).abs() / f),
                _ => missing_se += 1,
            }
        }
    }
    let seeds: Vec<u64> = instances.iter().map(|i| i.seed).collect();
    let enough = instances.len() == 5;
    let (fast, t) = within(Duration::from_secs(300), start);
    let c4 = outcome(
        enough && min_corr > 0.98 && max_diff < 0.15 && fast,
        format!(
            "seeds {seeds:?} ({} seeds without a finite maximizer skipped, search {:.1}s): min correlation {min_corr:.4} > 0.98, max |difference| {max_diff:.3} < 0.15, {t}",
            skipped.len(),
            search.as_secs_f64()
        ),
    );
    let c5 = outcome(
        enough && missing_se == 0 && max_rel < 0.25 && fast,
        format!("max relative SE difference {max_rel:.3} < 0.25, {missing_se} Louis SEs undefined, {t}"),
    );
    (c4, c5)
}

fn relative_deviation(louis: &[Option<f64>], pb: &[f64]) -> Vec<f64> {
    louis
        .iter()
        .zip(pb)
        .map(|(l, b)| l.map_or(f64::INFINITY, |l| (l - b).abs() / b))
        .collect()
}

fn c6_c7_louis_vs_bootstrap() -> (Outcome, Outcome) {
    let start = Instant::now();
    let sim = generate_scenario_one(&ScenarioOneConfig::new(100, 250, 42)).unwrap();
    let data = &sim.data;
    let pg = fit_pg_vem(data, &PGVemConfig::default()).unwrap();
    let pg_louis = louis_se(&pg, data, &LouisConfig::default()).unwrap().se;
    let pg_pb = parametric_bootstrap(&pg, data, &BootstrapConfig { seed: 7, ..Default::default() }).unwrap();
    let pg_rel = median(&relative_deviation(&pg_louis, &pg_pb.se));
    let louis_vec: Vec<f64> = pg_louis.iter().map(|s| s.unwrap_or(f64::NAN)).collect();
    let rho = spearman(&louis_vec, &pg_pb.se);
    let pg_time = start.elapsed();
    let (fast, t) = within(Duration::from_secs(900), start);
    let c6 = outcome(
        pg_rel < 0.15 && rho > 0.95 && fast,
        format!(
            "median relative deviation {pg_rel:.3} < 0.15, Spearman {rho:.3} > 0.95, {} of 100 replicates dropped, {t}",
            pg_pb.dropped
        ),
    );

    let jj = fit_jj_vem(data, &JJVemConfig::default()).unwrap();
    let jj_louis = louis_se_variant(&jj, data, &LouisConfig::default(), LouisVariant::JjSurrogate).unwrap().se;
    let jj_cfg = BootstrapConfig { seed: 7, estimator: Estimator::JjVem, ..Default::default() };
    let jj_pb = parametric_bootstrap(&jj, data, &jj_cfg).unwrap();
    let jj_rel = median(&relative_deviation(&jj_louis, &jj_pb.se));
    let ratio = jj_rel / pg_rel;
    let total = start.elapsed();
    let c7 = outcome(
        ratio >= 2.0 && total < Duration::from_secs(900) + pg_time,
        format!(
            "JJ median relative deviation {jj_rel:.3} vs PG {pg_rel:.3}, ratio {ratio:.2} >= 2, {:.1}s",
            total.as_secs_f64()
        ),
    );
    (c6, c7)
}

fn c8_recovery() -> Outcome {
    let start = Instant::now();
    let sim = generate_scenario_one(&ScenarioOneConfig::new(400, 1000, 42)).unwrap();
    let pg = fit_pg_vem(&sim.data, &PGVemConfig::default()).unwrap();
    let jj = fit_jj_vem(&sim.data, &JJVemConfig::default()).unwrap();
    let a = align_estimates(&pg.params.theta, &sim.theta).unwrap();
    let b = align_estimates(&jj.params.theta, &sim.theta).unwrap();
    let (r_pg, r_jj, r_both) = (pearson(&a, &sim.theta), pearson(&b, &sim.theta), pearson(&a, &b));
    let (fast, t) = within(Duration::from_secs(600), start);
    outcome(
        r_pg > 0.95 && r_jj > 0.95 && r_both > 0.99 && fast,
        format!("truth correlation PG {r_pg:.4}, JJ {r_jj:.4} (> 0.95); PG vs JJ {r_both:.4} > 0.99, {t}"),
    )
}

fn c9_timing() -> Outcome {
    let start = Instant::now();
    let mut ratios = Vec::new();
    let mut rows = Vec::new();
    for m in [800, 1400, 2000] {
        let sim = generate_scenario_one(&ScenarioOneConfig::new(400, m, 9)).unwrap();
        let data = &sim.data;
        let t = Instant::now();
        let pg = fit_pg_vem(data, &PGVemConfig::default()).unwrap();
        louis_se(&pg, data, &LouisConfig::default()).unwrap();
        let pg_time = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let jj = fit_jj_vem(data, &JJVemConfig::default()).unwrap();
        let cfg = BootstrapConfig { estimator: Estimator::JjVem, ..Default::default() };
        parametric_bootstrap(&jj, data, &cfg).unwrap();
        let jj_time = t.elapsed().as_secs_f64();
        ratios.push(jj_time / pg_time);
        rows.push(format!("J={m}: {pg_time:.1}s vs {jj_time:.1}s"));
    }
    let faster = ratios.iter().all(|&r| r > 1.0);
    let growing = ratios.windows(2).all(|w| w[1] > w[0]);
    let (fast, t) = within(Duration::from_secs(3600), start);
    outcome(
        faster && growing && fast,
        format!(
            "PG+Louis vs JJ+bootstrap {}; ratios {:?} all > 1 and increasing, {t}",
            rows.join(", "),
            ratios.iter().map(|r| format!("{r:.1}")).collect::<Vec<_>>()
        ),
    )
}

fn c10_missing_pattern() -> Outcome {
    let start = Instant::now();
    let (n, m) = (300, 500);
    let template_sim = generate_scenario_one(&ScenarioOneConfig::new(n, m, 10)).unwrap();
    let template = fit_pg_vem(&template_sim.data, &PGVemConfig::default()).unwrap();
    let mut rng = common::rng(10);
    let rates: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.6)).collect();
    let mask = random_mask(&rates, m, 10).unwrap();
    let sim = generate_scenario_two(&template, &mask, 10).unwrap();
    let fit = fit_pg_vem(&sim.data, &PGVemConfig::default()).unwrap();
    let se: Vec<f64> = louis_se(&fit, &sim.data, &LouisConfig::default())
        .unwrap()
        .se
        .iter()
        .map(|s| s.unwrap_or(f64::NAN))
        .collect();
    let abs_theta: Vec<f64> = fit.params.theta.iter().map(|t| t.abs()).collect();
    let missing = sim.data.missing_rates();
    let tercile = rollcall_vem::report::missing_rate_tercile(&missing);

    // Bands of similar |θ̂|: quintiles of |θ̂|.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs_theta[a].total_cmp(&abs_theta[b]));
    let mut violations = Vec::new();
    for (b, band) in order.chunks(n / 5).enumerate() {
        let mut means = [(0.0, 0usize); 3];
        for &i in band {
            means[tercile[i]].0 += se[i];
            means[tercile[i]].1 += 1;
        }
        let means: Vec<f64> = means.iter().filter(|c| c.1 > 0).map(|c| c.0 / c.1 as f64).collect();
        if means.windows(2).any(|w| w[1] < w[0]) {
            violations.push(b);
        }
    }
    let rho = spearman(&abs_theta, &se);
    let (fast, t) = within(Duration::from_secs(600), start);
    outcome(
        violations.is_empty() && rho > 0.5 && fast,
        format!("|θ̂| bands with SE decreasing in missing tercile: {violations:?}; Spearman(|θ̂|, SE) {rho:.3} > 0.5, {t}"),
    )
}

fn pipeline_bytes(input: &std::path::Path, out: &std::path::Path, workers: usize) -> (String, Vec<Vec<u8>>) {
    let cfg = RunConfig::default().with_seed(11);
    let se = SeRequest { louis: true, bootstrap: false };
    with_workers(Some(workers), || {
        let run = run_file(input, InputFormat::Long, &cfg, se, false).unwrap();
        let doc = result_to_string(&run.document).unwrap();
        let entry = ReportEntry {
            label: "run".into(),
            legislator_ids: run.data.legislator_ids().to_vec(),
            estimate: run.fit.params.theta.clone(),
            truth: None,
            missing_rates: run.data.missing_rates(),
            se: vec![("louis".into(), run.louis.unwrap().se)],
        };
        let files = emit_report(&[entry], &[], out).unwrap();
        (doc, files.iter().map(|p| std::fs::read(p).unwrap()).collect())
    })
}

fn c11_determinism() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let sim = common::masked_instance(80, 150, 0.2, 11);
    let input = dir.path().join("votes.csv");
    write_long_csv(&input, &sim.data).unwrap();
    let (doc1, rep1) = pipeline_bytes(&input, &dir.path().join("one"), 1);
    let (doc4, rep4) = pipeline_bytes(&input, &dir.path().join("four"), 4);
    let (fast, t) = within(Duration::from_secs(300), start);
    outcome(
        doc1 == doc4 && rep1 == rep4 && fast,
        format!(
            "result documents identical: {}, report files identical: {} (1 vs 4 workers), {t}",
            doc1 == doc4,
            rep1 == rep4
        ),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |k: u32| only.as_ref().is_none_or(|v| v.contains(&k));
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |k: u32, name: &'static str, o: Outcome| {
        println!("criterion {k} [{name}]: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((k, name, o));
    };
    if wanted(1) {
        report(1, "PG identity", c1_pg_identity());
    }
    if wanted(2) {
        report(2, "ELBO monotonicity", c2_elbo_monotone());
    }
    if wanted(3) {
        report(3, "gradient and Hessian", c3_derivatives());
    }
    if wanted(4) || wanted(5) {
        let (c4, c5) = c4_c5_oracle();
        report(4, "oracle equivalence", c4);
        report(5, "Louis vs quadrature Fisher", c5);
    }
    if wanted(6) || wanted(7) {
        let (c6, c7) = c6_c7_louis_vs_bootstrap();
        report(6, "Louis vs bootstrap", c6);
        report(7, "JJ Louis deviation", c7);
    }
    if wanted(8) {
        report(8, "recovery", c8_recovery());
    }
    if wanted(9) {
        report(9, "timing", c9_timing());
    }
    if wanted(10) {
        report(10, "missing rate and SE", c10_missing_pattern());
    }
    if wanted(11) {
        report(11, "determinism", c11_determinism());
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed {:?}", results.len() - failed.len(), failed.len(), failed);
    if !failed.is_empty() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
