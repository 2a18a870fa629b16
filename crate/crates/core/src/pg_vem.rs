//! Pólya–Gamma variational EM.
//!
//! The outer loop alternates a warm-started CAVI over the PG factors
//! `q_ij(w_ij)` and the bill factors `q_j(β̃_j)` with closed-form M-steps for
//! `Θ` and `Σ_β̃`. Because `q_ij` depends only on `q_j` and `q_j` only on the
//! `w` factors of column `j`, a block sweep updates every bill independently
//! and in parallel.

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Sym2;
use crate::model::{
    elbo_by_cell, pg_mean, quad_tilde, BillVariational, Diagnostics, Estimator, FitResult,
    ModelParams, PGVariational, RollCall,
};
use crate::par;

/// Quadratic forms below this are treated as a non-PSD `Σ̃_j`.
const NEGATIVE_QUAD_TOL: f64 = -1e-12;

/// How `Θ⁽⁰⁾` is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Standardized mean of ±1-coded observed votes.
    RowMeanSigns,
    /// Standardized leading left singular vector of the double-centered,
    /// row-mean-imputed vote matrix.
    #[default]
    DoubleCenteredSvd,
    /// Start from the given parameters.
    UserSupplied(ModelParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PGVemConfig {
    pub max_outer_iters: usize,
    pub max_cavi_iters: usize,
    /// Relative ELBO change that ends the outer loop.
    pub outer_tol: f64,
    /// Largest absolute change in any `μ̃_j` entry that ends a CAVI loop.
    pub cavi_tol: f64,
    pub seed: u64,
    pub init_strategy: InitStrategy,
}

impl Default for PGVemConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 500,
            max_cavi_iters: 50,
            outer_tol: 1e-7,
            cavi_tol: 1e-6,
            seed: 0,
            init_strategy: InitStrategy::default(),
        }
    }
}

impl PGVemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_tol > 0.0) || !(self.cavi_tol > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        if self.max_outer_iters == 0 || self.max_cavi_iters == 0 {
            return Err(Error::InvalidConfig("iteration caps must be at least 1".into()));
        }
        Ok(())
    }
}

/// `sqrt(θ̃ᵀ S θ̃)`, clamping tiny negative rounding to zero.
#[inline]
pub(crate) fn xi_from_moment(s: &Sym2, theta: f64) -> Result<f64> {
    let q = quad_tilde(s, theta);
    if q < NEGATIVE_QUAD_TOL || q.is_nan() {
        return Err(Error::Numerical(format!(
            "E[x²] = {q} is negative; the bill covariance is not positive semidefinite"
        )));
    }
    Ok(q.max(0.0).sqrt())
}

/// `ξ` for every observed cell of bill `j`, in the bill's vote order.
pub(crate) fn xi_column(data: &RollCall, j: usize, s: &Sym2, theta: &[f64]) -> Result<Vec<f64>> {
    data.bill_votes(j)
        .iter()
        .map(|v| xi_from_moment(s, theta[v.index]))
        .collect()
}

/// Gaussian factor of bill `j` with precision `Σ⁻¹ + Σ_i w_i θ̃_i θ̃_iᵀ` and
/// mean `Σ̃ Σ_i κ_i θ̃_i`. `weights` follow the bill's vote order.
pub(crate) fn bill_posterior(
    data: &RollCall,
    j: usize,
    prior_prec: &Sym2,
    theta: &[f64],
    weights: &[f64],
) -> Result<([f64; 2], Sym2)> {
    let mut prec = *prior_prec;
    let mut b = [0.0, 0.0];
    for (v, &w) in data.bill_votes(j).iter().zip(weights) {
        let t = theta[v.index];
        prec.a11 += w;
        prec.a12 += w * t;
        prec.a22 += w * t * t;
        b[0] += v.kappa;
        b[1] += v.kappa * t;
    }
    let cov = prec
        .inverse()
        .filter(|c| c.is_positive_definite())
        .ok_or_else(|| Error::NotPositiveDefinite(format!("posterior precision of bill {j}")))?;
    Ok((cov.mul_vec(b), cov))
}

/// `θ_i = Σ_j (κ_ij μ̃_j2 − w_ij S_j12) / Σ_j w_ij S_j22` over the
/// legislator's observed bills. `weight(j, slot)` returns `w_ij`.
pub(crate) fn theta_update<W>(
    data: &RollCall,
    i: usize,
    bill_q: &BillVariational,
    seconds: &[Sym2],
    weight: W,
) -> Result<f64>
where
    W: Fn(usize, usize) -> f64,
{
    let mut num = 0.0;
    let mut den = 0.0;
    for v in data.legislator_votes(i) {
        let j = v.index;
        let w = weight(j, v.slot);
        num += v.kappa * bill_q.mu[j][1] - w * seconds[j].a12;
        den += w * seconds[j].a22;
    }
    if !(den > 0.0) {
        return Err(Error::Numerical(format!(
            "θ update for legislator {} has denominator {den}",
            data.legislator_ids()[i]
        )));
    }
    Ok(num / den)
}

fn prior_precision(sigma: &Sym2) -> Result<Sym2> {
    if !sigma.is_positive_definite() {
        return Err(Error::NotPositiveDefinite(format!(
            "Σ_β̃ = ({}, {}, {})",
            sigma.a11, sigma.a12, sigma.a22
        )));
    }
    sigma
        .inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("Σ_β̃ is numerically singular".into()))
}

fn check_dims(params: &ModelParams, n_bills: usize, data: &RollCall) -> Result<()> {
    if params.theta.len() != data.n_legislators() || n_bills != data.n_bills() {
        return Err(Error::Dimension(format!(
            "state is {}x{} but data is {}x{}",
            params.theta.len(),
            n_bills,
            data.n_legislators(),
            data.n_bills()
        )));
    }
    Ok(())
}

/// Scatters per-bill columns into an `I×J` matrix (zeros elsewhere).
pub(crate) fn columns_to_dense(data: &RollCall, cols: &[Vec<f64>]) -> Array2<f64> {
    let mut out = Array2::zeros((data.n_legislators(), data.n_bills()));
    for (j, col) in cols.iter().enumerate() {
        for (v, &x) in data.bill_votes(j).iter().zip(col) {
            out[[v.index, j]] = x;
        }
    }
    out
}

/// Gathers the observed cells of each bill from an `I×J` matrix.
pub(crate) fn dense_to_columns(data: &RollCall, m: &Array2<f64>) -> Vec<Vec<f64>> {
    (0..data.n_bills())
        .map(|j| data.bill_votes(j).iter().map(|v| m[[v.index, j]]).collect())
        .collect()
}

/// CAVI update of every PG factor: `ξ_ij² = θ̃_iᵀ(Σ̃_j + μ̃_jμ̃_jᵀ)θ̃_i`.
pub fn cavi_update_w(
    bill_q: &BillVariational,
    params: &ModelParams,
    data: &RollCall,
) -> Result<PGVariational> {
    check_dims(params, bill_q.len(), data)?;
    let cols = par::try_map_indexed(data.n_bills(), |j| {
        xi_column(data, j, &bill_q.second_moment(j), &params.theta)
    })?;
    PGVariational::from_xi(columns_to_dense(data, &cols), data)
}

/// CAVI update of every bill factor given the PG means.
pub fn cavi_update_beta(
    pg_q: &PGVariational,
    params: &ModelParams,
    data: &RollCall,
) -> Result<BillVariational> {
    check_dims(params, data.n_bills(), data)?;
    if pg_q.wbar().dim() != data.observed().dim() {
        return Err(Error::Dimension("PG state has the wrong shape".into()));
    }
    let prior_prec = prior_precision(&params.nu)?;
    let wcols = dense_to_columns(data, pg_q.wbar());
    let out = par::try_map_indexed(data.n_bills(), |j| {
        bill_posterior(data, j, &prior_prec, &params.theta, &wcols[j])
    })?;
    let (mu, cov) = out.into_iter().unzip();
    Ok(BillVariational { mu, cov })
}

/// Working PG state in per-bill vote order.
#[derive(Debug, Clone)]
pub(crate) struct CellState {
    pub xi: Vec<Vec<f64>>,
    pub wbar: Vec<Vec<f64>>,
}

impl CellState {
    fn empty(data: &RollCall) -> Self {
        let cols: Vec<Vec<f64>> = (0..data.n_bills())
            .map(|j| vec![0.0; data.bill_votes(j).len()])
            .collect();
        Self { wbar: cols.iter().map(|c| c.iter().map(|_| 0.25).collect()).collect(), xi: cols }
    }

    fn to_variational(&self, data: &RollCall) -> Result<PGVariational> {
        PGVariational::from_xi(columns_to_dense(data, &self.xi), data)
    }
}

/// Result of a CAVI run.
#[derive(Debug, Clone)]
pub struct CaviOutcome {
    pub bill_q: BillVariational,
    pub pg_q: PGVariational,
    pub sweeps: usize,
    pub converged: bool,
}

fn cavi_in_place(
    bill_q: &mut BillVariational,
    cells: &mut CellState,
    params: &ModelParams,
    data: &RollCall,
    cfg: &PGVemConfig,
) -> Result<(usize, bool)> {
    let prior_prec = prior_precision(&params.nu)?;
    let q: &BillVariational = bill_q;
    // Bills are independent given (Θ, Σ), so each one alternates its own w
    // and β updates until its mean stops moving.
    let updated = par::try_map_indexed(data.n_bills(), |j| -> Result<_> {
        let (mut mu, mut cov) = (q.mu[j], q.cov[j]);
        let mut sweeps = 0;
        loop {
            sweeps += 1;
            let s = cov.add(&Sym2::outer(mu));
            let xi = xi_column(data, j, &s, &params.theta)?;
            let wbar: Vec<f64> = xi.iter().map(|&x| pg_mean(x)).collect();
            let (new_mu, new_cov) = bill_posterior(data, j, &prior_prec, &params.theta, &wbar)?;
            let delta = (new_mu[0] - mu[0]).abs().max((new_mu[1] - mu[1]).abs());
            mu = new_mu;
            cov = new_cov;
            if delta < cfg.cavi_tol || sweeps >= cfg.max_cavi_iters {
                return Ok((xi, wbar, mu, cov, sweeps, delta < cfg.cavi_tol));
            }
        }
    })?;
    let mut max_sweeps = 0;
    let mut all_converged = true;
    for (j, (xi, wbar, mu, cov, sweeps, ok)) in updated.into_iter().enumerate() {
        cells.xi[j] = xi;
        cells.wbar[j] = wbar;
        bill_q.mu[j] = mu;
        bill_q.cov[j] = cov;
        max_sweeps = max_sweeps.max(sweeps);
        all_converged &= ok;
    }
    Ok((max_sweeps, all_converged))
}

/// Alternates [`cavi_update_w`] and [`cavi_update_beta`] from a warm start
/// until the largest change in `μ̃` falls below `cfg.cavi_tol`.
///
/// Each bill stops as soon as its own factor has converged; `sweeps` is the
/// largest number of sweeps any bill needed.
pub fn run_cavi(
    bill_q: BillVariational,
    params: &ModelParams,
    data: &RollCall,
    cfg: &PGVemConfig,
) -> Result<CaviOutcome> {
    check_dims(params, bill_q.len(), data)?;
    let mut bill_q = bill_q;
    let mut cells = CellState::empty(data);
    let (sweeps, converged) = cavi_in_place(&mut bill_q, &mut cells, params, data, cfg)?;
    Ok(CaviOutcome {
        pg_q: cells.to_variational(data)?,
        bill_q,
        sweeps,
        converged,
    })
}

/// Closed-form maximizer of the expected complete log-likelihood in `Θ`.
pub fn m_step_theta(
    bill_q: &BillVariational,
    pg_q: &PGVariational,
    data: &RollCall,
) -> Result<Vec<f64>> {
    if bill_q.len() != data.n_bills() || pg_q.wbar().dim() != data.observed().dim() {
        return Err(Error::Dimension("variational state does not match the data".into()));
    }
    let seconds = bill_q.second_moments();
    let wbar = pg_q.wbar();
    par::try_map_indexed(data.n_legislators(), |i| {
        theta_update(data, i, bill_q, &seconds, |j, _| wbar[[i, j]])
    })
}

fn m_step_theta_cells(
    bill_q: &BillVariational,
    cells: &CellState,
    data: &RollCall,
) -> Result<Vec<f64>> {
    let seconds = bill_q.second_moments();
    par::try_map_indexed(data.n_legislators(), |i| {
        theta_update(data, i, bill_q, &seconds, |j, k| cells.wbar[j][k])
    })
}

/// `Σ_β̃ = (1/J) Σ_j (Σ̃_j + μ̃_jμ̃_jᵀ)`.
pub fn m_step_sigma(bill_q: &BillVariational) -> Sym2 {
    let seconds = bill_q.second_moments();
    let n = seconds.len() as f64;
    let a11 = par::pairwise_sum(&seconds.iter().map(|s| s.a11).collect::<Vec<_>>());
    let a12 = par::pairwise_sum(&seconds.iter().map(|s| s.a12).collect::<Vec<_>>());
    let a22 = par::pairwise_sum(&seconds.iter().map(|s| s.a22).collect::<Vec<_>>());
    Sym2::new(a11 / n, a12 / n, a22 / n)
}

fn standardize(x: &mut [f64]) -> Result<()> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::InvalidData(
            "cannot initialize: votes carry no variation across legislators".into(),
        ));
    }
    x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    Ok(())
}

fn orient(theta: &mut [f64], data: &RollCall) {
    let rates = data.yea_rates();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let c: f64 = theta.iter().zip(&rates).map(|(t, r)| t * (r - mean)).sum();
    if c < 0.0 || (c == 0.0 && theta[0] < 0.0) {
        theta.iter_mut().for_each(|t| *t = -*t);
    }
}

fn row_mean_signs(data: &RollCall) -> Result<Vec<f64>> {
    let mut theta: Vec<f64> = data.yea_rates().iter().map(|r| 2.0 * r - 1.0).collect();
    standardize(&mut theta)?;
    Ok(theta)
}

fn double_centered_svd(data: &RollCall) -> Result<Vec<f64>> {
    let (n, m) = (data.n_legislators(), data.n_bills());
    let rates = data.yea_rates();
    let mut x = Array2::from_shape_fn((n, m), |(i, j)| {
        if data.observed()[[i, j]] {
            f64::from(data.votes()[[i, j]])
        } else {
            rates[i]
        }
    });
    let row: Vec<f64> = x.rows().into_iter().map(|r| r.sum() / m as f64).collect();
    let col: Vec<f64> = x.columns().into_iter().map(|c| c.sum() / n as f64).collect();
    let grand = row.iter().sum::<f64>() / n as f64;
    x.indexed_iter_mut()
        .for_each(|((i, j), v)| *v = *v - row[i] - col[j] + grand);
    let xt = x.t().as_standard_layout().into_owned();

    // deterministic start keyed by bill id, so reordering bills does not change it
    let g: Vec<f64> = data
        .bill_ids()
        .iter()
        .map(|id| (crate::rng::fnv1a(id.as_bytes()) >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
        .collect();
    let mut u: Vec<f64> = x.rows().into_iter().map(|r| r.iter().zip(&g).map(|(a, b)| a * b).sum()).collect();
    let norm = |v: &mut Vec<f64>| -> f64 {
        let s = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if s > 0.0 {
            v.iter_mut().for_each(|a| *a /= s);
        }
        s
    };
    if !(norm(&mut u) > 0.0) {
        return Err(Error::InvalidData(
            "cannot initialize: double-centered vote matrix is zero".into(),
        ));
    }
    for _ in 0..2000 {
        let v: Vec<f64> = par::map_indexed(m, |j| xt.row(j).iter().zip(&u).map(|(a, b)| a * b).sum());
        let mut next: Vec<f64> =
            par::map_indexed(n, |i| x.row(i).iter().zip(&v).map(|(a, b)| a * b).sum());
        if !(norm(&mut next) > 0.0) {
            return Err(Error::InvalidData("cannot initialize: degenerate vote matrix".into()));
        }
        let change = next.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        u = next;
        if change < 1e-12 {
            break;
        }
    }
    standardize(&mut u)?;
    Ok(u)
}

/// Starting parameters: `Θ⁽⁰⁾` from `strategy`, `Σ⁽⁰⁾ = 2I`.
pub fn initial_params(data: &RollCall, strategy: &InitStrategy) -> Result<ModelParams> {
    let theta = match strategy {
        InitStrategy::UserSupplied(p) => {
            if p.theta.len() != data.n_legislators() {
                return Err(Error::Dimension(format!(
                    "initial θ has {} entries for {} legislators",
                    p.theta.len(),
                    data.n_legislators()
                )));
            }
            p.validate()?;
            return Ok(p.clone());
        }
        InitStrategy::RowMeanSigns => row_mean_signs(data)?,
        InitStrategy::DoubleCenteredSvd => double_centered_svd(data)?,
    };
    let mut theta = theta;
    orient(&mut theta, data);
    Ok(ModelParams::new(theta, Sym2::diag(2.0, 2.0)))
}

/// Fits the model by Pólya–Gamma variational EM.
///
/// The returned parameters are those of the last M-step, paired with the
/// variational state they were computed from, so the expected gradient of
/// the complete-data log-likelihood is zero at the returned point.
pub fn fit_pg_vem(data: &RollCall, cfg: &PGVemConfig) -> Result<FitResult> {
    cfg.validate()?;
    let start = Instant::now();
    let mut params = initial_params(data, &cfg.init_strategy)?;
    let mut bill_q = BillVariational::uniform(data.n_bills(), Sym2::identity());
    let mut cells = CellState::empty(data);
    let mut trace = Vec::new();
    let mut diag = Diagnostics::default();

    for _ in 0..cfg.max_outer_iters {
        let (sweeps, inner_ok) = cavi_in_place(&mut bill_q, &mut cells, &params, data, cfg)?;
        diag.cavi_sweeps.push(sweeps);
        if !inner_ok {
            diag.cavi_capped += 1;
        }
        let theta = m_step_theta_cells(&bill_q, &cells, data)?;
        let sigma = m_step_sigma(&bill_q);
        params = ModelParams::new(theta, sigma);
        let value = elbo_by_cell(&params, &bill_q, data, |j, k, _| {
            (cells.xi[j][k], cells.wbar[j][k])
        })?;
        if !value.is_finite() {
            return Err(Error::Numerical("ELBO is not finite".into()));
        }
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            diag.max_objective_drop = diag.max_objective_drop.max(prev - value);
            trace.push(value);
            if (value - prev).abs() <= cfg.outer_tol * prev.abs() {
                diag.converged = true;
                break;
            }
        } else {
            trace.push(value);
        }
    }
    if !diag.converged {
        log::warn!("PG-VEM stopped after {} outer iterations without converging", trace.len());
    }
    diag.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(FitResult {
        estimator: Estimator::PgVem,
        params,
        pg_q: cells.to_variational(data)?,
        bill_q,
        outer_iters: trace.len(),
        elbo_trace: trace,
        se_theta: None,
        diagnostics: diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{elbo, pg_mean};
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn w_update_examples() {
        let data = RollCall::complete(array![[1u8]]).unwrap();
        let params = ModelParams::new(vec![0.0], Sym2::identity());
        let q = BillVariational::uniform(1, Sym2::identity());
        let pg = cavi_update_w(&q, &params, &data).unwrap();
        assert_relative_eq!(pg.xi()[[0, 0]], 1.0, epsilon = 1e-15);
        assert_relative_eq!(pg.wbar()[[0, 0]], 0.231_058_578_630_004_9, epsilon = 1e-15);

        let q0 = BillVariational::uniform(1, Sym2::identity().scale(1e-300));
        let pg0 = cavi_update_w(&q0, &params, &data).unwrap();
        assert_eq!(pg0.wbar()[[0, 0]], 0.25);

        let bad = BillVariational::uniform(1, Sym2::new(-1.0, 0.0, 1.0));
        assert!(cavi_update_w(&bad, &params, &data).is_err());
    }

    #[test]
    fn beta_update_examples() {
        let data = RollCall::complete(array![[1u8]]).unwrap();
        let params = ModelParams::new(vec![0.0], Sym2::identity());
        let pg = PGVariational::from_xi(array![[0.0]], &data).unwrap();
        let q = cavi_update_beta(&pg, &params, &data).unwrap();
        assert_relative_eq!(q.cov[0].a11, 0.8, epsilon = 1e-15);
        assert_relative_eq!(q.cov[0].a22, 1.0, epsilon = 1e-15);
        assert_relative_eq!(q.mu[0][0], 0.4, epsilon = 1e-15);
        assert_eq!(q.mu[0][1], 0.0);

        // a bill with no voters keeps its prior
        let sparse = RollCall::new_permissive(
            array![[1u8, 0]],
            array![[true, false]],
            vec!["a".into()],
            vec!["b1".into(), "b2".into()],
        )
        .unwrap();
        let sigma = Sym2::new(1.3, 0.4, 0.9);
        let p2 = ModelParams::new(vec![0.7], sigma);
        let pg2 = PGVariational::from_xi(array![[0.3, 0.0]], &sparse).unwrap();
        let q2 = cavi_update_beta(&pg2, &p2, &sparse).unwrap();
        assert_eq!(q2.mu[1], [0.0, 0.0]);
        assert_relative_eq!(q2.cov[1].a11, sigma.a11, epsilon = 1e-15);
        assert_relative_eq!(q2.cov[1].a12, sigma.a12, epsilon = 1e-15);
        assert_relative_eq!(q2.cov[1].a22, sigma.a22, epsilon = 1e-15);
    }

    #[test]
    fn sigma_step_examples() {
        let q = BillVariational::uniform(1, Sym2::identity());
        assert_eq!(m_step_sigma(&q), Sym2::identity());
        let q2 = BillVariational {
            mu: vec![[1.0, 0.0], [0.0, 1.0]],
            cov: vec![Sym2::identity(); 2],
        };
        assert_eq!(m_step_sigma(&q2), Sym2::diag(1.5, 1.5));
    }

    #[test]
    fn theta_step_zero_cross_terms() {
        let data = RollCall::complete(array![[1u8]]).unwrap();
        let q = BillVariational::uniform(1, Sym2::identity());
        let pg = PGVariational::from_xi(array![[0.0]], &data).unwrap();
        assert_eq!(m_step_theta(&q, &pg, &data).unwrap(), vec![0.0]);
    }

    #[test]
    fn elbo_trace_matches_public_elbo() {
        let votes = array![[1u8, 0, 1, 1], [0, 0, 1, 0], [1, 1, 0, 1], [0, 1, 0, 0]];
        let data = RollCall::complete(votes).unwrap();
        let cfg = PGVemConfig { max_outer_iters: 5, ..Default::default() };
        let fit = fit_pg_vem(&data, &cfg).unwrap();
        let direct = elbo(&fit.params, &fit.bill_q, &fit.pg_q, &data).unwrap();
        assert_eq!(direct.to_bits(), fit.elbo_trace.last().unwrap().to_bits());
        assert!(fit.pg_q.wbar().iter().all(|&w| w > 0.0 && w <= 0.25));
        assert_eq!(fit.pg_q.wbar()[[0, 0]], pg_mean(fit.pg_q.xi()[[0, 0]]));
    }
}
