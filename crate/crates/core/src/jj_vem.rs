//! Variational EM on the Jaakkola–Jordan surrogate.
//!
//! Each iteration runs the exact Gaussian E-step for the bills, then the
//! closed-form updates of `Θ`, `ξ` and `Σ_β̃` in that order. The monitored
//! objective is the EM lower bound on the surrogate,
//! `E_q[ℓ_e^JJ] + H(q)`.

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Sym2;
use crate::model::{
    gaussian_kl, jj_lambda, log_cosh, quad_tilde, BillVariational, Diagnostics, Estimator,
    FitResult, ModelParams, PGVariational, RollCall,
};
use crate::par;
use crate::pg_vem::{
    bill_posterior, columns_to_dense, dense_to_columns, initial_params, m_step_sigma, xi_column,
    xi_from_moment, InitStrategy,
};

const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JJVemConfig {
    pub max_iters: usize,
    /// Relative change in the monitored objective that ends the loop.
    pub tol: f64,
    pub init_strategy: InitStrategy,
}

impl Default for JJVemConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            tol: 1e-7,
            init_strategy: InitStrategy::default(),
        }
    }
}

impl JJVemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("iteration cap must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_xi(xi: &Array2<f64>, data: &RollCall) -> Result<()> {
    if xi.dim() != data.observed().dim() {
        return Err(Error::Dimension("ξ has the wrong shape".into()));
    }
    Ok(())
}

fn e_step_columns(
    params: &ModelParams,
    xi: &[Vec<f64>],
    data: &RollCall,
) -> Result<BillVariational> {
    let prior_prec = params
        .nu
        .inverse()
        .filter(|_| params.nu.is_positive_definite())
        .ok_or_else(|| Error::NotPositiveDefinite("Σ_β̃".into()))?;
    let out = par::try_map_indexed(data.n_bills(), |j| {
        let weights: Vec<f64> = xi[j].iter().map(|&z| -2.0 * jj_lambda(z)).collect();
        bill_posterior(data, j, &prior_prec, &params.theta, &weights)
    })?;
    let (mu, cov) = out.into_iter().unzip();
    Ok(BillVariational { mu, cov })
}

/// Conditional Gaussian of each bill under the surrogate:
/// precision `Σ⁻¹ − 2 Σ_i λ(ξ_ij) θ̃_iθ̃_iᵀ`, mean `Σ̃_j Σ_i κ_ij θ̃_i`.
pub fn jj_e_step(params: &ModelParams, xi: &Array2<f64>, data: &RollCall) -> Result<BillVariational> {
    check_xi(xi, data)?;
    if params.theta.len() != data.n_legislators() {
        return Err(Error::Dimension("θ does not match the data".into()));
    }
    e_step_columns(params, &dense_to_columns(data, xi), data)
}

fn theta_columns(bill_q: &BillVariational, xi: &[Vec<f64>], data: &RollCall) -> Result<Vec<f64>> {
    let seconds = bill_q.second_moments();
    par::try_map_indexed(data.n_legislators(), |i| {
        let mut num = 0.0;
        let mut den = 0.0;
        for v in data.legislator_votes(i) {
            let j = v.index;
            let lam = jj_lambda(xi[j][v.slot]);
            num += -v.kappa * bill_q.mu[j][1] - 2.0 * lam * seconds[j].a12;
            den += lam * seconds[j].a22;
        }
        let den = 2.0 * den;
        if !(den < 0.0) {
            return Err(Error::Numerical(format!(
                "θ update for legislator {} has denominator {den}",
                data.legislator_ids()[i]
            )));
        }
        Ok(num / den)
    })
}

/// Stationary point of the surrogate Q-function in each `θ_i`:
/// `Σ_j {(1/2 − y_ij)(μ̃_j)₂ − 2λ(ξ_ij)S_j12} / (2 Σ_j λ(ξ_ij) S_j22)`.
pub fn jj_update_theta(
    bill_q: &BillVariational,
    xi: &Array2<f64>,
    data: &RollCall,
) -> Result<Vec<f64>> {
    check_xi(xi, data)?;
    if bill_q.len() != data.n_bills() {
        return Err(Error::Dimension("bill factors do not match the data".into()));
    }
    theta_columns(bill_q, &dense_to_columns(data, xi), data)
}

fn xi_columns(params: &ModelParams, bill_q: &BillVariational, data: &RollCall) -> Result<Vec<Vec<f64>>> {
    par::try_map_indexed(data.n_bills(), |j| {
        xi_column(data, j, &bill_q.second_moment(j), &params.theta)
    })
}

/// `ξ_ij = sqrt(θ̃_iᵀ(Σ̃_j + μ̃_jμ̃_jᵀ)θ̃_i)` on observed cells.
pub fn jj_update_xi(
    params: &ModelParams,
    bill_q: &BillVariational,
    data: &RollCall,
) -> Result<Array2<f64>> {
    if params.theta.len() != data.n_legislators() || bill_q.len() != data.n_bills() {
        return Err(Error::Dimension("state does not match the data".into()));
    }
    Ok(columns_to_dense(data, &xi_columns(params, bill_q, data)?))
}

/// Per-bill working state of the fit: `ξ`, `λ(ξ)` and the bill's share of
/// the cell terms of the monitored objective.
struct Column {
    xi: Vec<f64>,
    lambda: Vec<f64>,
    cell_sum: f64,
}

fn fused_column(params: &ModelParams, bill_q: &BillVariational, data: &RollCall, j: usize) -> Result<Column> {
    let mu = bill_q.mu[j];
    let s = bill_q.second_moment(j);
    let votes = data.bill_votes(j);
    let mut col = Column {
        xi: Vec::with_capacity(votes.len()),
        lambda: Vec::with_capacity(votes.len()),
        cell_sum: 0.0,
    };
    for v in votes {
        let t = params.theta[v.index];
        let z = xi_from_moment(&s, t)?;
        let lam = jj_lambda(z);
        // at ξ² = E[x²] the λ term vanishes
        col.cell_sum += -LN_2 - log_cosh(0.5 * z) + v.kappa * (mu[0] + t * mu[1])
            + lam * (quad_tilde(&s, t) - z * z);
        col.xi.push(z);
        col.lambda.push(lam);
    }
    Ok(col)
}

/// Same update as the PG-VEM covariance step.
pub fn jj_update_sigma(bill_q: &BillVariational) -> Sym2 {
    m_step_sigma(bill_q)
}

fn objective_columns(
    params: &ModelParams,
    bill_q: &BillVariational,
    xi: &[Vec<f64>],
    data: &RollCall,
) -> Result<f64> {
    let sigma = params.nu;
    let prec = sigma
        .inverse()
        .filter(|_| sigma.is_positive_definite())
        .ok_or_else(|| Error::NotPositiveDefinite("Σ_β̃".into()))?;
    let log_det = sigma.det().ln();
    Ok(par::sum_indexed(data.n_bills(), |j| {
        let mu = bill_q.mu[j];
        let s = bill_q.second_moment(j);
        let mut acc = 0.0;
        for (v, &z) in data.bill_votes(j).iter().zip(&xi[j]) {
            let t = params.theta[v.index];
            acc += -LN_2 - log_cosh(0.5 * z)
                + v.kappa * (mu[0] + t * mu[1])
                + jj_lambda(z) * (quad_tilde(&s, t) - z * z);
        }
        acc - gaussian_kl(mu, &bill_q.cov[j], &prec, log_det)
    }))
}

/// Monitored objective `E_q[ℓ_e^JJ] + H(q)`, a lower bound on the marginal
/// log-likelihood.
pub fn jj_objective(
    params: &ModelParams,
    bill_q: &BillVariational,
    xi: &Array2<f64>,
    data: &RollCall,
) -> Result<f64> {
    check_xi(xi, data)?;
    if params.theta.len() != data.n_legislators() || bill_q.len() != data.n_bills() {
        return Err(Error::Dimension("state does not match the data".into()));
    }
    objective_columns(params, bill_q, &dense_to_columns(data, xi), data)
}

/// Fits the model by variational EM on the Jaakkola–Jordan surrogate.
///
/// `pg_q` of the result holds the final `ξ`; its cached `w̄` equals `−2λ(ξ)`.
pub fn fit_jj_vem(data: &RollCall, cfg: &JJVemConfig) -> Result<FitResult> {
    cfg.validate()?;
    let start = Instant::now();
    let mut params = initial_params(data, &cfg.init_strategy)?;
    // ξ from q⁰ = N(0, I)
    let mut cols: Vec<Column> = (0..data.n_bills())
        .map(|j| {
            let xi: Vec<f64> = data
                .bill_votes(j)
                .iter()
                .map(|v| (1.0 + params.theta[v.index].powi(2)).sqrt())
                .collect();
            let lambda = xi.iter().map(|&z| jj_lambda(z)).collect();
            Column { xi, lambda, cell_sum: 0.0 }
        })
        .collect();
    let mut bill_q = BillVariational::uniform(data.n_bills(), Sym2::identity());
    let mut trace = Vec::new();
    let mut diag = Diagnostics::default();

    for _ in 0..cfg.max_iters {
        let prior_prec = params
            .nu
            .inverse()
            .filter(|_| params.nu.is_positive_definite())
            .ok_or_else(|| Error::NotPositiveDefinite("Σ_β̃".into()))?;
        let post = par::try_map_indexed(data.n_bills(), |j| {
            let weights: Vec<f64> = cols[j].lambda.iter().map(|&l| -2.0 * l).collect();
            bill_posterior(data, j, &prior_prec, &params.theta, &weights)
        })?;
        let (mu, cov) = post.into_iter().unzip();
        bill_q = BillVariational { mu, cov };

        let seconds = bill_q.second_moments();
        let q = &bill_q;
        params.theta = par::try_map_indexed(data.n_legislators(), |i| {
            let mut num = 0.0;
            let mut den = 0.0;
            for v in data.legislator_votes(i) {
                let j = v.index;
                let lam = cols[j].lambda[v.slot];
                num += -v.kappa * q.mu[j][1] - 2.0 * lam * seconds[j].a12;
                den += lam * seconds[j].a22;
            }
            let den = 2.0 * den;
            if !(den < 0.0) {
                return Err(Error::Numerical(format!(
                    "θ update for legislator {} has denominator {den}",
                    data.legislator_ids()[i]
                )));
            }
            Ok(num / den)
        })?;

        cols = par::try_map_indexed(data.n_bills(), |j| fused_column(&params, &bill_q, data, j))?;
        params.nu = m_step_sigma(&bill_q);

        let prec = params
            .nu
            .inverse()
            .filter(|_| params.nu.is_positive_definite())
            .ok_or_else(|| Error::NotPositiveDefinite("Σ_β̃".into()))?;
        let log_det = params.nu.det().ln();
        let value = par::sum_indexed(data.n_bills(), |j| {
            cols[j].cell_sum - gaussian_kl(bill_q.mu[j], &bill_q.cov[j], &prec, log_det)
        });
        if !value.is_finite() {
            return Err(Error::Numerical("surrogate objective is not finite".into()));
        }
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            diag.max_objective_drop = diag.max_objective_drop.max(prev - value);
            trace.push(value);
            if (value - prev).abs() <= cfg.tol * prev.abs() {
                diag.converged = true;
                break;
            }
        } else {
            trace.push(value);
        }
    }
    if !diag.converged {
        log::warn!("JJ-VEM stopped after {} iterations without converging", trace.len());
    }
    diag.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    let xi: Vec<Vec<f64>> = cols.into_iter().map(|c| c.xi).collect();
    Ok(FitResult {
        estimator: Estimator::JjVem,
        pg_q: PGVariational::from_xi(columns_to_dense(data, &xi), data)?,
        params,
        bill_q,
        outer_iters: trace.len(),
        elbo_trace: trace,
        se_theta: None,
        diagnostics: diag,
    })
}
