//! Synthetic roll-call generators.
//!
//! Every random quantity is drawn from a stream keyed by
//! `(seed, purpose, index)` with one stream per legislator or per bill, so
//! output does not depend on evaluation order or worker count.

use ndarray::Array2;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Sym2;
use crate::model::{
    default_bill_ids, default_legislator_ids, sigmoid, BillParams, FitResult, RollCall,
    SpatialVotingConfig,
};
use crate::par;
use crate::rng::{normal_pair, open_uniform, stream, Purpose};

/// Two-component Gaussian mixture for ideal points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub sds: [f64; 2],
}

impl Default for Mixture {
    fn default() -> Self {
        Self {
            weights: [0.5, 0.5],
            means: [-2.0, 2.0],
            sds: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOneConfig {
    pub n_legislators: usize,
    pub n_bills: usize,
    pub seed: u64,
    #[serde(default)]
    pub mixture: Mixture,
    #[serde(default = "default_sigma_beta")]
    pub sigma_beta: Sym2,
}

fn default_sigma_beta() -> Sym2 {
    Sym2::diag(2.0, 2.0)
}

impl ScenarioOneConfig {
    pub fn new(n_legislators: usize, n_bills: usize, seed: u64) -> Self {
        Self {
            n_legislators,
            n_bills,
            seed,
            mixture: Mixture::default(),
            sigma_beta: default_sigma_beta(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mixture;
        if (m.weights[0] + m.weights[1] - 1.0).abs() > 1e-12 || m.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidConfig("mixture weights must be nonnegative and sum to 1".into()));
        }
        if m.sds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig("mixture standard deviations must be positive".into()));
        }
        if !self.sigma_beta.is_positive_definite() {
            return Err(Error::NotPositiveDefinite("scenario Σ_β̃".into()));
        }
        if self.n_legislators == 0 || self.n_bills == 0 {
            return Err(Error::InvalidConfig("need at least one legislator and one bill".into()));
        }
        Ok(())
    }
}

/// Generated roll call together with the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub data: RollCall,
    pub theta: Vec<f64>,
    pub bills: BillParams,
}

/// Bernoulli votes on the cells where `mask` is true. Each bill uses its own
/// stream and consumes one uniform per row, observed or not.
pub(crate) fn draw_votes(
    theta: &[f64],
    bills: &BillParams,
    mask: &Array2<bool>,
    seed: u64,
    purpose: Purpose,
) -> Result<Array2<u8>> {
    let (n, m) = mask.dim();
    if theta.len() != n || bills.len() != m || bills.beta.len() != m {
        return Err(Error::Dimension(format!(
            "θ has {} entries and {} bills for a {}x{} mask",
            theta.len(),
            bills.len(),
            n,
            m
        )));
    }
    let cols = par::map_indexed(m, |j| {
        let mut rng = stream(seed, purpose, j as u64);
        (0..n)
            .map(|i| {
                let u = open_uniform(&mut rng);
                let p = sigmoid(bills.alpha[j] + bills.beta[j] * theta[i]);
                u8::from(mask[[i, j]] && u <= p)
            })
            .collect::<Vec<u8>>()
    });
    Ok(Array2::from_shape_fn((n, m), |(i, j)| cols[j][i]))
}

/// Independent `Bernoulli(σ(α_j + β_jθ_i))` votes on the masked cells.
pub fn generate_votes(
    theta: &[f64],
    bills: &BillParams,
    mask: &Array2<bool>,
    seed: u64,
) -> Result<RollCall> {
    let votes = draw_votes(theta, bills, mask, seed, Purpose::Votes)?;
    let (n, m) = mask.dim();
    RollCall::new(votes, mask.clone(), default_legislator_ids(n), default_bill_ids(m))
}

/// Draws `n` bills from `N₂(0, Σ)`, one stream per bill.
pub(crate) fn draw_bills(n: usize, sigma: &Sym2, seed: u64, purpose: Purpose) -> Result<BillParams> {
    let (l11, l21, l22) = sigma
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("bill covariance".into()))?;
    let draws = par::map_indexed(n, |j| {
        let (z1, z2) = normal_pair(&mut stream(seed, purpose, j as u64));
        (l11 * z1, l21 * z1 + l22 * z2)
    });
    Ok(BillParams {
        alpha: draws.iter().map(|d| d.0).collect(),
        beta: draws.iter().map(|d| d.1).collect(),
    })
}

/// Scenario I: `θ_i` from the mixture, `β̃_j ~ N₂(0, Σ)`, complete data.
pub fn generate_scenario_one(cfg: &ScenarioOneConfig) -> Result<Simulated> {
    cfg.validate()?;
    let mix = &cfg.mixture;
    let theta = par::map_indexed(cfg.n_legislators, |i| {
        let mut rng = stream(cfg.seed, Purpose::ScenarioTheta, i as u64);
        let c = usize::from(open_uniform(&mut rng) > mix.weights[0]);
        let (z, _) = normal_pair(&mut rng);
        mix.means[c] + mix.sds[c] * z
    });
    let bills = draw_bills(cfg.n_bills, &cfg.sigma_beta, cfg.seed, Purpose::ScenarioBills)?;
    let mask = Array2::from_elem((cfg.n_legislators, cfg.n_bills), true);
    let data = generate_votes(&theta, &bills, &mask, cfg.seed)?;
    Ok(Simulated { data, theta, bills })
}

/// Scenario II: votes from a previous fit's `θ̂` and bill means `μ̃_j`,
/// generated only on the cells of `mask`.
pub fn generate_scenario_two(template: &FitResult, mask: &Array2<bool>, seed: u64) -> Result<Simulated> {
    let theta = template.params.theta.clone();
    let bills = template.bill_q.point_estimates();
    if mask.dim() != (theta.len(), bills.len()) {
        return Err(Error::Dimension(format!(
            "template is {}x{} but mask is {}x{}",
            theta.len(),
            bills.len(),
            mask.nrows(),
            mask.ncols()
        )));
    }
    let data = generate_votes(&theta, &bills, mask, seed)?;
    Ok(Simulated { data, theta, bills })
}

/// Votes from the utility model `U^yea = −(θ−ζ)² + η`, `U^nay = −(θ−ψ)² + ν`
/// with `η, ν ~ Gumbel(0, σ_j)`; yea iff `U^yea ≥ U^nay`.
pub fn generate_from_utilities(cfg: &SpatialVotingConfig, theta: &[f64], seed: u64) -> Result<RollCall> {
    cfg.validate()?;
    let (n, m) = (theta.len(), cfg.zeta.len());
    let gumbel = |rng: &mut dyn RngCore, scale: f64| -scale * (-open_uniform(rng).ln()).ln();
    let cols = par::map_indexed(m, |j| {
        let mut rng = stream(seed, Purpose::Utilities, j as u64);
        let s = cfg.gumbel_scale[j];
        (0..n)
            .map(|i| {
                let eta = gumbel(&mut rng, s);
                let nu = gumbel(&mut rng, s);
                let yea = -(theta[i] - cfg.zeta[j]).powi(2) + eta;
                let nay = -(theta[i] - cfg.psi[j]).powi(2) + nu;
                u8::from(yea - nay >= 0.0)
            })
            .collect::<Vec<u8>>()
    });
    let votes = Array2::from_shape_fn((n, m), |(i, j)| cols[j][i]);
    RollCall::complete(votes)
}

/// Mask where legislator `i` misses each vote with probability
/// `missing_rates[i]`. One cell per row and column is kept observed so the
/// result is a valid roll call.
pub fn random_mask(missing_rates: &[f64], n_bills: usize, seed: u64) -> Result<Array2<bool>> {
    if missing_rates.iter().any(|&r| !(0.0..1.0).contains(&r)) {
        return Err(Error::InvalidConfig("missing rates must lie in [0, 1)".into()));
    }
    let n = missing_rates.len();
    let rows = par::map_indexed(n, |i| {
        let mut rng = stream(seed, Purpose::Mask, i as u64);
        (0..n_bills)
            .map(|_| open_uniform(&mut rng) > missing_rates[i])
            .collect::<Vec<bool>>()
    });
    let mut mask = Array2::from_shape_fn((n, n_bills), |(i, j)| rows[i][j]);
    for i in 0..n {
        if !mask.row(i).iter().any(|&o| o) {
            mask[[i, i % n_bills]] = true;
        }
    }
    for j in 0..n_bills {
        if !mask.column(j).iter().any(|&o| o) {
            mask[[j % n, j]] = true;
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_one_is_deterministic() {
        let cfg = ScenarioOneConfig::new(20, 30, 5);
        let a = generate_scenario_one(&cfg).unwrap();
        let b = par::with_workers(Some(3), || generate_scenario_one(&cfg).unwrap());
        assert_eq!(a, b);
        let c = generate_scenario_one(&ScenarioOneConfig::new(20, 30, 6)).unwrap();
        assert_ne!(a.theta, c.theta);
    }

    #[test]
    fn equal_positions_give_coin_flips() {
        let cfg = SpatialVotingConfig {
            zeta: vec![0.3],
            psi: vec![0.3],
            gumbel_scale: vec![1.0],
        };
        let bp = cfg.to_bill_params();
        assert_eq!((bp.alpha[0], bp.beta[0]), (0.0, 0.0));
        let doubled = SpatialVotingConfig {
            zeta: vec![1.0],
            psi: vec![-0.5],
            gumbel_scale: vec![2.0],
        };
        let single = SpatialVotingConfig { gumbel_scale: vec![1.0], ..doubled.clone() };
        assert_eq!(doubled.to_bill_params().alpha[0] * 2.0, single.to_bill_params().alpha[0]);
        assert_eq!(doubled.to_bill_params().beta[0] * 2.0, single.to_bill_params().beta[0]);
    }

    #[test]
    fn mask_keeps_every_row_and_column() {
        let rates = vec![0.99; 10];
        let m = random_mask(&rates, 15, 1).unwrap();
        assert!(m.rows().into_iter().all(|r| r.iter().any(|&o| o)));
        assert!(m.columns().into_iter().all(|c| c.iter().any(|&o| o)));
    }
}
