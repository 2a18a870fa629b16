//! Parametric bootstrap standard errors.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jj_vem::{fit_jj_vem, JJVemConfig};
use crate::model::{align_to_scale, Estimator, FitResult, RollCall};
use crate::par;
use crate::pg_vem::{fit_pg_vem, PGVemConfig};
use crate::rng::{derive_seed, Purpose};
use crate::sim::{draw_bills, draw_votes};

/// Largest fraction of replicates that may fail before the bootstrap errors.
const MAX_DROP_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub estimator: Estimator,
    /// `None` uses the ambient thread pool.
    pub parallel_workers: Option<usize>,
    /// Keep bills at their variational means instead of redrawing them
    /// from `N(0, Σ̂_β̃)`.
    pub fixed_bills: bool,
    pub pg: PGVemConfig,
    pub jj: JJVemConfig,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 100,
            seed: 0,
            estimator: Estimator::PgVem,
            parallel_workers: None,
            fixed_bills: false,
            pg: PGVemConfig::default(),
            jj: JJVemConfig::default(),
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::InvalidConfig("bootstrap needs at least 2 replicates".into()));
        }
        self.pg.validate()?;
        self.jj.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub se: Vec<f64>,
    /// Aligned estimates of the kept replicates, one row each.
    pub replicates: Array2<f64>,
    /// Indices of the kept replicates.
    pub kept: Vec<usize>,
    pub dropped: usize,
}

/// Simulates one replicate data set on the original mask and refits it.
fn run_replicate(fit: &FitResult, data: &RollCall, cfg: &BootstrapConfig, r: usize) -> Result<FitResult> {
    let bills = if cfg.fixed_bills {
        fit.bill_q.point_estimates()
    } else {
        let seed = derive_seed(cfg.seed, Purpose::BootstrapBills, r as u64);
        draw_bills(data.n_bills(), &fit.params.nu, seed, Purpose::BootstrapBills)?
    };
    let seed = derive_seed(cfg.seed, Purpose::BootstrapVotes, r as u64);
    let votes = draw_votes(&fit.params.theta, &bills, data.observed(), seed, Purpose::BootstrapVotes)?;
    let replicate = RollCall::new(
        votes,
        data.observed().clone(),
        data.legislator_ids().to_vec(),
        data.bill_ids().to_vec(),
    )?;
    match cfg.estimator {
        Estimator::PgVem => fit_pg_vem(&replicate, &cfg.pg),
        Estimator::JjVem => fit_jj_vem(&replicate, &cfg.jj),
    }
}

/// Parametric bootstrap around `fit`.
///
/// Each replicate is aligned to `θ̂` (standardized, sign-matched, then put
/// on the location and scale of `θ̂`), so the SEs are in the units of the
/// original fit. Replicates that fail or do not converge are dropped.
pub fn parametric_bootstrap(fit: &FitResult, data: &RollCall, cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    cfg.validate()?;
    if fit.params.theta.len() != data.n_legislators() || fit.bill_q.len() != data.n_bills() {
        return Err(Error::Dimension("fit does not match the data".into()));
    }
    let reference = &fit.params.theta;
    let outcomes = par::with_workers(cfg.parallel_workers, || {
        par::map_indexed(cfg.replicates, |r| {
            match run_replicate(fit, data, cfg, r) {
                Ok(f) if f.converged() => align_to_scale(&f.params.theta, reference).ok(),
                Ok(_) => {
                    log::warn!("bootstrap replicate {r} did not converge");
                    None
                }
                Err(e) => {
                    log::warn!("bootstrap replicate {r} failed: {e}");
                    None
                }
            }
        })
    });
    let kept: Vec<usize> = (0..cfg.replicates).filter(|&r| outcomes[r].is_some()).collect();
    let dropped = cfg.replicates - kept.len();
    if dropped as f64 > MAX_DROP_FRACTION * cfg.replicates as f64 || kept.len() < 2 {
        return Err(Error::BootstrapDropout {
            dropped,
            total: cfg.replicates,
        });
    }
    let n = reference.len();
    let rows: Vec<&Vec<f64>> = outcomes.iter().flatten().collect();
    let replicates = Array2::from_shape_fn((rows.len(), n), |(r, i)| rows[r][i]);
    let k = rows.len() as f64;
    let se = (0..n)
        .map(|i| {
            let col = replicates.column(i);
            let mean = col.sum() / k;
            (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        })
        .collect();
    Ok(BootstrapResult {
        se,
        replicates,
        kept,
        dropped,
    })
}
