//! Variational Louis standard errors.
//!
//! The observed information is approximated by
//! `Ĩ = E_q[−∇²ℓ_c] − Var_q(∇ℓ_c)` with `q` the converged variational
//! distribution. The PG variables are integrated out analytically, so only
//! the bill effects `B` are sampled.
//!
//! The covariance block is parameterized by the entries of the precision
//! `T = Σ_β̃⁻¹ = (τ11, τ12, τ22)`. In these coordinates the Hessian of the
//! Gaussian term does not depend on `B`, which is what makes its expected
//! value closed form; SEs of `θ` do not depend on how `Σ_β̃` is
//! parameterized.

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Sym2;
use crate::model::{jj_lambda, BillVariational, Estimator, FitResult, ModelParams, PGVariational, RollCall};
use crate::par;
use crate::rng::{fnv1a, normal_pair, stream, Purpose, WORDS_PER_NORMAL_PAIR};

/// Samples drawn per bill before gradients are evaluated.
const CHUNK: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LouisConfig {
    pub mc_samples: usize,
    pub seed: u64,
    pub include_schur: bool,
}

impl Default for LouisConfig {
    fn default() -> Self {
        Self {
            mc_samples: 2000,
            seed: 0,
            include_schur: false,
        }
    }
}

impl LouisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples < 100 {
            return Err(Error::InvalidConfig(format!(
                "mc_samples must be at least 100, got {}",
                self.mc_samples
            )));
        }
        Ok(())
    }
}

/// Which complete-data log-likelihood supplies the gradients and Hessian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LouisVariant {
    /// PG-augmented likelihood with `w` integrated out.
    PolyaGamma,
    /// Jaakkola–Jordan surrogate: weights `−2λ(ξ)` and no within-`w`
    /// variance. Known to be biased; kept for comparison.
    JjSurrogate,
}

impl LouisVariant {
    pub fn for_estimator(estimator: Estimator) -> Self {
        match estimator {
            Estimator::PgVem => LouisVariant::PolyaGamma,
            Estimator::JjVem => LouisVariant::JjSurrogate,
        }
    }
}

/// Blocks of the approximate observed information, ordered `(Θ, τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherBlocks {
    /// Expected-Hessian diagonal of the `Θ` block.
    pub theta_diag: Vec<f64>,
    pub theta_block: DMatrix<f64>,
    pub nu_block: Matrix3<f64>,
    /// `I × 3`.
    pub cross_block: DMatrix<f64>,
}

/// Monte Carlo moments of the complete-data score under `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterProducts {
    pub samples: usize,
    /// Mean score, `I + 3` entries (`Θ` then `τ`).
    pub grad_mean: Vec<f64>,
    /// Monte Carlo standard error of each entry of `grad_mean`.
    pub grad_mean_se: Vec<f64>,
    /// Centered covariance of the `B`-conditional score, `(I+3) × (I+3)`.
    pub grad_cov: DMatrix<f64>,
    /// `E_q(B)[Σ_j v_kj (α_jβ_j + θ_kβ_j²)²]` per legislator.
    pub within_w: Vec<f64>,
}

impl OuterProducts {
    pub fn n_legislators(&self) -> usize {
        self.within_w.len()
    }
}

fn check_fit(fit: &FitResult, data: &RollCall) -> Result<()> {
    let (n, m) = (data.n_legislators(), data.n_bills());
    if fit.params.theta.len() != n || fit.bill_q.len() != m || fit.pg_q.xi().dim() != (n, m) {
        return Err(Error::Dimension(format!(
            "fit is {}x{} but data is {}x{}",
            fit.params.theta.len(),
            fit.bill_q.len(),
            n,
            m
        )));
    }
    Ok(())
}

/// Per-cell weights `(w̄, v)` for the requested variant.
fn cell_weights(fit: &FitResult, variant: LouisVariant, i: usize, j: usize) -> (f64, f64) {
    match variant {
        LouisVariant::PolyaGamma => (fit.pg_q.wbar()[[i, j]], fit.pg_q.v()[[i, j]]),
        LouisVariant::JjSurrogate => (-2.0 * jj_lambda(fit.pg_q.xi()[[i, j]]), 0.0),
    }
}

/// `Σ_{j∈obs(k)} w̄_kj (Σ̃_j + μ̃_jμ̃_jᵀ)₂₂`, the information-sign expected
/// Hessian diagonal of the `Θ` block.
pub fn hessian_theta_block(fit: &FitResult, data: &RollCall) -> Result<Vec<f64>> {
    hessian_theta_block_variant(fit, data, LouisVariant::PolyaGamma)
}

fn hessian_theta_block_variant(
    fit: &FitResult,
    data: &RollCall,
    variant: LouisVariant,
) -> Result<Vec<f64>> {
    check_fit(fit, data)?;
    let seconds = fit.bill_q.second_moments();
    Ok(par::map_indexed(data.n_legislators(), |i| {
        let h: f64 = data
            .legislator_votes(i)
            .iter()
            .map(|v| cell_weights(fit, variant, i, v.index).0 * seconds[v.index].a22)
            .sum();
        if h == 0.0 {
            log::warn!("legislator {} has no observed votes", data.legislator_ids()[i]);
        }
        h
    }))
}

/// Precision entries `(τ11, τ12, τ22)` and `det T`.
fn precision_of(sigma: &Sym2) -> Result<(Sym2, f64)> {
    if !sigma.is_positive_definite() {
        return Err(Error::NotPositiveDefinite(format!(
            "Σ_β̃ = ({}, {}, {})",
            sigma.a11, sigma.a12, sigma.a22
        )));
    }
    let t = sigma
        .inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("Σ_β̃ is numerically singular".into()))?;
    let d = t.det();
    if !(d > 0.0) {
        return Err(Error::NotPositiveDefinite("precision determinant is not positive".into()));
    }
    Ok((t, d))
}

/// Information matrix of the Gaussian random-effect term in `τ`:
/// `(J/2)·[[τ22², −2τ12τ22, τ12²], [·, 2(τ11τ22+τ12²), −2τ11τ12], [·, ·, τ11²]] / det²`.
pub fn hessian_nu_block(sigma: &Sym2, n_bills: usize) -> Result<Matrix3<f64>> {
    let (t, d) = precision_of(sigma)?;
    let c = n_bills as f64 / (2.0 * d * d);
    let (t11, t12, t22) = (t.a11, t.a12, t.a22);
    let m01 = -2.0 * c * t12 * t22;
    let m02 = c * t12 * t12;
    let m12 = -2.0 * c * t11 * t12;
    Ok(Matrix3::new(
        c * t22 * t22,
        m01,
        m02,
        m01,
        2.0 * c * (t11 * t22 + t12 * t12),
        m12,
        m02,
        m12,
        c * t11 * t11,
    ))
}

/// Expected mixed Hessian between `Θ` and the covariance parameters: zero.
pub fn hessian_cross_block(n_legislators: usize) -> DMatrix<f64> {
    DMatrix::zeros(n_legislators, 3)
}

/// Gradient of `E_q[ℓ_e^PG]` in `(Θ, τ)` at fixed `q`, `I + 3` entries.
pub fn expected_gradient(
    params: &ModelParams,
    bill_q: &BillVariational,
    pg_q: &PGVariational,
    data: &RollCall,
) -> Result<Vec<f64>> {
    let (n, m) = (data.n_legislators(), data.n_bills());
    if params.theta.len() != n || bill_q.len() != m || pg_q.wbar().dim() != (n, m) {
        return Err(Error::Dimension("variational state does not match the data".into()));
    }
    let (prec, det) = precision_of(&params.nu)?;
    let seconds = bill_q.second_moments();
    let wbar = pg_q.wbar();
    let mut g: Vec<f64> = par::map_indexed(n, |i| {
        let t = params.theta[i];
        data.legislator_votes(i)
            .iter()
            .map(|v| {
                let (mu, s) = (bill_q.mu[v.index], &seconds[v.index]);
                v.kappa * mu[1] - wbar[[i, v.index]] * (s.a12 + t * s.a22)
            })
            .sum()
    });
    let sum = |f: fn(&Sym2) -> f64| par::pairwise_sum(&seconds.iter().map(f).collect::<Vec<_>>());
    g.extend(nu_score(&prec, det, m as f64, sum(|s| s.a11), sum(|s| s.a12), sum(|s| s.a22)));
    Ok(g)
}

/// Score of the Gaussian term in `τ` given `Σα², Σαβ, Σβ²`.
#[inline]
fn nu_score(t: &Sym2, det: f64, n_bills: f64, saa: f64, sab: f64, sbb: f64) -> [f64; 3] {
    [
        0.5 * n_bills * t.a22 / det - 0.5 * saa,
        -n_bills * t.a12 / det - sab,
        0.5 * n_bills * t.a11 / det - 0.5 * sbb,
    ]
}

/// Monte Carlo score moments with the PG-augmented likelihood.
pub fn outer_product_blocks_mc(
    fit: &FitResult,
    data: &RollCall,
    cfg: &LouisConfig,
) -> Result<OuterProducts> {
    outer_products(fit, data, cfg, LouisVariant::PolyaGamma)
}

/// Draws `cfg.mc_samples` samples of `B ~ q`, evaluates the `w`-marginalized
/// score for each, and returns its centered moments.
///
/// Draw `s` of bill `j` sits at a fixed position of a stream keyed by the
/// bill id, so results do not depend on bill order or worker count.
pub fn outer_products(
    fit: &FitResult,
    data: &RollCall,
    cfg: &LouisConfig,
    variant: LouisVariant,
) -> Result<OuterProducts> {
    cfg.validate()?;
    check_fit(fit, data)?;
    let (n, m, samples) = (data.n_legislators(), data.n_bills(), cfg.mc_samples);
    let p = n + 3;
    let (prec, det) = precision_of(&fit.params.nu)?;
    let theta = &fit.params.theta;

    let factors = (0..m)
        .map(|j| {
            let (l11, l21, l22) = fit.bill_q.cov[j]
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite(format!("Σ̃ of bill {}", data.bill_ids()[j])))?;
            Ok((fit.bill_q.mu[j], l11, l21, l22, fnv1a(data.bill_ids()[j].as_bytes())))
        })
        .collect::<Result<Vec<_>>>()?;
    // (legislator, κ, w̄, v) per observed cell, in bill order
    let cells: Vec<Vec<(usize, f64, f64, f64)>> = (0..m)
        .map(|j| {
            data.bill_votes(j)
                .iter()
                .map(|v| {
                    let (w, var) = cell_weights(fit, variant, v.index, j);
                    (v.index, v.kappa, w, var)
                })
                .collect()
        })
        .collect();

    let mut grads = vec![0.0; samples * p];
    let mut within = vec![0.0; samples * n];
    for start in (0..samples).step_by(CHUNK) {
        let len = CHUNK.min(samples - start);
        let draws: Vec<Vec<[f64; 2]>> = par::map_indexed(m, |j| {
            let (mu, l11, l21, l22, key) = factors[j];
            let mut rng = stream(cfg.seed, Purpose::LouisDraws, key);
            rng.set_word_pos(start as u128 * WORDS_PER_NORMAL_PAIR);
            (0..len)
                .map(|_| {
                    let (z1, z2) = normal_pair(&mut rng);
                    [mu[0] + l11 * z1, mu[1] + l21 * z1 + l22 * z2]
                })
                .collect()
        });
        let rows = par::map_indexed(len, |t| {
            let mut g = vec![0.0; p];
            let mut d = vec![0.0; n];
            let (mut saa, mut sab, mut sbb) = (0.0, 0.0, 0.0);
            for j in 0..m {
                let [a, b] = draws[j][t];
                saa += a * a;
                sab += a * b;
                sbb += b * b;
                for &(k, kappa, w, v) in &cells[j] {
                    let u = a * b + theta[k] * b * b;
                    g[k] += kappa * b - w * u;
                    d[k] += v * u * u;
                }
            }
            g[n..].copy_from_slice(&nu_score(&prec, det, m as f64, saa, sab, sbb));
            (g, d)
        });
        for (t, (g, d)) in rows.into_iter().enumerate() {
            grads[(start + t) * p..(start + t + 1) * p].copy_from_slice(&g);
            within[(start + t) * n..(start + t + 1) * n].copy_from_slice(&d);
        }
    }

    let s = samples as f64;
    // centered columns, one contiguous vector per coordinate
    let centered: Vec<Vec<f64>> = par::map_indexed(p, |a| {
        let col: Vec<f64> = (0..samples).map(|r| grads[r * p + a]).collect();
        let mean = par::pairwise_sum(&col) / s;
        col.into_iter().map(|x| x - mean).collect()
    });
    let grad_mean: Vec<f64> = (0..p)
        .map(|a| par::pairwise_sum(&(0..samples).map(|r| grads[r * p + a]).collect::<Vec<_>>()) / s)
        .collect();
    let upper: Vec<Vec<f64>> = par::map_indexed(p, |a| {
        (a..p)
            .map(|b| {
                let mut acc = 0.0;
                for (x, y) in centered[a].iter().zip(&centered[b]) {
                    acc += x * y;
                }
                acc / (s - 1.0)
            })
            .collect()
    });
    let mut cov = DMatrix::zeros(p, p);
    for (a, row) in upper.iter().enumerate() {
        for (off, &c) in row.iter().enumerate() {
            cov[(a, a + off)] = c;
            cov[(a + off, a)] = c;
        }
    }
    let grad_mean_se = (0..p).map(|a| (cov[(a, a)] / s).sqrt()).collect();
    let within_w = (0..n)
        .map(|k| par::pairwise_sum(&(0..samples).map(|r| within[r * n + k]).collect::<Vec<_>>()) / s)
        .collect();
    Ok(OuterProducts {
        samples,
        grad_mean,
        grad_mean_se,
        grad_cov: cov,
        within_w,
    })
}

/// `Ĩ_Θ = diag(h) − Cov(g_Θ) − diag(E[within-w])`, `Ĩ_ν = H_ν − Cov(g_ν)`,
/// `Ĩ_Θν = −Cov(g_Θ, g_ν)`.
pub fn assemble_information(
    theta_diag: &[f64],
    nu_hessian: &Matrix3<f64>,
    outer: &OuterProducts,
) -> Result<FisherBlocks> {
    let n = theta_diag.len();
    if outer.n_legislators() != n || outer.grad_cov.nrows() != n + 3 {
        return Err(Error::Dimension("Hessian and score blocks disagree in size".into()));
    }
    let mut theta_block = -outer.grad_cov.view((0, 0), (n, n)).into_owned();
    for k in 0..n {
        theta_block[(k, k)] += theta_diag[k] - outer.within_w[k];
    }
    let nu_block = nu_hessian - outer.grad_cov.fixed_view::<3, 3>(n, n).into_owned();
    let cross_block = -outer.grad_cov.view((0, n), (n, 3)).into_owned();
    let blocks = FisherBlocks {
        theta_diag: theta_diag.to_vec(),
        theta_block,
        nu_block,
        cross_block,
    };
    if blocks.theta_block.clone().cholesky().is_none() {
        log::warn!("assembled Θ information is not positive definite");
    }
    Ok(blocks)
}

/// Square roots of the diagonal of `M⁻¹`; entries with a nonpositive
/// diagonal are absent.
fn inverse_diag_sqrt(m: DMatrix<f64>) -> Result<Vec<Option<f64>>> {
    let inv = match m.clone().cholesky() {
        Some(c) => c.inverse(),
        None => {
            log::warn!("information matrix is not positive definite; some SEs are absent");
            m.try_inverse()
                .ok_or_else(|| Error::Numerical("information matrix is singular".into()))?
        }
    };
    Ok((0..inv.nrows())
        .map(|k| {
            let d = inv[(k, k)];
            (d > 0.0 && d.is_finite()).then(|| d.sqrt())
        })
        .collect())
}

/// `SE_i = sqrt([Ĩ_Θ⁻¹]_ii)`, or with the Schur term
/// `sqrt([(Ĩ_Θ − Ĩ_Θν Ĩ_ν⁻¹ Ĩ_Θνᵀ)⁻¹]_ii)`.
pub fn se_theta(blocks: &FisherBlocks, cfg: &LouisConfig) -> Result<Vec<Option<f64>>> {
    let mut m = blocks.theta_block.clone();
    if cfg.include_schur {
        let nu_inv = blocks
            .nu_block
            .try_inverse()
            .ok_or_else(|| Error::Numerical("covariance information block is singular".into()))?;
        let c = &blocks.cross_block;
        m -= c * nu_inv * c.transpose();
    }
    inverse_diag_sqrt(m)
}

/// Everything computed for one set of Louis SEs.
#[derive(Debug, Clone)]
pub struct LouisResult {
    pub se: Vec<Option<f64>>,
    pub blocks: FisherBlocks,
    pub outer: OuterProducts,
}

/// Louis SEs for a fit, using the variant that matches its estimator.
pub fn louis_se(fit: &FitResult, data: &RollCall, cfg: &LouisConfig) -> Result<LouisResult> {
    louis_se_variant(fit, data, cfg, LouisVariant::for_estimator(fit.estimator))
}

pub fn louis_se_variant(
    fit: &FitResult,
    data: &RollCall,
    cfg: &LouisConfig,
    variant: LouisVariant,
) -> Result<LouisResult> {
    let h = hessian_theta_block_variant(fit, data, variant)?;
    let hn = hessian_nu_block(&fit.params.nu, data.n_bills())?;
    let outer = outer_products(fit, data, cfg, variant)?;
    let blocks = assemble_information(&h, &hn, &outer)?;
    let se = se_theta(&blocks, cfg)?;
    Ok(LouisResult { se, blocks, outer })
}
