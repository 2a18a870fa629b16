//! Gauss–Hermite evaluation of the marginal likelihood for small instances,
//! with a direct maximizer and a finite-difference observed information.
//! Used to check the variational estimates; not meant to scale.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Sym2;
use crate::model::{align_to_scale, log_sigmoid, sigmoid, ModelParams, RollCall, Vote};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadConfig {
    pub nodes_per_dim: usize,
    pub opt_tol: f64,
    pub max_opt_iters: usize,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            nodes_per_dim: 31,
            opt_tol: 1e-8,
            max_opt_iters: 60,
        }
    }
}

impl QuadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes_per_dim < 11 || self.nodes_per_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "nodes_per_dim must be odd and at least 11, got {}",
                self.nodes_per_dim
            )));
        }
        if !(self.opt_tol > 0.0) || self.max_opt_iters == 0 {
            return Err(Error::InvalidConfig("optimizer tolerance and cap must be positive".into()));
        }
        Ok(())
    }
}

/// Orthonormal probabilists' Hermite polynomials `p_0..p_{n}` at `x`
/// (`∫ p_a p_b φ = δ_ab`).
fn orthonormal_hermite(n: usize, x: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(n + 1);
    p.push(1.0);
    if n > 0 {
        p.push(x);
    }
    for m in 1..n {
        let next = (x * p[m] - (m as f64).sqrt() * p[m - 1]) / ((m + 1) as f64).sqrt();
        p.push(next);
    }
    p
}

/// Nodes and weights for `∫ f(z) φ(z) dz` with the standard normal density
/// `φ`. Golub–Welsch eigenvalues seed the nodes, which are then polished by
/// Newton on `p_n`; weights come from `1 / Σ_{m<n} p_m(x)²`, which keeps
/// the tail weights accurate to relative precision.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |r, c| {
        if r + 1 == c || c + 1 == r {
            (r.max(c) as f64).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    nodes.sort_by(f64::total_cmp);
    for x in nodes.iter_mut() {
        for _ in 0..10 {
            let p = orthonormal_hermite(n, *x);
            // p_n' = sqrt(n) p_{n-1}
            let dx = p[n] / ((n as f64).sqrt() * p[n - 1]);
            *x -= dx;
            if dx.abs() < 1e-16 * (1.0 + x.abs()) {
                break;
            }
        }
    }
    for k in 0..n / 2 {
        let x = 0.5 * (nodes[n - 1 - k] - nodes[k]);
        nodes[k] = -x;
        nodes[n - 1 - k] = x;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let weights: Vec<f64> = nodes
        .iter()
        .map(|&x| 1.0 / orthonormal_hermite(n - 1, x).iter().map(|v| v * v).sum::<f64>())
        .collect();
    (nodes, weights)
}

/// Tensor-product rule in two dimensions, stored as `(z1, z2, log w)`.
#[derive(Debug, Clone)]
struct Rule {
    points: Vec<(f64, f64, f64)>,
}

impl Rule {
    fn new(n: usize) -> Self {
        let (x, w) = gauss_hermite(n);
        let mut points = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                points.push((x[a], x[b], w[a].ln() + w[b].ln()));
            }
        }
        Self { points }
    }

    fn loglik(&self, params: &ModelParams, data: &RollCall) -> Result<f64> {
        let sigma = params.nu;
        let prec = sigma
            .inverse()
            .filter(|_| sigma.is_positive_definite())
            .ok_or_else(|| Error::NotPositiveDefinite("Σ_β̃".into()))?;
        let half_log_det = 0.5 * sigma.det().ln();
        let per_bill = par::try_map_indexed(data.n_bills(), |j| {
            let votes = data.bill_votes(j);
            let theta = &params.theta;
            let bill_loglik = |beta: [f64; 2]| -> f64 {
                votes
                    .iter()
                    .map(|v| {
                        let x = beta[0] + beta[1] * theta[v.index];
                        if v.kappa > 0.0 { log_sigmoid(x) } else { log_sigmoid(-x) }
                    })
                    .sum()
            };
            let (mode, curvature) = posterior_mode(votes, theta, &prec);
            let (c11, c21, c22) = curvature
                .inverse()
                .and_then(|c| c.cholesky())
                .ok_or_else(|| Error::Numerical("bill posterior curvature is singular".into()))?;
            let log_jacobian = (c11 * c22).ln();
            let mut terms = Vec::with_capacity(self.points.len());
            for &(z1, z2, lw) in &self.points {
                let beta = [mode[0] + c11 * z1, mode[1] + c21 * z1 + c22 * z2];
                let log_prior = -half_log_det - 0.5 * prec.quad(beta);
                let log_std = -0.5 * (z1 * z1 + z2 * z2);
                terms.push(lw + bill_loglik(beta) + log_prior - log_std + log_jacobian);
            }
            let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Numerical(format!(
                    "marginal likelihood of bill {} underflows",
                    data.bill_ids()[j]
                )));
            }
            let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
            Ok(max + sum.ln())
        })?;
        Ok(par::pairwise_sum(&per_bill))
    }
}

/// Mode of `log p(y_j | β̃) + log φ₂(β̃; 0, Σ)` by damped Newton, and the
/// negative Hessian there. The objective is strictly concave.
fn posterior_mode(votes: &[Vote], theta: &[f64], prec: &Sym2) -> ([f64; 2], Sym2) {
    let objective = |b: [f64; 2]| -> f64 {
        votes
            .iter()
            .map(|v| {
                let x = b[0] + b[1] * theta[v.index];
                if v.kappa > 0.0 { log_sigmoid(x) } else { log_sigmoid(-x) }
            })
            .sum::<f64>()
            - 0.5 * prec.quad(b)
    };
    let curvature_at = |b: [f64; 2]| -> ([f64; 2], Sym2) {
        let p = prec.mul_vec(b);
        let mut grad = [-p[0], -p[1]];
        let mut h = *prec;
        for v in votes {
            let t = theta[v.index];
            let s = sigmoid(b[0] + b[1] * t);
            let r = f64::from(u8::from(v.kappa > 0.0)) - s;
            grad[0] += r;
            grad[1] += r * t;
            h = h.add(&Sym2::outer([1.0, t]).scale(s * (1.0 - s)));
        }
        (grad, h)
    };
    let mut b = [0.0, 0.0];
    let mut f = objective(b);
    for _ in 0..200 {
        let (grad, h) = curvature_at(b);
        let Some(inv) = h.inverse() else { break };
        let step = inv.mul_vec(grad);
        let size = step[0].abs().max(step[1].abs());
        if size < 1e-14 * (1.0 + b[0].abs().max(b[1].abs())) {
            break;
        }
        // backtrack only far from the mode; near it the full step is safe
        // and comparisons of `f` are dominated by rounding
        let mut t = 1.0;
        if size > 1e-4 {
            while t > 1e-10 && objective([b[0] + t * step[0], b[1] + t * step[1]]) < f {
                t *= 0.5;
            }
        }
        b = [b[0] + t * step[0], b[1] + t * step[1]];
        f = objective(b);
    }
    (b, curvature_at(b).1)
}

fn check(params: &ModelParams, data: &RollCall) -> Result<()> {
    if params.theta.len() != data.n_legislators() {
        return Err(Error::Dimension(format!(
            "θ has {} entries for {} legislators",
            params.theta.len(),
            data.n_legislators()
        )));
    }
    Ok(())
}

/// `Σ_j log ∫ Π_i σ(x_ij)^y (1−σ(x_ij))^{1−y} φ₂(β̃_j; 0, Σ) dβ̃_j` over
/// observed cells, by tensor-product Gauss–Hermite whitened with the
/// Laplace approximation of each bill's posterior (centered at the mode,
/// scaled by the inverse curvature), summed in log space.
pub fn marginal_loglik_quadrature(params: &ModelParams, data: &RollCall, cfg: &QuadConfig) -> Result<f64> {
    cfg.validate()?;
    check(params, data)?;
    Rule::new(cfg.nodes_per_dim).loglik(params, data)
}

/// Flat coordinates `(θ_1, …, θ_I, σ11, σ12, σ22)`.
fn to_vec(p: &ModelParams) -> Vec<f64> {
    let mut x = p.theta.clone();
    x.extend([p.nu.a11, p.nu.a12, p.nu.a22]);
    x
}

fn from_vec(x: &[f64]) -> ModelParams {
    let n = x.len() - 3;
    ModelParams::new(x[..n].to_vec(), Sym2::new(x[n], x[n + 1], x[n + 2]))
}

/// Largest `|θ_i − median θ|·sqrt(σ22)` (log-odds units of a typical bill's
/// discrimination; invariant to the affine reparameterization) treated as
/// finite. Beyond it the legislator's votes are effectively deterministic and
/// the maximizer is running off to infinity.
const DIVERGENCE_SPREAD: f64 = 30.0;

fn spread(x: &[f64]) -> f64 {
    let n = x.len() - 3;
    let mut sorted = x[..n].to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let scale = x[n + 2].max(0.0).sqrt();
    x[..n].iter().map(|t| (t - median).abs() * scale).fold(0.0, f64::max)
}

/// Coordinate sweeps stop handing over to Newton at this relative change.
const SWEEP_TOL: f64 = 1e-5;

fn fd_step(x: f64, scale: f64) -> f64 {
    scale * (1.0 + x.abs())
}

/// Log-likelihood at flat coordinates; `None` outside the PD cone.
fn eval_at(rule: &Rule, data: &RollCall, x: &[f64]) -> Option<f64> {
    let p = from_vec(x);
    if !p.nu.is_positive_definite() {
        return None;
    }
    rule.loglik(&p, data).ok()
}

fn shifted(x: &[f64], shift: &[(usize, f64)]) -> Vec<f64> {
    let mut y = x.to_vec();
    for &(c, d) in shift {
        y[c] += d;
    }
    y
}

fn fd_gradient(rule: &Rule, data: &RollCall, x: &[f64], scale: f64) -> Result<Vec<f64>> {
    let undefined = || Error::Numerical("log-likelihood undefined near the evaluation point".into());
    (0..x.len())
        .map(|c| {
            let h = fd_step(x[c], scale);
            let fp = eval_at(rule, data, &shifted(x, &[(c, h)])).ok_or_else(undefined)?;
            let fm = eval_at(rule, data, &shifted(x, &[(c, -h)])).ok_or_else(undefined)?;
            Ok((fp - fm) / (2.0 * h))
        })
        .collect()
}

/// Central-difference Hessian of the log-likelihood, symmetrized.
fn fd_hessian(rule: &Rule, data: &RollCall, x: &[f64], scale: f64) -> Result<DMatrix<f64>> {
    let undefined = || Error::Numerical("log-likelihood undefined near the evaluation point".into());
    let f = |shift: &[(usize, f64)]| eval_at(rule, data, &shifted(x, shift)).ok_or_else(undefined);
    let p = x.len();
    let h: Vec<f64> = x.iter().map(|&v| fd_step(v, scale)).collect();
    let f0 = f(&[])?;
    let mut m = DMatrix::zeros(p, p);
    for a in 0..p {
        m[(a, a)] = (f(&[(a, h[a])])? - 2.0 * f0 + f(&[(a, -h[a])])?) / (h[a] * h[a]);
        for b in 0..a {
            let v = (f(&[(a, h[a]), (b, h[b])])? - f(&[(a, h[a]), (b, -h[b])])?
                - f(&[(a, -h[a]), (b, h[b])])?
                + f(&[(a, -h[a]), (b, -h[b])])?)
                / (4.0 * h[a] * h[b]);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    Ok((&m + m.transpose()) * 0.5)
}

/// Direct maximizer output.
#[derive(Debug, Clone, PartialEq)]
pub struct MleResult {
    pub params: ModelParams,
    pub loglik: f64,
    /// Coordinate sweeps plus Newton steps.
    pub iterations: usize,
    pub converged: bool,
    /// No finite interior maximizer: a legislator ran off toward `±∞`
    /// (perfectly separated votes) or `Σ_β̃` approached singularity.
    pub diverged: bool,
    /// Euclidean norm of the central-difference gradient at the returned point.
    pub gradient_norm: f64,
}

/// Maximizes the quadrature marginal likelihood over `(Θ, Σ_β̃)`.
///
/// Cyclic coordinate search (a Newton step per coordinate from central
/// differences, halved until the objective does not decrease) runs until a
/// sweep changes the objective by less than `1e-5` relative. Newton steps on
/// the finite-difference Hessian then finish the job; the Hessian is
/// pseudo-inverted on its negative-definite part because the likelihood is
/// flat along the two affine directions `θ → aθ + b`. Converged means the
/// last step changed the objective by less than `opt_tol` relative and the
/// finite-difference gradient has norm below `10·opt_tol`.
pub fn mle_direct(data: &RollCall, init: &ModelParams, cfg: &QuadConfig) -> Result<MleResult> {
    cfg.validate()?;
    check(init, data)?;
    init.validate()?;
    let rule = Rule::new(cfg.nodes_per_dim);
    let eval = |x: &[f64]| eval_at(&rule, data, x);
    let mut x = to_vec(init);
    let mut f = eval(&x).ok_or_else(|| Error::Numerical("objective undefined at the start".into()))?;
    let runaway = |x: &[f64]| spread(x) > DIVERGENCE_SPREAD;
    let mut iterations = 0;
    let mut diverged = false;

    while iterations < cfg.max_opt_iters {
        iterations += 1;
        let f_start = f;
        for c in 0..x.len() {
            let h = fd_step(x[c], 1e-4);
            let x0 = x[c];
            x[c] = x0 + h;
            let fp = eval(&x);
            x[c] = x0 - h;
            let fm = eval(&x);
            x[c] = x0;
            let (Some(fp), Some(fm)) = (fp, fm) else { continue };
            let g = (fp - fm) / (2.0 * h);
            let curv = (fp - 2.0 * f + fm) / (h * h);
            let mut step = if curv < 0.0 { -g / curv } else { g.signum() * 0.1 * (1.0 + x0.abs()) };
            for _ in 0..20 {
                x[c] = x0 + step;
                match eval(&x) {
                    Some(fnew) if fnew >= f => {
                        f = fnew;
                        break;
                    }
                    _ => {
                        x[c] = x0;
                        step *= 0.5;
                    }
                }
            }
        }
        if runaway(&x) {
            diverged = true;
            break;
        }
        if (f - f_start).abs() <= SWEEP_TOL * f_start.abs() {
            break;
        }
    }

    let mut converged = false;
    let mut gradient_norm = f64::INFINITY;
    let mut last_change = f64::INFINITY;
    while !diverged && iterations < cfg.max_opt_iters {
        // probes failing means Σ is at the edge of the PD cone
        let Ok(g) = fd_gradient(&rule, data, &x, 1e-4) else {
            diverged = true;
            break;
        };
        gradient_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if last_change <= cfg.opt_tol && gradient_norm < 10.0 * cfg.opt_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let Ok(h) = fd_hessian(&rule, data, &x, 1e-4) else {
            diverged = true;
            break;
        };
        let neg_h = -h;
        let eig = SymmetricEigen::new(neg_h);
        let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
        let gv = DVector::from_column_slice(&g);
        let mut step = DVector::zeros(x.len());
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda > 1e-8 * top {
                let v = eig.eigenvectors.column(k);
                step += v * (v.dot(&gv) / lambda);
            }
        }
        let f_start = f;
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + t * d).collect();
            if let Some(fc) = eval(&cand) {
                if fc >= f {
                    x = cand;
                    f = fc;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if runaway(&x) {
            diverged = true;
            break;
        }
        last_change = (f - f_start).abs() / f_start.abs();
        if !moved {
            match fd_gradient(&rule, data, &x, 1e-4) {
                Ok(g) => {
                    gradient_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                    converged = gradient_norm < 10.0 * cfg.opt_tol;
                }
                Err(_) => diverged = true,
            }
            break;
        }
    }
    if diverged {
        log::warn!("direct maximization diverged after {iterations} iterations");
    } else if !converged {
        log::warn!("direct maximization stopped after {iterations} iterations; gradient norm {gradient_norm:e}");
    }
    Ok(MleResult {
        params: from_vec(&x),
        loglik: f,
        iterations,
        converged,
        diverged,
        gradient_norm,
    })
}

/// Applies the likelihood-preserving map `θ → aθ + b` (with the matching
/// transformation of `Σ_β̃`) that puts `params.theta` on the location, scale
/// and orientation of `reference`.
pub fn map_onto(params: &ModelParams, reference: &[f64]) -> Result<ModelParams> {
    let target = align_to_scale(&params.theta, reference)?;
    let n = params.theta.len() as f64;
    let mean = params.theta.iter().sum::<f64>() / n;
    let (k, _) = params
        .theta
        .iter()
        .enumerate()
        .max_by(|a, b| (a.1 - mean).abs().total_cmp(&(b.1 - mean).abs()))
        .expect("non-empty");
    let target_mean = target.iter().sum::<f64>() / n;
    let a = (target[k] - target_mean) / (params.theta[k] - mean);
    Ok(params.affine_map(a, target_mean - a * mean))
}

/// Central-difference gradient of the quadrature log-likelihood in
/// `(θ, σ11, σ12, σ22)`, step `1e-4·(1 + |x|)`.
pub fn gradient_numeric(at: &ModelParams, data: &RollCall, cfg: &QuadConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check(at, data)?;
    fd_gradient(&Rule::new(cfg.nodes_per_dim), data, &to_vec(at), 1e-4)
}

/// Observed information from finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericFisher {
    /// `(I+3) × (I+3)`, coordinates `(θ, σ11, σ12, σ22)`.
    pub matrix: DMatrix<f64>,
    pub positive_definite: bool,
}

impl NumericFisher {
    /// `sqrt(diag((I_ΘΘ)⁻¹))`: SEs of `θ` with `Σ_β̃` held fixed.
    pub fn theta_block_se(&self) -> Result<Vec<Option<f64>>> {
        let n = self.matrix.nrows() - 3;
        let block = self.matrix.view((0, 0), (n, n)).into_owned();
        let inv = block
            .try_inverse()
            .ok_or_else(|| Error::Numerical("Θ information block is singular".into()))?;
        Ok((0..n)
            .map(|k| (inv[(k, k)] > 0.0).then(|| inv[(k, k)].sqrt()))
            .collect())
    }
}

/// Central finite-difference Hessian of `−log L` with step
/// `h = 1e-4·(1 + |x|)` per coordinate, symmetrized.
///
/// At a maximizer the full matrix is singular along the affine directions,
/// so `positive_definite` is expected to be false there; the Θ block is not
/// affected.
pub fn fisher_numeric(at: &ModelParams, data: &RollCall, cfg: &QuadConfig) -> Result<NumericFisher> {
    fisher_numeric_with_step(at, data, cfg, 1e-4)
}

/// [`fisher_numeric`] with step `scale·(1 + |x|)`.
pub fn fisher_numeric_with_step(
    at: &ModelParams,
    data: &RollCall,
    cfg: &QuadConfig,
    scale: f64,
) -> Result<NumericFisher> {
    cfg.validate()?;
    check(at, data)?;
    at.validate()?;
    let matrix = -fd_hessian(&Rule::new(cfg.nodes_per_dim), data, &to_vec(at), scale)?;
    let positive_definite = matrix.clone().cholesky().is_some();
    if !positive_definite {
        log::debug!("finite-difference information is not positive definite");
    }
    Ok(NumericFisher { matrix, positive_definite })
}
