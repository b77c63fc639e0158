//! Diagonal Gaussians, reparameterized sampling, and KL divergences.
//!
//! Three KL routes live here. `kl_diag` is the classic closed form for a
//! diagonal posterior against the standard normal prior. `kl_dense_oracle`
//! is the general two-Gaussian formula evaluated with dense inverses and
//! log-determinants; it is test-scale machinery that the efficient path is
//! checked against. `kl_dt` is the production path for a posterior pushed
//! through a dyadic transform: mean `B mu`, covariance `B diag(var) B^T`,
//! evaluated in O(n k^2 + k^3) via the transform's factored statistics.
//!
//! All three return KL as a nonnegative divergence; the ELBO subtracts it.

use crate::dyadic::DyadicTransform;
use crate::error::{Error, Result};
use crate::linalg::{dense_inverse, lu_logdet, matmul, matvec, Matrix, Vector};

/// Hard clamp applied to log-variances at construction: sigma^2 stays in
/// [e^-10, e^10], which keeps early training finite.
pub const LOG_VAR_CLAMP: f64 = 10.0;

/// Largest dimension the dense KL oracle will accept.
pub const DENSE_KL_CAP: usize = 64;

/// Posterior `N(mu, diag(exp(log_var)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mu: Vector,
    log_var: Vector,
}

/// The `(alpha, y, z)` triple retained for backpropagation through the
/// sampling chain: `y = mu + alpha * sigma`, `z = B y` (or `y` untransformed).
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamSample {
    pub alpha: Vector,
    pub y: Vector,
    pub z: Vector,
}

impl DiagGaussian {
    /// Build a posterior; `log_var` is clamped into `[-10, 10]`.
    pub fn new(mu: Vector, log_var: Vector) -> Result<DiagGaussian> {
        if mu.len() != log_var.len() {
            return Err(Error::contract(format!(
                "mu length {} vs log_var length {}",
                mu.len(),
                log_var.len()
            )));
        }
        let clamped = log_var
            .iter()
            .map(|&v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP))
            .collect::<Vec<_>>();
        Ok(DiagGaussian {
            mu,
            log_var: Vector::from(clamped),
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &Vector {
        &self.mu
    }

    pub fn log_var(&self) -> &Vector {
        &self.log_var
    }

    /// Elementwise variances `exp(log_var)`.
    pub fn var(&self) -> Vector {
        Vector::from(self.log_var.iter().map(|v| v.exp()).collect::<Vec<_>>())
    }

    /// Elementwise standard deviations `exp(log_var / 2)`.
    pub fn sigma(&self) -> Vector {
        Vector::from(
            self.log_var
                .iter()
                .map(|v| (0.5 * v).exp())
                .collect::<Vec<_>>(),
        )
    }
}

/// Deterministic reparameterized draw `y = mu + alpha * sigma`.
pub fn sample(g: &DiagGaussian, alpha: &Vector) -> Result<Vector> {
    if alpha.len() != g.dim() {
        return Err(Error::contract(format!(
            "alpha length {} vs dimension {}",
            alpha.len(),
            g.dim()
        )));
    }
    let sigma = g.sigma();
    let y = g
        .mu
        .iter()
        .zip(alpha.iter())
        .zip(sigma.iter())
        .map(|((m, a), s)| m + a * s)
        .collect::<Vec<_>>();
    Ok(Vector::from(y))
}

/// Draw the full `(alpha, y, z)` chain, optionally through a transform.
pub fn reparameterize(
    g: &DiagGaussian,
    transform: Option<&DyadicTransform>,
    alpha: Vector,
) -> Result<ReparamSample> {
    let y = sample(g, &alpha)?;
    let z = match transform {
        Some(b) => b.apply(&y)?,
        None => y.clone(),
    };
    Ok(ReparamSample { alpha, y, z })
}

/// KL of a diagonal posterior against the standard normal prior:
/// `0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2)`.
pub fn kl_diag(g: &DiagGaussian) -> f64 {
    g.mu
        .iter()
        .zip(g.log_var.iter())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

fn symmetrized(m: &Matrix) -> Matrix {
    let n = m.rows();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s.set(i, j, 0.5 * (m.get(i, j) + m.get(j, i)));
        }
    }
    s
}

/// Positive-definiteness check via an unpivoted Cholesky attempt: a symmetric
/// matrix is PD exactly when every elimination pivot stays positive.
fn check_sym_pd(m: &Matrix, label: &str) -> Result<()> {
    let n = m.rows();
    let tol = crate::linalg::SINGULARITY_REL_EPS * m.max_abs().max(1.0);
    let mut a = m.clone();
    for col in 0..n {
        let p = a.get(col, col);
        if p <= tol {
            return Err(Error::contract(format!(
                "{label} is not positive definite (pivot {p:.3e} at {col})"
            )));
        }
        for r in col + 1..n {
            let f = a.get(r, col) / p;
            for j in col..n {
                a.set(r, j, a.get(r, j) - f * a.get(col, j));
            }
        }
    }
    Ok(())
}

/// General KL between `N(mu0, sigma0)` and `N(mu1, sigma1)`, evaluated
/// densely. The covariances are symmetrized and pivot-checked. Test-scale
/// oracle: dimensions above `DENSE_KL_CAP` are refused.
pub fn kl_dense_oracle(
    mu0: &Vector,
    sigma0: &Matrix,
    mu1: &Vector,
    sigma1: &Matrix,
) -> Result<f64> {
    let j = mu0.len();
    if j > DENSE_KL_CAP {
        return Err(Error::contract(format!(
            "dense KL oracle capped at {DENSE_KL_CAP} dimensions, got {j}"
        )));
    }
    if mu1.len() != j
        || !sigma0.is_square()
        || !sigma1.is_square()
        || sigma0.rows() != j
        || sigma1.rows() != j
    {
        return Err(Error::contract("dense KL oracle: inconsistent shapes"));
    }
    let s0 = symmetrized(sigma0);
    let s1 = symmetrized(sigma1);
    check_sym_pd(&s0, "sigma0")?;
    check_sym_pd(&s1, "sigma1")?;

    let s1_inv = dense_inverse(&s1)?;
    let tr = crate::linalg::trace(&matmul(&s1_inv, &s0)?)?;
    let diff = Vector::from(
        mu1.iter()
            .zip(mu0.iter())
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>(),
    );
    let s1_inv_diff = matvec(&s1_inv, &diff)?;
    let quad: f64 = diff.iter().zip(s1_inv_diff.iter()).map(|(a, b)| a * b).sum();
    let ld0 = lu_logdet(&s0)?;
    let ld1 = lu_logdet(&s1)?;
    Ok(0.5 * (tr + quad - j as f64 + (ld1.log_abs - ld0.log_abs)))
}

/// KL of the transformed posterior `N(B mu, B diag(var) B^T)` against the
/// standard normal prior, computed from the factored transform:
///
/// `0.5 * (Tr(B D B^T) + ||B mu||^2 - n - sum(log var) - 2 log det B)`.
///
/// Rejects transforms whose determinant sign is not `+1`; a nonpositive
/// determinant means `eps * U V` has left the near-identity regime and the
/// posterior covariance is no longer positive definite.
pub fn kl_dt(g: &DiagGaussian, b: &DyadicTransform) -> Result<f64> {
    let n = g.dim();
    if b.n() != n {
        return Err(Error::contract(format!(
            "transform dimension {} vs posterior dimension {n}",
            b.n()
        )));
    }
    let ld = b.logdet();
    if ld.sign != 1 {
        return Err(Error::NonPdPosterior {
            sign: ld.sign,
            log_abs: ld.log_abs,
            datapoint: None,
        });
    }
    let var = g.var();
    let t1 = b.trace_bdbt(&var)?;
    let t2 = b.transformed_mean_sqnorm(&g.mu)?;
    let sum_log_var: f64 = g.log_var.iter().sum();
    Ok(0.5 * (t1 + t2 - n as f64 - sum_log_var - 2.0 * ld.log_abs))
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Bernoulli log-likelihood `sum_j x_j log s(l_j) + (1 - x_j) log(1 - s(l_j))`
/// in the saturation-safe form `x * l - softplus(l)`.
pub fn bernoulli_logprob(x: &[f64], logits: &[f64]) -> Result<f64> {
    if x.len() != logits.len() {
        return Err(Error::contract(format!(
            "bernoulli_logprob lengths {} vs {}",
            x.len(),
            logits.len()
        )));
    }
    if x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::contract("bernoulli data must lie in [0, 1]"));
    }
    Ok(x.iter()
        .zip(logits.iter())
        .map(|(xi, li)| xi * li - softplus(*li))
        .sum())
}
