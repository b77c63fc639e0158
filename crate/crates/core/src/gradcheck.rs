//! Full-model gradient verification: analytic backpropagation against
//! central finite differences on a frozen minibatch, block by block.
//!
//! This is the project's master correctness check: it exercises the entire
//! chain (encoder, reparameterization, dyadic transform, KL, decoder,
//! reconstruction) through the exact code paths training uses.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{init_params, ModelConfig, ModelParams, BLOCK_NAMES};
use crate::rng::stream;
use crate::vae::{elbo_forward, elbo_minibatch};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    pub cfg: ModelConfig,
    pub batch: usize,
    /// Central-difference step.
    pub step: f64,
    /// Per-block relative-error tolerance.
    pub tol: f64,
}

impl Default for GradCheckSettings {
    fn default() -> GradCheckSettings {
        GradCheckSettings {
            // Tiny model: full-input width but narrow everywhere else.
            // Epsilon is larger than the training default so the factor-head
            // gradients sit well above the finite-difference noise floor;
            // the analytic gradients are exact at any eps, and a real error
            // would not shrink as eps grows the way rounding noise does.
            cfg: ModelConfig {
                input: 784,
                hidden: 8,
                latent: 4,
                rank: 2,
                epsilon: 0.1,
            },
            batch: 2,
            step: 1e-5,
            tol: 1e-4,
        }
    }
}

/// Per-block comparison: Euclidean norms of the analytic and
/// finite-difference gradients and their relative disagreement
/// `||a - fd|| / max(||a||, ||fd||)`.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: &'static str,
    pub analytic_norm: f64,
    pub fd_norm: f64,
    pub rel_err: f64,
}

fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compare analytic gradients of `-elbo` to central finite differences for
/// every parameter block. `corrupt_block` is a test hook that perturbs the
/// analytic gradient of the named block so failure detection can itself be
/// tested.
pub fn run_gradcheck(
    settings: &GradCheckSettings,
    seed: u64,
    corrupt_block: Option<&str>,
) -> Result<Vec<BlockReport>> {
    let cfg = settings.cfg;
    cfg.validate()?;
    if let Some(name) = corrupt_block {
        if !BLOCK_NAMES.contains(&name) {
            return Err(Error::contract(format!("unknown block {name}")));
        }
    }
    let mut params = init_params(&cfg, seed)?;
    // The training init deliberately starts the factor heads near zero,
    // which barely excites the transform's gradient paths and leaves their
    // finite differences dominated by rounding noise. Gradient correctness
    // must hold at generic parameter values, so check there: rescale the
    // factor heads to ordinary magnitude (still well inside the
    // positive-definite regime at this epsilon).
    for (name, block) in params.layers.blocks_mut() {
        if name == "head_u.w" || name == "head_v.w" {
            for v in block.iter_mut() {
                *v *= 25.0;
            }
        }
    }

    let mut x_rng = stream(seed, "gradcheck-x", 0);
    let xs = Matrix::from_vec(
        settings.batch,
        cfg.input,
        (0..settings.batch * cfg.input)
            .map(|_| if x_rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let mut a_rng = stream(seed, "gradcheck-alpha", 0);
    let alphas = Matrix::from_vec(
        settings.batch,
        cfg.latent,
        (0..settings.batch * cfg.latent)
            .map(|_| a_rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )?;

    let (_, mut grads) = elbo_minibatch(&params, &xs, &alphas)?;
    if let Some(name) = corrupt_block {
        for (block_name, block) in grads.layers.blocks_mut() {
            if block_name == name {
                for v in block.iter_mut() {
                    *v = 2.0 * *v + 0.5;
                }
            }
        }
    }

    let loss = |p: &ModelParams| -> Result<f64> { Ok(-elbo_forward(p, &xs, &alphas)?.elbo) };
    let h = settings.step;
    let mut work = params.clone();
    let mut reports = Vec::with_capacity(BLOCK_NAMES.len());
    for bi in 0..BLOCK_NAMES.len() {
        let len = grads.layers.blocks()[bi].1.len();
        let mut fd = vec![0.0; len];
        for i in 0..len {
            let orig = params.layers.blocks()[bi].1[i];
            work.layers.blocks_mut()[bi].1[i] = orig + h;
            let up = loss(&work)?;
            work.layers.blocks_mut()[bi].1[i] = orig - h;
            let down = loss(&work)?;
            work.layers.blocks_mut()[bi].1[i] = orig;
            fd[i] = (up - down) / (2.0 * h);
        }
        let analytic = grads.layers.blocks()[bi].1;
        let diff: f64 = analytic
            .iter()
            .zip(fd.iter())
            .map(|(a, f)| (a - f) * (a - f))
            .sum::<f64>()
            .sqrt();
        let an = norm(analytic);
        let fdn = norm(&fd);
        let denom = an.max(fdn);
        let rel_err = if denom == 0.0 { 0.0 } else { diff / denom };
        reports.push(BlockReport {
            name: BLOCK_NAMES[bi],
            analytic_norm: an,
            fd_norm: fdn,
            rel_err,
        });
    }
    Ok(reports)
}

pub fn worst_rel_err(reports: &[BlockReport]) -> f64 {
    reports.iter().fold(0.0, |m, r| m.max(r.rel_err))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let settings = GradCheckSettings {
            batch: 1,
            ..GradCheckSettings::default()
        };
        let reports = run_gradcheck(&settings, 1, None).unwrap();
        assert_eq!(reports.len(), BLOCK_NAMES.len());
        for r in &reports {
            assert!(
                r.rel_err <= settings.tol,
                "block {}: rel {} (analytic norm {}, fd norm {})",
                r.name,
                r.rel_err,
                r.analytic_norm,
                r.fd_norm
            );
        }
    }

    #[test]
    fn baseline_rank_zero_also_passes() {
        let mut settings = GradCheckSettings::default();
        settings.cfg.rank = 0;
        settings.cfg.epsilon = 0.0;
        let reports = run_gradcheck(&settings, 2, None).unwrap();
        assert!(worst_rel_err(&reports) <= settings.tol);
        // The factor heads are empty blocks and report zero error.
        let u = reports.iter().find(|r| r.name == "head_u.w").unwrap();
        assert_eq!(u.rel_err, 0.0);
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let settings = GradCheckSettings::default();
        let reports = run_gradcheck(&settings, 3, Some("enc2.w")).unwrap();
        let bad = reports.iter().find(|r| r.name == "enc2.w").unwrap();
        assert!(bad.rel_err > settings.tol);
    }

    #[test]
    fn unknown_corrupt_block_is_rejected() {
        assert!(run_gradcheck(&GradCheckSettings::default(), 1, Some("nope")).is_err());
    }
}
