//! Encoder -> reparameterized sample -> dyadic transform -> decoder, wired
//! into the ELBO, plus the training loop and test-set evaluation.
//!
//! With `rank = 0` the transform and its KL branch are skipped and the
//! pipeline is the plain diagonal-posterior baseline; nothing else changes,
//! so the baseline comparison is a one-flag ablation. All stochasticity is
//! drawn from named streams keyed by `(seed, epoch)`, which makes runs
//! bitwise reproducible and lets training resume from an epoch boundary
//! with no generator state to restore.

use crate::data::{minibatches, Dataset, IMAGE_PIXELS};
use crate::dyadic::{DyadicGrads, DyadicTransform};
use crate::error::{Error, Result};
use crate::gaussian::{
    bernoulli_logprob, kl_diag, kl_dt, reparameterize, sigmoid, DiagGaussian, ReparamSample,
};
use crate::linalg::{Matrix, Vector};
use crate::nn::{
    adam_step, decoder_backward, decoder_forward_batch, encoder_backward, encoder_forward_batch,
    encoder_outputs_at, init_params, AdamState, DecTape, EncTape, HeadGrads, ModelConfig,
    ModelParams, ParamGrads,
};
use crate::rng::stream;
use rand::Rng;
use rand_distr::StandardNormal;
use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

/// Per-batch (or per-epoch) ELBO bookkeeping in nats per datapoint.
/// `elbo == recon - kl` holds exactly by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub elbo: f64,
}

impl ElboBreakdown {
    pub fn new(recon: f64, kl: f64) -> ElboBreakdown {
        ElboBreakdown {
            recon,
            kl,
            elbo: recon - kl,
        }
    }
}

/// Everything a training run needs. `rank = 0` trains the plain baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub latent: usize,
    pub rank: usize,
    pub epsilon: f64,
    pub hidden: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub subset: Option<usize>,
    pub val_split: bool,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            latent: 50,
            rank: 0,
            epsilon: 0.001,
            hidden: 500,
            batch: 128,
            epochs: 10,
            lr: 1e-3,
            seed: 0,
            data_dir: PathBuf::new(),
            subset: None,
            val_split: false,
            eval_samples: 1,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input: IMAGE_PIXELS,
            hidden: self.hidden,
            latent: self.latent,
            rank: self.rank,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.batch < 1 {
            return Err(Error::contract("batch size must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::contract("learning rate must be positive"));
        }
        if self.eval_samples < 1 {
            return Err(Error::contract("eval sample count must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
        }
    }
}

/// One metrics row: ELBO breakdown for a split at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub wall_seconds: f64,
}

/// Receives per-epoch state: metrics rows plus the parameters and optimizer
/// state as of the end of the epoch (for checkpointing).
pub trait EpochSink {
    fn on_epoch(
        &mut self,
        params: &ModelParams,
        adam: &AdamState,
        records: &[EpochRecord],
    ) -> Result<()>;
}

/// Sink that drops everything; tests and library callers use it.
pub struct NullSink;

impl EpochSink for NullSink {
    fn on_epoch(&mut self, _: &ModelParams, _: &AdamState, _: &[EpochRecord]) -> Result<()> {
        Ok(())
    }
}

struct PerPoint {
    g: DiagGaussian,
    b: Option<DyadicTransform>,
    sample: ReparamSample,
    kl: f64,
}

struct ForwardPass {
    enc: EncTape,
    dec: DecTape,
    points: Vec<PerPoint>,
    recons: Vec<f64>,
}

fn forward_pass(p: &ModelParams, xs: &Matrix, alphas: &Matrix) -> Result<ForwardPass> {
    let m = xs.rows();
    if m == 0 {
        return Err(Error::contract("empty minibatch"));
    }
    if alphas.rows() != m || alphas.cols() != p.cfg.latent {
        return Err(Error::contract(format!(
            "alphas must be {m}x{}, got {}x{}",
            p.cfg.latent,
            alphas.rows(),
            alphas.cols()
        )));
    }
    let enc = encoder_forward_batch(p, xs)?;
    let mut points = Vec::with_capacity(m);
    let mut z_data = Vec::with_capacity(m * p.cfg.latent);
    for i in 0..m {
        let out = encoder_outputs_at(&p.cfg, &enc, i);
        let g = DiagGaussian::new(out.mu, out.log_var)?;
        // eps = 0 short-circuits along with rank = 0: B is the identity
        // there, and running the same code as the baseline keeps the two
        // paths bitwise equal, not just equal to rounding.
        let b = if p.cfg.rank > 0 && p.cfg.epsilon != 0.0 {
            Some(DyadicTransform::new(p.cfg.epsilon, out.u, out.v)?)
        } else {
            None
        };
        let alpha = Vector::from(alphas.row(i).to_vec());
        let sample = reparameterize(&g, b.as_ref(), alpha)?;
        let kl = match &b {
            Some(b) => kl_dt(&g, b).map_err(|e| e.at_datapoint(i))?,
            None => kl_diag(&g),
        };
        z_data.extend_from_slice(&sample.z);
        points.push(PerPoint { g, b, sample, kl });
    }
    let z = Matrix::from_vec(m, p.cfg.latent, z_data)?;
    let dec = decoder_forward_batch(p, &z)?;
    let recons = (0..m)
        .map(|i| bernoulli_logprob(xs.row(i), dec.logits.row(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardPass {
        enc,
        dec,
        points,
        recons,
    })
}

fn breakdown_of(fw: &ForwardPass) -> ElboBreakdown {
    let m = fw.points.len() as f64;
    let recon = fw.recons.iter().sum::<f64>() / m;
    let kl = fw.points.iter().map(|p| p.kl).sum::<f64>() / m;
    ElboBreakdown::new(recon, kl)
}

/// Forward-only batch ELBO (evaluation path; computes no gradients).
pub fn elbo_forward(p: &ModelParams, xs: &Matrix, alphas: &Matrix) -> Result<ElboBreakdown> {
    Ok(breakdown_of(&forward_pass(p, xs, alphas)?))
}

/// Batch ELBO plus exact gradients of `-elbo` for every parameter block.
pub fn elbo_minibatch(
    p: &ModelParams,
    xs: &Matrix,
    alphas: &Matrix,
) -> Result<(ElboBreakdown, ParamGrads)> {
    let fw = forward_pass(p, xs, alphas)?;
    let m = fw.points.len();
    let w = 1.0 / m as f64;
    let n = p.cfg.latent;
    let uv_width = n * p.cfg.rank;

    let mut grads = ParamGrads::zeros(&p.cfg);

    // Reconstruction path: d(-recon_mean)/d logits = (sigmoid(l) - x) / m.
    let mut d_logits = Matrix::zeros(m, p.cfg.input);
    for i in 0..m {
        let row = d_logits.row_mut(i);
        let l = fw.dec.logits.row(i);
        let x = xs.row(i);
        for j in 0..row.len() {
            row[j] = w * (sigmoid(l[j]) - x[j]);
        }
    }
    let d_z = decoder_backward(p, &fw.dec, &d_logits, &mut grads)?;

    let mut d_mu = Matrix::zeros(m, n);
    let mut d_log_var = Matrix::zeros(m, n);
    let mut d_u_flat = Matrix::zeros(m, uv_width);
    let mut d_v_flat = Matrix::zeros(m, uv_width);

    for (i, point) in fw.points.iter().enumerate() {
        let var = point.g.var();
        let sigma = point.g.sigma();
        let alpha = &point.sample.alpha;
        let d_z_i = Vector::from(d_z.row(i).to_vec());

        let (d_y, uv_grads, d_mu_kl, d_var_kl): (Vector, Option<DyadicGrads>, Vector, Vector) =
            match &point.b {
                Some(b) => {
                    let (d_y, mut uv) = b.apply_backward(&point.sample.y, &d_z_i)?;
                    let (d_mu_kl, mut d_var_kl, kl_uv) =
                        b.kl_terms_backward(point.g.mu(), &var, 0.5 * w)?;
                    for j in 0..n {
                        d_var_kl[j] -= 0.5 * w / var[j];
                    }
                    uv.add_assign(&kl_uv);
                    (d_y, Some(uv), d_mu_kl, d_var_kl)
                }
                None => {
                    let d_mu_kl =
                        Vector::from(point.g.mu().iter().map(|mu| w * mu).collect::<Vec<_>>());
                    let d_var_kl = Vector::from(
                        var.iter().map(|v| 0.5 * w * (1.0 - 1.0 / v)).collect::<Vec<_>>(),
                    );
                    (d_z_i, None, d_mu_kl, d_var_kl)
                }
            };

        let mu_row = d_mu.row_mut(i);
        let lv_row = d_log_var.row_mut(i);
        for j in 0..n {
            mu_row[j] = d_y[j] + d_mu_kl[j];
            lv_row[j] = 0.5 * sigma[j] * alpha[j] * d_y[j] + var[j] * d_var_kl[j];
        }
        if let Some(uv) = uv_grads {
            d_u_flat.row_mut(i).copy_from_slice(uv.d_u.data());
            d_v_flat.row_mut(i).copy_from_slice(uv.d_v.data());
        }
    }

    encoder_backward(
        p,
        &fw.enc,
        &HeadGrads {
            d_mu,
            d_log_var,
            d_u_flat,
            d_v_flat,
        },
        &mut grads,
    )?;
    Ok((breakdown_of(&fw), grads))
}

fn draw_alphas(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec_unchecked(rows, cols, data)
}

/// Forward-only mean breakdown over a dataset with seeded binarization and
/// noise streams (`domain` distinguishes validation from test evaluation).
fn dataset_breakdown(
    p: &ModelParams,
    ds: &Dataset,
    batch: usize,
    seed: u64,
    domain_bin: &str,
    domain_noise: &str,
    index: u64,
) -> Result<ElboBreakdown> {
    let mut bin_rng = stream(seed, domain_bin, index);
    let mut noise_rng = stream(seed, domain_noise, index);
    let mut recon_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + batch).min(ds.len());
        let m = end - start;
        let mut data = Vec::with_capacity(m * IMAGE_PIXELS);
        for img in &ds.images()[start..end] {
            data.extend(crate::data::dynamic_binarize(img, &mut bin_rng));
        }
        let xs = Matrix::from_vec_unchecked(m, IMAGE_PIXELS, data);
        let alphas = draw_alphas(&mut noise_rng, m, p.cfg.latent);
        let bd = elbo_forward(p, &xs, &alphas)?;
        recon_sum += bd.recon * m as f64;
        kl_sum += bd.kl * m as f64;
        start = end;
    }
    Ok(ElboBreakdown::new(
        recon_sum / ds.len() as f64,
        kl_sum / ds.len() as f64,
    ))
}

/// Train from a fresh initialization. See `resume` for the loop itself.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    sink: &mut dyn EpochSink,
) -> Result<(ModelParams, AdamState, Vec<EpochRecord>)> {
    cfg.validate()?;
    let params = init_params(&cfg.model_config(), cfg.seed)?;
    let adam = AdamState::new(&params);
    resume(cfg, data, params, adam, 0, sink)
}

/// Run epochs `start_epoch..cfg.epochs` from the given state. Resuming from
/// a checkpointed epoch boundary reproduces an uninterrupted run bit for bit
/// because every stream is re-derived from `(seed, epoch)`.
pub fn resume(
    cfg: &TrainConfig,
    data: &Dataset,
    mut params: ModelParams,
    mut adam: AdamState,
    start_epoch: usize,
    sink: &mut dyn EpochSink,
) -> Result<(ModelParams, AdamState, Vec<EpochRecord>)> {
    cfg.validate()?;
    if params.cfg != cfg.model_config() {
        return Err(Error::contract("parameter shapes do not match the config"));
    }
    let working = match cfg.subset {
        Some(count) => data.subset(count),
        None => data.clone(),
    };
    let (train_ds, val_ds) = if cfg.val_split {
        let count = 10_000.min(working.len() / 6);
        let (t, v) = working.split_validation(count);
        (t, Some(v))
    } else {
        (working, None)
    };
    if train_ds.is_empty() {
        return Err(Error::contract("training set is empty"));
    }

    let mut history = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let t0 = Instant::now();
        let mut noise_rng = stream(cfg.seed, "noise", epoch as u64);
        let mut recon_sum = 0.0;
        let mut kl_sum = 0.0;
        for batch in minibatches(&train_ds, cfg.batch, cfg.seed, epoch) {
            let m = batch.indices.len();
            let alphas = draw_alphas(&mut noise_rng, m, cfg.latent);
            let (bd, grads) = elbo_minibatch(&params, &batch.x, &alphas)?;
            adam_step(&mut params, &mut adam, &grads, cfg.lr)?;
            recon_sum += bd.recon * m as f64;
            kl_sum += bd.kl * m as f64;
        }
        let n = train_ds.len() as f64;
        let train_bd = ElboBreakdown::new(recon_sum / n, kl_sum / n);
        let mut records = vec![EpochRecord {
            epoch,
            split: Split::Train,
            elbo: train_bd.elbo,
            recon: train_bd.recon,
            kl: train_bd.kl,
            wall_seconds: t0.elapsed().as_secs_f64(),
        }];
        if let Some(val) = &val_ds {
            let tv = Instant::now();
            let bd = dataset_breakdown(
                &params,
                val,
                cfg.batch,
                cfg.seed,
                "val-binarize",
                "val-noise",
                epoch as u64,
            )?;
            records.push(EpochRecord {
                epoch,
                split: Split::Val,
                elbo: bd.elbo,
                recon: bd.recon,
                kl: bd.kl,
                wall_seconds: tv.elapsed().as_secs_f64(),
            });
        }
        sink.on_epoch(&params, &adam, &records)?;
        history.extend(records);
    }
    Ok((params, adam, history))
}

/// Mean test-set ELBO: each datapoint's single-sample ELBO averaged over
/// `samples` independent binarization/noise draws, deterministic given the
/// seed. Returns the full breakdown; the `elbo` field is the reported bound.
pub fn evaluate(
    p: &ModelParams,
    test: &Dataset,
    samples: usize,
    seed: u64,
) -> Result<ElboBreakdown> {
    if samples < 1 {
        return Err(Error::contract("sample count must be >= 1"));
    }
    if test.is_empty() {
        return Err(Error::contract("test set is empty"));
    }
    let mut recon_sum = 0.0;
    let mut kl_sum = 0.0;
    for s in 0..samples {
        let bd = dataset_breakdown(p, test, 256, seed, "eval-binarize", "eval-noise", s as u64)?;
        recon_sum += bd.recon;
        kl_sum += bd.kl;
    }
    Ok(ElboBreakdown::new(
        recon_sum / samples as f64,
        kl_sum / samples as f64,
    ))
}
