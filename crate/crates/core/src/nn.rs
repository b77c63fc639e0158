//! Minimal feed-forward stack with hand-derived backpropagation and Adam.
//!
//! The encoder is two tanh hidden layers followed by four linear heads
//! (mean, log-variance, and the flattened `U` and `V` factors); the decoder
//! is two tanh hidden layers and a linear logits head. Forward passes work on
//! whole minibatches as matrices so the matmul kernel carries the load; the
//! per-datapoint wrappers just run one-row batches through the same code.
//!
//! With `rank = 0` the two factor heads have zero output width and the model
//! is exactly the diagonal-posterior baseline; every other code path is
//! shared, which is what makes the baseline comparison a one-flag ablation.

use crate::error::{Error, Result};
use crate::gaussian::LOG_VAR_CLAMP;
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix, Vector};
use crate::rng::stream;
use rand::Rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Initial scale multiplier for the u/v factor heads, so `eps * U V` starts
/// near zero and `det B` starts near 1.
pub const FACTOR_HEAD_INIT_SCALE: f64 = 0.01;

/// Shape hyper-parameters of the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub input: usize,
    pub hidden: usize,
    pub latent: usize,
    pub rank: usize,
    pub epsilon: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input < 1 || self.hidden < 1 || self.latent < 1 {
            return Err(Error::contract("input, hidden and latent must be >= 1"));
        }
        if self.rank > self.latent {
            return Err(Error::contract(format!(
                "rank {} exceeds latent dimension {}",
                self.rank, self.latent
            )));
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::contract("epsilon must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One affine layer, `y = x W^T + b`, with `w` stored out-by-in.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Vector,
}

impl DenseLayer {
    pub fn zeros(out: usize, input: usize) -> DenseLayer {
        DenseLayer {
            w: Matrix::zeros(out, input),
            b: Vector::zeros(out),
        }
    }
}

/// The nine layers of the model, in canonical block order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSet {
    pub enc1: DenseLayer,
    pub enc2: DenseLayer,
    pub head_mu: DenseLayer,
    pub head_log_var: DenseLayer,
    pub head_u: DenseLayer,
    pub head_v: DenseLayer,
    pub dec1: DenseLayer,
    pub dec2: DenseLayer,
    pub dec_out: DenseLayer,
}

/// Canonical parameter block names. Everything that walks parameters (the
/// optimizer, checkpoints, gradient checks) uses this order.
pub const BLOCK_NAMES: [&str; 18] = [
    "enc1.w",
    "enc1.b",
    "enc2.w",
    "enc2.b",
    "head_mu.w",
    "head_mu.b",
    "head_log_var.w",
    "head_log_var.b",
    "head_u.w",
    "head_u.b",
    "head_v.w",
    "head_v.b",
    "dec1.w",
    "dec1.b",
    "dec2.w",
    "dec2.b",
    "dec_out.w",
    "dec_out.b",
];

impl LayerSet {
    pub fn zeros(cfg: &ModelConfig) -> LayerSet {
        let uv_width = cfg.latent * cfg.rank;
        LayerSet {
            enc1: DenseLayer::zeros(cfg.hidden, cfg.input),
            enc2: DenseLayer::zeros(cfg.hidden, cfg.hidden),
            head_mu: DenseLayer::zeros(cfg.latent, cfg.hidden),
            head_log_var: DenseLayer::zeros(cfg.latent, cfg.hidden),
            head_u: DenseLayer::zeros(uv_width, cfg.hidden),
            head_v: DenseLayer::zeros(uv_width, cfg.hidden),
            dec1: DenseLayer::zeros(cfg.hidden, cfg.latent),
            dec2: DenseLayer::zeros(cfg.hidden, cfg.hidden),
            dec_out: DenseLayer::zeros(cfg.input, cfg.hidden),
        }
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 18] {
        [
            (BLOCK_NAMES[0], self.enc1.w.data()),
            (BLOCK_NAMES[1], &self.enc1.b),
            (BLOCK_NAMES[2], self.enc2.w.data()),
            (BLOCK_NAMES[3], &self.enc2.b),
            (BLOCK_NAMES[4], self.head_mu.w.data()),
            (BLOCK_NAMES[5], &self.head_mu.b),
            (BLOCK_NAMES[6], self.head_log_var.w.data()),
            (BLOCK_NAMES[7], &self.head_log_var.b),
            (BLOCK_NAMES[8], self.head_u.w.data()),
            (BLOCK_NAMES[9], &self.head_u.b),
            (BLOCK_NAMES[10], self.head_v.w.data()),
            (BLOCK_NAMES[11], &self.head_v.b),
            (BLOCK_NAMES[12], self.dec1.w.data()),
            (BLOCK_NAMES[13], &self.dec1.b),
            (BLOCK_NAMES[14], self.dec2.w.data()),
            (BLOCK_NAMES[15], &self.dec2.b),
            (BLOCK_NAMES[16], self.dec_out.w.data()),
            (BLOCK_NAMES[17], &self.dec_out.b),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 18] {
        [
            (BLOCK_NAMES[0], self.enc1.w.data_mut()),
            (BLOCK_NAMES[1], &mut self.enc1.b),
            (BLOCK_NAMES[2], self.enc2.w.data_mut()),
            (BLOCK_NAMES[3], &mut self.enc2.b),
            (BLOCK_NAMES[4], self.head_mu.w.data_mut()),
            (BLOCK_NAMES[5], &mut self.head_mu.b),
            (BLOCK_NAMES[6], self.head_log_var.w.data_mut()),
            (BLOCK_NAMES[7], &mut self.head_log_var.b),
            (BLOCK_NAMES[8], self.head_u.w.data_mut()),
            (BLOCK_NAMES[9], &mut self.head_u.b),
            (BLOCK_NAMES[10], self.head_v.w.data_mut()),
            (BLOCK_NAMES[11], &mut self.head_v.b),
            (BLOCK_NAMES[12], self.dec1.w.data_mut()),
            (BLOCK_NAMES[13], &mut self.dec1.b),
            (BLOCK_NAMES[14], self.dec2.w.data_mut()),
            (BLOCK_NAMES[15], &mut self.dec2.b),
            (BLOCK_NAMES[16], self.dec_out.w.data_mut()),
            (BLOCK_NAMES[17], &mut self.dec_out.b),
        ]
    }
}

/// All trainable weights plus the (fixed) shape configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub layers: LayerSet,
}

/// Gradient accumulator mirroring `ModelParams` block for block.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: LayerSet,
}

impl ModelParams {
    pub fn zeros(cfg: ModelConfig) -> Result<ModelParams> {
        cfg.validate()?;
        Ok(ModelParams {
            layers: LayerSet::zeros(&cfg),
            cfg,
        })
    }
}

impl ParamGrads {
    pub fn zeros(cfg: &ModelConfig) -> ParamGrads {
        ParamGrads {
            layers: LayerSet::zeros(cfg),
        }
    }
}

/// Glorot-uniform initialization, deterministic given the seed.
///
/// Each block draws from its own named stream, so configurations that share
/// a block (for example rank 0 versus rank 10) start from identical weights
/// in the blocks they share. The u/v heads are additionally scaled down so
/// the transform starts near the identity.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = ModelParams::zeros(*cfg)?;
    let factor_heads = [BLOCK_NAMES[8], BLOCK_NAMES[10]];
    for (name, block) in params.layers.blocks_mut() {
        if name.ends_with(".b") || block.is_empty() {
            continue;
        }
        let (out, input) = block_dims(cfg, name);
        let bound = (6.0 / (input + out) as f64).sqrt();
        let scale = if factor_heads.contains(&name) {
            FACTOR_HEAD_INIT_SCALE
        } else {
            1.0
        };
        let mut rng = stream(seed, &format!("init.{name}"), 0);
        for w in block.iter_mut() {
            *w = scale * rng.gen_range(-bound..bound);
        }
    }
    Ok(params)
}

fn block_dims(cfg: &ModelConfig, name: &str) -> (usize, usize) {
    let uv = cfg.latent * cfg.rank;
    match name {
        "enc1.w" => (cfg.hidden, cfg.input),
        "enc2.w" | "dec2.w" => (cfg.hidden, cfg.hidden),
        "head_mu.w" | "head_log_var.w" => (cfg.latent, cfg.hidden),
        "head_u.w" | "head_v.w" => (uv, cfg.hidden),
        "dec1.w" => (cfg.hidden, cfg.latent),
        "dec_out.w" => (cfg.input, cfg.hidden),
        other => unreachable!("unknown weight block {other}"),
    }
}

// ---- forward ---------------------------------------------------------------

/// `y = x W^T + b` for a batch of rows.
fn affine_forward(layer: &DenseLayer, x: &Matrix) -> Result<Matrix> {
    let mut y = matmul_nt(x, &layer.w)?;
    for r in 0..y.rows() {
        for (yi, bi) in y.row_mut(r).iter_mut().zip(layer.b.iter()) {
            *yi += bi;
        }
    }
    Ok(y)
}

fn tanh_inplace(m: &mut Matrix) {
    for v in m.data_mut().iter_mut() {
        *v = v.tanh();
    }
}

/// Encoder activations retained for the backward pass. Hidden activations
/// are stored post-tanh; head outputs are raw (the log-variance clamp is
/// applied by consumers and gated in the backward pass).
#[derive(Debug, Clone)]
pub struct EncTape {
    pub x: Matrix,
    pub h1: Matrix,
    pub h2: Matrix,
    pub mu: Matrix,
    pub log_var_raw: Matrix,
    pub u_flat: Matrix,
    pub v_flat: Matrix,
}

/// Decoder activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct DecTape {
    pub z: Matrix,
    pub g1: Matrix,
    pub g2: Matrix,
    pub logits: Matrix,
}

/// Amortized per-datapoint posterior bundle emitted by the encoder.
#[derive(Debug, Clone)]
pub struct EncoderOutputs {
    pub mu: Vector,
    pub log_var: Vector,
    pub u: Matrix,
    pub v: Matrix,
}

/// Batched encoder forward pass; rows of `x` are datapoints in `[0, 1]`.
pub fn encoder_forward_batch(p: &ModelParams, x: &Matrix) -> Result<EncTape> {
    if x.cols() != p.cfg.input {
        return Err(Error::contract(format!(
            "encoder expects {} inputs, got {}",
            p.cfg.input,
            x.cols()
        )));
    }
    if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::contract("encoder inputs must lie in [0, 1]"));
    }
    let mut h1 = affine_forward(&p.layers.enc1, x)?;
    tanh_inplace(&mut h1);
    let mut h2 = affine_forward(&p.layers.enc2, &h1)?;
    tanh_inplace(&mut h2);
    let mu = affine_forward(&p.layers.head_mu, &h2)?;
    let log_var_raw = affine_forward(&p.layers.head_log_var, &h2)?;
    let u_flat = affine_forward(&p.layers.head_u, &h2)?;
    let v_flat = affine_forward(&p.layers.head_v, &h2)?;
    Ok(EncTape {
        x: x.clone(),
        h1,
        h2,
        mu,
        log_var_raw,
        u_flat,
        v_flat,
    })
}

/// Extract the per-datapoint posterior bundle for row `i` of a batch tape.
/// The log-variance is clamped here; `u` is latent-by-rank and `v` is
/// rank-by-latent, reshaped row-major from the flat head outputs.
pub fn encoder_outputs_at(cfg: &ModelConfig, tape: &EncTape, i: usize) -> EncoderOutputs {
    let n = cfg.latent;
    let k = cfg.rank;
    let mu = Vector::from(tape.mu.row(i).to_vec());
    let log_var = Vector::from(
        tape.log_var_raw
            .row(i)
            .iter()
            .map(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP))
            .collect::<Vec<_>>(),
    );
    let u = Matrix::from_vec_unchecked(n, k, tape.u_flat.row(i).to_vec());
    let v = Matrix::from_vec_unchecked(k, n, tape.v_flat.row(i).to_vec());
    EncoderOutputs { mu, log_var, u, v }
}

/// Single-datapoint encoder forward, per the amortized-inference contract.
pub fn encoder_forward(p: &ModelParams, x: &Vector) -> Result<(EncoderOutputs, EncTape)> {
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let tape = encoder_forward_batch(p, &xm)?;
    let out = encoder_outputs_at(&p.cfg, &tape, 0);
    Ok((out, tape))
}

/// Batched decoder forward pass; rows of `z` are latent codes.
pub fn decoder_forward_batch(p: &ModelParams, z: &Matrix) -> Result<DecTape> {
    if z.cols() != p.cfg.latent {
        return Err(Error::contract(format!(
            "decoder expects {} latents, got {}",
            p.cfg.latent,
            z.cols()
        )));
    }
    let mut g1 = affine_forward(&p.layers.dec1, z)?;
    tanh_inplace(&mut g1);
    let mut g2 = affine_forward(&p.layers.dec2, &g1)?;
    tanh_inplace(&mut g2);
    let logits = affine_forward(&p.layers.dec_out, &g2)?;
    Ok(DecTape {
        z: z.clone(),
        g1,
        g2,
        logits,
    })
}

/// Single-datapoint decoder forward.
pub fn decoder_forward(p: &ModelParams, z: &Vector) -> Result<(Vector, DecTape)> {
    let zm = Matrix::from_vec(1, z.len(), z.to_vec())?;
    let tape = decoder_forward_batch(p, &zm)?;
    let logits = Vector::from(tape.logits.row(0).to_vec());
    Ok((logits, tape))
}

// ---- backward --------------------------------------------------------------

/// Accumulate `d_w += d_y^T x`, `d_b += column sums of d_y`, and return
/// `d_x = d_y W` when requested.
fn affine_backward(
    layer: &DenseLayer,
    x: &Matrix,
    d_y: &Matrix,
    d_layer: &mut DenseLayer,
    want_dx: bool,
) -> Result<Option<Matrix>> {
    if d_y.rows() != x.rows() || d_y.cols() != layer.w.rows() || x.cols() != layer.w.cols() {
        return Err(Error::contract("affine_backward shape mismatch"));
    }
    let dw = matmul_tn(d_y, x)?;
    for (acc, v) in d_layer.w.data_mut().iter_mut().zip(dw.data()) {
        *acc += v;
    }
    for r in 0..d_y.rows() {
        for (acc, v) in d_layer.b.iter_mut().zip(d_y.row(r)) {
            *acc += v;
        }
    }
    if want_dx {
        Ok(Some(matmul(d_y, &layer.w)?))
    } else {
        Ok(None)
    }
}

/// `d_pre = d_post * (1 - h^2)` where `h` is the stored post-tanh activation.
fn tanh_backward_inplace(d: &mut Matrix, h: &Matrix) {
    for (dv, hv) in d.data_mut().iter_mut().zip(h.data()) {
        *dv *= 1.0 - hv * hv;
    }
}

/// Upstream gradients for the four encoder heads, one row per datapoint.
/// `d_log_var` is with respect to the clamped log-variance; the clamp gate
/// is applied here against the raw tape values.
pub struct HeadGrads {
    pub d_mu: Matrix,
    pub d_log_var: Matrix,
    pub d_u_flat: Matrix,
    pub d_v_flat: Matrix,
}

/// Reverse pass through the encoder, accumulating into `grads`.
pub fn encoder_backward(
    p: &ModelParams,
    tape: &EncTape,
    heads: &HeadGrads,
    grads: &mut ParamGrads,
) -> Result<()> {
    let m = tape.x.rows();
    if heads.d_mu.rows() != m
        || heads.d_log_var.rows() != m
        || heads.d_u_flat.rows() != m
        || heads.d_v_flat.rows() != m
    {
        return Err(Error::contract("encoder_backward batch size mismatch"));
    }
    // Gate the log-variance gradient where the clamp saturates.
    let mut d_lv = heads.d_log_var.clone();
    for (dv, raw) in d_lv.data_mut().iter_mut().zip(tape.log_var_raw.data()) {
        if raw.abs() >= LOG_VAR_CLAMP {
            *dv = 0.0;
        }
    }

    let mut d_h2 = affine_backward(
        &p.layers.head_mu,
        &tape.h2,
        &heads.d_mu,
        &mut grads.layers.head_mu,
        true,
    )?
    .expect("dx requested");
    let parts = [
        (&p.layers.head_log_var, &d_lv, &mut grads.layers.head_log_var),
        (&p.layers.head_u, &heads.d_u_flat, &mut grads.layers.head_u),
        (&p.layers.head_v, &heads.d_v_flat, &mut grads.layers.head_v),
    ];
    for (layer, d_y, d_layer) in parts {
        if let Some(dx) = affine_backward(layer, &tape.h2, d_y, d_layer, true)? {
            for (a, b) in d_h2.data_mut().iter_mut().zip(dx.data()) {
                *a += b;
            }
        }
    }

    tanh_backward_inplace(&mut d_h2, &tape.h2);
    let mut d_h1 = affine_backward(&p.layers.enc2, &tape.h1, &d_h2, &mut grads.layers.enc2, true)?
        .expect("dx requested");
    tanh_backward_inplace(&mut d_h1, &tape.h1);
    affine_backward(&p.layers.enc1, &tape.x, &d_h1, &mut grads.layers.enc1, false)?;
    Ok(())
}

/// Reverse pass through the decoder; returns the gradient on the latent
/// codes so the caller can chain it through the sampling path.
pub fn decoder_backward(
    p: &ModelParams,
    tape: &DecTape,
    d_logits: &Matrix,
    grads: &mut ParamGrads,
) -> Result<Matrix> {
    let mut d_g2 = affine_backward(
        &p.layers.dec_out,
        &tape.g2,
        d_logits,
        &mut grads.layers.dec_out,
        true,
    )?
    .expect("dx requested");
    tanh_backward_inplace(&mut d_g2, &tape.g2);
    let mut d_g1 = affine_backward(&p.layers.dec2, &tape.g1, &d_g2, &mut grads.layers.dec2, true)?
        .expect("dx requested");
    tanh_backward_inplace(&mut d_g1, &tape.g1);
    let d_z = affine_backward(&p.layers.dec1, &tape.z, &d_g1, &mut grads.layers.dec1, true)?
        .expect("dx requested");
    Ok(d_z)
}

// ---- optimizer -------------------------------------------------------------

/// Adam moment accumulators, one pair of buffers per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> AdamState {
        let m = params
            .layers
            .blocks()
            .iter()
            .map(|(_, b)| vec![0.0; b.len()])
            .collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Rebuild optimizer state from checkpointed buffers.
    pub fn from_parts(m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64, params: &ModelParams) -> Result<AdamState> {
        let shapes: Vec<usize> = params.layers.blocks().iter().map(|(_, b)| b.len()).collect();
        if m.len() != shapes.len() || v.len() != shapes.len() {
            return Err(Error::contract("adam state block count mismatch"));
        }
        for ((mb, vb), want) in m.iter().zip(v.iter()).zip(shapes.iter()) {
            if mb.len() != *want || vb.len() != *want {
                return Err(Error::contract("adam state block length mismatch"));
            }
        }
        Ok(AdamState { m, v, step })
    }
}

/// One Adam update. Aborts with a poisoned-update error if any gradient
/// entry is non-finite; silent skipping would mask a collapsing transform.
pub fn adam_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    grads: &ParamGrads,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.layers.blocks() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::PoisonedUpdate {
                block: name.to_string(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let grad_blocks = grads.layers.blocks();
    for (bi, (_, p)) in params.layers.blocks_mut().into_iter().enumerate() {
        let g = grad_blocks[bi].1;
        let m = &mut state.m[bi];
        let v = &mut state.v[bi];
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
