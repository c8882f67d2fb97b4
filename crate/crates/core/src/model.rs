//! The autoencoder: a Gaussian encoder `x → (mean, log_var)` with
//! reparameterized sampling, and a deterministic decoder `z → softmax(logits)`.
//!
//! Shapes are `I → hidden → 2·latent` for the encoder and
//! `latent → hidden → I` for the decoder, with `tanh` between layers. Batches
//! are row-major: one user per row, `h = tanh(x·W + b)`.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, softmax_rows, Matrix, Rng};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

const CHECKPOINT_MAGIC: &[u8; 8] = b"GEOCFCK1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub latent: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: 600, latent: 200 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.latent == 0 {
            return Err(Error::Config(format!(
                "hidden and latent sizes must be positive, got {}/{}",
                self.hidden, self.latent
            )));
        }
        Ok(())
    }
}

/// Weights and biases of both networks. Also used as the container for
/// parameter gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    num_items: usize,
    config: ModelConfig,
    tensors: [Matrix; 8],
    generation: u64,
}

/// Names of the parameter tensors, in storage order.
pub const TENSOR_NAMES: [&str; 8] = [
    "enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w1", "dec_b1", "dec_w2", "dec_b2",
];

impl ModelParams {
    pub fn zeros(num_items: usize, config: ModelConfig) -> Self {
        let (i, h, l) = (num_items, config.hidden, config.latent);
        ModelParams {
            num_items,
            config,
            tensors: [
                Matrix::zeros(i, h),
                Matrix::zeros(1, h),
                Matrix::zeros(h, 2 * l),
                Matrix::zeros(1, 2 * l),
                Matrix::zeros(l, h),
                Matrix::zeros(1, h),
                Matrix::zeros(h, i),
                Matrix::zeros(1, i),
            ],
            generation: 0,
        }
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn tensors(&self) -> &[Matrix; 8] {
        &self.tensors
    }

    /// Mutable access to every tensor. Invalidates caches built from `self`.
    pub fn tensors_mut(&mut self) -> &mut [Matrix; 8] {
        self.generation += 1;
        &mut self.tensors
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// `self += s · other`, tensor by tensor.
    pub fn axpy(&mut self, s: f64, other: &ModelParams) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::InvalidArgument("parameter shapes differ".into()));
        }
        for (a, b) in self.tensors_mut().iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += s * y;
            }
        }
        Ok(())
    }

    fn w(&self, k: usize) -> &Matrix {
        &self.tensors[k]
    }

    fn b(&self, k: usize) -> &[f64] {
        self.tensors[k].data()
    }
}

/// Weights uniform in `±√(6/fan_in)`, biases zero.
pub fn init_params(num_items: usize, config: ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    if num_items == 0 {
        return Err(Error::InvalidArgument("model needs at least one item".into()));
    }
    config.validate()?;
    let mut p = ModelParams::zeros(num_items, config);
    for k in [0, 2, 4, 6] {
        let w = &mut p.tensors[k];
        let bound = (6.0 / w.rows() as f64).sqrt();
        for v in w.data_mut() {
            *v = rng.uniform_range(-bound, bound);
        }
    }
    Ok(p)
}

/// Click rows as an L2-normalized dense batch. Empty rows are rejected.
pub fn normalized_input(rows: &[&[usize]], num_items: usize) -> Result<Matrix> {
    let mut x = Matrix::zeros(rows.len(), num_items);
    for (u, items) in rows.iter().enumerate() {
        if items.is_empty() {
            return Err(Error::InvalidArgument(format!("row {u} has no clicks and cannot be encoded")));
        }
        let v = 1.0 / (items.len() as f64).sqrt();
        for &i in *items {
            if i >= num_items {
                return Err(Error::InvalidArgument(format!("item index {i} out of range for {num_items} items")));
            }
            x.set(u, i, v);
        }
    }
    Ok(x)
}

/// How the reparameterization noise is drawn.
pub enum Noise<'a> {
    Sample(&'a mut Rng),
    /// All-zero noise, so `z = mean`.
    Zero,
    Given(Matrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub z: Matrix,
    pub mean: Matrix,
    pub log_var: Matrix,
    pub noise: Matrix,
}

/// Intermediate values of [`encode`] needed by [`backward`].
#[derive(Clone, Debug)]
pub struct EncodeCache {
    generation: u64,
    x: Matrix,
    h1: Matrix,
    /// Whether each pre-clamp log-variance lay inside the clamp range.
    active: Vec<bool>,
    log_var: Matrix,
    noise: Matrix,
}

/// Intermediate values of [`decode`] needed by [`backward`].
#[derive(Clone, Debug)]
pub struct DecodeCache {
    generation: u64,
    z: Matrix,
    h3: Matrix,
    probs: Matrix,
}

fn tanh_layer(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    let mut a = matmul(x, w)?;
    a.add_row_vector(b)?;
    Ok(a.map(f64::tanh))
}

pub fn encode(params: &ModelParams, x: &Matrix, noise: Noise<'_>) -> Result<(LatentBatch, EncodeCache)> {
    if x.cols() != params.num_items {
        return Err(Error::shape("encode", x.shape(), params.w(0).shape()));
    }
    if let Some(u) = (0..x.rows()).find(|&u| x.row(u).iter().all(|&v| v == 0.0)) {
        return Err(Error::InvalidArgument(format!("row {u} is all zero and cannot be encoded")));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("encoder input".into()));
    }
    let l = params.config.latent;
    let b = x.rows();
    let h1 = tanh_layer(x, params.w(0), params.b(1))?;
    let mut out = matmul(&h1, params.w(2))?;
    out.add_row_vector(params.b(3))?;
    let mut mean = Matrix::zeros(b, l);
    let mut log_var = Matrix::zeros(b, l);
    let mut active = vec![false; b * l];
    for u in 0..b {
        let row = out.row(u);
        mean.row_mut(u).copy_from_slice(&row[..l]);
        for k in 0..l {
            let raw = row[l + k];
            active[u * l + k] = raw > LOG_VAR_MIN && raw < LOG_VAR_MAX;
            log_var.set(u, k, raw.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
        }
    }
    let noise = match noise {
        Noise::Sample(rng) => rng.normal_matrix(b, l),
        Noise::Zero => Matrix::zeros(b, l),
        Noise::Given(m) => {
            if m.shape() != (b, l) {
                return Err(Error::shape("encode noise", m.shape(), (b, l)));
            }
            m
        }
    };
    let mut z = mean.clone();
    for ((zv, &lv), &e) in z.data_mut().iter_mut().zip(log_var.data()).zip(noise.data()) {
        *zv += (0.5 * lv).exp() * e;
    }
    if !z.is_finite() {
        return Err(Error::NonFinite("latent sample".into()));
    }
    let cache = EncodeCache {
        generation: params.generation,
        x: x.clone(),
        h1,
        active,
        log_var: log_var.clone(),
        noise: noise.clone(),
    };
    Ok((LatentBatch { z, mean, log_var, noise }, cache))
}

/// Decoder logits (pre-softmax scores) for a batch of latent codes.
pub fn decode_logits(params: &ModelParams, z: &Matrix) -> Result<(Matrix, Matrix)> {
    if z.cols() != params.config.latent {
        return Err(Error::shape("decode", z.shape(), params.w(4).shape()));
    }
    if !z.is_finite() {
        return Err(Error::NonFinite("latent codes".into()));
    }
    let h3 = tanh_layer(z, params.w(4), params.b(5))?;
    let mut logits = matmul(&h3, params.w(6))?;
    logits.add_row_vector(params.b(7))?;
    Ok((logits, h3))
}

/// Item-probability rows `softmax(decoder(z))`.
pub fn decode(params: &ModelParams, z: &Matrix) -> Result<(Matrix, DecodeCache)> {
    let (logits, h3) = decode_logits(params, z)?;
    let probs = softmax_rows(&logits);
    let cache = DecodeCache {
        generation: params.generation,
        z: z.clone(),
        h3,
        probs: probs.clone(),
    };
    Ok((probs, cache))
}

/// Ranking scores for click rows: decoder logits at `z = mean`.
pub fn score_rows(params: &ModelParams, rows: &[&[usize]]) -> Result<Matrix> {
    let x = normalized_input(rows, params.num_items)?;
    let (lat, _) = encode(params, &x, Noise::Zero)?;
    Ok(decode_logits(params, &lat.mean)?.0)
}

fn tanh_backward(upstream: &Matrix, h: &Matrix) -> Matrix {
    let mut d = upstream.clone();
    for (dv, &hv) in d.data_mut().iter_mut().zip(h.data()) {
        *dv *= 1.0 - hv * hv;
    }
    d
}

fn bias_grad(d: &Matrix) -> Matrix {
    let s = d.column_sums();
    Matrix::from_vec(1, s.len(), s).expect("row vector")
}

/// Reverse-mode gradients of a scalar loss given its gradient with respect to
/// the decoded probabilities (`d_probs`) and, optionally, an additional
/// gradient with respect to the latent codes `z` (`d_z`).
pub fn backward(
    params: &ModelParams,
    enc: &EncodeCache,
    dec: &DecodeCache,
    d_probs: &Matrix,
    d_z: Option<&Matrix>,
) -> Result<ModelParams> {
    for (what, g) in [("encoder", enc.generation), ("decoder", dec.generation)] {
        if g != params.generation {
            return Err(Error::StaleCache(format!(
                "{what} cache from parameter generation {g}, parameters are at {}",
                params.generation
            )));
        }
    }
    if d_probs.shape() != dec.probs.shape() {
        return Err(Error::shape("backward", d_probs.shape(), dec.probs.shape()));
    }
    if dec.z.rows() != enc.x.rows() {
        return Err(Error::InvalidArgument("encoder and decoder caches cover different batches".into()));
    }
    let l = params.config.latent;
    let mut grads = ModelParams::zeros(params.num_items, params.config);

    // softmax: d_logit = p ⊙ (d_p − ⟨p, d_p⟩)
    let mut d_logits = d_probs.clone();
    for u in 0..d_logits.rows() {
        let p = dec.probs.row(u);
        let inner: f64 = p.iter().zip(d_probs.row(u)).map(|(a, b)| a * b).sum();
        for (dv, &pv) in d_logits.row_mut(u).iter_mut().zip(p) {
            *dv = pv * (*dv - inner);
        }
    }
    grads.tensors[6] = matmul_tn(&dec.h3, &d_logits)?;
    grads.tensors[7] = bias_grad(&d_logits);
    let d_a3 = tanh_backward(&matmul_nt(&d_logits, params.w(6))?, &dec.h3);
    grads.tensors[4] = matmul_tn(&dec.z, &d_a3)?;
    grads.tensors[5] = bias_grad(&d_a3);
    let mut dz = matmul_nt(&d_a3, params.w(4))?;
    if let Some(extra) = d_z {
        dz.add_assign(extra)?;
    }

    // z = mean + exp(½ log_var) ⊙ noise
    let b = dz.rows();
    let mut d_out = Matrix::zeros(b, 2 * l);
    for u in 0..b {
        for k in 0..l {
            let g = dz.get(u, k);
            d_out.set(u, k, g);
            if enc.active[u * l + k] {
                let s = 0.5 * (0.5 * enc.log_var.get(u, k)).exp() * enc.noise.get(u, k);
                d_out.set(u, l + k, g * s);
            }
        }
    }
    grads.tensors[2] = matmul_tn(&enc.h1, &d_out)?;
    grads.tensors[3] = bias_grad(&d_out);
    let d_a1 = tanh_backward(&matmul_nt(&d_out, params.w(2))?, &enc.h1);
    grads.tensors[0] = matmul_tn(&enc.x, &d_a1)?;
    grads.tensors[1] = bias_grad(&d_a1);
    Ok(grads)
}

/// Adaptive-moment optimizer over every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ModelParams::zeros(params.num_items, params.config),
            v: ModelParams::zeros(params.num_items, params.config),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.m) {
            return Err(Error::InvalidArgument("optimizer and parameter shapes differ".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for k in 0..8 {
            let g = grads.tensors[k].data();
            let m = self.m.tensors[k].data_mut();
            let v = self.v.tensors[k].data_mut();
            let p = params.tensors[k].data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        params.generation += 1;
        Ok(())
    }
}

/// Parameters plus the bookkeeping needed to resume or reproduce a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub seed: u64,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let p = &self.params;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [p.num_items as u64, p.config.hidden as u64, p.config.latent as u64, self.seed, self.epoch] {
            w.write_all(&v.to_le_bytes())?;
        }
        for t in &p.tensors {
            w.write_all(&(t.rows() as u64).to_le_bytes())?;
            w.write_all(&(t.cols() as u64).to_le_bytes())?;
            for v in t.data() {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let fmt = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| fmt("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt("not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| fmt("truncated header".into()))?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        let read_u64 = |r: &mut BufReader<std::fs::File>| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| fmt("truncated checkpoint".into()))?;
            Ok(u64::from_le_bytes(b))
        };
        let num_items = read_u64(&mut r)? as usize;
        let config = ModelConfig {
            hidden: read_u64(&mut r)? as usize,
            latent: read_u64(&mut r)? as usize,
        };
        let seed = read_u64(&mut r)?;
        let epoch = read_u64(&mut r)?;
        config.validate()?;
        let mut params = ModelParams::zeros(num_items, config);
        for k in 0..8 {
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            if (rows, cols) != params.tensors[k].shape() {
                return Err(fmt(format!(
                    "tensor {} has shape {rows}x{cols}, expected {:?}",
                    TENSOR_NAMES[k],
                    params.tensors[k].shape()
                )));
            }
            for v in params.tensors[k].data_mut() {
                *v = f64::from_bits(read_u64(&mut r)?);
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
            return Err(fmt("trailing bytes after last tensor".into()));
        }
        if !params.is_finite() {
            return Err(fmt("non-finite parameter".into()));
        }
        Ok(Checkpoint { params, seed, epoch })
    }
}
