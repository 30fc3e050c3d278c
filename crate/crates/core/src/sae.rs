//! Tied-weight sparse autoencoders over activation matrices.
//!
//! ```text
//! z = ReLU(W_e x + b_e)        x̂ = W_eᵀ z + b_d
//! L = mean_i ||x_i − x̂_i||² + λ Σ_j z̄_j ||w_j||
//! ```
//!
//! where `z̄_j` is neuron `j`'s mean activation over the batch and `w_j` is
//! its decoder direction (row `j` of `W_e`). Only `W_e` is stored, so the
//! decoder is its transpose by construction.
//!
//! Files are little-endian. An activation matrix is `SAEM`, u32 version,
//! u64 N, u64 D, N·D f32 values row-major, then a u64 byte length and a
//! JSON array of per-row records. A checkpoint is `SAEC`, u32 version,
//! u64 M, u64 D, W_e (M·D f64 row-major), b_e (M f64), b_d (D f64), then a
//! length-prefixed JSON trailer with the hyperparameters.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{fit_logistic, AnalyticsError, FitOptions};

const MATRIX_MAGIC: &[u8; 4] = b"SAEM";
const MODEL_MAGIC: &[u8; 4] = b"SAEC";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in activation matrix at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize },
    #[error("loss became non-finite at epoch {epoch}, step {step} (last finite loss {last_loss})")]
    NonFiniteLoss { epoch: usize, step: usize, last_loss: f64 },
    #[error("target has no variation")]
    DegenerateTarget,
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RowMeta {
    pub trial: usize,
    pub element: u32,
    pub layer: u32,
    pub run_id: String,
    /// Which token's hidden state the row holds, when the extractor says.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_position: Option<i64>,
}

/// N × D activations with one metadata record per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    meta: Vec<RowMeta>,
}

impl ActivationMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, meta: Vec<RowMeta>) -> Result<Self, SaeError> {
        if data.len() != rows * cols {
            return Err(SaeError::DimensionMismatch(format!("{} values for {rows} x {cols}", data.len())));
        }
        if meta.len() != rows {
            return Err(SaeError::DimensionMismatch(format!("{} metadata records for {rows} rows", meta.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(SaeError::NonFiniteInput { row: i / cols.max(1), col: i % cols.max(1) });
        }
        Ok(ActivationMatrix { rows, cols, data, meta })
    }

    /// Rows with default metadata.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, SaeError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SaeError::DimensionMismatch("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data, vec![RowMeta::default(); rows.len()])
    }

    pub fn from_matrix(m: &DMatrix<f64>, meta: Vec<RowMeta>) -> Result<Self, SaeError> {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter().map(|v| *v as f32));
        }
        Self::new(m.nrows(), m.ncols(), data, meta)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn meta(&self) -> &[RowMeta] {
        &self.meta
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.rows, self.cols, self.data.iter().map(|v| *v as f64))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), SaeError> {
        out.write_all(MATRIX_MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(self.rows as u64).to_le_bytes())?;
        out.write_all(&(self.cols as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        write_trailer(&mut out, &serde_json::to_vec(&self.meta)?)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, SaeError> {
        check_header(&mut input, MATRIX_MAGIC)?;
        let rows = read_u64(&mut input)? as usize;
        let cols = read_u64(&mut input)? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| SaeError::Format("matrix size overflows".into()))?;
        let mut bytes = vec![0u8; count * 4];
        input.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let meta: Vec<RowMeta> = serde_json::from_slice(&read_trailer(&mut input)?)?;
        Self::new(rows, cols, data, meta)
    }

    pub fn save(&self, path: &Path) -> Result<(), SaeError> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, SaeError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn write_trailer<W: Write>(out: &mut W, json: &[u8]) -> std::io::Result<()> {
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(json)
}

fn read_trailer<R: Read>(input: &mut R) -> Result<Vec<u8>, SaeError> {
    let len = read_u64(input)? as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    Ok(json)
}

fn check_header<R: Read>(input: &mut R, magic: &[u8; 4]) -> Result<(), SaeError> {
    let mut m = [0u8; 4];
    input.read_exact(&mut m)?;
    if &m != magic {
        return Err(SaeError::Format(format!("bad magic {:?}", String::from_utf8_lossy(&m))));
    }
    let mut v = [0u8; 4];
    input.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(SaeError::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64, SaeError> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f64>, SaeError> {
    let mut bytes = vec![0u8; n * 8];
    input.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaeHyper {
    /// Latent width; `None` uses the input width.
    #[serde(default)]
    pub latent: Option<usize>,
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Heavy-ball momentum coefficient; plain SGD when absent.
    #[serde(default)]
    pub momentum: Option<f64>,
    /// Reshuffle rows every epoch.
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SaeHyper {
    fn default() -> Self {
        SaeHyper { latent: None, lambda: 1e-6, lr: 1e-4, batch: 256, epochs: 10, seed: 0, momentum: None, shuffle: true }
    }
}

impl SaeHyper {
    fn validate(&self, n: usize, d: usize) -> Result<(), SaeError> {
        let bad = |m: String| Err(SaeError::InvalidHyper(m));
        if d == 0 {
            return bad("input has no columns".into());
        }
        if self.batch == 0 || n < self.batch {
            return bad(format!("need at least one full batch: {n} rows, batch {}", self.batch));
        }
        if self.latent == Some(0) {
            return bad("latent width must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lr must be positive and lambda non-negative".into());
        }
        if let Some(m) = self.momentum {
            if !(0.0..1.0).contains(&m) {
                return bad("momentum must lie in [0, 1)".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    /// M × D encoder weights; the decoder is the transpose.
    pub w_enc: DMatrix<f64>,
    pub b_enc: DVector<f64>,
    pub b_dec: DVector<f64>,
    pub lambda: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointTrailer {
    lambda: f64,
    #[serde(default)]
    hyper: Option<SaeHyper>,
}

impl SaeModel {
    pub fn latent_dim(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_enc.ncols()
    }

    /// D × M decoder weights.
    pub fn decoder_weights(&self) -> DMatrix<f64> {
        self.w_enc.transpose()
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<(), SaeError> {
        if x.ncols() != self.input_dim() {
            return Err(SaeError::DimensionMismatch(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn pre_activation(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut pre = x * self.w_enc.transpose();
        for mut row in pre.row_iter_mut() {
            row += self.b_enc.transpose();
        }
        pre
    }

    fn decode_unchecked(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = z * &self.w_enc;
        for mut row in out.row_iter_mut() {
            row += self.b_dec.transpose();
        }
        out
    }

    /// `ReLU(X W_eᵀ + b_e)`, one latent row per input row.
    pub fn encode(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, SaeError> {
        self.check_input(x)?;
        Ok(self.pre_activation(x).map(|v| v.max(0.0)))
    }

    pub fn decode(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>, SaeError> {
        if z.ncols() != self.latent_dim() {
            return Err(SaeError::DimensionMismatch(format!(
                "latent has {} columns, model has {}",
                z.ncols(),
                self.latent_dim()
            )));
        }
        Ok(self.decode_unchecked(z))
    }

    pub fn reconstruct(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, SaeError> {
        self.decode(&self.encode(x)?)
    }

    /// Objective over all rows of `x`.
    pub fn loss(&self, x: &DMatrix<f64>) -> Result<f64, SaeError> {
        let z = self.encode(x)?;
        let recon = self.decode_unchecked(&z);
        Ok(objective(self, x, &z, &recon))
    }

    /// Mean squared error per entry.
    pub fn reconstruction_mse(&self, x: &DMatrix<f64>) -> Result<f64, SaeError> {
        let r = self.reconstruct(x)? - x;
        Ok(r.norm_squared() / x.len() as f64)
    }

    pub fn write_to<W: Write>(&self, mut out: W, hyper: Option<SaeHyper>) -> Result<(), SaeError> {
        out.write_all(MODEL_MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(self.latent_dim() as u64).to_le_bytes())?;
        out.write_all(&(self.input_dim() as u64).to_le_bytes())?;
        let mut buf = Vec::new();
        for i in 0..self.latent_dim() {
            for v in self.w_enc.row(i).iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in self.b_enc.iter().chain(self.b_dec.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        write_trailer(&mut out, &serde_json::to_vec(&CheckpointTrailer { lambda: self.lambda, hyper })?)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<(Self, Option<SaeHyper>), SaeError> {
        check_header(&mut input, MODEL_MAGIC)?;
        let m = read_u64(&mut input)? as usize;
        let d = read_u64(&mut input)? as usize;
        let w = read_f64s(&mut input, m * d)?;
        let b_enc = read_f64s(&mut input, m)?;
        let b_dec = read_f64s(&mut input, d)?;
        let trailer: CheckpointTrailer = serde_json::from_slice(&read_trailer(&mut input)?)?;
        let model = SaeModel {
            w_enc: DMatrix::from_row_slice(m, d, &w),
            b_enc: DVector::from_vec(b_enc),
            b_dec: DVector::from_vec(b_dec),
            lambda: trailer.lambda,
        };
        Ok((model, trailer.hyper))
    }

    pub fn save(&self, path: &Path, hyper: Option<SaeHyper>) -> Result<(), SaeError> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?), hyper)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<SaeHyper>), SaeError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn objective(model: &SaeModel, x: &DMatrix<f64>, z: &DMatrix<f64>, recon: &DMatrix<f64>) -> f64 {
    let n = x.nrows() as f64;
    let recon_term = (recon - x).norm_squared() / n;
    if model.lambda == 0.0 {
        return recon_term;
    }
    let sparsity: f64 = (0..model.latent_dim())
        .map(|j| (z.column(j).sum() / n) * model.w_enc.row(j).norm())
        .sum();
    recon_term + model.lambda * sparsity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-data objective after each epoch.
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
    pub steps: usize,
    pub reconstruction_mse: f64,
    /// Neurons whose activation varies over the training data.
    pub live_neurons: usize,
    pub dead_neurons: usize,
}

/// Called after every parameter update with the step number.
pub trait TrainObserver {
    fn after_step(&mut self, step: usize, model: &SaeModel);
}

impl<F: FnMut(usize, &SaeModel)> TrainObserver for F {
    fn after_step(&mut self, step: usize, model: &SaeModel) {
        self(step, model)
    }
}

pub fn train_sae(x: &ActivationMatrix, hyper: &SaeHyper) -> Result<(SaeModel, TrainReport), SaeError> {
    train_sae_observed(x, hyper, &mut |_: usize, _: &SaeModel| {})
}

pub fn init_model(d: usize, m: usize, lambda: f64, mean: DVector<f64>, seed: u64) -> SaeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let w_enc = DMatrix::from_fn(m, d, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
    SaeModel { w_enc, b_enc: DVector::zeros(m), b_dec: mean, lambda }
}

/// Minibatch gradient descent on the objective above. Deterministic given
/// the seed.
pub fn train_sae_observed(
    x: &ActivationMatrix,
    hyper: &SaeHyper,
    observer: &mut dyn TrainObserver,
) -> Result<(SaeModel, TrainReport), SaeError> {
    let (n, d) = (x.rows(), x.cols());
    hyper.validate(n, d)?;
    let m = hyper.latent.unwrap_or(d);
    let data = x.to_matrix();
    let mean = DVector::from_iterator(d, data.column_iter().map(|c| c.sum() / n as f64));
    let mut model = init_model(d, m, hyper.lambda, mean, hyper.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    let mu = hyper.momentum.unwrap_or(0.0);
    let mut v_w = DMatrix::zeros(m, d);
    let mut v_be = DVector::zeros(m);
    let mut v_bd = DVector::zeros(d);
    let initial_loss = model.loss(&data)?;
    let mut last_loss = initial_loss;
    let mut loss_curve = Vec::with_capacity(hyper.epochs);
    let mut step = 0;
    for epoch in 0..hyper.epochs {
        if hyper.shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(hyper.batch) {
            let xb = data.select_rows(chunk);
            let (g_w, g_be, g_bd, batch_loss) = gradients(&model, &xb);
            if !batch_loss.is_finite() {
                return Err(SaeError::NonFiniteLoss { epoch, step, last_loss });
            }
            v_w = &v_w * mu + g_w;
            v_be = &v_be * mu + g_be;
            v_bd = &v_bd * mu + g_bd;
            model.w_enc -= &v_w * hyper.lr;
            model.b_enc -= &v_be * hyper.lr;
            model.b_dec -= &v_bd * hyper.lr;
            step += 1;
            observer.after_step(step, &model);
        }
        let loss = model.loss(&data)?;
        if !loss.is_finite() {
            return Err(SaeError::NonFiniteLoss { epoch, step, last_loss });
        }
        log::debug!("epoch {epoch}: loss {loss}");
        last_loss = loss;
        loss_curve.push(loss);
    }
    let z = model.encode(&data)?;
    let live = (0..m).filter(|j| column_variance(&z, *j) > 0.0).count();
    let report = TrainReport {
        loss_curve,
        initial_loss,
        steps: step,
        reconstruction_mse: model.reconstruction_mse(&data)?,
        live_neurons: live,
        dead_neurons: m - live,
    };
    Ok((model, report))
}

/// Gradients of the batch objective with respect to W_e, b_e and b_d.
fn gradients(model: &SaeModel, xb: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, f64) {
    let b = xb.nrows() as f64;
    let pre = model.pre_activation(xb);
    let z = pre.map(|v| v.max(0.0));
    let recon = model.decode_unchecked(&z);
    let loss = objective(model, xb, &z, &recon);
    let r = recon - xb;
    let g_bd = DVector::from_iterator(r.ncols(), r.column_iter().map(|c| 2.0 * c.sum() / b));
    let norms: Vec<f64> = model.w_enc.row_iter().map(|w| w.norm()).collect();
    // dL/dz through the decoder, plus the sparsity term
    let mut g_z = (&r * model.w_enc.transpose()) * (2.0 / b);
    for (j, mut col) in g_z.column_iter_mut().enumerate() {
        col.add_scalar_mut(model.lambda * norms[j] / b);
    }
    g_z.zip_apply(&pre, |g, p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let mut g_w = z.transpose() * &r * (2.0 / b) + g_z.transpose() * xb;
    if model.lambda > 0.0 {
        for j in 0..model.latent_dim() {
            if norms[j] > 0.0 {
                let zbar = z.column(j).sum() / b;
                let w = model.w_enc.row(j) * (model.lambda * zbar / norms[j]);
                let mut row = g_w.row_mut(j);
                row += w;
            }
        }
    }
    let g_be = DVector::from_iterator(g_z.ncols(), g_z.column_iter().map(|c| c.sum()));
    (g_w, g_be, g_bd, loss)
}

fn column_variance(m: &DMatrix<f64>, j: usize) -> f64 {
    let col = m.column(j);
    let n = col.len() as f64;
    let mean = col.sum() / n;
    col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeStatistic {
    Pearson,
    LogisticBeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronNote {
    pub neuron: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub kind: ProbeStatistic,
    pub statistic: Vec<f64>,
    /// Neuron with the largest |statistic|; first one on ties.
    pub best_neuron: usize,
    pub best_value: f64,
    pub layer: u32,
    /// Per-neuron solver problems (separation, singular fits).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<NeuronNote>,
}

impl ProbeResult {
    fn from_statistic(kind: ProbeStatistic, statistic: Vec<f64>, notes: Vec<NeuronNote>) -> Self {
        let mut best = 0;
        for (j, v) in statistic.iter().enumerate() {
            if v.abs() > statistic[best].abs() {
                best = j;
            }
        }
        let best_value = statistic.get(best).copied().unwrap_or(0.0);
        ProbeResult { kind, statistic, best_neuron: best, best_value, layer: 0, notes }
    }

    pub fn with_layer(mut self, layer: u32) -> Self {
        self.layer = layer;
        self
    }
}

/// Pearson correlation of every latent column with `y` (two-pass); zero
/// for constant columns.
pub fn neuron_correlation(z: &DMatrix<f64>, y: &[f64]) -> Result<ProbeResult, SaeError> {
    if y.len() != z.nrows() {
        return Err(SaeError::DimensionMismatch(format!("{} targets for {} rows", y.len(), z.nrows())));
    }
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if !(syy > 0.0) {
        return Err(SaeError::DegenerateTarget);
    }
    let stat = z
        .column_iter()
        .map(|col| {
            let mx = col.sum() / n;
            let (mut sxy, mut sxx) = (0.0, 0.0);
            for (x, t) in col.iter().zip(y) {
                sxy += (x - mx) * (t - my);
                sxx += (x - mx) * (x - mx);
            }
            if sxx > 0.0 {
                sxy / (sxx * syy).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Ok(ProbeResult::from_statistic(ProbeStatistic::Pearson, stat, Vec::new()))
}

/// Univariate logistic fit of `chosen` on each z-scored latent column.
/// Constant columns get beta 0. Separated fits keep their last iterate;
/// other failures give 0. Both are noted per neuron.
pub fn neuron_choice_beta(z: &DMatrix<f64>, chosen: &[bool]) -> Result<ProbeResult, SaeError> {
    if chosen.len() != z.nrows() {
        return Err(SaeError::DimensionMismatch(format!("{} labels for {} rows", chosen.len(), z.nrows())));
    }
    let pos = chosen.iter().filter(|c| **c).count();
    if pos == 0 || pos == chosen.len() {
        return Err(SaeError::DegenerateTarget);
    }
    let n = z.nrows();
    let results: Vec<(f64, Option<String>)> = (0..z.ncols())
        .into_par_iter()
        .map(|j| {
            let col = z.column(j);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
            if !(var > 0.0) {
                return (0.0, None);
            }
            let sd = var.sqrt();
            let x = DMatrix::from_iterator(n, 1, col.iter().map(|v| (v - mean) / sd));
            match fit_logistic(&x, &["neuron"], chosen, FitOptions::default()) {
                Ok(r) => (r.coefficient("neuron").unwrap_or(0.0), None),
                Err(AnalyticsError::SeparationDetected(partial)) => {
                    (partial.coefficient("neuron").unwrap_or(0.0), Some("separation".to_string()))
                }
                Err(e) => (0.0, Some(e.to_string())),
            }
        })
        .collect();
    let notes = results
        .iter()
        .enumerate()
        .filter_map(|(j, (_, note))| note.clone().map(|detail| NeuronNote { neuron: j, detail }))
        .collect();
    let stat = results.into_iter().map(|(b, _)| b).collect();
    Ok(ProbeResult::from_statistic(ProbeStatistic::LogisticBeta, stat, notes))
}

/// Scales one latent neuron before decoding (`factor = 0` ablates it).
/// The result keeps the input's metadata.
pub fn intervene(model: &SaeModel, x: &ActivationMatrix, neuron: usize, factor: f64) -> Result<ActivationMatrix, SaeError> {
    if neuron >= model.latent_dim() {
        return Err(SaeError::DimensionMismatch(format!("neuron {neuron} of {}", model.latent_dim())));
    }
    if !(factor >= 0.0 && factor.is_finite()) {
        return Err(SaeError::InvalidHyper(format!("intervention factor must be finite and >= 0, got {factor}")));
    }
    let mut z = model.encode(&x.to_matrix())?;
    z.column_mut(neuron).scale_mut(factor);
    let out = model.decode_unchecked(&z);
    ActivationMatrix::from_matrix(&out, x.meta().to_vec())
}

/// Reconstruction through the model as a new activation matrix.
pub fn reconstruct_matrix(model: &SaeModel, x: &ActivationMatrix) -> Result<ActivationMatrix, SaeError> {
    let out = model.reconstruct(&x.to_matrix())?;
    ActivationMatrix::from_matrix(&out, x.meta().to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProbeTarget {
    Continuous(Vec<f64>),
    Choice(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    pub layer: u32,
    pub report: TrainReport,
    pub probes: BTreeMap<String, ProbeResult>,
}

/// Trains one SAE per layer (concurrently) and probes every target on its
/// latents. Rows come back ordered by layer.
pub fn layer_sweep(
    matrices: &BTreeMap<u32, ActivationMatrix>,
    targets: &BTreeMap<String, ProbeTarget>,
    hyper: &SaeHyper,
) -> Result<Vec<LayerProbe>, SaeError> {
    if matrices.is_empty() {
        return Err(SaeError::DimensionMismatch("no layers".into()));
    }
    let layers: Vec<(&u32, &ActivationMatrix)> = matrices.iter().collect();
    layers
        .par_iter()
        .map(|(layer, x)| {
            let (model, report) = train_sae(x, hyper)?;
            let z = model.encode(&x.to_matrix())?;
            let mut probes = BTreeMap::new();
            for (name, target) in targets {
                let probe = match target {
                    ProbeTarget::Continuous(y) => neuron_correlation(&z, y)?,
                    ProbeTarget::Choice(c) => neuron_choice_beta(&z, c)?,
                };
                probes.insert(name.clone(), probe.with_layer(**layer));
            }
            Ok(LayerProbe { layer: **layer, report, probes })
        })
        .collect()
}

/// Per target, the best |statistic| of each layer in layer order.
pub fn sweep_profile(rows: &[LayerProbe]) -> BTreeMap<String, Vec<(u32, f64)>> {
    let mut profile: BTreeMap<String, Vec<(u32, f64)>> = BTreeMap::new();
    for row in rows {
        for (name, p) in &row.probes {
            profile.entry(name.clone()).or_default().push((row.layer, p.best_value.abs()));
        }
    }
    profile
}

/// Sparse non-negative mixtures of `k` orthogonal non-negative directions
/// (disjoint coordinate blocks) in `d` dimensions. Returns the matrix and
/// the per-row feature coefficients (N × k).
pub fn planted_features(n: usize, d: usize, k: usize, active_prob: f64, seed: u64) -> (ActivationMatrix, DMatrix<f64>) {
    assert!(k >= 1 && d >= k, "need at least one coordinate per feature");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = d / k;
    let mut dirs = DMatrix::zeros(k, d);
    for f in 0..k {
        let w = 1.0 / (block as f64).sqrt();
        for c in f * block..(f + 1) * block {
            dirs[(f, c)] = w;
        }
    }
    let coef = DMatrix::from_fn(n, k, |_, _| {
        if rng.random_bool(active_prob) {
            rng.random_range(0.5..1.5)
        } else {
            0.0
        }
    });
    let x = &coef * &dirs;
    let meta = (0..n).map(|i| RowMeta { trial: i, ..RowMeta::default() }).collect();
    (ActivationMatrix::from_matrix(&x, meta).expect("finite"), coef)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model(d: usize) -> SaeModel {
        SaeModel { w_enc: DMatrix::identity(d, d), b_enc: DVector::zeros(d), b_dec: DVector::zeros(d), lambda: 0.0 }
    }

    #[test]
    fn encode_examples() {
        let m = identity_model(3);
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.5, 0.0, 0.0, 0.0]);
        assert_eq!(m.encode(&x).unwrap(), x);
        let mut dead = identity_model(3);
        dead.b_enc.fill(-1e6);
        assert!(dead.encode(&x).unwrap().iter().all(|v| *v == 0.0));
        assert!(matches!(m.encode(&DMatrix::zeros(1, 4)), Err(SaeError::DimensionMismatch(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (x, _) = planted_features(20, 6, 3, 0.5, 4);
        let xm = x.to_matrix();
        let mut model = init_model(6, 4, 0.3, DVector::zeros(6), 9);
        model.b_enc.fill(0.05);
        let (g_w, g_be, g_bd, _) = gradients(&model, &xm);
        let h = 1e-6;
        let numeric = |f: &dyn Fn(&mut SaeModel)| {
            let mut plus = model.clone();
            f(&mut plus);
            (plus.loss(&xm).unwrap() - model.loss(&xm).unwrap()) / h
        };
        for (i, j) in [(0, 0), (1, 3), (3, 5), (2, 2)] {
            let g = numeric(&|m: &mut SaeModel| m.w_enc[(i, j)] += h);
            assert!((g - g_w[(i, j)]).abs() < 1e-4, "w[{i},{j}]: {g} vs {}", g_w[(i, j)]);
        }
        for j in 0..4 {
            let g = numeric(&|m: &mut SaeModel| m.b_enc[j] += h);
            assert!((g - g_be[j]).abs() < 1e-4);
        }
        for k in 0..6 {
            let g = numeric(&|m: &mut SaeModel| m.b_dec[k] += h);
            assert!((g - g_bd[k]).abs() < 1e-4);
        }
    }

    #[test]
    fn full_batch_loss_never_increases_without_penalty() {
        let (x, _) = planted_features(64, 8, 4, 0.4, 1);
        let hyper = SaeHyper { lambda: 0.0, lr: 0.01, batch: 64, epochs: 40, shuffle: false, ..SaeHyper::default() };
        let (_, report) = train_sae(&x, &hyper).unwrap();
        let mut prev = report.initial_loss;
        for l in &report.loss_curve {
            assert!(*l <= prev + 1e-9, "{l} > {prev}");
            prev = *l;
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (x, _) = planted_features(100, 8, 2, 0.5, 2);
        let hyper = SaeHyper { lr: 0.01, batch: 10, epochs: 3, ..SaeHyper::default() };
        assert_eq!(train_sae(&x, &hyper).unwrap().0, train_sae(&x, &hyper).unwrap().0);
    }

    #[test]
    fn divergence_is_reported() {
        let (x, _) = planted_features(32, 4, 2, 0.5, 3);
        let hyper = SaeHyper { lr: 1e6, batch: 32, epochs: 50, ..SaeHyper::default() };
        assert!(matches!(train_sae(&x, &hyper), Err(SaeError::NonFiniteLoss { .. })));
    }

    #[test]
    fn rejects_bad_hyper() {
        let (x, _) = planted_features(10, 4, 2, 0.5, 3);
        let hyper = SaeHyper { batch: 11, ..SaeHyper::default() };
        assert!(matches!(train_sae(&x, &hyper), Err(SaeError::InvalidHyper(_))));
    }

    #[test]
    fn matrix_round_trip() {
        let meta = vec![
            RowMeta { trial: 1, element: 4, layer: 2, run_id: "a".into(), token_position: Some(-1) },
            RowMeta { trial: 2, element: 0, layer: 2, run_id: "a".into(), token_position: None },
        ];
        let x = ActivationMatrix::new(2, 3, vec![1.0, -2.0, 0.5, 3.25, 0.0, 1e-7], meta).unwrap();
        let mut buf = Vec::new();
        x.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SAEM");
        assert_eq!(ActivationMatrix::read_from(buf.as_slice()).unwrap(), x);
        buf[0] = b'X';
        assert!(matches!(ActivationMatrix::read_from(buf.as_slice()), Err(SaeError::Format(_))));
    }

    #[test]
    fn non_finite_input_rejected() {
        let r = ActivationMatrix::new(1, 2, vec![1.0, f32::NAN], vec![RowMeta::default()]);
        assert!(matches!(r, Err(SaeError::NonFiniteInput { row: 0, col: 1 })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = init_model(5, 3, 0.1, DVector::from_element(5, 0.25), 7);
        let mut buf = Vec::new();
        model.write_to(&mut buf, Some(SaeHyper::default())).unwrap();
        let (back, hyper) = SaeModel::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        assert_eq!(hyper, Some(SaeHyper::default()));
    }

    #[test]
    fn correlation_picks_identical_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let z = DMatrix::from_fn(200, 5, |i, j| if j == 3 { y[i] } else { rng.random::<f64>() });
        let p = neuron_correlation(&z, &y).unwrap();
        assert_eq!(p.best_neuron, 3);
        assert!((p.best_value - 1.0).abs() < 1e-12);
        assert!(matches!(neuron_correlation(&z, &vec![1.0; 200]), Err(SaeError::DegenerateTarget)));
    }

    #[test]
    fn choice_beta_planted_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chosen: Vec<bool> = (0..300).map(|i| i % 2 == 0).collect();
        let z = DMatrix::from_fn(300, 4, |i, j| {
            let noise: f64 = rng.sample(StandardNormal);
            if j == 2 {
                10.0 * (if chosen[i] { 0.5 } else { -0.5 }) + 0.1 * noise
            } else {
                noise.abs()
            }
        });
        let p = neuron_choice_beta(&z, &chosen).unwrap();
        assert_eq!(p.best_neuron, 2);
        assert!(p.best_value > 0.0);
        let flat = neuron_choice_beta(&DMatrix::from_element(300, 3, 0.7), &chosen).unwrap();
        assert!(flat.statistic.iter().all(|b| *b == 0.0));
        assert!(matches!(neuron_choice_beta(&z, &vec![true; 300]), Err(SaeError::DegenerateTarget)));
    }

    #[test]
    fn intervention_identity_and_dead_neuron() {
        let (x, _) = planted_features(50, 8, 4, 0.5, 5);
        let mut model = init_model(8, 8, 0.0, DVector::zeros(8), 3);
        model.b_enc[6] = -1e6;
        let plain = reconstruct_matrix(&model, &x).unwrap();
        assert_eq!(intervene(&model, &x, 1, 1.0).unwrap(), plain);
        assert_eq!(intervene(&model, &x, 6, 0.0).unwrap(), plain);
        assert_eq!(intervene(&model, &x, 6, 0.0).unwrap().meta(), x.meta());
        assert!(intervene(&model, &x, 8, 0.0).is_err());
    }
}
