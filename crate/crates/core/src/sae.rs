//! Stacked autoencoder with one affine reconstruction head per encoder
//! layer, trained jointly so every exit has a usable reconstruction.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::clipping::ModelView;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::stats::nearest_rank_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Activation {
    Relu,
}

/// Hyperparameters; widths exclude the input layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaeConfig {
    pub input_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl SaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidParam("input_dim must be >= 1".into()));
        }
        if self.encoder_widths.is_empty() {
            return Err(Error::InvalidParam("need at least one encoder layer".into()));
        }
        if self.encoder_widths.iter().any(|w| *w == 0) {
            return Err(Error::InvalidParam("encoder widths must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParam("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) && self.learning_rate != 0.0 {
            return Err(Error::InvalidParam(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParam(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.encoder_widths.len()
    }
}

/// Layer dimensions only; what masks, storage and op counting key on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaeShape {
    pub input_dim: usize,
    pub widths: Vec<usize>,
}

impl SaeShape {
    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }

    /// Exit count equals the layer count; the last exit is the full path.
    pub fn num_exits(&self) -> usize {
        self.widths.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vector,
}

/// Encoder stack, mirrored decoder, and one affine head per early exit.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    pub config: SaeConfig,
    /// encoder[i]: widths[i-1] (or input_dim) -> widths[i]
    pub encoder: Vec<Layer>,
    /// decoder[j]: widths[L-1-j] -> widths[L-2-j] (input_dim for the last)
    pub decoder: Vec<Layer>,
    /// heads[i]: widths[i] -> input_dim, for exits 1..L-1
    pub heads: Vec<Layer>,
}

impl SaeModel {
    pub fn shape(&self) -> SaeShape {
        SaeShape {
            input_dim: self.config.input_dim,
            widths: self.config.encoder_widths.clone(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.encoder.len()
    }

    pub fn num_exits(&self) -> usize {
        self.encoder.len()
    }

    pub fn validate_shapes(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let l = cfg.num_layers();
        if self.encoder.len() != l || self.decoder.len() != l || self.heads.len() != l - 1 {
            return Err(Error::DimensionMismatch(format!(
                "layer counts (enc {}, dec {}, heads {}) do not match config L={l}",
                self.encoder.len(),
                self.decoder.len(),
                self.heads.len()
            )));
        }
        for (i, layer) in self.encoder.iter().enumerate() {
            let in_dim = if i == 0 { cfg.input_dim } else { cfg.encoder_widths[i - 1] };
            let out_dim = cfg.encoder_widths[i];
            check_layer(layer, out_dim, in_dim, &format!("encoder[{i}]"))?;
        }
        for (j, layer) in self.decoder.iter().enumerate() {
            let in_dim = cfg.encoder_widths[l - 1 - j];
            let out_dim = if j == l - 1 { cfg.input_dim } else { cfg.encoder_widths[l - 2 - j] };
            check_layer(layer, out_dim, in_dim, &format!("decoder[{j}]"))?;
        }
        for (i, layer) in self.heads.iter().enumerate() {
            check_layer(layer, cfg.input_dim, cfg.encoder_widths[i], &format!("heads[{i}]"))?;
        }
        Ok(())
    }

    pub fn total_params(&self) -> usize {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .chain(&self.heads)
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }
}

fn check_layer(layer: &Layer, rows: usize, cols: usize, what: &str) -> Result<()> {
    if layer.weight.rows() != rows || layer.weight.cols() != cols || layer.bias.len() != rows {
        return Err(Error::DimensionMismatch(format!(
            "{what}: expected {rows}x{cols} (+bias {rows}), got {}x{} (+bias {})",
            layer.weight.rows(),
            layer.weight.cols(),
            layer.bias.len()
        )));
    }
    if !layer.weight.data().iter().all(|v| v.is_finite())
        || !layer.bias.data().iter().all(|v| v.is_finite())
    {
        return Err(Error::NonFinite(format!("{what} parameters")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub wall_time_s: f64,
}

fn glorot_layer(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Layer {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let weight = Matrix::from_fn(out_dim, in_dim, |_, _| rng.gen_range(-limit..limit));
    Layer {
        weight,
        bias: Vector::zeros(out_dim),
    }
}

/// Uniform ±sqrt(6/(fan_in+fan_out)) weights, zero biases; deterministic per
/// config seed.
pub fn init_model(cfg: &SaeConfig) -> Result<SaeModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = cfg.num_layers();
    let mut encoder = Vec::with_capacity(l);
    for i in 0..l {
        let in_dim = if i == 0 { cfg.input_dim } else { cfg.encoder_widths[i - 1] };
        encoder.push(glorot_layer(&mut rng, cfg.encoder_widths[i], in_dim));
    }
    let mut decoder = Vec::with_capacity(l);
    for j in 0..l {
        let in_dim = cfg.encoder_widths[l - 1 - j];
        let out_dim = if j == l - 1 { cfg.input_dim } else { cfg.encoder_widths[l - 2 - j] };
        decoder.push(glorot_layer(&mut rng, out_dim, in_dim));
    }
    let mut heads = Vec::with_capacity(l.saturating_sub(1));
    for i in 0..l - 1 {
        heads.push(glorot_layer(&mut rng, cfg.input_dim, cfg.encoder_widths[i]));
    }
    let model = SaeModel {
        config: cfg.clone(),
        encoder,
        decoder,
        heads,
    };
    model.validate_shapes()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Per-tensor gradient buffers matching a model's parameter layout.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub encoder: Vec<(Matrix, Vector)>,
    pub decoder: Vec<(Matrix, Vector)>,
    pub heads: Vec<(Matrix, Vector)>,
}

impl GradientSet {
    pub fn zeros_like(model: &SaeModel) -> Self {
        let zero = |l: &Layer| {
            (
                Matrix::zeros(l.weight.rows(), l.weight.cols()),
                Vector::zeros(l.bias.len()),
            )
        };
        Self {
            encoder: model.encoder.iter().map(zero).collect(),
            decoder: model.decoder.iter().map(zero).collect(),
            heads: model.heads.iter().map(zero).collect(),
        }
    }

    fn scale(&mut self, s: f64) {
        let all = self
            .encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .chain(self.heads.iter_mut());
        for (w, b) in all {
            for v in w.data_mut() {
                *v *= s;
            }
            for v in b.data_mut() {
                *v *= s;
            }
        }
    }
}

fn affine(layer: &Layer, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layer.weight.rows());
    for r in 0..layer.weight.rows() {
        out.push(crate::linalg::dot(layer.weight.row(r), x) + layer.bias[r]);
    }
    out
}

fn relu(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn mse(x: &[f64], r: &[f64]) -> f64 {
    x.iter()
        .zip(r)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum::<f64>()
        / x.len() as f64
}

/// Forward + backward for one sample; accumulates into `grads` and returns
/// the sample's summed-over-exits loss.
fn accumulate_sample(model: &SaeModel, x: &[f64], grads: &mut GradientSet) -> f64 {
    let l = model.num_layers();
    let dim = model.config.input_dim;

    // forward, keeping pre-activations for relu'
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(l);
    let mut act: Vec<Vec<f64>> = Vec::with_capacity(l);
    for i in 0..l {
        let input: &[f64] = if i == 0 { x } else { &act[i - 1] };
        let z = affine(&model.encoder[i], input);
        let mut a = z.clone();
        relu(&mut a);
        pre.push(z);
        act.push(a);
    }
    let mut dec_pre: Vec<Vec<f64>> = Vec::with_capacity(l);
    let mut dec_in: Vec<Vec<f64>> = Vec::with_capacity(l);
    let mut cur = act[l - 1].clone();
    for j in 0..l {
        dec_in.push(cur.clone());
        let u = affine(&model.decoder[j], &cur);
        if j < l - 1 {
            let mut a = u.clone();
            relu(&mut a);
            dec_pre.push(u);
            cur = a;
        } else {
            dec_pre.push(u.clone());
            cur = u;
        }
    }
    let final_recon = cur;

    let mut loss = mse(x, &final_recon);

    // per-encoder-layer accumulated gradient wrt activation
    let mut g_act: Vec<Vec<f64>> = (0..l).map(|i| vec![0.0; act[i].len()]).collect();

    // exit heads
    for (i, head) in model.heads.iter().enumerate() {
        let r = affine(head, &act[i]);
        loss += mse(x, &r);
        let g_r: Vec<f64> = r
            .iter()
            .zip(x)
            .map(|(ri, xi)| 2.0 * (ri - xi) / dim as f64)
            .collect();
        let (gw, gb) = &mut grads.heads[i];
        add_outer(gw, &g_r, &act[i]);
        add_vec(gb, &g_r);
        add_transposed_mat_vec(&head.weight, &g_r, &mut g_act[i]);
    }

    // decoder chain
    let mut g_u: Vec<f64> = final_recon
        .iter()
        .zip(x)
        .map(|(ri, xi)| 2.0 * (ri - xi) / dim as f64)
        .collect();
    for j in (0..l).rev() {
        let (gw, gb) = &mut grads.decoder[j];
        add_outer(gw, &g_u, &dec_in[j]);
        add_vec(gb, &g_u);
        let mut g_in = vec![0.0; dec_in[j].len()];
        add_transposed_mat_vec(&model.decoder[j].weight, &g_u, &mut g_in);
        if j == 0 {
            add_vec_slice(&mut g_act[l - 1], &g_in);
        } else {
            // g_in is the gradient at relu(dec_pre[j-1])
            for (g, z) in g_in.iter_mut().zip(&dec_pre[j - 1]) {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
            g_u = g_in;
        }
    }

    // encoder chain
    for i in (0..l).rev() {
        let mut g_z = g_act[i].clone();
        for (g, z) in g_z.iter_mut().zip(&pre[i]) {
            if *z <= 0.0 {
                *g = 0.0;
            }
        }
        let input: &[f64] = if i == 0 { x } else { &act[i - 1] };
        let (gw, gb) = &mut grads.encoder[i];
        add_outer(gw, &g_z, input);
        add_vec(gb, &g_z);
        if i > 0 {
            let mut g_prev = vec![0.0; act[i - 1].len()];
            add_transposed_mat_vec(&model.encoder[i].weight, &g_z, &mut g_prev);
            add_vec_slice(&mut g_act[i - 1], &g_prev);
        }
    }

    loss
}

fn add_outer(m: &mut Matrix, rows: &[f64], cols: &[f64]) {
    for (r, rv) in rows.iter().enumerate() {
        let row = m.row_mut(r);
        for (c, cv) in cols.iter().enumerate() {
            row[c] += rv * cv;
        }
    }
}

fn add_vec(v: &mut Vector, add: &[f64]) {
    for (a, b) in v.data_mut().iter_mut().zip(add) {
        *a += b;
    }
}

fn add_vec_slice(v: &mut [f64], add: &[f64]) {
    for (a, b) in v.iter_mut().zip(add) {
        *a += b;
    }
}

/// out += Wᵀ·g
fn add_transposed_mat_vec(w: &Matrix, g: &[f64], out: &mut [f64]) {
    for (r, gv) in g.iter().enumerate() {
        if *gv == 0.0 {
            continue;
        }
        let row = w.row(r);
        for (c, o) in out.iter_mut().enumerate() {
            *o += row[c] * gv;
        }
    }
}

/// Mean per-sample loss (sum over exits of per-exit reconstruction MSE).
pub fn joint_loss(model: &SaeModel, d: &Dataset) -> Result<f64> {
    check_dims(model, d)?;
    let mut grads = GradientSet::zeros_like(model); // discarded
    let mut total = 0.0;
    for i in 0..d.len() {
        total += accumulate_sample(model, d.row(i), &mut grads);
    }
    Ok(total / d.len() as f64)
}

/// Mean loss and its analytic gradients over a whole dataset.
pub fn joint_loss_gradients(model: &SaeModel, d: &Dataset) -> Result<(f64, GradientSet)> {
    check_dims(model, d)?;
    let mut grads = GradientSet::zeros_like(model);
    let mut total = 0.0;
    for i in 0..d.len() {
        total += accumulate_sample(model, d.row(i), &mut grads);
    }
    grads.scale(1.0 / d.len() as f64);
    Ok((total / d.len() as f64, grads))
}

fn check_dims(model: &SaeModel, d: &Dataset) -> Result<()> {
    if d.dims() != model.config.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} features, dataset has {}",
            model.config.input_dim,
            d.dims()
        )));
    }
    Ok(())
}

/// Seeded mini-batch gradient descent with momentum on the joint multi-exit
/// loss; only normal-labeled rows are used.
pub fn train(model: &mut SaeModel, normals: &Dataset) -> Result<TrainReport> {
    check_dims(model, normals)?;
    let train_set = normals.normals_only();
    if train_set.is_empty() {
        return Err(Error::InvalidParam(
            "training set has no normal-labeled rows".into(),
        ));
    }
    let cfg = model.config.clone();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut velocity = GradientSet::zeros_like(model);
    let n = train_set.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in indices.chunks(cfg.batch_size).enumerate() {
            let mut grads = GradientSet::zeros_like(model);
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += accumulate_sample(model, train_set.row(i), &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_no,
                    loss: batch_loss,
                });
            }
            grads.scale(1.0 / batch.len() as f64);
            apply_momentum_step(model, &mut velocity, &grads, &cfg);
            epoch_loss += batch_loss;
        }
        epoch_losses.push(epoch_loss / n as f64);
    }

    model.validate_shapes()?;
    let final_loss = *epoch_losses.last().expect("epochs >= 1");
    Ok(TrainReport {
        epoch_losses,
        final_loss,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn apply_momentum_step(
    model: &mut SaeModel,
    velocity: &mut GradientSet,
    grads: &GradientSet,
    cfg: &SaeConfig,
) {
    let update = |layer: &mut Layer, vel: &mut (Matrix, Vector), grad: &(Matrix, Vector)| {
        for ((w, v), g) in layer
            .weight
            .data_mut()
            .iter_mut()
            .zip(vel.0.data_mut())
            .zip(grad.0.data())
        {
            *v = cfg.momentum * *v - cfg.learning_rate * g;
            *w += *v;
        }
        for ((w, v), g) in layer
            .bias
            .data_mut()
            .iter_mut()
            .zip(vel.1.data_mut())
            .zip(grad.1.data())
        {
            *v = cfg.momentum * *v - cfg.learning_rate * g;
            *w += *v;
        }
    };
    for (i, layer) in model.encoder.iter_mut().enumerate() {
        update(layer, &mut velocity.encoder[i], &grads.encoder[i]);
    }
    for (j, layer) in model.decoder.iter_mut().enumerate() {
        update(layer, &mut velocity.decoder[j], &grads.decoder[j]);
    }
    for (i, layer) in model.heads.iter_mut().enumerate() {
        update(layer, &mut velocity.heads[i], &grads.heads[i]);
    }
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Per-sample MSE at the given exit (1-based; L is the full path).
pub fn reconstruction_errors(model: &SaeModel, d: &Dataset, exit: usize) -> Result<Vector> {
    ModelView::unmasked(model).reconstruction_errors(d, exit)
}

/// Nearest-rank quantile q of final-exit errors over normal-labeled rows.
pub fn calibrate_final_threshold(model: &SaeModel, normals: &Dataset, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidParam(format!("q must be in (0,1), got {q}")));
    }
    let calib = normals.normals_only();
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let errors = reconstruction_errors(model, &calib, model.num_exits())?;
    let mut sorted = errors.data().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(nearest_rank_quantile(&sorted, q))
}

/// Label 1 iff the final-exit error strictly exceeds the threshold.
pub fn classify(model: &SaeModel, d: &Dataset, threshold: f64) -> Result<Vec<u8>> {
    let errors = reconstruction_errors(model, d, model.num_exits())?;
    Ok(errors
        .data()
        .iter()
        .map(|e| if *e > threshold { 1 } else { 0 })
        .collect())
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: [u8; 4] = *b"MOSM";
const CHECKPOINT_VERSION: u8 = 1;

/// Writes magic, version, config, then every matrix in declaration order
/// (encoder, decoder, heads; weight then bias), each as u32 row/col counts
/// followed by little-endian f64 values.
pub fn save_model(model: &SaeModel, path: &Path) -> Result<()> {
    model.validate_shapes()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    let cfg = &model.config;
    buf.extend_from_slice(&(cfg.input_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.encoder_widths.len() as u32).to_le_bytes());
    for w in &cfg.encoder_widths {
        buf.extend_from_slice(&(*w as u32).to_le_bytes());
    }
    buf.push(match cfg.activation {
        Activation::Relu => 0,
    });
    buf.extend_from_slice(&(cfg.epochs as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.batch_size as u32).to_le_bytes());
    buf.extend_from_slice(&cfg.learning_rate.to_le_bytes());
    buf.extend_from_slice(&cfg.momentum.to_le_bytes());
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    for layer in model.encoder.iter().chain(&model.decoder).chain(&model.heads) {
        write_matrix(&mut buf, &layer.weight);
        write_bias(&mut buf, &layer.bias);
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_bias(buf: &mut Vec<u8>, b: &Vector) {
    buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
    buf.extend_from_slice(&1u32.to_le_bytes());
    for v in b.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: self.pos + n - self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_model(path: &Path) -> Result<SaeModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    load_model_bytes(&bytes)
}

pub fn load_model_bytes(bytes: &[u8]) -> Result<SaeModel> {
    let mut r = ByteReader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let input_dim = r.u32()? as usize;
    let l = r.u32()? as usize;
    let mut widths = Vec::with_capacity(l);
    for _ in 0..l {
        widths.push(r.u32()? as usize);
    }
    let activation = match r.u8()? {
        0 => Activation::Relu,
        a => return Err(Error::InvalidParam(format!("unknown activation code {a}"))),
    };
    let epochs = r.u32()? as usize;
    let batch_size = r.u32()? as usize;
    let learning_rate = r.f64()?;
    let momentum = r.f64()?;
    let seed = r.u64()?;
    let config = SaeConfig {
        input_dim,
        encoder_widths: widths,
        activation,
        epochs,
        batch_size,
        learning_rate,
        momentum,
        seed,
    };

    let read_layer = |r: &mut ByteReader| -> Result<Layer> {
        let weight = read_matrix(r)?;
        let bias = read_matrix(r)?;
        if bias.cols() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "bias stored as {}x{}, expected a column",
                bias.rows(),
                bias.cols()
            )));
        }
        Ok(Layer {
            weight,
            bias: Vector::new(bias.data().to_vec())?,
        })
    };
    let mut encoder = Vec::with_capacity(l);
    for _ in 0..l {
        encoder.push(read_layer(&mut r)?);
    }
    let mut decoder = Vec::with_capacity(l);
    for _ in 0..l {
        decoder.push(read_layer(&mut r)?);
    }
    let mut heads = Vec::with_capacity(l - 1);
    for _ in 0..l.saturating_sub(1) {
        heads.push(read_layer(&mut r)?);
    }
    let model = SaeModel {
        config,
        encoder,
        decoder,
        heads,
    };
    model.validate_shapes()?;
    Ok(model)
}

fn read_matrix(r: &mut ByteReader) -> Result<Matrix> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.f64()?);
    }
    Matrix::new(rows, cols, data)
}
