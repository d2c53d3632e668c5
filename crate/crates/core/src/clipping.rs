//! Neuron-level clip masks, zero-forcing inference views, progressive
//! clipping schedules, and the retained-parameter accounting rule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::sae::{Layer, SaeModel, SaeShape};

/// Per-hidden-layer keep bits (true = keep, false = prune).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClipMask {
    layers: Vec<Vec<bool>>,
}

impl ClipMask {
    pub fn new(layers: Vec<Vec<bool>>, shape: &SaeShape) -> Result<Self> {
        if layers.len() != shape.widths.len() {
            return Err(Error::DimensionMismatch(format!(
                "mask covers {} layers, model has {}",
                layers.len(),
                shape.widths.len()
            )));
        }
        for (k, (bits, width)) in layers.iter().zip(&shape.widths).enumerate() {
            if bits.len() != *width {
                return Err(Error::DimensionMismatch(format!(
                    "mask layer {k} has {} bits, width is {width}",
                    bits.len()
                )));
            }
            if !bits.iter().any(|b| *b) {
                return Err(Error::InvalidParam(format!(
                    "mask layer {k} keeps no neurons"
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn all_ones(shape: &SaeShape) -> Self {
        Self {
            layers: shape.widths.iter().map(|w| vec![true; *w]).collect(),
        }
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn kept_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|bits| bits.iter().filter(|b| **b).count())
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(|bits| bits.iter().all(|b| *b))
    }

    /// True when every neuron pruned by `self` is also pruned by `other`.
    pub fn pruned_subset_of(&self, other: &ClipMask) -> bool {
        self.layers
            .iter()
            .zip(&other.layers)
            .all(|(a, b)| a.iter().zip(b).all(|(ka, kb)| *ka || !*kb))
    }

    fn apply(&self, layer: usize, v: &mut [f64]) {
        for (x, keep) in v.iter_mut().zip(&self.layers[layer]) {
            if !keep {
                *x = 0.0;
            }
        }
    }
}

/// Uniformly keeps ⌈keep_frac·width⌉ neurons per layer, without replacement.
pub fn sample_mask(shape: &SaeShape, keep_frac: f64, seed: u64) -> Result<ClipMask> {
    if !(keep_frac > 0.0 && keep_frac <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "keep_frac must be in (0,1], got {keep_frac}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(shape.widths.len());
    for &width in &shape.widths {
        let keep = (keep_frac * width as f64).ceil() as usize;
        if keep == 0 {
            return Err(Error::InvalidParam(format!(
                "keep_frac {keep_frac} empties a width-{width} layer"
            )));
        }
        let mut idx: Vec<usize> = (0..width).collect();
        idx.shuffle(&mut rng);
        let mut bits = vec![false; width];
        for &i in idx.iter().take(keep) {
            bits[i] = true;
        }
        layers.push(bits);
    }
    ClipMask::new(layers, shape)
}

/// Cumulative masks from mild to extreme pruning.
#[derive(Debug, Clone)]
pub struct ClipSchedule {
    pub masks: Vec<ClipMask>,
    pub step_frac: f64,
    pub seed: u64,
}

/// Each round prunes ⌈step_frac·width⌉ more neurons per layer, drawn from
/// the still-kept set, until another round would empty some layer.
pub fn progressive_schedule(shape: &SaeShape, step_frac: f64, seed: u64) -> Result<ClipSchedule> {
    if !(step_frac > 0.0 && step_frac <= 0.5) {
        return Err(Error::InvalidParam(format!(
            "step_frac must be in (0, 0.5], got {step_frac}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step_counts: Vec<usize> = shape
        .widths
        .iter()
        .map(|w| ((step_frac * *w as f64).ceil() as usize).max(1))
        .collect();
    let mut kept: Vec<Vec<bool>> = shape.widths.iter().map(|w| vec![true; *w]).collect();
    let mut masks = Vec::new();
    loop {
        // stop before a round that would drop any layer below 1 kept neuron
        let can_continue = kept.iter().zip(&step_counts).all(|(bits, step)| {
            let alive = bits.iter().filter(|b| **b).count();
            alive > *step
        });
        if !can_continue {
            break;
        }
        for (layer, step) in kept.iter_mut().zip(&step_counts) {
            let alive: Vec<usize> = layer
                .iter()
                .enumerate()
                .filter_map(|(i, b)| if *b { Some(i) } else { None })
                .collect();
            let mut pool = alive;
            pool.shuffle(&mut rng);
            for &i in pool.iter().take(*step) {
                layer[i] = false;
            }
        }
        masks.push(ClipMask::new(kept.clone(), shape)?);
    }
    Ok(ClipSchedule {
        masks,
        step_frac,
        seed,
    })
}

/// Read-only inference view; pruned activations are forced to zero on the
/// encoder and the mirrored decoder stages, the originals stay untouched.
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a> {
    model: &'a SaeModel,
    mask: Option<&'a ClipMask>,
}

/// Checks shapes and wraps the model; the original is not modified.
pub fn apply_mask<'a>(model: &'a SaeModel, mask: &'a ClipMask) -> Result<ModelView<'a>> {
    let shape = model.shape();
    if mask.layers.len() != shape.widths.len()
        || mask
            .layers
            .iter()
            .zip(&shape.widths)
            .any(|(bits, w)| bits.len() != *w)
    {
        return Err(Error::DimensionMismatch(
            "mask does not match model shape".into(),
        ));
    }
    Ok(ModelView {
        model,
        mask: Some(mask),
    })
}

impl<'a> ModelView<'a> {
    pub fn unmasked(model: &'a SaeModel) -> Self {
        Self { model, mask: None }
    }

    pub fn model(&self) -> &SaeModel {
        self.model
    }

    pub fn mask(&self) -> Option<&ClipMask> {
        self.mask
    }

    pub fn num_exits(&self) -> usize {
        self.model.num_exits()
    }

    pub fn input_dim(&self) -> usize {
        self.model.config.input_dim
    }

    fn affine(layer: &Layer, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(layer.weight.rows());
        for r in 0..layer.weight.rows() {
            out.push(crate::linalg::dot(layer.weight.row(r), x) + layer.bias[r]);
        }
        out
    }

    /// Activation of encoder layer `k` (0-based) given the previous one.
    pub(crate) fn encode_layer(&self, k: usize, prev: &[f64]) -> Vec<f64> {
        let mut a = Self::affine(&self.model.encoder[k], prev);
        for v in a.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        if let Some(mask) = self.mask {
            mask.apply(k, &mut a);
        }
        a
    }

    /// Reconstruction error through head `k` (0-based head index).
    pub(crate) fn head_error(&self, k: usize, x: &[f64], act: &[f64]) -> f64 {
        let recon = Self::affine(&self.model.heads[k], act);
        mse(x, &recon)
    }

    /// Full decoder from the bottleneck activation.
    pub(crate) fn decode(&self, bottleneck: &[f64]) -> Vec<f64> {
        let l = self.model.num_layers();
        let mut cur = bottleneck.to_vec();
        for j in 0..l {
            let mut u = Self::affine(&self.model.decoder[j], &cur);
            if j < l - 1 {
                for v in u.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                if let Some(mask) = self.mask {
                    mask.apply(l - 2 - j, &mut u);
                }
            }
            cur = u;
        }
        cur
    }

    /// Per-sample error at one exit (1-based; L = full path).
    pub fn sample_exit_error(&self, x: &[f64], exit: usize) -> Result<f64> {
        let l = self.model.num_layers();
        if exit == 0 || exit > l {
            return Err(Error::InvalidParam(format!(
                "exit {exit} out of range 1..={l}"
            )));
        }
        let mut act = x.to_vec();
        for k in 0..exit {
            act = self.encode_layer(k, &act);
        }
        if exit < l {
            Ok(self.head_error(exit - 1, x, &act))
        } else {
            let recon = self.decode(&act);
            Ok(mse(x, &recon))
        }
    }

    /// Errors at every exit for one sample, sharing the encoder prefix.
    pub fn sample_all_exit_errors(&self, x: &[f64]) -> Vec<f64> {
        let l = self.model.num_layers();
        let mut out = Vec::with_capacity(l);
        let mut act = x.to_vec();
        for k in 0..l {
            act = self.encode_layer(k, &act);
            if k < l - 1 {
                out.push(self.head_error(k, x, &act));
            }
        }
        let recon = self.decode(&act);
        out.push(mse(x, &recon));
        out
    }

    /// Final-path reconstruction of one sample.
    pub fn reconstruct_final(&self, x: &[f64]) -> Vec<f64> {
        let l = self.model.num_layers();
        let mut act = x.to_vec();
        for k in 0..l {
            act = self.encode_layer(k, &act);
        }
        self.decode(&act)
    }

    /// Per-sample MSE at the given exit over a dataset.
    pub fn reconstruction_errors(&self, d: &Dataset, exit: usize) -> Result<Vector> {
        if d.dims() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} features, dataset has {}",
                self.input_dim(),
                d.dims()
            )));
        }
        let mut out = Vec::with_capacity(d.len());
        for i in 0..d.len() {
            out.push(self.sample_exit_error(d.row(i), exit)?);
        }
        Ok(Vector::new(out).expect("errors are finite"))
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

/// Physically deletes pruned rows, columns, decoder mirrors, and head
/// slices; the independent route the zero-forcing view must agree with.
pub fn shrink(model: &SaeModel, mask: &ClipMask) -> Result<SaeModel> {
    apply_mask(model, mask)?; // shape check
    let l = model.num_layers();
    let kept: Vec<Vec<usize>> = mask
        .layers
        .iter()
        .map(|bits| {
            bits.iter()
                .enumerate()
                .filter_map(|(i, b)| if *b { Some(i) } else { None })
                .collect()
        })
        .collect();
    let all_in: Vec<usize> = (0..model.config.input_dim).collect();

    let select = |layer: &Layer, rows: &[usize], cols: &[usize]| -> Layer {
        let weight = Matrix::from_fn(rows.len(), cols.len(), |r, c| {
            layer.weight.get(rows[r], cols[c])
        });
        let bias = Vector::new(rows.iter().map(|r| layer.bias[*r]).collect())
            .expect("bias entries finite");
        Layer { weight, bias }
    };

    let mut encoder = Vec::with_capacity(l);
    for k in 0..l {
        let in_idx: &[usize] = if k == 0 { &all_in } else { &kept[k - 1] };
        encoder.push(select(&model.encoder[k], &kept[k], in_idx));
    }
    let mut decoder = Vec::with_capacity(l);
    for j in 0..l {
        let in_idx = &kept[l - 1 - j];
        let out_idx: &[usize] = if j == l - 1 { &all_in } else { &kept[l - 2 - j] };
        decoder.push(select(&model.decoder[j], out_idx, in_idx));
    }
    let mut heads = Vec::with_capacity(l.saturating_sub(1));
    for k in 0..l - 1 {
        heads.push(select(&model.heads[k], &all_in, &kept[k]));
    }

    let mut config = model.config.clone();
    config.encoder_widths = kept.iter().map(|k| k.len()).collect();
    let out = SaeModel {
        config,
        encoder,
        decoder,
        heads,
    };
    out.validate_shapes()?;
    Ok(out)
}

/// Parameters surviving a mask under the accounting rule: a pruned neuron
/// removes its incoming row and bias, its outgoing encoder columns, its
/// decoder mirror, and its head slice.
pub fn retained_params(shape: &SaeShape, mask: &ClipMask) -> usize {
    let kept = mask.kept_counts();
    params_for(shape.input_dim, &kept)
}

pub fn total_params(shape: &SaeShape) -> usize {
    params_for(shape.input_dim, &shape.widths)
}

fn params_for(input_dim: usize, widths: &[usize]) -> usize {
    let l = widths.len();
    let mut total = 0;
    for k in 0..l {
        let in_dim = if k == 0 { input_dim } else { widths[k - 1] };
        total += widths[k] * in_dim + widths[k];
    }
    for j in 0..l {
        let in_dim = widths[l - 1 - j];
        let out_dim = if j == l - 1 { input_dim } else { widths[l - 2 - j] };
        total += out_dim * in_dim + out_dim;
    }
    for k in 0..l.saturating_sub(1) {
        total += input_dim * widths[k] + input_dim;
    }
    total
}
