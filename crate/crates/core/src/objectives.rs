//! The four-objective cost model: detection F1, wall-clock runtime, and
//! storage/power ratios relative to the unclipped no-early-exit model,
//! plus Pearson/Spearman correlation for trade-off analysis.

use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use crate::clipping::{self, apply_mask, ClipMask, ModelView};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exits::{calibrate_exit_thresholds, infer_with_exits, ExitPolicy, ExitTrace};
use crate::sae::{SaeModel, SaeShape};
use crate::stats::{median_odd, nearest_rank_quantile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_labels(predicted: &[u8], actual: &[u8]) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} predictions for {} labels",
                predicted.len(),
                actual.len()
            )));
        }
        let mut c = ConfusionCounts {
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 0,
        };
        for (p, a) in predicted.iter().zip(actual) {
            match (p, a) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 0) => c.tn += 1,
                _ => c.fn_ += 1,
            }
        }
        Ok(c)
    }
}

/// 2·tp / (2·tp + fp + fn), 0 when the denominator vanishes. The anomaly
/// class is the positive class.
pub fn f1_score(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    }
}

/// One candidate's objectives. Ratios are relative to the unclipped,
/// no-early-exit model, which scores 1.0 on both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveVector {
    pub f1: f64,
    pub runtime_s: f64,
    pub storage_ratio: f64,
    pub power_ratio: f64,
}

impl ObjectiveVector {
    /// All-minimization form used by dominance: (1−f1, runtime, storage,
    /// power).
    pub fn minimized(&self) -> [f64; 4] {
        [
            1.0 - self.f1,
            self.runtime_s,
            self.storage_ratio,
            self.power_ratio,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.f1.is_finite()
            && self.runtime_s.is_finite()
            && self.storage_ratio.is_finite()
            && self.power_ratio.is_finite()
    }
}

/// Retained parameters under the clipping accounting rule over the total.
pub fn storage_ratio(shape: &SaeShape, mask: &ClipMask) -> Result<f64> {
    if mask.layers().len() != shape.widths.len()
        || mask
            .layers()
            .iter()
            .zip(&shape.widths)
            .any(|(bits, w)| bits.len() != *w)
    {
        return Err(Error::DimensionMismatch(
            "mask does not match model shape".into(),
        ));
    }
    Ok(clipping::retained_params(shape, mask) as f64 / clipping::total_params(shape) as f64)
}

// ---------------------------------------------------------------------------
// Multiply-accumulate accounting (the power proxy)
// ---------------------------------------------------------------------------

/// MACs of the full encoder+decoder pass at the given layer widths.
fn path_macs(input_dim: usize, widths: &[usize]) -> u64 {
    let l = widths.len();
    let mut macs = 0u64;
    for k in 0..l {
        let in_dim = if k == 0 { input_dim } else { widths[k - 1] };
        macs += (widths[k] * in_dim) as u64;
    }
    for j in 0..l {
        let in_dim = widths[l - 1 - j];
        let out_dim = if j == l - 1 { input_dim } else { widths[l - 2 - j] };
        macs += (out_dim * in_dim) as u64;
    }
    macs
}

/// Full-path per-sample MAC count of the original model.
pub fn full_path_macs(shape: &SaeShape) -> u64 {
    path_macs(shape.input_dim, &shape.widths)
}

/// MACs a sample pays on its taken path: encoder layers up to its exit,
/// plus the taken head (early) or the decoder (final). Probing costs of
/// exits that did not fire are excluded; that keeps the ratio within (0,1]
/// and equal to 1 for the identity candidate.
fn taken_path_macs(input_dim: usize, kept: &[usize], exit: usize) -> u64 {
    let l = kept.len();
    let mut macs = 0u64;
    for k in 0..exit {
        let in_dim = if k == 0 { input_dim } else { kept[k - 1] };
        macs += (kept[k] * in_dim) as u64;
    }
    if exit < l {
        macs += (input_dim * kept[exit - 1]) as u64;
    } else {
        for j in 0..l {
            let in_dim = kept[l - 1 - j];
            let out_dim = if j == l - 1 { input_dim } else { kept[l - 2 - j] };
            macs += (out_dim * in_dim) as u64;
        }
    }
    macs
}

/// Mean per-sample taken-path MACs over the original full-path count.
pub fn power_ratio(shape: &SaeShape, mask: &ClipMask, trace: &ExitTrace) -> Result<f64> {
    if mask.layers().len() != shape.widths.len() {
        return Err(Error::DimensionMismatch(
            "mask does not match model shape".into(),
        ));
    }
    if trace.is_empty() {
        return Err(Error::InvalidParam("empty trace".into()));
    }
    let kept = mask.kept_counts();
    let total: u64 = trace
        .exit_indices
        .iter()
        .map(|&e| taken_path_macs(shape.input_dim, &kept, e))
        .sum();
    let mean = total as f64 / trace.len() as f64;
    Ok(mean / full_path_macs(shape) as f64)
}

/// Mean per-sample MACs actually executed, counting every evaluated head
/// (fired or not). Used for deterministic runtime estimates.
pub fn mean_executed_macs(
    shape: &SaeShape,
    mask: &ClipMask,
    policy: &ExitPolicy,
    trace: &ExitTrace,
) -> f64 {
    let kept = mask.kept_counts();
    let l = kept.len();
    let input_dim = shape.input_dim;
    let mut total = 0u64;
    for &exit in &trace.exit_indices {
        let mut macs = 0u64;
        for k in 0..exit {
            let in_dim = if k == 0 { input_dim } else { kept[k - 1] };
            macs += (kept[k] * in_dim) as u64;
        }
        // every enabled early exit at or before the taken one was probed
        for k in 1..=exit.min(l - 1) {
            if policy.early_exit_enabled(k) {
                macs += (input_dim * kept[k - 1]) as u64;
            }
        }
        if exit == l {
            for j in 0..l {
                let in_dim = kept[l - 1 - j];
                let out_dim = if j == l - 1 { input_dim } else { kept[l - 2 - j] };
                macs += (out_dim * in_dim) as u64;
            }
        }
        total += macs;
    }
    total as f64 / trace.len() as f64
}

// ---------------------------------------------------------------------------
// Runtime
// ---------------------------------------------------------------------------

static TIMING_LOCK: Mutex<()> = Mutex::new(());

/// Median wall-clock seconds of `reps` sequential full-dataset inference
/// passes. Timing runs are serialized process-wide.
pub fn measure_runtime(
    view: &ModelView,
    policy: &ExitPolicy,
    d: &Dataset,
    reps: usize,
) -> Result<f64> {
    if reps < 3 || reps % 2 == 0 {
        return Err(Error::InvalidParam(format!(
            "timing reps must be odd and >= 3, got {reps}"
        )));
    }
    let _guard = TIMING_LOCK.lock().unwrap();
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let out = infer_with_exits(view, policy, d)?;
        std::hint::black_box(&out);
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(median_odd(&mut samples))
}

// ---------------------------------------------------------------------------
// Candidate evaluation
// ---------------------------------------------------------------------------

/// How evaluate_candidate fills the runtime objective.
#[derive(Debug, Clone, Copy)]
pub enum RuntimeModel {
    /// Measured wall-clock (median of timing_reps passes).
    Measured,
    /// base_seconds scaled by the candidate's executed-MAC fraction;
    /// deterministic across runs up to the base measurement's scale.
    CalibratedMacs { base_seconds: f64 },
}

/// Frozen base model plus the datasets and timing setup candidates are
/// scored against.
pub struct EvalContext<'a> {
    pub model: &'a SaeModel,
    pub eval: &'a Dataset,
    pub calib: &'a Dataset,
    pub timing_reps: usize,
    pub runtime_model: RuntimeModel,
}

impl<'a> EvalContext<'a> {
    pub fn new(
        model: &'a SaeModel,
        eval: &'a Dataset,
        calib: &'a Dataset,
        timing_reps: usize,
    ) -> Result<Self> {
        if eval.dims() != model.config.input_dim || calib.dims() != model.config.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} features, eval has {}, calib has {}",
                model.config.input_dim,
                eval.dims(),
                calib.dims()
            )));
        }
        if reps_invalid(timing_reps) {
            return Err(Error::InvalidParam(format!(
                "timing reps must be odd and >= 3, got {timing_reps}"
            )));
        }
        Ok(Self {
            model,
            eval,
            calib,
            timing_reps,
            runtime_model: RuntimeModel::Measured,
        })
    }

    /// Times the base model once and switches to MAC-scaled runtime
    /// estimates, making candidate ordering deterministic.
    pub fn calibrate_runtime_model(&mut self) -> Result<()> {
        let view = ModelView::unmasked(self.model);
        let policy = ExitPolicy::disabled_early(self.model.num_exits(), 0.0);
        let base_seconds = measure_runtime(&view, &policy, self.eval, self.timing_reps)?;
        self.runtime_model = RuntimeModel::CalibratedMacs { base_seconds };
        Ok(())
    }
}

fn reps_invalid(reps: usize) -> bool {
    reps < 3 || reps % 2 == 0
}

/// Exit configuration of one candidate.
#[derive(Debug, Clone, PartialEq)]
pub enum ExitSetting {
    /// One calibration quantile per exit, final included.
    Quantiles(Vec<f64>),
    /// Early exits never fire; the final threshold is calibrated at the
    /// given quantile.
    DisabledEarly { final_quantile: f64 },
}

fn build_policy(view: &ModelView, calib: &Dataset, setting: &ExitSetting) -> Result<ExitPolicy> {
    match setting {
        ExitSetting::Quantiles(q) => calibrate_exit_thresholds(view, calib, q),
        ExitSetting::DisabledEarly { final_quantile } => {
            let normals = calib.normals_only();
            if normals.is_empty() {
                return Err(Error::EmptyCalibration);
            }
            let errs = view.reconstruction_errors(&normals, view.num_exits())?;
            let mut sorted = errs.data().to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let tau = nearest_rank_quantile(&sorted, *final_quantile);
            Ok(ExitPolicy::disabled_early(view.num_exits(), tau))
        }
    }
}

/// Applies the mask, calibrates the policy on the calibration set, runs
/// inference on the evaluation set, and assembles all four objectives.
pub fn evaluate_candidate(
    ctx: &EvalContext,
    mask: &ClipMask,
    setting: &ExitSetting,
) -> Result<ObjectiveVector> {
    let view = apply_mask(ctx.model, mask)?;
    let policy = build_policy(&view, ctx.calib, setting)?;
    let (labels, trace) = infer_with_exits(&view, &policy, ctx.eval)?;
    let confusion = ConfusionCounts::from_labels(&labels, &ctx.eval.labels)?;
    let shape = ctx.model.shape();
    let f1 = f1_score(&confusion);
    let storage = storage_ratio(&shape, mask)?;
    let power = power_ratio(&shape, mask, &trace)?;
    let runtime_s = match ctx.runtime_model {
        RuntimeModel::Measured => measure_runtime(&view, &policy, ctx.eval, ctx.timing_reps)?,
        RuntimeModel::CalibratedMacs { base_seconds } => {
            let executed = mean_executed_macs(&shape, mask, &policy, &trace);
            base_seconds * executed / full_path_macs(&shape) as f64
        }
    };
    Ok(ObjectiveVector {
        f1,
        runtime_s,
        storage_ratio: storage,
        power_ratio: power,
    })
}

// ---------------------------------------------------------------------------
// Correlation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationMethod {
    Pearson,
    Spearman,
}

/// Pearson correlation, or Spearman as Pearson over average ranks.
pub fn correlation(x: &[f64], y: &[f64], method: CorrelationMethod) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "correlation inputs of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::InvalidParam(format!(
            "correlation needs at least 3 points, got {}",
            x.len()
        )));
    }
    match method {
        CorrelationMethod::Pearson => pearson(x, y),
        CorrelationMethod::Spearman => pearson(&average_ranks(x), &average_ranks(y)),
    }
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "zero variance input".into(),
        ));
    }
    Ok(cov / (var_x.sqrt() * var_y.sqrt()))
}

/// 1-based ranks with ties replaced by their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}
