//! Multi-branch early-exit inference and the random-quantile baseline
//! policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::clipping::ModelView;
use crate::data::{Dataset, ANOMALY, NORMAL};
use crate::error::{Error, Result};
use crate::stats::nearest_rank_quantile;

/// Threshold value meaning "this early exit never fires" (errors are
/// nonnegative, so the comparison error ≤ τ is unsatisfiable).
pub const DISABLED_THRESHOLD: f64 = -1.0;

/// Per-exit quantiles and the calibrated absolute thresholds they produced.
/// One entry per exit, the last being the final exit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitPolicy {
    pub quantiles: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub calibration_id: String,
}

impl ExitPolicy {
    pub fn num_exits(&self) -> usize {
        self.thresholds.len()
    }

    pub fn early_exit_enabled(&self, exit: usize) -> bool {
        self.thresholds[exit - 1] >= 0.0
    }

    /// Policy whose early exits never fire; classification happens only at
    /// the final exit with the given threshold.
    pub fn disabled_early(num_exits: usize, final_threshold: f64) -> Self {
        let mut thresholds = vec![DISABLED_THRESHOLD; num_exits];
        thresholds[num_exits - 1] = final_threshold;
        let mut quantiles = vec![0.0; num_exits];
        quantiles[num_exits - 1] = f64::NAN;
        Self {
            quantiles,
            thresholds,
            calibration_id: "disabled-early".into(),
        }
    }
}

/// Per-sample record of which exit fired, the verdict, and the error seen
/// at that exit.
#[derive(Debug, Clone)]
pub struct ExitTrace {
    pub exit_indices: Vec<usize>,
    pub verdicts: Vec<u8>,
    pub errors: Vec<f64>,
}

impl ExitTrace {
    pub fn len(&self) -> usize {
        self.exit_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exit_indices.is_empty()
    }

    pub fn mean_exit_index(&self) -> f64 {
        self.exit_indices.iter().sum::<usize>() as f64 / self.exit_indices.len() as f64
    }
}

/// Nearest-rank thresholds per exit over the normal-labeled calibration
/// rows.
pub fn calibrate_exit_thresholds(
    view: &ModelView,
    calib: &Dataset,
    quantiles: &[f64],
) -> Result<ExitPolicy> {
    let l = view.num_exits();
    if quantiles.len() != l {
        return Err(Error::DimensionMismatch(format!(
            "{} quantiles for {l} exits",
            quantiles.len()
        )));
    }
    if let Some(q) = quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::InvalidParam(format!("quantile {q} outside [0,1]")));
    }
    let normals = calib.normals_only();
    if normals.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut per_exit: Vec<Vec<f64>> = vec![Vec::with_capacity(normals.len()); l];
    for i in 0..normals.len() {
        let errs = view.sample_all_exit_errors(normals.row(i));
        for (k, e) in errs.into_iter().enumerate() {
            per_exit[k].push(e);
        }
    }
    let mut thresholds = Vec::with_capacity(l);
    for (k, mut errs) in per_exit.into_iter().enumerate() {
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        thresholds.push(nearest_rank_quantile(&errs, quantiles[k]));
    }
    Ok(ExitPolicy {
        quantiles: quantiles.to_vec(),
        thresholds,
        calibration_id: format!("{}[{}]", calib.name, normals.len()),
    })
}

/// Walks exits in order; the first early exit whose error is within its
/// threshold emits NORMAL, otherwise the final exit decides.
pub fn infer_with_exits(
    view: &ModelView,
    policy: &ExitPolicy,
    d: &Dataset,
) -> Result<(Vec<u8>, ExitTrace)> {
    let l = view.num_exits();
    if policy.num_exits() != l {
        return Err(Error::DimensionMismatch(format!(
            "policy has {} exits, model has {l}",
            policy.num_exits()
        )));
    }
    if d.dims() != view.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} features, dataset has {}",
            view.input_dim(),
            d.dims()
        )));
    }
    let n = d.len();
    let mut labels = Vec::with_capacity(n);
    let mut exit_indices = Vec::with_capacity(n);
    let mut verdicts = Vec::with_capacity(n);
    let mut errors = Vec::with_capacity(n);

    for i in 0..n {
        let x = d.row(i);
        let mut act = x.to_vec();
        let mut decided = false;
        for k in 1..l {
            act = view.encode_layer(k - 1, &act);
            let tau = policy.thresholds[k - 1];
            if tau >= 0.0 {
                let err = view.head_error(k - 1, x, &act);
                if err <= tau {
                    labels.push(NORMAL);
                    exit_indices.push(k);
                    verdicts.push(NORMAL);
                    errors.push(err);
                    decided = true;
                    break;
                }
            }
        }
        if !decided {
            act = view.encode_layer(l - 1, &act);
            let recon = view.decode(&act);
            let err = x
                .iter()
                .zip(&recon)
                .map(|(a, b)| {
                    let diff = a - b;
                    diff * diff
                })
                .sum::<f64>()
                / x.len() as f64;
            let verdict = if err > policy.thresholds[l - 1] {
                ANOMALY
            } else {
                NORMAL
            };
            labels.push(verdict);
            exit_indices.push(l);
            verdicts.push(verdict);
            errors.push(err);
        }
    }
    Ok((
        labels,
        ExitTrace {
            exit_indices,
            verdicts,
            errors,
        },
    ))
}

/// Baseline policy: every exit quantile drawn uniformly from [0,1], then
/// calibrated as usual.
pub fn rret_policy(view: &ModelView, calib: &Dataset, seed: u64) -> Result<ExitPolicy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quantiles: Vec<f64> = (0..view.num_exits())
        .map(|_| rng.gen_range(0.0..=1.0))
        .collect();
    calibrate_exit_thresholds(view, calib, &quantiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clipping::ModelView;
    use crate::data::generate_synthetic;
    use crate::sae::{calibrate_final_threshold, classify, init_model, Activation, SaeConfig};

    fn model_and_data() -> (crate::sae::SaeModel, Dataset) {
        let cfg = SaeConfig {
            input_dim: 8,
            encoder_widths: vec![6, 4, 3],
            activation: Activation::Relu,
            epochs: 1,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.0,
            seed: 31,
        };
        let model = init_model(&cfg).unwrap();
        let data = generate_synthetic(8, 200, 0.1, 37).unwrap();
        (model, data)
    }

    #[test]
    fn max_quantile_takes_max_error() {
        let (model, data) = model_and_data();
        let view = ModelView::unmasked(&model);
        let policy = calibrate_exit_thresholds(&view, &data, &[1.0, 1.0, 1.0]).unwrap();
        let normals = data.normals_only();
        for k in 1..=3usize {
            let errs = view.reconstruction_errors(&normals, k).unwrap();
            let max = errs.data().iter().fold(f64::MIN, |m, v| m.max(*v));
            assert_eq!(policy.thresholds[k - 1], max);
        }
    }

    #[test]
    fn doubled_multiset_keeps_thresholds() {
        let (model, data) = model_and_data();
        let view = ModelView::unmasked(&model);
        let q = [0.3, 0.5, 0.9];
        let once = calibrate_exit_thresholds(&view, &data, &q).unwrap();
        // duplicate every row
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..data.len() {
            feats.extend_from_slice(data.row(i));
            feats.extend_from_slice(data.row(i));
            labels.push(data.labels[i]);
            labels.push(data.labels[i]);
        }
        let doubled = Dataset::new(
            crate::linalg::Matrix::new(2 * data.len(), 8, feats).unwrap(),
            labels,
            "doubled",
        )
        .unwrap();
        let twice = calibrate_exit_thresholds(&view, &doubled, &q).unwrap();
        assert_eq!(once.thresholds, twice.thresholds);
    }

    #[test]
    fn nearest_rank_definition_case() {
        // errors (10,20,30,40), q=0.5 -> 20 under ceil(q*n)
        let sorted = [10.0, 20.0, 30.0, 40.0];
        assert_eq!(nearest_rank_quantile(&sorted, 0.5), 20.0);
    }

    #[test]
    fn zero_thresholds_disable_early_exits_in_effect() {
        let (model, data) = model_and_data();
        let view = ModelView::unmasked(&model);
        let final_t = calibrate_final_threshold(&model, &data, 0.95).unwrap();
        let policy = ExitPolicy {
            quantiles: vec![0.0, 0.0, 0.95],
            thresholds: vec![0.0, 0.0, final_t],
            calibration_id: "test".into(),
        };
        let (_, trace) = infer_with_exits(&view, &policy, &data).unwrap();
        assert!(trace.exit_indices.iter().all(|k| *k == 3));
    }

    #[test]
    fn saturated_first_exit_catches_everything() {
        let (model, data) = model_and_data();
        let view = ModelView::unmasked(&model);
        let errs = view.reconstruction_errors(&data, 1).unwrap();
        let above_max = errs.data().iter().fold(0.0f64, |m, v| m.max(*v)) + 1.0;
        let policy = ExitPolicy {
            quantiles: vec![1.0, 0.5, 0.95],
            thresholds: vec![above_max, 0.1, 0.1],
            calibration_id: "test".into(),
        };
        let (labels, trace) = infer_with_exits(&view, &policy, &data).unwrap();
        assert!(trace.exit_indices.iter().all(|k| *k == 1));
        assert!(labels.iter().all(|l| *l == NORMAL));
    }

    #[test]
    fn disabled_early_exits_match_plain_classifier() {
        let (model, data) = model_and_data();
        let view = ModelView::unmasked(&model);
        let final_t = calibrate_final_threshold(&model, &data, 0.9).unwrap();
        let policy = ExitPolicy::disabled_early(3, final_t);
        let (labels, trace) = infer_with_exits(&view, &policy, &data).unwrap();
        let plain = classify(&model, &data, final_t).unwrap();
        assert_eq!(labels, plain);
        assert!(trace.exit_indices.iter().all(|k| *k == 3));
    }

    #[test]
    fn raising_threshold_grows_early_exit_set() {
        let (model, data) = model_and_data();
        let view = ModelView::unmasked(&model);
        let base = calibrate_exit_thresholds(&view, &data, &[0.3, 0.5, 0.95]).unwrap();
        let mut raised = base.clone();
        raised.thresholds[0] = base.thresholds[0] * 2.0;
        let (_, t_base) = infer_with_exits(&view, &base, &data).unwrap();
        let (_, t_raised) = infer_with_exits(&view, &raised, &data).unwrap();
        for i in 0..data.len() {
            if t_base.exit_indices[i] == 1 {
                assert_eq!(t_raised.exit_indices[i], 1, "sample {i} left the exit set");
            }
        }
        let before = t_base.exit_indices.iter().filter(|k| **k == 1).count();
        let after = t_raised.exit_indices.iter().filter(|k| **k == 1).count();
        assert!(after >= before);
    }

    #[test]
    fn rret_is_seed_deterministic_and_in_range() {
        let (model, data) = model_and_data();
        let view = ModelView::unmasked(&model);
        let a = rret_policy(&view, &data, 99).unwrap();
        let b = rret_policy(&view, &data, 99).unwrap();
        assert_eq!(a, b);
        assert!(a.quantiles.iter().all(|q| (0.0..=1.0).contains(q)));
        let c = rret_policy(&view, &data, 100).unwrap();
        assert_ne!(a.quantiles, c.quantiles);
    }

    #[test]
    fn empty_calibration_is_an_error() {
        let (model, data) = model_and_data();
        let view = ModelView::unmasked(&model);
        // all-anomaly dataset: no normal rows to calibrate on
        let feats = crate::linalg::Matrix::new(2, 8, vec![0.5; 16]).unwrap();
        let all_anom = Dataset::new(feats, vec![1, 1], "anoms").unwrap();
        assert!(matches!(
            calibrate_exit_thresholds(&view, &all_anom, &[0.5, 0.5, 0.5]),
            Err(Error::EmptyCalibration)
        ));
        drop(data);
    }
}
