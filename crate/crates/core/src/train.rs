//! Synthetic quadrant task and a probe trainer that drives the projector's
//! forward and backward passes end to end.
//!
//! Each sample is noise in `[-1, 1]` with one marked patch; the label is the
//! quadrant of that patch. The probe is a linear classifier over the
//! concatenated token sequence, so it can only succeed if token order still
//! carries the spatial layout. Training with tokens shuffled per sample is the
//! control: it removes that mapping and should fall back to chance.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{linear_bwd, linear_fwd, FeatureGrid};
use crate::optim::{adamw_step, AdamWConfig, OptState};
use crate::projector::{
    saep_backward, saep_forward, saep_init, MultiLevelFeatures, SaepConfig, SaepParams, SaepWeights,
};
use crate::tensor::{rand_uniform, Rng, Tensor};

pub const MARKER_AMPLITUDE: f32 = 3.0;
pub const NUM_QUADRANTS: usize = 4;
const EVAL_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone)]
pub struct SpatialTaskSample {
    pub features: MultiLevelFeatures,
    pub marked: (usize, usize),
    pub label: usize,
}

/// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
pub fn quadrant_of(row: usize, col: usize, h: usize, w: usize) -> usize {
    2 * usize::from(row >= h / 2) + usize::from(col >= w / 2)
}

/// Alternating `+A, -A, ...` over channels.
pub fn marker_pattern(channels: usize) -> Vec<f32> {
    (0..channels)
        .map(|c| {
            if c % 2 == 0 {
                MARKER_AMPLITUDE
            } else {
                -MARKER_AMPLITUDE
            }
        })
        .collect()
}

fn check_task_config(config: &SaepConfig) -> Result<()> {
    if !config.h.is_multiple_of(2) || !config.w.is_multiple_of(2) {
        return Err(Error::Arg(format!(
            "quadrant task needs even grid extents, got {}x{}",
            config.h, config.w
        )));
    }
    Ok(())
}

/// One sample with the marker at `(row, col)` on every level.
pub fn make_quadrant_sample(
    rng: &mut Rng,
    config: &SaepConfig,
    row: usize,
    col: usize,
) -> Result<SpatialTaskSample> {
    check_task_config(config)?;
    if row >= config.h || col >= config.w {
        return Err(Error::Arg(format!("marker ({row}, {col}) outside grid")));
    }
    let pattern = marker_pattern(config.c);
    let grids = (0..config.k)
        .map(|_| {
            let mut t = rand_uniform(rng, &[config.h, config.w, config.c], -1.0, 1.0)?;
            let start = (row * config.w + col) * config.c;
            for (v, p) in t.data_mut()[start..start + config.c]
                .iter_mut()
                .zip(&pattern)
            {
                *v += p;
            }
            FeatureGrid::new(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpatialTaskSample {
        features: MultiLevelFeatures::new((1..=config.k).collect(), grids)?,
        marked: (row, col),
        label: quadrant_of(row, col, config.h, config.w),
    })
}

pub fn make_quadrant_task(
    rng: &mut Rng,
    config: &SaepConfig,
    n: usize,
) -> Result<Vec<SpatialTaskSample>> {
    check_task_config(config)?;
    (0..n)
        .map(|_| {
            let row = rng.below(config.h);
            let col = rng.below(config.w);
            make_quadrant_sample(rng, config, row, col)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub eval_samples: usize,
    /// Permute tokens randomly per sample before the probe.
    pub shuffle_tokens: bool,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            eval_samples: 1000,
            shuffle_tokens: false,
            seed: 0,
        }
    }
}

/// The projector configuration used by the quadrant demo.
pub fn demo_config(seed: u64) -> SaepConfig {
    SaepConfig {
        seed,
        ..SaepConfig::new(8, 8, 8, 2, 2, 16)
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub accuracy: f64,
    pub eval_loss: f64,
    pub shuffle_tokens: bool,
    pub steps: Vec<StepRecord>,
}

impl TrainReport {
    /// CSV with header `step,lr,loss,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,accuracy\n");
        for r in &self.steps {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.lr, r.loss, r.accuracy));
        }
        out
    }
}

/// Linear probe over the flattened token sequence.
#[derive(Debug, Clone)]
pub struct Probe {
    pub weight: Tensor,
    pub bias: Tensor,
}

struct SampleOutcome {
    loss: f64,
    correct: bool,
    saep_grads: Option<SaepWeights>,
    probe_grads: Option<(Tensor, Tensor)>,
}

fn softmax_xent(logits: &[f32], label: usize) -> (f64, Vec<f64>, usize) {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let loss = -probs[label].ln();
    let argmax = logits
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > logits[best] { i } else { best });
    (loss, probs, argmax)
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let mut data = Vec::with_capacity(t.len());
    for &src in perm {
        data.extend_from_slice(&t.data()[src * d..(src + 1) * d]);
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn unpermute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let mut data = vec![0.0f32; t.len()];
    for (dst, &src) in perm.iter().enumerate() {
        data[src * d..(src + 1) * d].copy_from_slice(&t.data()[dst * d..(dst + 1) * d]);
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn run_sample(
    sample: &SpatialTaskSample,
    perm: Option<&[usize]>,
    weights: &SaepWeights,
    probe: &Probe,
    config: &SaepConfig,
    grad_scale: Option<f64>,
) -> Result<SampleOutcome> {
    let (tokens, ws) = saep_forward(&sample.features, weights, config)?;
    let ordered = match perm {
        Some(p) => permute_rows(&tokens.tokens, p),
        None => tokens.tokens.clone(),
    };
    let flat = ordered.clone().reshape(&[1, ordered.len()])?;
    let (logits, cache) = linear_fwd(&flat, &probe.weight, &probe.bias)?;
    let (loss, probs, argmax) = softmax_xent(logits.data(), sample.label);
    let mut outcome = SampleOutcome {
        loss,
        correct: argmax == sample.label,
        saep_grads: None,
        probe_grads: None,
    };
    if let Some(scale) = grad_scale {
        let d_logits = Tensor::new(
            vec![1, NUM_QUADRANTS],
            probs
                .iter()
                .enumerate()
                .map(|(i, p)| ((p - f64::from(u8::from(i == sample.label))) * scale) as f32)
                .collect(),
        )?;
        let g = linear_bwd(&cache, &d_logits)?;
        let d_tokens = g.input.reshape(ordered.shape())?;
        let d_tokens = match perm {
            Some(p) => unpermute_rows(&d_tokens, p),
            None => d_tokens,
        };
        let mut grads = SaepWeights::zeros(config)?;
        saep_backward(&ws, &d_tokens, &mut grads)?;
        outcome.saep_grads = Some(grads);
        outcome.probe_grads = Some((g.weight, g.bias));
    }
    Ok(outcome)
}

fn draw_batch(
    rng: &mut Rng,
    config: &SaepConfig,
    n: usize,
    shuffle: bool,
) -> Result<Vec<(SpatialTaskSample, Option<Vec<usize>>)>> {
    let m = config.tokens_out();
    make_quadrant_task(rng, config, n)?
        .into_iter()
        .map(|s| {
            let perm = shuffle.then(|| {
                let mut p: Vec<usize> = (0..m).collect();
                rng.shuffle(&mut p);
                p
            });
            Ok((s, perm))
        })
        .collect()
}

/// Mean loss and accuracy on a batch, without gradients.
fn evaluate(
    batch: &[(SpatialTaskSample, Option<Vec<usize>>)],
    weights: &SaepWeights,
    probe: &Probe,
    config: &SaepConfig,
) -> Result<(f64, f64)> {
    let outcomes = batch
        .par_iter()
        .map(|(s, p)| run_sample(s, p.as_deref(), weights, probe, config, None))
        .collect::<Result<Vec<_>>>()?;
    let n = outcomes.len() as f64;
    let loss = outcomes.iter().map(|o| o.loss).sum::<f64>() / n;
    let acc = outcomes.iter().filter(|o| o.correct).count() as f64 / n;
    Ok((loss, acc))
}

/// Trains projector + probe on the quadrant task and reports held-out
/// accuracy with the per-step loss trace. Deterministic for a given seed:
/// every batch is drawn from its own seed-derived stream and per-sample
/// gradients are summed in sample order.
pub fn train_probe(config: &SaepConfig, opts: &TrainOptions) -> Result<TrainReport> {
    check_task_config(config)?;
    if opts.batch_size == 0 || opts.eval_samples == 0 {
        return Err(Error::Arg(
            "batch size and eval sample count must be positive".into(),
        ));
    }
    let root = Rng::new(opts.seed);
    let mut params: SaepParams = saep_init(config, &mut root.clone())?;
    // zero-initialized head: an untrained model predicts one fixed class
    let mut probe = Probe {
        weight: Tensor::zeros(&[config.tokens_out() * config.d, NUM_QUADRANTS])?,
        bias: Tensor::zeros(&[NUM_QUADRANTS])?,
    };

    let eval_batch = draw_batch(
        &mut root.fork(EVAL_STREAM),
        config,
        opts.eval_samples,
        opts.shuffle_tokens,
    )?;
    let (initial_loss, _) = evaluate(&eval_batch, &params.weights, &probe, config)?;

    let opt_config = AdamWConfig::new(opts.lr, opts.weight_decay, opts.steps);
    let mut state = OptState::new(
        opt_config,
        params
            .weights
            .tensors()
            .into_iter()
            .chain([&probe.weight, &probe.bias]),
    )?;
    let mut trace = Vec::with_capacity(opts.steps as usize);
    let scale = 1.0 / opts.batch_size as f64;

    for step in 0..opts.steps {
        let batch = draw_batch(
            &mut root.fork(step),
            config,
            opts.batch_size,
            opts.shuffle_tokens,
        )?;
        let outcomes = batch
            .par_iter()
            .map(|(s, p)| {
                run_sample(
                    s,
                    p.as_deref(),
                    &params.weights,
                    &probe,
                    config,
                    Some(scale),
                )
            })
            .collect::<Result<Vec<_>>>()?;

        params.zero_grads();
        let mut probe_w = Tensor::zeros(probe.weight.shape())?;
        let mut probe_b = Tensor::zeros(probe.bias.shape())?;
        let (mut loss, mut correct) = (0.0f64, 0usize);
        for o in &outcomes {
            loss += o.loss;
            correct += usize::from(o.correct);
            let g = o.saep_grads.as_ref().expect("training computes gradients");
            for (acc, part) in params.grads.tensors_mut().into_iter().zip(g.tensors()) {
                acc.add_assign(part)?;
            }
            let (gw, gb) = o.probe_grads.as_ref().expect("training computes gradients");
            probe_w.add_assign(gw)?;
            probe_b.add_assign(gb)?;
        }

        let lr = state.current_lr();
        let grads: Vec<&Tensor> = params
            .grads
            .tensors()
            .into_iter()
            .chain([&probe_w, &probe_b])
            .collect();
        let mut targets: Vec<&mut Tensor> = params
            .weights
            .tensors_mut()
            .into_iter()
            .chain([&mut probe.weight, &mut probe.bias])
            .collect();
        adamw_step(&mut targets, &grads, &mut state)?;

        trace.push(StepRecord {
            step,
            lr,
            loss: loss / outcomes.len() as f64,
            accuracy: correct as f64 / outcomes.len() as f64,
        });
    }

    let (eval_loss, accuracy) = evaluate(&eval_batch, &params.weights, &probe, config)?;
    Ok(TrainReport {
        initial_loss,
        accuracy,
        eval_loss,
        shuffle_tokens: opts.shuffle_tokens,
        steps: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_labels() {
        let config = demo_config(0);
        let mut rng = Rng::new(0);
        assert_eq!(
            make_quadrant_sample(&mut rng, &config, 0, 0).unwrap().label,
            0
        );
        assert_eq!(
            make_quadrant_sample(&mut rng, &config, 0, 7).unwrap().label,
            1
        );
        assert_eq!(
            make_quadrant_sample(&mut rng, &config, 7, 0).unwrap().label,
            2
        );
        assert_eq!(
            make_quadrant_sample(&mut rng, &config, 7, 7).unwrap().label,
            3
        );
    }

    #[test]
    fn marker_is_added_on_every_level() {
        let config = demo_config(0);
        let s = make_quadrant_sample(&mut Rng::new(1), &config, 2, 5).unwrap();
        for g in s.features.grids() {
            let px = g.patch(2, 5);
            assert!(px[0] >= 2.0 && px[1] <= -2.0);
            assert!(g.patch(0, 0).iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn odd_grid_rejected() {
        let config = SaepConfig::new(3, 4, 2, 1, 1, 4);
        assert!(matches!(
            make_quadrant_task(&mut Rng::new(0), &config, 1),
            Err(Error::Arg(_))
        ));
    }

    #[test]
    fn task_is_deterministic() {
        let config = demo_config(0);
        let a = make_quadrant_task(&mut Rng::new(5), &config, 3).unwrap();
        let b = make_quadrant_task(&mut Rng::new(5), &config, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert!(x.features.grids()[1]
                .values()
                .bitwise_eq(y.features.grids()[1].values()));
        }
    }

    #[test]
    fn permutation_round_trip() {
        let t = Tensor::from_fn(&[4, 2], |i| i as f32).unwrap();
        let perm = [2, 0, 3, 1];
        let p = permute_rows(&t, &perm);
        assert_eq!(&p.data()[..2], &[4.0, 5.0]);
        assert_eq!(unpermute_rows(&p, &perm), t);
    }

    #[test]
    fn one_step_changes_loss() {
        let config = demo_config(0);
        let opts = TrainOptions {
            steps: 1,
            eval_samples: 64,
            ..TrainOptions::default()
        };
        let report = train_probe(&config, &opts).unwrap();
        assert_eq!(report.steps.len(), 1);
        assert_ne!(report.initial_loss, report.eval_loss);
        assert!(report
            .to_csv()
            .starts_with("step,lr,loss,accuracy\n0,0.001,"));
    }
}
