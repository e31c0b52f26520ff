//! Straight-line `f64` evaluation of the projector with naive nested loops.
//!
//! Shares no code with the production kernels. The gradient checker
//! differentiates this numerically: `f32` output rounding divided by a
//! `2e-3` step is already ~1e-4, too coarse for a full-pipeline check.

use crate::error::{shape_err, Result};
use crate::grid::gelu_scalar;
use crate::projector::{SaepConfig, SaepWeights};
use crate::tensor::Tensor;

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Projector output `[M, D]`, row-major, for `levels` given as `[H, W, C]`
/// tensors (all provided levels; the config decides which are consumed).
pub fn saep_forward_f64(
    levels: &[Tensor],
    weights: &SaepWeights,
    config: &SaepConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    weights.check(config)?;
    let (h, w, c, s) = (config.h, config.w, config.c, config.stride);
    for level in levels {
        level.expect_shape(&[h, w, c], "reference level")?;
    }
    let used: Vec<Vec<f64>> = if config.use_multi_level {
        if levels.len() != config.k {
            return Err(shape_err!(
                "expected {} levels, got {}",
                config.k,
                levels.len()
            ));
        }
        levels.iter().map(f64s).collect()
    } else {
        vec![f64s(levels.last().ok_or_else(|| shape_err!("no levels"))?)]
    };
    let cin = c * used.len();
    let ch = config.c_hid;
    let pw = f64s(&weights.pw_weight);
    let pb = f64s(&weights.pw_bias);

    // stacked pointwise conv + GELU
    let mut act = vec![0.0f64; h * w * ch];
    for r in 0..h {
        for col in 0..w {
            for o in 0..ch {
                let mut acc = pb[o];
                for i in 0..cin {
                    let (level, j) = (i / c, i % c);
                    acc += used[level][(r * w + col) * c + j] * pw[i * ch + o];
                }
                act[(r * w + col) * ch + o] = gelu_scalar(acc);
            }
        }
    }

    let (oh, ow) = (h / s, w / s);
    let k = f64s(&weights.dw_kernels);
    let kb = f64s(&weights.dw_bias);
    let mut pooled = vec![0.0f64; oh * ow * ch];
    for r in 0..oh {
        for col in 0..ow {
            for o in 0..ch {
                let mut conv = kb[o];
                let mut mean = 0.0;
                for u in 0..s {
                    for v in 0..s {
                        let x = act[((r * s + u) * w + col * s + v) * ch + o];
                        conv += x * k[(o * s + u) * s + v];
                        mean += x / (s * s) as f64;
                    }
                }
                let mut out = 0.0;
                if config.use_depthwise {
                    out += conv;
                }
                if config.use_pooling {
                    out += mean;
                }
                pooled[(r * ow + col) * ch + o] = out;
            }
        }
    }

    let d = config.d;
    let (w1, b1, w2, b2) = (
        f64s(&weights.mlp_w1),
        f64s(&weights.mlp_b1),
        f64s(&weights.mlp_w2),
        f64s(&weights.mlp_b2),
    );
    let m = oh * ow;
    let mut out = vec![0.0f64; m * d];
    for t in 0..m {
        let hidden: Vec<f64> = (0..d)
            .map(|j| {
                gelu_scalar(
                    b1[j]
                        + (0..ch)
                            .map(|i| pooled[t * ch + i] * w1[i * d + j])
                            .sum::<f64>(),
                )
            })
            .collect();
        for j in 0..d {
            out[t * d + j] = b2[j] + (0..d).map(|i| hidden[i] * w2[i * d + j]).sum::<f64>();
        }
    }
    Ok(out)
}
