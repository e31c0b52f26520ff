//! Central finite-difference checks for every backward pass.
//!
//! For an op `f` and a random upstream `u`, the scalar probe is
//! `L(x) = <u, f(x)>` accumulated in f64. Each input element is nudged by
//! `+-eps` and `(L(x+) - L(x-)) / (x+ - x-)` is compared with the analytic
//! gradient; an element passes when `|g - fd| <= atol + rtol * |fd|`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{
    avg_pool_bwd, avg_pool_fwd, depthwise_conv_bwd, depthwise_conv_fwd, flatten, flatten_bwd,
    gelu_bwd, gelu_fwd, linear_bwd, linear_fwd, pointwise_conv_bwd, pointwise_conv_fwd, reorganize,
    reorganize_bwd, FeatureGrid,
};
use crate::projector::{saep_backward, saep_forward, MultiLevelFeatures, SaepConfig, SaepWeights};
use crate::reference::saep_forward_f64;
use crate::tensor::{rand_uniform, Rng, Tensor};

pub const DEFAULT_EPS: f64 = 1e-3;
pub const ATOL: f64 = 1e-4;
pub const RTOL: f64 = 1e-2;
const TRIALS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub shape: String,
    pub checked: usize,
    pub violations: usize,
    pub max_abs_err: f64,
    /// Largest `|g - fd| - (atol + rtol |fd|)`; positive means a violation.
    pub max_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub eps: f64,
    pub atol: f64,
    pub rtol: f64,
    pub violations: usize,
    pub checks: Vec<OpCheck>,
}

fn inner(u: &Tensor, y: &[f64]) -> f64 {
    u.data()
        .iter()
        .zip(y)
        .fold(0.0, |acc, (&a, &b)| acc + a as f64 * b)
}

fn widen(t: Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Compares `analytic[i]` with finite differences of `<upstream, f(inputs)>`
/// with respect to `inputs[i]`. `f` returns the op output flattened.
pub fn check_gradients(
    name: &str,
    inputs: &[Tensor],
    upstream: &Tensor,
    analytic: &[Tensor],
    eps: f64,
    f: impl Fn(&[Tensor]) -> Result<Vec<f64>>,
) -> Result<OpCheck> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Arg(format!(
            "finite-difference eps must be positive, got {eps}"
        )));
    }
    let mut check = OpCheck {
        name: name.to_string(),
        shape: inputs
            .iter()
            .map(|t| format!("{:?}", t.shape()))
            .collect::<Vec<_>>()
            .join(" "),
        checked: 0,
        violations: 0,
        max_abs_err: 0.0,
        max_excess: f64::NEG_INFINITY,
    };
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        grad.expect_shape(inputs[i].shape(), "analytic gradient")?;
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            let plus = (x as f64 + eps) as f32;
            let minus = (x as f64 - eps) as f32;
            work[i].data_mut()[j] = plus;
            let lp = inner(upstream, &f(&work)?);
            work[i].data_mut()[j] = minus;
            let lm = inner(upstream, &f(&work)?);
            work[i].data_mut()[j] = x;

            let fd = (lp - lm) / (plus as f64 - minus as f64);
            let err = (grad.data()[j] as f64 - fd).abs();
            let excess = err - (ATOL + RTOL * fd.abs());
            check.checked += 1;
            check.max_abs_err = check.max_abs_err.max(err);
            check.max_excess = check.max_excess.max(excess);
            if excess > 0.0 {
                check.violations += 1;
            }
        }
    }
    Ok(check)
}

fn grid_of(t: &Tensor) -> Result<FeatureGrid> {
    FeatureGrid::new(t.clone())
}

fn unit(rng: &mut Rng, shape: &[usize]) -> Result<Tensor> {
    rand_uniform(rng, shape, -1.0, 1.0)
}

/// Extents in `1..=6` that are multiples of `s`.
fn extent(rng: &mut Rng, s: usize) -> usize {
    s * (1 + rng.below(6 / s))
}

fn check_pointwise(rng: &mut Rng, eps: f64) -> Result<OpCheck> {
    let (h, w, cin, cout) = (
        1 + rng.below(6),
        1 + rng.below(6),
        1 + rng.below(4),
        1 + rng.below(4),
    );
    let inputs = vec![
        unit(rng, &[h, w, cin])?,
        unit(rng, &[cin, cout])?,
        unit(rng, &[cout])?,
    ];
    let up = unit(rng, &[h, w, cout])?;
    let (_, cache) = pointwise_conv_fwd(&grid_of(&inputs[0])?, &inputs[1], &inputs[2])?;
    let g = pointwise_conv_bwd(&cache, &grid_of(&up)?)?;
    check_gradients(
        "pointwise_conv",
        &inputs,
        &up,
        &[g.input.into_tensor(), g.weight, g.bias],
        eps,
        |x| {
            Ok(widen(
                pointwise_conv_fwd(&grid_of(&x[0])?, &x[1], &x[2])?
                    .0
                    .into_tensor(),
            ))
        },
    )
}

fn check_depthwise(rng: &mut Rng, s: usize, eps: f64) -> Result<OpCheck> {
    let (h, w, c) = (extent(rng, s), extent(rng, s), 1 + rng.below(4));
    let inputs = vec![
        unit(rng, &[h, w, c])?,
        unit(rng, &[c, s, s])?,
        unit(rng, &[c])?,
    ];
    let up = unit(rng, &[h / s, w / s, c])?;
    let (_, cache) = depthwise_conv_fwd(&grid_of(&inputs[0])?, &inputs[1], &inputs[2], s)?;
    let g = depthwise_conv_bwd(&cache, &grid_of(&up)?)?;
    check_gradients(
        &format!("depthwise_conv_s{s}"),
        &inputs,
        &up,
        &[g.input.into_tensor(), g.kernels, g.bias],
        eps,
        |x| {
            Ok(widen(
                depthwise_conv_fwd(&grid_of(&x[0])?, &x[1], &x[2], s)?
                    .0
                    .into_tensor(),
            ))
        },
    )
}

fn check_pool(rng: &mut Rng, s: usize, eps: f64) -> Result<OpCheck> {
    let (h, w, c) = (extent(rng, s), extent(rng, s), 1 + rng.below(4));
    let inputs = vec![unit(rng, &[h, w, c])?];
    let up = unit(rng, &[h / s, w / s, c])?;
    let g = avg_pool_bwd(&grid_of(&up)?, s)?;
    check_gradients(
        &format!("avg_pool_s{s}"),
        &inputs,
        &up,
        &[g.into_tensor()],
        eps,
        |x| Ok(widen(avg_pool_fwd(&grid_of(&x[0])?, s)?.into_tensor())),
    )
}

fn check_linear(rng: &mut Rng, eps: f64) -> Result<OpCheck> {
    let (m, din, dout) = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6));
    let inputs = vec![
        unit(rng, &[m, din])?,
        unit(rng, &[din, dout])?,
        unit(rng, &[dout])?,
    ];
    let up = unit(rng, &[m, dout])?;
    let (_, cache) = linear_fwd(&inputs[0], &inputs[1], &inputs[2])?;
    let g = linear_bwd(&cache, &up)?;
    check_gradients(
        "linear",
        &inputs,
        &up,
        &[g.input, g.weight, g.bias],
        eps,
        |x| Ok(widen(linear_fwd(&x[0], &x[1], &x[2])?.0)),
    )
}

fn check_gelu(rng: &mut Rng, eps: f64) -> Result<OpCheck> {
    let n = 1 + rng.below(32);
    let inputs = vec![unit(rng, &[n])?];
    let up = unit(rng, &[n])?;
    let (_, cache) = gelu_fwd(&inputs[0]);
    let g = gelu_bwd(&cache, &up)?;
    check_gradients("gelu", &inputs, &up, &[g], eps, |x| {
        Ok(widen(gelu_fwd(&x[0]).0))
    })
}

fn check_reshape(rng: &mut Rng, eps: f64) -> Result<[OpCheck; 2]> {
    let (h, w, c) = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(4));
    let seq = unit(rng, &[h * w, c])?;
    let up_grid = unit(rng, &[h, w, c])?;
    let g = reorganize_bwd(&grid_of(&up_grid)?);
    let a = check_gradients("reorganize", &[seq], &up_grid, &[g], eps, |x| {
        Ok(widen(reorganize(&x[0], h, w)?.into_tensor()))
    })?;

    let grid = unit(rng, &[h, w, c])?;
    let up_seq = unit(rng, &[h * w, c])?;
    let g = flatten_bwd(&up_seq, h, w)?.into_tensor();
    let b = check_gradients("flatten", &[grid], &up_seq, &[g], eps, |x| {
        Ok(widen(flatten(&grid_of(&x[0])?)))
    })?;
    Ok([a, b])
}

/// Ablation flag combinations with at least one downsampling branch:
/// `(use_multi_level, use_depthwise, use_pooling)`.
pub const FLAG_COMBINATIONS: [(bool, bool, bool); 6] = [
    (true, true, true),
    (true, false, true),
    (true, true, false),
    (false, true, true),
    (false, false, true),
    (false, true, false),
];

fn weights_from(t: &[Tensor]) -> SaepWeights {
    SaepWeights {
        pw_weight: t[0].clone(),
        pw_bias: t[1].clone(),
        dw_kernels: t[2].clone(),
        dw_bias: t[3].clone(),
        mlp_w1: t[4].clone(),
        mlp_b1: t[5].clone(),
        mlp_w2: t[6].clone(),
        mlp_b2: t[7].clone(),
    }
}

/// Full projector check for one flag combination on a random tiny config.
pub fn check_saep(rng: &mut Rng, flags: (bool, bool, bool), eps: f64) -> Result<OpCheck> {
    let s = 2 + rng.below(2);
    let config = SaepConfig {
        h: extent(rng, s),
        w: extent(rng, s),
        c: 1 + rng.below(4),
        k: 2,
        c_hid: 1 + rng.below(5),
        stride: s,
        d: 1 + rng.below(6),
        use_multi_level: flags.0,
        use_depthwise: flags.1,
        use_pooling: flags.2,
        seed: 0,
    };
    let mut inputs = Vec::new();
    for _ in 0..config.k {
        inputs.push(unit(rng, &[config.h, config.w, config.c])?);
    }
    for shape in SaepWeights::shapes(&config) {
        inputs.push(unit(rng, &shape)?);
    }
    let k = config.k;
    let grids = inputs[..k]
        .iter()
        .map(grid_of)
        .collect::<Result<Vec<_>>>()?;
    let feats = MultiLevelFeatures::new((1..=k).collect(), grids)?;
    let (tokens, ws) = saep_forward(&feats, &weights_from(&inputs[k..]), &config)?;
    let up = unit(rng, tokens.tokens.shape())?;
    let mut grads = SaepWeights::zeros(&config)?;
    let d_levels = saep_backward(&ws, &up, &mut grads)?;
    let analytic: Vec<Tensor> = d_levels
        .into_iter()
        .map(FeatureGrid::into_tensor)
        .chain(grads.tensors().into_iter().cloned())
        .collect();
    let name = format!(
        "saep[multi_level={},depthwise={},pooling={}]",
        flags.0, flags.1, flags.2
    );
    // f32 rounding through five stacked ops swamps a 2e-3 central
    // difference, so the numerical side runs the f64 reference pipeline.
    check_gradients(&name, &inputs, &up, &analytic, eps, |x| {
        saep_forward_f64(&x[..k], &weights_from(&x[k..]), &config)
    })
}

/// Runs every finite-difference check on randomized tiny shapes.
pub fn gradcheck_suite(seed: u64, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Arg(format!(
            "finite-difference eps must be positive, got {eps}"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut checks = Vec::new();
    for _ in 0..TRIALS {
        checks.push(check_pointwise(&mut rng, eps)?);
        for s in [1, 2, 3] {
            checks.push(check_depthwise(&mut rng, s, eps)?);
            checks.push(check_pool(&mut rng, s, eps)?);
        }
        checks.push(check_linear(&mut rng, eps)?);
        checks.push(check_gelu(&mut rng, eps)?);
        checks.extend(check_reshape(&mut rng, eps)?);
        for flags in FLAG_COMBINATIONS {
            checks.push(check_saep(&mut rng, flags, eps)?);
        }
    }
    Ok(GradCheckReport {
        seed,
        eps,
        atol: ATOL,
        rtol: RTOL,
        violations: checks.iter().map(|c| c.violations).sum(),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_positive_eps() {
        assert!(matches!(gradcheck_suite(0, 0.0), Err(Error::Arg(_))));
        assert!(matches!(gradcheck_suite(0, -1e-3), Err(Error::Arg(_))));
        assert!(matches!(gradcheck_suite(0, f64::NAN), Err(Error::Arg(_))));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::new(vec![3], vec![0.1, -0.4, 0.8]).unwrap();
        let up = Tensor::full(&[3], 1.0).unwrap();
        let wrong = Tensor::full(&[3], 0.5).unwrap();
        let check = check_gradients("gelu", &[x], &up, &[wrong], DEFAULT_EPS, |x| {
            Ok(widen(gelu_fwd(&x[0]).0))
        })
        .unwrap();
        assert!(check.violations > 0);
    }
}
