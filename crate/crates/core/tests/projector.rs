mod support;

use proptest::prelude::*;
use saep::grid::depthwise_conv_fwd;
use saep::projector::{mlp_baseline_forward, trunk_backward, trunk_forward, MlpWeights};
use saep::reference::saep_forward_f64;
use saep::{
    cost_report, saep_backward, saep_forward, saep_init, FeatureGrid, MultiLevelFeatures, Rng,
    SaepConfig, SaepWeights, Tensor,
};
use support::{max_diff, uniform};

fn tiny() -> SaepConfig {
    SaepConfig {
        c_hid: 5,
        ..SaepConfig::new(4, 4, 3, 2, 2, 6)
    }
}

fn levels(rng: &mut Rng, config: &SaepConfig) -> Vec<Tensor> {
    (0..config.k)
        .map(|_| uniform(rng, &[config.h, config.w, config.c]))
        .collect()
}

fn features(levels: &[Tensor]) -> MultiLevelFeatures {
    let grids = levels
        .iter()
        .map(|t| FeatureGrid::new(t.clone()).unwrap())
        .collect();
    MultiLevelFeatures::new((1..=levels.len()).collect(), grids).unwrap()
}

/// Weights drawn from `[-1, 1]`, biases included, so no term is trivially zero.
fn random_weights(rng: &mut Rng, config: &SaepConfig) -> SaepWeights {
    let mut w = SaepWeights::zeros(config).unwrap();
    for t in w.tensors_mut() {
        *t = uniform(rng, t.shape());
    }
    w
}

#[test]
fn token_counts_and_reduction() {
    let cases = [(2, 144, 75.0), (3, 64, 88.9)];
    for (s, tokens, pct) in cases {
        let report = cost_report(&SaepConfig::new(24, 24, 1024, 5, s, 4096));
        assert_eq!(report.tokens_in, 576);
        assert_eq!(report.tokens_out, tokens);
        assert_eq!((report.reduction_pct * 10.0).round() / 10.0, pct);
    }
}

#[test]
fn forward_matches_composed_oracle() {
    let config = tiny();
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let lv = levels(&mut rng, &config);
        let weights = random_weights(&mut rng, &config);
        let (tokens, _) = saep_forward(&features(&lv), &weights, &config).unwrap();
        assert_eq!(tokens.tokens.shape(), &[4, 6]);
        assert!(max_diff(&support::saep(&lv, &weights, &config), &tokens.tokens) <= 1e-5);
    }
}

#[test]
fn ablations_match_composed_oracle() {
    for (multi, dw, pool) in saep::gradcheck::FLAG_COMBINATIONS {
        let config = SaepConfig {
            use_multi_level: multi,
            use_depthwise: dw,
            use_pooling: pool,
            ..tiny()
        };
        let mut rng = Rng::new(11);
        let lv = levels(&mut rng, &config);
        let weights = random_weights(&mut rng, &config);
        let (tokens, _) = saep_forward(&features(&lv), &weights, &config).unwrap();
        let want = support::saep(&lv, &weights, &config);
        assert!(
            max_diff(&want, &tokens.tokens) <= 1e-5,
            "{multi} {dw} {pool}"
        );
        // the library's own f64 path used by the gradient checker agrees too
        let reference = saep_forward_f64(&lv, &weights, &config).unwrap();
        let gap = want
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap <= 1e-12);
    }
}

#[test]
fn mlp_baseline_keeps_every_patch() {
    let mut rng = Rng::new(0);
    let grid = FeatureGrid::new(uniform(&mut rng, &[24, 24, 8])).unwrap();
    let eye = Tensor::eye(8).unwrap();
    let zero = Tensor::zeros(&[8]).unwrap();
    let weights = MlpWeights {
        w1: eye.clone(),
        b1: zero.clone(),
        w2: eye,
        b2: zero,
    };
    let tokens = mlp_baseline_forward(&grid, &weights).unwrap();
    assert_eq!(tokens.len(), 576);
    let want: Vec<f64> = support::widen(grid.values())
        .into_iter()
        .map(support::gelu)
        .collect();
    assert!(max_diff(&want, &tokens.tokens) <= 1e-6);
}

#[test]
fn zero_depthwise_reduces_to_pooling_bitwise() {
    let config = SaepConfig::new(8, 8, 6, 3, 2, 10);
    for seed in 0..10 {
        let mut rng = Rng::new(seed);
        let mut weights = saep_init(&config, &mut rng).unwrap().weights;
        weights.dw_kernels.fill(0.0);
        weights.dw_bias.fill(0.0);
        let feats = features(&levels(&mut rng, &config));
        let (full, _) = saep_forward(&feats, &weights, &config).unwrap();
        let pool_only = SaepConfig {
            use_depthwise: false,
            ..config.clone()
        };
        let (pooled, _) = saep_forward(&feats, &weights, &pool_only).unwrap();
        assert!(full.tokens.bitwise_eq(&pooled.tokens), "seed {seed}");
    }
}

#[test]
fn trunk_is_equivariant_to_whole_tile_shifts() {
    let config = SaepConfig::new(8, 8, 4, 2, 2, 6);
    let mut rng = Rng::new(5);
    let weights = saep_init(&config, &mut rng).unwrap().weights;
    let lv = levels(&mut rng, &config);
    let s = config.stride;
    // content moved down by one stride; the vacated rows get fresh noise
    let shifted: Vec<Tensor> = lv
        .iter()
        .map(|t| {
            let row = config.w * config.c;
            let mut data = uniform(&mut rng, t.shape()).into_data();
            data[s * row..].copy_from_slice(&t.data()[..(config.h - s) * row]);
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect();
    let (a, _) = trunk_forward(&features(&lv), &weights, &config).unwrap();
    let (b, _) = trunk_forward(&features(&shifted), &weights, &config).unwrap();
    for r in 0..a.height() - 1 {
        for c in 0..a.width() {
            assert_eq!(a.patch(r, c), b.patch(r + 1, c), "cell ({r}, {c})");
        }
    }
}

#[test]
fn depthwise_is_linear_in_its_input() {
    let mut rng = Rng::new(9);
    let x = FeatureGrid::new(uniform(&mut rng, &[6, 6, 4])).unwrap();
    let k = uniform(&mut rng, &[4, 3, 3]);
    let zero = Tensor::zeros(&[4]).unwrap();
    let (y, _) = depthwise_conv_fwd(&x, &k, &zero, 3).unwrap();
    let doubled = FeatureGrid::new(x.values().scale(2.0)).unwrap();
    let (y2, _) = depthwise_conv_fwd(&doubled, &k, &zero, 3).unwrap();
    assert!(y2.values().max_abs_diff(&y.values().scale(2.0)) <= 1e-6);
}

#[test]
fn trunk_gradient_splits_across_branches() {
    let base = SaepConfig::new(4, 4, 3, 2, 2, 5);
    let mut rng = Rng::new(21);
    let weights = random_weights(&mut rng, &base);
    let feats = features(&levels(&mut rng, &base));
    let up = FeatureGrid::new(uniform(&mut rng, &[2, 2, 3])).unwrap();
    let run = |dw: bool, pool: bool| {
        let config = SaepConfig {
            use_depthwise: dw,
            use_pooling: pool,
            ..base.clone()
        };
        let (_, ws) = trunk_forward(&feats, &weights, &config).unwrap();
        let mut grads = SaepWeights::zeros(&config).unwrap();
        let d = trunk_backward(&ws, &up, &mut grads).unwrap();
        (d, grads)
    };
    let (both, g_both) = run(true, true);
    let (conv, g_conv) = run(true, false);
    let (pool, g_pool) = run(false, true);
    for level in 0..2 {
        let sum = conv[level].values().add(pool[level].values()).unwrap();
        assert!(both[level].values().max_abs_diff(&sum) <= 1e-6);
    }
    let pw_sum = g_conv.pw_weight.add(&g_pool.pw_weight).unwrap();
    assert!(g_both.pw_weight.max_abs_diff(&pw_sum) <= 1e-6);
    assert!(g_both.dw_kernels.bitwise_eq(&g_conv.dw_kernels));
    assert_eq!(g_pool.dw_kernels.max_abs(), 0.0);
}

#[test]
fn single_level_path_ignores_earlier_levels() {
    let config = SaepConfig {
        use_multi_level: false,
        ..tiny()
    };
    let mut rng = Rng::new(4);
    let weights = random_weights(&mut rng, &config);
    let mut lv = levels(&mut rng, &config);
    let (a, ws) = saep_forward(&features(&lv), &weights, &config).unwrap();
    lv[0] = uniform(&mut rng, lv[0].shape());
    let (b, _) = saep_forward(&features(&lv), &weights, &config).unwrap();
    assert!(a.tokens.bitwise_eq(&b.tokens));
    let mut grads = SaepWeights::zeros(&config).unwrap();
    let d = saep_backward(&ws, &Tensor::full(&[4, 6], 1.0).unwrap(), &mut grads).unwrap();
    assert_eq!(d[0].values().max_abs(), 0.0);
    assert!(d[1].values().max_abs() > 0.0);
}

#[test]
fn forward_rejects_mismatched_features() {
    let config = tiny();
    let weights = SaepWeights::zeros(&config).unwrap();
    let wrong = vec![Tensor::zeros(&[4, 4, 2]).unwrap(); 2];
    let err = saep_forward(&features(&wrong), &weights, &config).unwrap_err();
    assert_eq!(err.code(), "E_SHAPE");
}

proptest! {
    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let config = tiny();
        let mut rng = Rng::new(seed);
        let weights = random_weights(&mut rng, &config);
        let feats = features(&levels(&mut rng, &config));
        let (a, _) = saep_forward(&feats, &weights, &config).unwrap();
        let (b, _) = saep_forward(&feats, &weights, &config).unwrap();
        prop_assert!(a.tokens.bitwise_eq(&b.tokens));
    }

    #[test]
    fn token_count_follows_the_stride(tiles in 1usize..13, s in 1usize..5) {
        let config = SaepConfig::new(tiles * s, tiles * s, 4, 2, s, 8);
        let report = cost_report(&config);
        prop_assert_eq!(report.tokens_out * s * s, report.tokens_in);
        prop_assert!((report.downstream_attention_ratio - 1.0 / (s as f64).powi(4)).abs() < 1e-12);
    }
}
