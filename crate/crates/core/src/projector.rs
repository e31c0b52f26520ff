//! The spatial-aware efficient projector.
//!
//! Pipeline: stack K feature grids along channels, mix them with a pointwise
//! convolution, apply GELU, then downsample by `s` through a depthwise
//! convolution (stride = kernel = `s`) and/or an average-pool shortcut whose
//! outputs are summed, flatten the `(H/s) x (W/s)` grid to tokens, and map
//! each token through a two-layer GELU MLP to the LLM width.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::grid::{
    self, avg_pool_bwd, avg_pool_fwd, concat_channels, depthwise_conv_bwd, depthwise_conv_fwd,
    flatten, gelu_bwd, gelu_fwd, gelu_grid_bwd, gelu_grid_fwd, linear_bwd, linear_fwd,
    pointwise_conv_bwd, pointwise_conv_fwd, reorganize, split_channels, AffineCache,
    DepthwiseCache, FeatureGrid, GeluCache, PointwiseCache,
};
use crate::npy::{tensor_from_npy, tensor_to_npy, write_atomic};
use crate::tensor::{rand_uniform, Rng, Tensor};

/// Projector hyperparameters and ablation switches. Serialized with exactly
/// these keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaepConfig {
    pub h: usize,
    pub w: usize,
    /// Encoder feature width per level.
    pub c: usize,
    /// Number of encoder levels supplied.
    pub k: usize,
    pub c_hid: usize,
    pub stride: usize,
    /// LLM embedding width.
    pub d: usize,
    pub use_multi_level: bool,
    pub use_depthwise: bool,
    pub use_pooling: bool,
    pub seed: u64,
}

impl SaepConfig {
    /// Full projector with `c_hid = c` and every component enabled.
    pub fn new(h: usize, w: usize, c: usize, k: usize, stride: usize, d: usize) -> Self {
        Self {
            h,
            w,
            c,
            k,
            c_hid: c,
            stride,
            d,
            use_multi_level: true,
            use_depthwise: true,
            use_pooling: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("h", self.h),
            ("w", self.w),
            ("c", self.c),
            ("k", self.k),
            ("c_hid", self.c_hid),
            ("stride", self.stride),
            ("d", self.d),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.h.is_multiple_of(self.stride) || !self.w.is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "{}x{} grid is not divisible by stride {}",
                self.h, self.w, self.stride
            )));
        }
        if !self.use_depthwise && !self.use_pooling {
            return Err(Error::Config(
                "at least one of use_depthwise/use_pooling must be enabled".into(),
            ));
        }
        Ok(())
    }

    /// Levels actually consumed by the pointwise convolution.
    pub fn k_eff(&self) -> usize {
        if self.use_multi_level {
            self.k
        } else {
            1
        }
    }

    pub fn tokens_in(&self) -> usize {
        self.h * self.w
    }

    pub fn out_h(&self) -> usize {
        self.h / self.stride
    }

    pub fn out_w(&self) -> usize {
        self.w / self.stride
    }

    pub fn tokens_out(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        write_atomic(path.as_ref(), text.as_bytes())
    }
}

/// Feature sequences from several encoder layers, laid out on a common grid.
#[derive(Debug, Clone)]
pub struct MultiLevelFeatures {
    layer_ids: Vec<usize>,
    grids: Vec<FeatureGrid>,
}

impl MultiLevelFeatures {
    pub fn new(layer_ids: Vec<usize>, grids: Vec<FeatureGrid>) -> Result<Self> {
        if grids.is_empty() || layer_ids.len() != grids.len() {
            return Err(shape_err!(
                "{} layer ids for {} grids",
                layer_ids.len(),
                grids.len()
            ));
        }
        if layer_ids.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Arg(format!(
                "layer ids {layer_ids:?} must be strictly increasing"
            )));
        }
        let shape = grids[0].values().shape();
        if let Some(g) = grids.iter().find(|g| g.values().shape() != shape) {
            return Err(shape_err!(
                "level grids disagree: {:?} vs {shape:?}",
                g.values().shape()
            ));
        }
        Ok(Self { layer_ids, grids })
    }

    /// Builds levels from raster-order patch sequences, stripping a leading
    /// CLS row when a sequence has exactly `h*w + 1` rows.
    pub fn from_sequences(
        layer_ids: Vec<usize>,
        sequences: &[Tensor],
        h: usize,
        w: usize,
    ) -> Result<Self> {
        let grids = sequences
            .iter()
            .map(|seq| reorganize(&strip_cls(seq, h * w)?, h, w))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layer_ids, grids)
    }

    pub fn layer_ids(&self) -> &[usize] {
        &self.layer_ids
    }

    pub fn grids(&self) -> &[FeatureGrid] {
        &self.grids
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }
}

/// Drops a leading CLS row from `[n_patches + 1, C]`; passes `[n_patches, C]`
/// through unchanged.
pub fn strip_cls(seq: &Tensor, n_patches: usize) -> Result<Tensor> {
    if seq.rank() != 2 {
        return Err(shape_err!(
            "patch sequence must be [N, C], got {:?}",
            seq.shape()
        ));
    }
    let (n, c) = (seq.shape()[0], seq.shape()[1]);
    if n == n_patches {
        Ok(seq.clone())
    } else if n == n_patches + 1 {
        Tensor::new(vec![n_patches, c], seq.data()[c..].to_vec())
    } else {
        Err(shape_err!(
            "sequence has {n} rows, expected {n_patches} patches (optionally plus CLS)"
        ))
    }
}

/// Learnable projector weights. Shapes are a function of [`SaepConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct SaepWeights {
    pub pw_weight: Tensor,
    pub pw_bias: Tensor,
    pub dw_kernels: Tensor,
    pub dw_bias: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

pub const PARAM_NAMES: [&str; 8] = [
    "pw_weight",
    "pw_bias",
    "dw_kernels",
    "dw_bias",
    "mlp_w1",
    "mlp_b1",
    "mlp_w2",
    "mlp_b2",
];

impl SaepWeights {
    pub fn shapes(config: &SaepConfig) -> [Vec<usize>; 8] {
        let (s, ch, d) = (config.stride, config.c_hid, config.d);
        [
            vec![config.c * config.k_eff(), ch],
            vec![ch],
            vec![ch, s, s],
            vec![ch],
            vec![ch, d],
            vec![d],
            vec![d, d],
            vec![d],
        ]
    }

    pub fn zeros(config: &SaepConfig) -> Result<Self> {
        let [a, b, c, d, e, f, g, h] = Self::shapes(config).map(|s| Tensor::zeros(&s));
        Ok(Self {
            pw_weight: a?,
            pw_bias: b?,
            dw_kernels: c?,
            dw_bias: d?,
            mlp_w1: e?,
            mlp_b1: f?,
            mlp_w2: g?,
            mlp_b2: h?,
        })
    }

    /// Fields in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.pw_weight,
            &self.pw_bias,
            &self.dw_kernels,
            &self.dw_bias,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.pw_weight,
            &mut self.pw_bias,
            &mut self.dw_kernels,
            &mut self.dw_bias,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]
    }

    pub fn check(&self, config: &SaepConfig) -> Result<()> {
        for ((t, shape), name) in self
            .tensors()
            .iter()
            .zip(Self::shapes(config))
            .zip(PARAM_NAMES)
        {
            t.expect_shape(&shape, name)?;
        }
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .all(|(a, b)| a.bitwise_eq(b))
    }
}

/// Weights plus a same-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct SaepParams {
    pub weights: SaepWeights,
    pub grads: SaepWeights,
}

impl SaepParams {
    pub fn from_weights(weights: SaepWeights, config: &SaepConfig) -> Result<Self> {
        weights.check(config)?;
        Ok(Self {
            grads: SaepWeights::zeros(config)?,
            weights,
        })
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.tensors_mut() {
            g.fill(0.0);
        }
    }
}

/// Kaiming-uniform draw with bound `sqrt(6 / fan_in)`.
fn kaiming(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    rand_uniform(rng, shape, -bound, bound)
}

/// Initializes weights from `rng`; biases and gradients start at zero.
pub fn saep_init(config: &SaepConfig, rng: &mut Rng) -> Result<SaepParams> {
    config.validate().map_err(|e| Error::Arg(e.to_string()))?;
    let mut weights = SaepWeights::zeros(config)?;
    let s = config.stride;
    weights.pw_weight = kaiming(rng, weights.pw_weight.shape(), config.c * config.k_eff())?;
    weights.dw_kernels = kaiming(rng, weights.dw_kernels.shape(), s * s)?;
    weights.mlp_w1 = kaiming(rng, weights.mlp_w1.shape(), config.c_hid)?;
    weights.mlp_w2 = kaiming(rng, weights.mlp_w2.shape(), config.d)?;
    SaepParams::from_weights(weights, config)
}

/// Projector output: `M = (H/s)(W/s)` tokens of width `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Cached state of the convolutional trunk (everything before flatten).
#[derive(Debug, Clone)]
pub struct TrunkWorkspace {
    levels_provided: usize,
    first_consumed: usize,
    level_channels: usize,
    k_eff: usize,
    stride: usize,
    pointwise: PointwiseCache,
    act: GeluCache,
    depthwise: Option<DepthwiseCache>,
    pooled: bool,
}

fn consumed_levels<'a>(
    features: &'a MultiLevelFeatures,
    config: &SaepConfig,
) -> Result<(usize, Vec<&'a FeatureGrid>)> {
    let grids = features.grids();
    let shape = grids[0].values().shape();
    if shape != [config.h, config.w, config.c] {
        return Err(shape_err!(
            "features are {shape:?}, config expects [{}, {}, {}]",
            config.h,
            config.w,
            config.c
        ));
    }
    if config.use_multi_level {
        if grids.len() != config.k {
            return Err(shape_err!(
                "config stacks {} levels, got {}",
                config.k,
                grids.len()
            ));
        }
        Ok((0, grids.iter().collect()))
    } else {
        let last = grids.len() - 1;
        Ok((last, vec![&grids[last]]))
    }
}

/// Runs the trunk up to the downsampled `[H/s, W/s, Chid]` grid.
pub fn trunk_forward(
    features: &MultiLevelFeatures,
    weights: &SaepWeights,
    config: &SaepConfig,
) -> Result<(FeatureGrid, TrunkWorkspace)> {
    config.validate()?;
    weights.check(config)?;
    let (first_consumed, levels) = consumed_levels(features, config)?;
    let stacked = concat_channels(&levels)?;
    let (mixed, pointwise) = pointwise_conv_fwd(&stacked, &weights.pw_weight, &weights.pw_bias)?;
    let (act_out, act) = gelu_grid_fwd(&mixed);

    let (conv, depthwise) = if config.use_depthwise {
        let (out, cache) = depthwise_conv_fwd(
            &act_out,
            &weights.dw_kernels,
            &weights.dw_bias,
            config.stride,
        )?;
        (Some(out), Some(cache))
    } else {
        (None, None)
    };
    let pool = if config.use_pooling {
        Some(avg_pool_fwd(&act_out, config.stride)?)
    } else {
        None
    };
    let out = match (conv, pool) {
        (Some(a), Some(b)) => FeatureGrid::new(a.values().add(b.values())?)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("validated config enables a branch"),
    };
    let ws = TrunkWorkspace {
        levels_provided: features.len(),
        first_consumed,
        level_channels: config.c,
        k_eff: levels.len(),
        stride: config.stride,
        pointwise,
        act,
        depthwise,
        pooled: config.use_pooling,
    };
    Ok((out, ws))
}

/// Backpropagates through the trunk. Returns one gradient grid per provided
/// level (zeros for levels the config does not consume) and adds parameter
/// gradients into `grads`.
pub fn trunk_backward(
    ws: &TrunkWorkspace,
    upstream: &FeatureGrid,
    grads: &mut SaepWeights,
) -> Result<Vec<FeatureGrid>> {
    let mut d_act: Option<Tensor> = None;
    if let Some(cache) = &ws.depthwise {
        let g = depthwise_conv_bwd(cache, upstream)?;
        grads.dw_kernels.add_assign(&g.kernels)?;
        grads.dw_bias.add_assign(&g.bias)?;
        d_act = Some(g.input.into_tensor());
    }
    if ws.pooled {
        let g = avg_pool_bwd(upstream, ws.stride)?.into_tensor();
        d_act = Some(match d_act {
            Some(conv) => conv.add(&g)?,
            None => g,
        });
    }
    let d_act = FeatureGrid::new(d_act.expect("trunk has at least one branch"))?;
    let d_mixed = gelu_grid_bwd(&ws.act, &d_act)?;
    let g = pointwise_conv_bwd(&ws.pointwise, &d_mixed)?;
    grads.pw_weight.add_assign(&g.weight)?;
    grads.pw_bias.add_assign(&g.bias)?;

    let parts = split_channels(&g.input, &vec![ws.level_channels; ws.k_eff])?;
    let (h, w) = (g.input.height(), g.input.width());
    let mut out = Vec::with_capacity(ws.levels_provided);
    let mut parts = parts.into_iter();
    for level in 0..ws.levels_provided {
        if level >= ws.first_consumed && level < ws.first_consumed + ws.k_eff {
            out.push(parts.next().expect("one part per consumed level"));
        } else {
            out.push(FeatureGrid::zeros(h, w, ws.level_channels)?);
        }
    }
    Ok(out)
}

/// Two-layer GELU MLP applied to every token row.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
struct MlpCache {
    first: AffineCache,
    act: GeluCache,
    second: AffineCache,
}

fn mlp_forward(
    x: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
) -> Result<(Tensor, MlpCache)> {
    let (hidden, first) = linear_fwd(x, w1, b1)?;
    let (act_out, act) = gelu_fwd(&hidden);
    let (y, second) = linear_fwd(&act_out, w2, b2)?;
    Ok((y, MlpCache { first, act, second }))
}

/// Full projector workspace: trunk plus output head.
#[derive(Debug, Clone)]
pub struct SaepWorkspace {
    trunk: TrunkWorkspace,
    out_h: usize,
    out_w: usize,
    head: MlpCache,
}

pub fn saep_forward(
    features: &MultiLevelFeatures,
    weights: &SaepWeights,
    config: &SaepConfig,
) -> Result<(TokenSequence, SaepWorkspace)> {
    let (trunk_out, trunk) = trunk_forward(features, weights, config)?;
    let (out_h, out_w) = (trunk_out.height(), trunk_out.width());
    let (tokens, head) = mlp_forward(
        &flatten(&trunk_out),
        &weights.mlp_w1,
        &weights.mlp_b1,
        &weights.mlp_w2,
        &weights.mlp_b2,
    )?;
    Ok((
        TokenSequence { tokens },
        SaepWorkspace {
            trunk,
            out_h,
            out_w,
            head,
        },
    ))
}

/// Gradient of `<upstream, tokens>` with respect to every provided level;
/// parameter gradients are accumulated into `grads` (normally the
/// [`SaepParams::grads`] mirror).
pub fn saep_backward(
    ws: &SaepWorkspace,
    upstream: &Tensor,
    grads: &mut SaepWeights,
) -> Result<Vec<FeatureGrid>> {
    let second = linear_bwd(&ws.head.second, upstream)?;
    grads.mlp_w2.add_assign(&second.weight)?;
    grads.mlp_b2.add_assign(&second.bias)?;
    let d_hidden = gelu_bwd(&ws.head.act, &second.input)?;
    let first = linear_bwd(&ws.head.first, &d_hidden)?;
    grads.mlp_w1.add_assign(&first.weight)?;
    grads.mlp_b1.add_assign(&first.bias)?;
    let d_grid = grid::flatten_bwd(&first.input, ws.out_h, ws.out_w)?;
    trunk_backward(&ws.trunk, &d_grid, grads)
}

/// The LLaVA-style baseline: one token per patch through a two-layer MLP.
pub fn mlp_baseline_forward(features: &FeatureGrid, weights: &MlpWeights) -> Result<TokenSequence> {
    let (tokens, _) = mlp_forward(
        &flatten(features),
        &weights.w1,
        &weights.b1,
        &weights.w2,
        &weights.b2,
    )?;
    Ok(TokenSequence { tokens })
}

/// Token counts and multiply-add accounting for one projector pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub reduction_pct: f64,
    pub projector_flops: u64,
    pub downstream_attention_ratio: f64,
}

pub fn cost_report(config: &SaepConfig) -> CostReport {
    let tokens_in = config.tokens_in();
    let tokens_out = config.tokens_out();
    let ratio = tokens_out as f64 / tokens_in as f64;
    let (m, ch, d) = (tokens_out as u64, config.c_hid as u64, config.d as u64);
    let window = (config.stride * config.stride) as u64;
    let pointwise = (tokens_in * config.c * config.k_eff()) as u64 * ch;
    let depthwise = if config.use_depthwise {
        m * ch * window
    } else {
        0
    };
    let pool = if config.use_pooling {
        m * ch * window
    } else {
        0
    };
    let head = m * ch * d + m * d * d;
    CostReport {
        tokens_in,
        tokens_out,
        reduction_pct: 100.0 * (1.0 - ratio),
        projector_flops: 2 * (pointwise + depthwise + pool + head),
        downstream_attention_ratio: ratio * ratio,
    }
}

/// Writes `config.json` and one `.npy` per weight into `dir`.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    weights: &SaepWeights,
    config: &SaepConfig,
) -> Result<()> {
    let dir = dir.as_ref();
    weights.check(config)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, t) in PARAM_NAMES.iter().zip(weights.tensors()) {
        tensor_to_npy(t, dir.join(format!("{name}.npy")))?;
    }
    config.save(dir.join("config.json"))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(SaepConfig, SaepWeights)> {
    let dir = dir.as_ref();
    let config = SaepConfig::load(dir.join("config.json"))?;
    let weights = load_weights(dir, &config)?;
    Ok((config, weights))
}

/// Loads the weight files of a checkpoint, checking them against `config`.
pub fn load_weights(dir: impl AsRef<Path>, config: &SaepConfig) -> Result<SaepWeights> {
    let dir = dir.as_ref();
    let mut weights = SaepWeights::zeros(config)?;
    for (name, slot) in PARAM_NAMES.iter().zip(weights.tensors_mut()) {
        *slot = tensor_from_npy(dir.join(format!("{name}.npy")))?;
    }
    weights.check(config)?;
    Ok(weights)
}

/// Reads projector input from a single `.npy` (`[N(+1), C]` for one level or
/// `[K, N(+1), C]` for K levels) or from a directory of `layer_XX.npy` files.
pub fn load_features(path: impl AsRef<Path>, config: &SaepConfig) -> Result<MultiLevelFeatures> {
    let path = path.as_ref();
    let (ids, seqs) = if path.is_dir() {
        let mut layers = crate::layers::list_layer_files(path)?;
        if layers.is_empty() {
            return Err(Error::Format(format!(
                "{}: no layer_XX.npy files",
                path.display()
            )));
        }
        layers.sort();
        let mut ids = Vec::with_capacity(layers.len());
        let mut seqs = Vec::with_capacity(layers.len());
        for (id, file) in layers {
            ids.push(id);
            seqs.push(tensor_from_npy(file)?);
        }
        (ids, seqs)
    } else {
        let t = tensor_from_npy(path)?;
        match t.rank() {
            2 => (vec![1], vec![t]),
            3 => {
                let (k, n, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let seqs = t
                    .data()
                    .chunks(n * c)
                    .map(|chunk| Tensor::new(vec![n, c], chunk.to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                ((1..=k).collect(), seqs)
            }
            _ => {
                return Err(shape_err!(
                    "feature file must be rank 2 or 3, got {:?}",
                    t.shape()
                ))
            }
        }
    };
    MultiLevelFeatures::from_sequences(ids, &seqs, config.h, config.w)
}
