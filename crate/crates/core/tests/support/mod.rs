//! Naive reference implementations used as test oracles. Everything here is
//! written directly from the definitions in `f64` and shares no code with the
//! crate's kernels.
#![allow(dead_code)]

use saep::{rand_uniform, Rng, Tensor};

pub fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn max_diff(a: &[f64], b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.len(), "oracle and kernel lengths differ");
    a.iter()
        .zip(b.data())
        .map(|(x, &y)| (x - y as f64).abs())
        .fold(0.0, f64::max)
}

pub fn uniform(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rand_uniform(rng, shape, -1.0, 1.0).unwrap()
}

/// `y[r][c][o] = b[o] + sum_i x[r][c][i] * w[i][o]`.
pub fn pointwise(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let cout = bias.len();
    let mut y = vec![0.0; h * w * cout];
    for r in 0..h {
        for c in 0..w {
            for o in 0..cout {
                let mut acc = bias[o];
                for i in 0..cin {
                    acc += x[(r * w + c) * cin + i] * weight[i * cout + o];
                }
                y[(r * w + c) * cout + o] = acc;
            }
        }
    }
    y
}

/// Per-channel `s x s` window sums weighted by `kernels[ch][u][v]`.
pub fn depthwise(
    x: &[f64],
    h: usize,
    w: usize,
    ch: usize,
    kernels: &[f64],
    bias: &[f64],
    s: usize,
) -> Vec<f64> {
    let (oh, ow) = (h / s, w / s);
    let mut y = vec![0.0; oh * ow * ch];
    for r in 0..oh {
        for c in 0..ow {
            for k in 0..ch {
                let mut acc = bias[k];
                for u in 0..s {
                    for v in 0..s {
                        acc += x[((r * s + u) * w + c * s + v) * ch + k]
                            * kernels[(k * s + u) * s + v];
                    }
                }
                y[(r * ow + c) * ch + k] = acc;
            }
        }
    }
    y
}

pub fn avg_pool(x: &[f64], h: usize, w: usize, ch: usize, s: usize) -> Vec<f64> {
    let (oh, ow) = (h / s, w / s);
    let mut y = vec![0.0; oh * ow * ch];
    for r in 0..oh {
        for c in 0..ow {
            for k in 0..ch {
                let mut acc = 0.0;
                for u in 0..s {
                    for v in 0..s {
                        acc += x[((r * s + u) * w + c * s + v) * ch + k];
                    }
                }
                y[(r * ow + c) * ch + k] = acc / (s * s) as f64;
            }
        }
    }
    y
}

/// Row-wise `x W + b` for `x` of shape `[m, din]`.
pub fn linear(x: &[f64], m: usize, din: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    pointwise(x, m, 1, din, weight, bias)
}

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    widen(t).chunks(d).map(<[f64]>::to_vec).collect()
}

/// Mean cosine over all ordered pairs of distinct rows.
pub fn pairwise_intra(t: &Tensor) -> f64 {
    let rows = rows(t);
    let n = rows.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += cosine(&rows[i], &rows[j]);
            }
        }
    }
    total / (n * (n - 1)) as f64
}

/// Mean cosine between same-position rows.
pub fn rowwise_inter(a: &Tensor, b: &Tensor) -> f64 {
    let (ra, rb) = (rows(a), rows(b));
    ra.iter().zip(&rb).map(|(x, y)| cosine(x, y)).sum::<f64>() / ra.len() as f64
}

/// Projector output composed from the oracles above.
pub fn saep(levels: &[Tensor], weights: &saep::SaepWeights, config: &saep::SaepConfig) -> Vec<f64> {
    let (h, w, c, s, ch, d) = (
        config.h,
        config.w,
        config.c,
        config.stride,
        config.c_hid,
        config.d,
    );
    let used: Vec<&Tensor> = if config.use_multi_level {
        levels.iter().collect()
    } else {
        vec![levels.last().unwrap()]
    };
    let cin = c * used.len();
    let mut stacked = vec![0.0; h * w * cin];
    for (l, t) in used.iter().enumerate() {
        for p in 0..h * w {
            for j in 0..c {
                stacked[p * cin + l * c + j] = t.data()[p * c + j] as f64;
            }
        }
    }
    let act: Vec<f64> = pointwise(
        &stacked,
        h,
        w,
        cin,
        &widen(&weights.pw_weight),
        &widen(&weights.pw_bias),
    )
    .into_iter()
    .map(gelu)
    .collect();
    let m = (h / s) * (w / s);
    let mut trunk = vec![0.0; m * ch];
    if config.use_depthwise {
        let conv = depthwise(
            &act,
            h,
            w,
            ch,
            &widen(&weights.dw_kernels),
            &widen(&weights.dw_bias),
            s,
        );
        trunk.iter_mut().zip(conv).for_each(|(t, v)| *t += v);
    }
    if config.use_pooling {
        let pool = avg_pool(&act, h, w, ch, s);
        trunk.iter_mut().zip(pool).for_each(|(t, v)| *t += v);
    }
    let hidden: Vec<f64> = linear(
        &trunk,
        m,
        ch,
        &widen(&weights.mlp_w1),
        &widen(&weights.mlp_b1),
    )
    .into_iter()
    .map(gelu)
    .collect();
    linear(
        &hidden,
        m,
        d,
        &widen(&weights.mlp_w2),
        &widen(&weights.mlp_b2),
    )
}

/// Minimal NPY reader working straight from the byte layout: magic, version
/// 1.0, little-endian header length, ASCII dict, then raw `<f4` data.
pub fn read_npy_bytes(bytes: &[u8]) -> (Vec<usize>, Vec<f32>) {
    assert_eq!(&bytes[..6], b"\x93NUMPY", "magic");
    assert_eq!((bytes[6], bytes[7]), (1, 0), "version");
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    assert_eq!((10 + header_len) % 64, 0, "header alignment");
    let header = std::str::from_utf8(&bytes[10..10 + header_len]).unwrap();
    assert!(header.ends_with('\n'), "header terminator");
    assert!(header.contains("'descr': '<f4'"), "dtype in {header}");
    assert!(
        header.contains("'fortran_order': False"),
        "order in {header}"
    );
    let open = header.find("'shape': (").unwrap() + "'shape': (".len();
    let close = open + header[open..].find(')').unwrap();
    let shape: Vec<usize> = header[open..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().unwrap())
        .collect();
    let payload = &bytes[10 + header_len..];
    let count: usize = shape.iter().product();
    assert_eq!(payload.len(), 4 * count, "payload length");
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    (shape, data)
}

/// Scalar AdamW with decoupled decay, cosine schedule over `horizon`.
pub struct ScalarAdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub horizon: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl ScalarAdamW {
    pub fn new(lr: f64, weight_decay: f64, horizon: u64, n: usize) -> Self {
        Self {
            lr,
            weight_decay,
            horizon,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let progress = (self.t.min(self.horizon)) as f64 / self.horizon as f64;
        let lr = 0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos());
        self.t += 1;
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
            let mhat = self.m[i] / (1.0 - b1.powi(self.t as i32));
            let vhat = self.v[i] / (1.0 - b2.powi(self.t as i32));
            params[i] -= lr * (mhat / (vhat.sqrt() + eps) + self.weight_decay * params[i]);
        }
    }
}
