//! Layer similarity statistics over encoder feature dumps and the layer
//! selection heuristic built on them.
//!
//! Layer indices are 1-based throughout. `intra[l - 1]` is the mean pairwise
//! cosine within layer `l`; `inter[l - 1]` is the mean position-matched cosine
//! between layers `l` and `l + 1`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::npy::tensor_from_npy;
use crate::tensor::Tensor;

fn unit_rows(features: &Tensor) -> Result<Vec<Vec<f64>>> {
    if features.rank() != 2 {
        return Err(shape_err!(
            "features must be [N, C], got {:?}",
            features.shape()
        ));
    }
    let c = features.shape()[1];
    features
        .data()
        .chunks(c)
        .enumerate()
        .map(|(i, row)| {
            let norm = row
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "row {i} has zero or non-finite norm"
                )));
            }
            Ok(row.iter().map(|&v| v as f64 / norm).collect())
        })
        .collect()
}

/// Mean cosine similarity over all unordered row pairs, via
/// `(|sum of unit rows|^2 - N) / (N (N - 1))`.
pub fn intra_layer_similarity(features: &Tensor) -> Result<f64> {
    let rows = unit_rows(features)?;
    let n = rows.len();
    if n < 2 {
        return Err(Error::Arg(format!("need at least 2 rows, got {n}")));
    }
    let mut total = vec![0.0f64; rows[0].len()];
    for row in &rows {
        for (t, v) in total.iter_mut().zip(row) {
            *t += v;
        }
    }
    let sq: f64 = total.iter().map(|t| t * t).sum();
    let n = n as f64;
    Ok(((sq - n) / (n * (n - 1.0))).clamp(-1.0, 1.0))
}

/// Mean over rows of `cos(a_i, b_i)`.
pub fn inter_layer_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "layer shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (ra, rb) = (unit_rows(a)?, unit_rows(b)?);
    let sum: f64 = ra
        .iter()
        .zip(&rb)
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| p * q)
                .sum::<f64>()
                .clamp(-1.0, 1.0)
        })
        .sum();
    Ok(sum / ra.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarityReport {
    pub num_layers: usize,
    #[serde(rename = "images")]
    pub images_averaged: usize,
    pub intra: Vec<f64>,
    pub inter: Vec<f64>,
}

impl LayerSimilarityReport {
    pub fn validate(&self) -> Result<()> {
        let l = self.num_layers;
        if l < 2 || self.intra.len() != l || self.inter.len() != l - 1 {
            return Err(Error::Format(format!(
                "report for {l} layers needs {l} intra and {} inter values, got {} and {}",
                l.saturating_sub(1),
                self.intra.len(),
                self.inter.len()
            )));
        }
        if self.intra.iter().chain(&self.inter).any(|v| !v.is_finite()) {
            return Err(Error::Format(
                "report contains non-finite similarity".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        report.validate()?;
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Every similarity shifted by `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        Self {
            intra: self.intra.iter().map(|v| v + delta).collect(),
            inter: self.inter.iter().map(|v| v + delta).collect(),
            ..self.clone()
        }
    }
}

/// Per-layer intra and adjacent-layer inter similarity for one image.
pub fn image_similarities(layers: &[Tensor]) -> Result<(Vec<f64>, Vec<f64>)> {
    let intra = layers
        .iter()
        .map(intra_layer_similarity)
        .collect::<Result<Vec<_>>>()?;
    let inter = layers
        .windows(2)
        .map(|p| inter_layer_similarity(&p[0], &p[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok((intra, inter))
}

/// Averages per-image similarities; `images[i][l]` is layer `l + 1` of image `i`.
pub fn build_report_from_tensors(images: &[Vec<Tensor>]) -> Result<LayerSimilarityReport> {
    let first = images
        .first()
        .ok_or_else(|| Error::Arg("no images to analyze".into()))?;
    let l = first.len();
    if l < 2 {
        return Err(Error::Format(format!(
            "need at least 2 layers per image, got {l}"
        )));
    }
    if images.iter().any(|img| img.len() != l) {
        return Err(Error::Format(
            "images contribute different layer counts".into(),
        ));
    }
    let per_image = images
        .par_iter()
        .map(|layers| image_similarities(layers))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::Shape(msg) => Error::Format(msg),
            other => other,
        })?;

    let mut intra = vec![0.0f64; l];
    let mut inter = vec![0.0f64; l - 1];
    for (a, e) in &per_image {
        intra.iter_mut().zip(a).for_each(|(acc, v)| *acc += v);
        inter.iter_mut().zip(e).for_each(|(acc, v)| *acc += v);
    }
    let n = per_image.len() as f64;
    intra
        .iter_mut()
        .chain(inter.iter_mut())
        .for_each(|v| *v /= n);
    Ok(LayerSimilarityReport {
        num_layers: l,
        images_averaged: per_image.len(),
        intra,
        inter,
    })
}

/// `(layer id, path)` for every `layer_XX.npy` in `dir`, in arbitrary order.
pub fn list_layer_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let id = name
            .strip_prefix("layer_")
            .and_then(|s| s.strip_suffix(".npy"))
            .and_then(|s| s.parse::<usize>().ok());
        if let Some(id) = id {
            out.push((id, entry.path()));
        }
    }
    Ok(out)
}

/// Drops a leading CLS row when the row count is one more than a perfect
/// square (and is not itself a perfect square).
pub fn strip_square_cls(seq: Tensor) -> Result<Tensor> {
    let n = seq.shape()[0];
    let is_square = |m: usize| {
        let r = (m as f64).sqrt().round() as usize;
        r * r == m
    };
    if seq.rank() == 2 && n > 1 && !is_square(n) && is_square(n - 1) {
        crate::projector::strip_cls(&seq, n - 1)
    } else {
        Ok(seq)
    }
}

/// Reads a dump tree (one sub-directory per image holding `layer_01.npy` ...
/// `layer_LL.npy`) and averages the similarity statistics across images.
pub fn build_report(dumps: impl AsRef<Path>) -> Result<LayerSimilarityReport> {
    let dumps = dumps.as_ref();
    let mut image_dirs = Vec::new();
    for entry in fs::read_dir(dumps).map_err(|e| Error::io(dumps, e))? {
        let entry = entry.map_err(|e| Error::io(dumps, e))?;
        if entry.path().is_dir() {
            image_dirs.push(entry.path());
        }
    }
    image_dirs.sort();
    if image_dirs.is_empty() {
        return Err(Error::Format(format!(
            "{}: no image directories",
            dumps.display()
        )));
    }

    let mut expected: Option<Vec<usize>> = None;
    let mut images = Vec::with_capacity(image_dirs.len());
    for dir in &image_dirs {
        let mut files = list_layer_files(dir)?;
        files.sort();
        let ids: Vec<usize> = files.iter().map(|(id, _)| *id).collect();
        if ids.iter().enumerate().any(|(i, &id)| id != i + 1) {
            return Err(Error::Format(format!(
                "{}: layer files must be numbered 1..L without gaps, found {ids:?}",
                dir.display()
            )));
        }
        match &expected {
            None => expected = Some(ids),
            Some(e) if *e != ids => {
                return Err(Error::Format(format!(
                    "{}: has {} layers, first image has {}",
                    dir.display(),
                    ids.len(),
                    e.len()
                )))
            }
            Some(_) => {}
        }
        let layers = files
            .into_iter()
            .map(|(_, path)| tensor_from_npy(path).and_then(strip_square_cls))
            .collect::<Result<Vec<_>>>()?;
        images.push(layers);
    }
    build_report_from_tensors(&images)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub selected: Vec<usize>,
    pub anchor_low: usize,
    pub pivot: usize,
}

/// Picks `k` layers: the lowest intra-similarity layer, the pivot layer
/// (high intra similarity, weak link to its predecessor, strong link to its
/// successor), `k - 3` layers evenly spaced between them, and `last_usable`
/// (default: the penultimate layer).
pub fn select_layers(
    report: &LayerSimilarityReport,
    k: usize,
    last_usable: Option<usize>,
) -> Result<LayerSelection> {
    report.validate()?;
    if k < 3 {
        return Err(Error::Arg(format!("need k >= 3 layers, got {k}")));
    }
    let l = report.num_layers;
    let last = last_usable.unwrap_or(l - 1);
    if last == 0 || last > l {
        return Err(Error::Arg(format!(
            "last usable layer {last} outside 1..={l}"
        )));
    }
    let intra = |layer: usize| report.intra[layer - 1];
    // similarity between `layer` and `layer + 1`
    let link = |layer: usize| report.inter[layer - 1];

    let mut anchor = 1;
    for layer in 2..=last {
        if intra(layer) < intra(anchor) {
            anchor = layer;
        }
    }

    let mut pivot: Option<(usize, f64)> = None;
    for layer in anchor + 1..last {
        let score = intra(layer) - link(layer - 1) + link(layer);
        if pivot.is_none_or(|(_, best)| score > best) {
            pivot = Some((layer, score));
        }
    }
    let Some((pivot, _)) = pivot else {
        return Err(Error::Arg(format!(
            "no room for a pivot between layer {anchor} and last usable layer {last}"
        )));
    };
    let fill = k - 3;
    if pivot - anchor - 1 < fill {
        return Err(Error::Arg(format!(
            "cannot place {fill} layers strictly between {anchor} and {pivot}"
        )));
    }

    let step = (((pivot - anchor) as f64 / (k - 2) as f64).round() as usize).max(1);
    let mut between: Vec<usize> = Vec::with_capacity(fill);
    for i in 1..=fill {
        let mut layer = (anchor + i * step).min(pivot - 1);
        while layer < pivot && between.contains(&layer) {
            layer += 1;
        }
        if layer >= pivot {
            let target = anchor + i * step;
            layer = (anchor + 1..pivot)
                .filter(|c| !between.contains(c))
                .min_by_key(|&c| (c.abs_diff(target), c))
                .expect("enough free layers checked above");
        }
        between.push(layer);
    }

    let mut selected = vec![anchor, pivot, last];
    selected.extend(between);
    selected.sort_unstable();
    debug_assert_eq!(selected.len(), k);
    Ok(LayerSelection {
        selected,
        anchor_low: anchor,
        pivot,
    })
}

/// Synthetic similarity curves of the shape seen on CLIP-like encoders:
/// intra similarity falls to a minimum at `low`, then rises, with an
/// anomalous bump at `pivot` that is weakly linked to the layer before it
/// and strongly linked to the layer after it.
pub fn v_shaped_report(num_layers: usize, low: usize, pivot: usize) -> LayerSimilarityReport {
    assert!(1 <= low && low < pivot && pivot < num_layers);
    let intra = (1..=num_layers)
        .map(|l| {
            let base = if l <= low {
                0.24 + 0.04 * (low - l) as f64
            } else {
                0.24 + 0.03 * (l - low) as f64
            };
            if l == pivot {
                base + 0.15
            } else {
                base
            }
        })
        .collect();
    let inter = (1..num_layers)
        .map(|l| {
            let base = 0.9 - 0.02 * l.abs_diff(low) as f64;
            if l + 1 == pivot {
                0.5
            } else if l == pivot {
                0.95
            } else {
                base
            }
        })
        .collect();
    LayerSimilarityReport {
        num_layers,
        images_averaged: 1,
        intra,
        inter,
    }
}
