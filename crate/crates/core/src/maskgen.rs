//! Mask generation: split the HR joint embedding, decode per-branch
//! residuals, reconstruct both branches by upsample-and-add, and classify
//! the absolute difference.
//!
//! Reconstruction happens in image space (three channels in `[0, 1]` plus
//! residual), and a learned per-pixel `3 -> 2` head turns `|hr1 - hr2|`
//! into class probabilities.

use image::RgbImage;

use crate::encoder::{Branch, FeatureEmbedding, Source};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ingestion::ImagePair;
use crate::mask::{Mask, Provenance};
use crate::model::{forward, Model, QuerySet};
use crate::params::ParamStore;
use crate::superres::{axis_coords, ScaleSpec};
use crate::tensor::Tensor;

/// Default binarisation threshold on `P(tampered)`.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-pixel two-class probabilities; class 1 is "tampered".
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    /// `height * width * 2`, row-major.
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 2 {
            return Err(Error::shape("prob_map", format!("{} values for {height}x{width}x2", data.len())));
        }
        for p in data.chunks(2) {
            let ok = p.iter().all(|v| (0.0..=1.0).contains(v)) && (p[0] + p[1] - 1.0).abs() <= 1e-6;
            if !ok {
                return Err(Error::InvalidArgument(format!("not a distribution: {p:?}")));
            }
        }
        Ok(Self { height, width, data })
    }

    /// Every pixel set to the same distribution.
    pub fn uniform(height: usize, width: usize, p_tampered: f64) -> Result<Self> {
        Self::new(height, width, [1.0 - p_tampered, p_tampered].repeat(height * width))
    }

    pub fn p_tampered(&self, i: usize) -> f64 {
        self.data[2 * i + 1]
    }

    /// White where `P(tampered) >= threshold`.
    pub fn threshold(&self, threshold: f64) -> Mask {
        let data = (0..self.height * self.width)
            .map(|i| if self.p_tampered(i) >= threshold { 255 } else { 0 })
            .collect();
        Mask::new(self.width as u32, self.height as u32, data, Provenance::Model).expect("binary by construction")
    }
}

/// Split a joint embedding into its original and tampered halves.
pub fn split(joint: &FeatureEmbedding) -> Result<(FeatureEmbedding, FeatureEmbedding)> {
    if !joint.channels.is_multiple_of(2) {
        return Err(Error::shape("split", format!("odd channel count {}", joint.channels)));
    }
    let c = joint.channels / 2;
    Ok((
        joint.channel_slice(0, c, Source::Original)?,
        joint.channel_slice(c, 2 * c, Source::Tampered)?,
    ))
}

fn decoder_prefix(branch: Branch) -> &'static str {
    match branch {
        Branch::Original => "decoder.original",
        Branch::Tampered => "decoder.tampered",
    }
}

/// Residual decoder as a graph: `[Q, C] ++ cell [Q, 2] -> [Q, 3]`.
pub(crate) fn decode_vars(g: &mut Graph, params: &ParamStore, z: Var, cell: Var, branch: Branch) -> Result<Var> {
    let prefix = decoder_prefix(branch);
    let x = g.concat_cols(z, cell);
    let w0 = g.param(&format!("{prefix}.0.weight"), params.get(&format!("{prefix}.0.weight"))?);
    let b0 = g.param(&format!("{prefix}.0.bias"), params.get(&format!("{prefix}.0.bias"))?);
    let h = g.linear(x, w0, b0);
    let h = g.relu(h);
    let w1 = g.param(&format!("{prefix}.1.weight"), params.get(&format!("{prefix}.1.weight"))?);
    let b1 = g.param(&format!("{prefix}.1.bias"), params.get(&format!("{prefix}.1.bias"))?);
    Ok(g.linear(h, w1, b1))
}

/// `|hr1 - hr2| -> linear -> softmax`, as a graph.
pub(crate) fn diff_head_vars(g: &mut Graph, params: &ParamStore, hr1: Var, hr2: Var) -> Result<Var> {
    let d = g.sub(hr1, hr2);
    let d = g.abs(d);
    let w = g.param("head.weight", params.get("head.weight")?);
    let b = g.param("head.bias", params.get("head.bias")?);
    let logits = g.linear(d, w, b);
    Ok(g.softmax_rows(logits))
}

/// Decode a branch embedding into a residual image of the same grid size.
pub fn decode(model: &Model, z: &FeatureEmbedding, branch: Branch, cell: (f64, f64)) -> Result<FeatureEmbedding> {
    for c in [cell.0, cell.1] {
        if !(c > 0.0 && c <= 2.0) {
            return Err(Error::InvalidArgument(format!("cell component {c} outside (0, 2]")));
        }
    }
    if z.channels != model.config.channels {
        return Err(Error::shape("decode", format!("expected {} channels, got {}", model.config.channels, z.channels)));
    }
    let n = z.height * z.width;
    let mut g = Graph::new();
    let x = g.input(z.to_rows());
    let cell = g.input(Tensor::new(vec![n, 2], [cell.0, cell.1].repeat(n)));
    let r = decode_vars(&mut g, &model.params, x, cell, branch)?;
    FeatureEmbedding::from_rows(g.value(r), z.height, z.width, branch.source())
}

fn snap(u: f64) -> f64 {
    let r = u.round();
    if (u - r).abs() < 1e-9 {
        r
    } else {
        u
    }
}

/// Bilinear samples of `image` (scaled to `[0, 1]`) at native-frame
/// coordinates, pixel-centre convention with border clamping. `[Q, 3]`.
pub fn sample_bilinear(image: &RgbImage, coords: &[[f64; 2]]) -> Tensor {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let raw = image.as_raw();
    let px = |x: usize, y: usize, c: usize| f64::from(raw[(y * w + x) * 3 + c]) / 255.0;
    let mut out = Vec::with_capacity(coords.len() * 3);
    for &[cy, cx] in coords {
        let v = snap(((cy + 1.0) * h as f64 - 1.0) * 0.5).clamp(0.0, (h - 1) as f64);
        let u = snap(((cx + 1.0) * w as f64 - 1.0) * 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (v.floor() as usize, u.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (v - y0 as f64, u - x0 as f64);
        for c in 0..3 {
            let top = if fx == 0.0 { px(x0, y0, c) } else { px(x0, y0, c) * (1.0 - fx) + px(x1, y0, c) * fx };
            let value = if fy == 0.0 {
                top
            } else {
                let bottom = if fx == 0.0 { px(x0, y1, c) } else { px(x0, y1, c) * (1.0 - fx) + px(x1, y1, c) * fx };
                top * (1.0 - fy) + bottom * fy
            };
            out.push(value);
        }
    }
    Tensor::new(vec![coords.len(), 3], out)
}

/// Bilinearly upsample `image` to the HR grid of `scale` and add `residual`.
pub fn upsample_add(image: &RgbImage, residual: &FeatureEmbedding, scale: &ScaleSpec) -> Result<FeatureEmbedding> {
    let native = (image.height() as usize, image.width() as usize);
    if scale.lr_size != native {
        return Err(Error::shape("upsample_add", format!("image {native:?} vs scale {:?}", scale.lr_size)));
    }
    if (residual.height, residual.width, residual.channels) != (scale.hr_size.0, scale.hr_size.1, 3) {
        return Err(Error::shape(
            "upsample_add",
            format!("residual {}x{}x{} vs {:?}", residual.height, residual.width, residual.channels, scale.hr_size),
        ));
    }
    let ys = axis_coords(scale.hr_size.0);
    let xs = axis_coords(scale.hr_size.1);
    let coords: Vec<[f64; 2]> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| [y, x])).collect();
    let up = sample_bilinear(image, &coords);
    let data = up.data().iter().zip(&residual.data).map(|(a, b)| a + b).collect();
    FeatureEmbedding::new(scale.hr_size.0, scale.hr_size.1, 3, data, residual.source)
}

/// Class probabilities from two reconstructions.
pub fn diff_head(params: &ParamStore, hr1: &FeatureEmbedding, hr2: &FeatureEmbedding) -> Result<ProbMap> {
    if (hr1.height, hr1.width, hr1.channels) != (hr2.height, hr2.width, hr2.channels) || hr1.channels != 3 {
        return Err(Error::shape("diff_head", "reconstructions must share an HxWx3 shape"));
    }
    let mut g = Graph::new();
    let a = g.input(hr1.to_rows());
    let b = g.input(hr2.to_rows());
    let p = diff_head_vars(&mut g, params, a, b)?;
    ProbMap::new(hr1.height, hr1.width, g.value(p).data().to_vec())
}

/// Probability map for a pair on the full HR grid of scale `r`.
pub fn predict_probs(model: &Model, pair: &ImagePair, r: (f64, f64)) -> Result<ProbMap> {
    let native = (pair.original.height() as usize, pair.original.width() as usize);
    let scale = ScaleSpec::new(native, r.0, r.1)?;
    let fwd = forward(model, &pair.original, &pair.tampered, &QuerySet::full(scale))?;
    ProbMap::new(scale.hr_size.0, scale.hr_size.1, fwd.graph.value(fwd.probs).data().to_vec())
}

/// Nearest-neighbour resize of a mask.
pub fn resize_nearest(mask: &Mask, width: u32, height: u32) -> Mask {
    if mask.dims() == (width, height) {
        return mask.clone();
    }
    let (sw, sh) = (mask.width(), mask.height());
    Mask::from_fn(width, height, mask.provenance, |x, y| {
        let sx = ((u64::from(x) * 2 + 1) * u64::from(sw) / (2 * u64::from(width))) as u32;
        let sy = ((u64::from(y) * 2 + 1) * u64::from(sh) / (2 * u64::from(height))) as u32;
        mask.is_white(sx.min(sw - 1), sy.min(sh - 1))
    })
}

/// Full pipeline: a binary mask at the pair's native size.
pub fn predict_mask(model: &Model, pair: &ImagePair, r: (f64, f64), threshold: f64) -> Result<Mask> {
    let probs = predict_probs(model, pair, r)?;
    let mask = probs.threshold(threshold);
    Ok(resize_nearest(&mask, pair.original.width(), pair.original.height()))
}
