//! Feature extraction, per-branch encoding, MMD and concatenation.
//!
//! A shared fully convolutional backbone (four 3x3 conv + ReLU blocks with
//! strides 2, 1, 2, 1) turns an RGB image into a `H/4 x W/4 x C` grid. Two
//! encoder heads, one per branch, map that grid to the embeddings that get
//! compared with MMD and concatenated into the joint embedding.

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::Model;
use crate::tensor::Tensor;

/// Total spatial downsampling of the backbone.
pub const STRIDE: usize = 4;

pub(crate) const BACKBONE_STRIDES: [usize; 4] = [2, 1, 2, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Original,
    Tampered,
    Joint,
}

/// Which encoder head to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Original,
    Tampered,
}

impl Branch {
    pub fn source(self) -> Source {
        match self {
            Branch::Original => Source::Original,
            Branch::Tampered => Source::Tampered,
        }
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Branch::Original),
            "tampered" => Ok(Branch::Tampered),
            other => Err(Error::InvalidArgument(format!("unknown branch {other:?}"))),
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Original => "original",
            Branch::Tampered => "tampered",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdKernel {
    /// Squared distance between mean embeddings.
    #[default]
    Linear,
    /// Gaussian kernel, bandwidth from the median pairwise distance.
    Rbf,
}

/// An `H x W x C` grid of features stored row-major with channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEmbedding {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub source: Source,
}

impl FeatureEmbedding {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>, source: Source) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "feature_embedding",
                format!("{} values for {height}x{width}x{channels}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature embedding".into()));
        }
        Ok(Self { height, width, channels, data, source })
    }

    pub(crate) fn from_rows(t: &Tensor, height: usize, width: usize, source: Source) -> Result<Self> {
        Self::new(height, width, t.cols(), t.data().to_vec(), source)
    }

    /// `[H*W, C]` view as an owned tensor.
    pub fn to_rows(&self) -> Tensor {
        Tensor::new(vec![self.height * self.width, self.channels], self.data.clone())
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Channels `start..end` as a new embedding.
    pub fn channel_slice(&self, start: usize, end: usize, source: Source) -> Result<Self> {
        if start >= end || end > self.channels {
            return Err(Error::shape("channel_slice", format!("{start}..{end} of {}", self.channels)));
        }
        let mut data = Vec::with_capacity(self.height * self.width * (end - start));
        for px in self.data.chunks(self.channels) {
            data.extend_from_slice(&px[start..end]);
        }
        Self::new(self.height, self.width, end - start, data, source)
    }
}

/// Bottom/right reflection padding needed to reach a multiple of the stride.
pub fn stride_padding(height: usize, width: usize) -> (usize, usize) {
    ((STRIDE - height % STRIDE) % STRIDE, (STRIDE - width % STRIDE) % STRIDE)
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * n - 2 - i
    }
}

/// `[3, H', W']` input in `[0, 1]`, reflection padded to the backbone stride.
pub fn image_to_input(image: &RgbImage) -> Tensor {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let (pb, pr) = stride_padding(h, w);
    let (hp, wp) = (h + pb, w + pr);
    let mut data = vec![0.0; 3 * hp * wp];
    for y in 0..hp {
        let sy = reflect(y, h);
        for x in 0..wp {
            let px = image.get_pixel(reflect(x, w) as u32, sy as u32);
            for c in 0..3 {
                data[(c * hp + y) * wp + x] = f64::from(px[c]) / 255.0;
            }
        }
    }
    Tensor::new(vec![3, hp, wp], data)
}

/// Backbone as a graph; `input` is `[3, H, W]`, output `[C, H/4, W/4]`.
pub(crate) fn backbone_vars(g: &mut Graph, model: &Model, input: Var) -> Result<Var> {
    let mut x = input;
    for (i, stride) in BACKBONE_STRIDES.iter().enumerate() {
        let w = g.param(&format!("backbone.{i}.weight"), model.params.get(&format!("backbone.{i}.weight"))?);
        let b = g.param(&format!("backbone.{i}.bias"), model.params.get(&format!("backbone.{i}.bias"))?);
        x = g.conv2d(x, w, b, *stride, 1);
        x = g.relu(x);
    }
    Ok(x)
}

pub(crate) fn head_name(model: &Model, branch: Branch) -> &'static str {
    match (branch, model.config.tie_encoders) {
        (Branch::Original, _) | (Branch::Tampered, true) => "encoder.original",
        (Branch::Tampered, false) => "encoder.tampered",
    }
}

/// Encoder head as a graph; `features` is `[C, h, w]`, output `[h*w, C]` rows.
pub(crate) fn encode_vars(g: &mut Graph, model: &Model, features: Var, branch: Branch) -> Result<Var> {
    let name = head_name(model, branch);
    let w = g.param(&format!("{name}.weight"), model.params.get(&format!("{name}.weight"))?);
    let b = g.param(&format!("{name}.bias"), model.params.get(&format!("{name}.bias"))?);
    let z = g.conv2d(features, w, b, 1, 1);
    Ok(g.chw_to_rows(z))
}

fn check_image(image: &RgbImage) -> Result<()> {
    if image.width() < STRIDE as u32 || image.height() < STRIDE as u32 {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} smaller than {STRIDE}x{STRIDE}",
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// Backbone features of one image.
pub fn extract_features(model: &Model, image: &RgbImage) -> Result<FeatureEmbedding> {
    check_image(image)?;
    let mut g = Graph::new();
    let x = g.input(image_to_input(image));
    let y = backbone_vars(&mut g, model, x)?;
    let t = g.value(y);
    if !t.all_finite() {
        return Err(Error::NonFinite("backbone activations".into()));
    }
    let [_, h, w] = t.dims3();
    FeatureEmbedding::from_rows(&t.chw_to_rows(), h, w, Source::Joint)
}

/// Apply the branch's encoder head to backbone features.
pub fn encode(model: &Model, features: &FeatureEmbedding, branch: Branch) -> Result<FeatureEmbedding> {
    let c = model.config.channels;
    if features.channels != c {
        return Err(Error::shape("encode", format!("expected {c} channels, got {}", features.channels)));
    }
    let mut g = Graph::new();
    let x = g.input(features.to_rows().rows_to_chw(features.height, features.width));
    let z = encode_vars(&mut g, model, x, branch)?;
    FeatureEmbedding::from_rows(g.value(z), features.height, features.width, branch.source())
}

fn same_shape(op: &'static str, a: &FeatureEmbedding, b: &FeatureEmbedding) -> Result<()> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::shape(
            op,
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.height, a.width, a.channels, b.height, b.width, b.channels
            ),
        ));
    }
    Ok(())
}

/// Squared MMD between the per-position vectors of two embeddings.
pub fn mmd(z1: &FeatureEmbedding, z2: &FeatureEmbedding, kernel: MmdKernel) -> Result<f64> {
    same_shape("mmd", z1, z2)?;
    let mut g = Graph::new();
    let a = g.input(z1.to_rows());
    let b = g.input(z2.to_rows());
    let m = g.mmd(a, b, kernel);
    Ok(g.value(m).item())
}

/// Channel-wise concatenation: `z1` first, then `z2`.
pub fn concat_embeddings(z1: &FeatureEmbedding, z2: &FeatureEmbedding) -> Result<FeatureEmbedding> {
    same_shape("concat_embeddings", z1, z2)?;
    let c = z1.channels;
    let mut data = Vec::with_capacity(z1.data.len() * 2);
    for (a, b) in z1.data.chunks(c).zip(z2.data.chunks(c)) {
        data.extend_from_slice(a);
        data.extend_from_slice(b);
    }
    FeatureEmbedding::new(z1.height, z1.width, 2 * c, data, Source::Joint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_model(seed: u64) -> Model {
        Model::init(ModelConfig { channels: 8, decoder_hidden: 8, ..ModelConfig::default() }, seed).unwrap()
    }

    fn noise_image(w: u32, h: u32, seed: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = (x.wrapping_mul(73) ^ y.wrapping_mul(151) ^ seed.wrapping_mul(97)).wrapping_mul(2654435761);
            image::Rgb([(v >> 24) as u8, (v >> 16) as u8, (v >> 8) as u8])
        })
    }

    #[test]
    fn feature_shape_follows_stride() {
        let model = Model::init(ModelConfig::default(), 0).unwrap();
        let f = extract_features(&model, &noise_image(64, 64, 1)).unwrap();
        assert_eq!((f.height, f.width, f.channels), (16, 16, 64));
        let f = extract_features(&model, &noise_image(30, 21, 1)).unwrap();
        assert_eq!((f.height, f.width), (6, 8));
    }

    #[test]
    fn zero_image_gives_zero_features_with_zero_bias() {
        let model = small_model(3);
        let f = extract_features(&model, &RgbImage::new(16, 16)).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
        let z = encode(&model, &f, Branch::Tampered).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extraction_is_deterministic() {
        let model = small_model(4);
        let img = noise_image(24, 24, 2);
        assert_eq!(extract_features(&model, &img).unwrap(), extract_features(&model, &img).unwrap());
    }

    #[test]
    fn branches_differ_under_random_init() {
        let model = small_model(5);
        let f = extract_features(&model, &noise_image(16, 16, 3)).unwrap();
        let a = encode(&model, &f, Branch::Original).unwrap();
        let b = encode(&model, &f, Branch::Tampered).unwrap();
        assert_eq!((a.height, a.width, a.channels), (4, 4, 8));
        assert_ne!(a.data, b.data);

        let tied = Model::init(ModelConfig { channels: 8, decoder_hidden: 8, tie_encoders: true, ..ModelConfig::default() }, 5)
            .unwrap();
        let a = encode(&tied, &f, Branch::Original).unwrap();
        let b = encode(&tied, &f, Branch::Tampered).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn unknown_branch_is_an_error() {
        assert!("sideways".parse::<Branch>().is_err());
        assert_eq!("original".parse::<Branch>().unwrap(), Branch::Original);
    }

    #[test]
    fn too_small_image_rejected() {
        let model = small_model(0);
        assert!(extract_features(&model, &RgbImage::new(3, 12)).is_err());
    }

    #[test]
    fn features_are_translation_covariant_in_the_interior() {
        let model = small_model(6);
        let big = noise_image(80, 80, 9);
        let crop = |dx: u32, dy: u32| image::imageops::crop_imm(&big, dx, dy, 64, 64).to_image();
        let a = extract_features(&model, &crop(0, 0)).unwrap();
        let b = extract_features(&model, &crop(STRIDE as u32, 2 * STRIDE as u32)).unwrap();
        // stay 4 feature cells away from every crop border
        for y in 4..a.height - 4 - 2 {
            for x in 4..a.width - 4 - 1 {
                for (u, v) in a.at(y + 2, x + 1).iter().zip(b.at(y, x)) {
                    assert!((u - v).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn mmd_closed_form_example() {
        let ones = FeatureEmbedding::new(3, 3, 4, vec![1.0; 36], Source::Original).unwrap();
        let zeros = FeatureEmbedding::new(3, 3, 4, vec![0.0; 36], Source::Tampered).unwrap();
        assert_eq!(mmd(&ones, &zeros, MmdKernel::Linear).unwrap(), 4.0);
        assert!(mmd(&ones, &ones, MmdKernel::Rbf).unwrap().abs() < 1e-12);
        let other = FeatureEmbedding::new(3, 2, 4, vec![0.0; 24], Source::Tampered).unwrap();
        assert!(mmd(&ones, &other, MmdKernel::Linear).is_err());
    }

    #[test]
    fn concat_layout() {
        let a = FeatureEmbedding::new(2, 2, 2, (0..8).map(f64::from).collect(), Source::Original).unwrap();
        let b = FeatureEmbedding::new(2, 2, 2, (10..18).map(f64::from).collect(), Source::Tampered).unwrap();
        let j = concat_embeddings(&a, &b).unwrap();
        assert_eq!(j.channels, 4);
        assert_eq!(j.at(0, 1), &[2.0, 3.0, 12.0, 13.0]);
        assert_eq!(j.channel_slice(0, 2, Source::Original).unwrap(), a);
        assert_ne!(j, concat_embeddings(&b, &a).unwrap());
    }
}
