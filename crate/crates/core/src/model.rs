//! The assembled network: configuration, parameters, and the end-to-end
//! differentiable forward pass from an image pair to per-pixel class
//! probabilities.

use std::sync::Arc;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, backbone_vars, encode_vars, image_to_input, Branch, MmdKernel, STRIDE};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::maskgen::{decode_vars, diff_head_vars, sample_bilinear};
use crate::params::{conv_layer, linear_layer, ParamStore};
use crate::superres::{make_hr_coords, super_resolve_vars, AttentionPlan, LocalGrid, ScaleSpec};
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Branch embedding width `C`; the joint embedding has `2C` channels.
    pub channels: usize,
    pub grid: LocalGrid,
    pub decoder_hidden: usize,
    pub mmd_kernel: MmdKernel,
    /// Use one encoder head for both branches.
    pub tie_encoders: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            grid: LocalGrid::default(),
            decoder_hidden: 64,
            mmd_kernel: MmdKernel::Linear,
            tie_encoders: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("channels must be even and >= 2, got {}", self.channels)));
        }
        if self.decoder_hidden == 0 {
            return Err(Error::InvalidArgument("decoder_hidden must be positive".into()));
        }
        LocalGrid::new(self.grid.gh, self.grid.gw)?;
        Ok(())
    }

    pub fn stride(&self) -> usize {
        STRIDE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Randomly initialised model; weights depend only on `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let mut p = ParamStore::new();
        let widths = [3, c / 2, c / 2, c, c];
        for i in 0..4 {
            conv_layer(&mut p, &format!("backbone.{i}"), widths[i], widths[i + 1], 3, &mut rng);
        }
        conv_layer(&mut p, "encoder.original", c, c, 3, &mut rng);
        if !config.tie_encoders {
            conv_layer(&mut p, "encoder.tampered", c, c, 3, &mut rng);
        }
        for name in crate::superres::PROJECTIONS {
            linear_layer(&mut p, &format!("proj.{name}"), 2 * c, 2 * c, false, &mut rng);
        }
        p.insert("cslab.pos_bias", Tensor::zeros(&[2]));
        linear_layer(&mut p, "fuse", 2 * c, 2 * c, false, &mut rng);
        for branch in ["original", "tampered"] {
            linear_layer(&mut p, &format!("decoder.{branch}.0"), c + 2, config.decoder_hidden, true, &mut rng);
            linear_layer(&mut p, &format!("decoder.{branch}.1"), config.decoder_hidden, 3, false, &mut rng);
            // residuals start at zero so training begins from plain upsampling
            p.insert(format!("decoder.{branch}.1.weight"), Tensor::zeros(&[3, config.decoder_hidden]));
        }
        linear_layer(&mut p, "head", 3, 2, false, &mut rng);
        Ok(Self { config, params: p })
    }

    /// Check that every expected parameter is present with the right shape.
    pub fn check_params(&self) -> Result<()> {
        let reference = Model::init(self.config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let have = self.params.get(name)?;
            if have.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    have.shape(),
                    t.shape()
                )));
            }
        }
        if reference.params.len() != self.params.len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        if !self.params.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }
}

/// The HR pixels at which the pipeline is evaluated.
#[derive(Clone, Debug)]
pub struct QuerySet {
    /// Scale relative to the native image size.
    pub scale: ScaleSpec,
    /// Row-major HR pixel indices; `None` means the full grid.
    pub indices: Option<Vec<usize>>,
}

impl QuerySet {
    pub fn full(scale: ScaleSpec) -> Self {
        Self { scale, indices: None }
    }

    pub fn len(&self) -> usize {
        match &self.indices {
            Some(ix) => ix.len(),
            None => self.scale.hr_size.0 * self.scale.hr_size.1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Query coordinates in the native image frame.
    pub fn coords(&self) -> Vec<[f64; 2]> {
        let all = make_hr_coords(&self.scale).coords;
        match &self.indices {
            Some(ix) => ix.iter().map(|&i| all[i]).collect(),
            None => all,
        }
    }
}

/// Tape handles produced by one forward pass.
pub struct Forward {
    pub graph: Graph,
    /// `[Q, 2]` class probabilities.
    pub probs: Var,
    /// Branch embeddings `[h*w, C]`, used by the MMD term.
    pub z1: Var,
    pub z2: Var,
}

/// Map native-frame coordinates into the padded frame the features cover.
fn to_feature_frame(coords: &[[f64; 2]], native: (usize, usize), padded: (usize, usize)) -> Vec<[f64; 2]> {
    let sy = native.0 as f64 / padded.0 as f64;
    let sx = native.1 as f64 / padded.1 as f64;
    coords.iter().map(|&[y, x]| [(y + 1.0) * sy - 1.0, (x + 1.0) * sx - 1.0]).collect()
}

/// Run the whole pipeline on a pair as a differentiable graph.
pub fn forward(model: &Model, original: &RgbImage, tampered: &RgbImage, queries: &QuerySet) -> Result<Forward> {
    if original.dimensions() != tampered.dimensions() {
        return Err(Error::shape(
            "forward",
            format!("original {:?} vs tampered {:?}", original.dimensions(), tampered.dimensions()),
        ));
    }
    let native = (original.height() as usize, original.width() as usize);
    if queries.scale.lr_size != native {
        return Err(Error::shape("forward", format!("scale built for {:?}, pair is {native:?}", queries.scale.lr_size)));
    }
    if native.0 < STRIDE || native.1 < STRIDE {
        return Err(Error::InvalidArgument(format!("pair {native:?} smaller than {STRIDE}x{STRIDE}")));
    }
    let c = model.config.channels;
    let mut g = Graph::new();

    let in1 = g.input(image_to_input(original));
    let in2 = g.input(image_to_input(tampered));
    let [_, hp, wp] = g.value(in1).dims3();
    let f1 = backbone_vars(&mut g, model, in1).map_err(|e| e.in_stage("extract_features"))?;
    let f2 = backbone_vars(&mut g, model, in2).map_err(|e| e.in_stage("extract_features"))?;
    let [_, fh, fw] = g.value(f1).dims3();
    let z1 = encode_vars(&mut g, model, f1, Branch::Original).map_err(|e| e.in_stage("encode"))?;
    let z2 = encode_vars(&mut g, model, f2, Branch::Tampered).map_err(|e| e.in_stage("encode"))?;
    let z3 = g.concat_cols(z1, z2);

    let coords = queries.coords();
    let feature_coords = to_feature_frame(&coords, native, (hp, wp));
    let plan = Arc::new(
        AttentionPlan::build((fh, fw), &feature_coords, model.config.grid).map_err(|e| e.in_stage("local_sample"))?,
    );
    let hr = super_resolve_vars(&mut g, &model.params, z3, plan).map_err(|e| e.in_stage("super_resolve"))?;
    let z1_new = g.slice_cols(hr, 0, c);
    let z2_new = g.slice_cols(hr, c, 2 * c);

    let q = coords.len();
    let (ch, cw) = queries.scale.cell;
    let cell = g.input(Tensor::new(vec![q, 2], [ch, cw].repeat(q)));
    let res1 = decode_vars(&mut g, &model.params, z1_new, cell, Branch::Original).map_err(|e| e.in_stage("decode"))?;
    let res2 = decode_vars(&mut g, &model.params, z2_new, cell, Branch::Tampered).map_err(|e| e.in_stage("decode"))?;
    let up1 = g.input(sample_bilinear(original, &coords));
    let up2 = g.input(sample_bilinear(tampered, &coords));
    let hr1 = g.add(up1, res1);
    let hr2 = g.add(up2, res2);
    let probs = diff_head_vars(&mut g, &model.params, hr1, hr2).map_err(|e| e.in_stage("diff_head"))?;
    if !g.value(probs).all_finite() {
        return Err(Error::NonFinite("class probabilities".into()));
    }
    Ok(Forward { graph: g, probs, z1, z2 })
}

/// Feature-grid size the backbone produces for a native image size.
pub fn feature_size(height: usize, width: usize) -> (usize, usize) {
    let (pb, pr) = encoder::stride_padding(height, width);
    ((height + pb) / STRIDE, (width + pr) / STRIDE)
}
