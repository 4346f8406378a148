//! Arbitrary-scale super-resolution of the joint embedding.
//!
//! The joint embedding is projected to query, key, value and frequency
//! grids. Every high-resolution query coordinate attends over a small
//! window of low-resolution positions around its nearest cell: scores are
//! a scaled dot product between the centre query and each key plus a
//! learned linear bias of the offset, and the resulting weights aggregate
//! both the values and a sinusoidal encoding of the offsets against the
//! learned frequencies.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::encoder::{FeatureEmbedding, Source};
use crate::error::{Error, Result};
use crate::graph::{phase_encoding, softmax_in_place, Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Largest supported upsampling factor per axis.
pub const MAX_SCALE: f64 = 4.0;

/// Upsampling factors together with the high-resolution grid they induce.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleSpec {
    pub r_h: f64,
    pub r_w: f64,
    pub lr_size: (usize, usize),
    pub hr_size: (usize, usize),
    /// Height and width of one HR pixel in normalized `[-1, 1]` units.
    pub cell: (f64, f64),
}

impl ScaleSpec {
    pub fn new(lr_size: (usize, usize), r_h: f64, r_w: f64) -> Result<Self> {
        for r in [r_h, r_w] {
            if !(1.0..=MAX_SCALE).contains(&r) {
                return Err(Error::InvalidArgument(format!("scale {r} outside [1, {MAX_SCALE}]")));
            }
        }
        if lr_size.0 == 0 || lr_size.1 == 0 {
            return Err(Error::InvalidArgument("empty low-resolution grid".into()));
        }
        let hr_size = (
            (r_h * lr_size.0 as f64).floor() as usize,
            (r_w * lr_size.1 as f64).floor() as usize,
        );
        let cell = (2.0 / hr_size.0 as f64, 2.0 / hr_size.1 as f64);
        Ok(Self { r_h, r_w, lr_size, hr_size, cell })
    }

    pub fn identity(lr_size: (usize, usize)) -> Self {
        Self::new(lr_size, 1.0, 1.0).expect("identity scale is valid")
    }
}

/// Pixel-centre coordinates of `n` cells along one axis.
pub fn axis_coords(n: usize) -> Vec<f64> {
    let nf = n as f64;
    (0..n).map(|i| (2.0 * i as f64 + 1.0 - nf) / nf).collect()
}

/// Row-major grid of `[h, w]` coordinates in `[-1, 1]^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<[f64; 2]>,
}

pub fn make_hr_coords(scale: &ScaleSpec) -> CoordGrid {
    let (h, w) = scale.hr_size;
    let ys = axis_coords(h);
    let xs = axis_coords(w);
    let coords = ys.iter().flat_map(|&y| xs.iter().map(move |&x| [y, x])).collect();
    CoordGrid { height: h, width: w, coords }
}

/// Size of the local attention window; both sides odd.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LocalGrid {
    pub gh: usize,
    pub gw: usize,
}

impl Default for LocalGrid {
    fn default() -> Self {
        Self { gh: 3, gw: 3 }
    }
}

impl LocalGrid {
    pub fn new(gh: usize, gw: usize) -> Result<Self> {
        if gh.is_multiple_of(2) || gw.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("local grid {gh}x{gw} must be odd")));
        }
        Ok(Self { gh, gw })
    }

    pub fn len(&self) -> usize {
        self.gh * self.gw
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn nearest_cell(x: f64, n: usize) -> usize {
    let i = ((x + 1.0) * 0.5 * n as f64).floor();
    i.clamp(0.0, (n - 1) as f64) as usize
}

/// Neighbour table for a set of query coordinates over a `field_h x field_w`
/// grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPlan {
    pub field_size: (usize, usize),
    pub grid: LocalGrid,
    /// Row index of the nearest field position, one per query.
    pub centers: Vec<usize>,
    /// `grid.len()` row indices per query.
    pub neighbors: Vec<usize>,
    /// `x_q - x^(i,j)` per neighbour, in normalized units.
    pub offsets: Vec<[f64; 2]>,
}

impl AttentionPlan {
    pub fn build(field_size: (usize, usize), coords: &[[f64; 2]], grid: LocalGrid) -> Result<Self> {
        let grid = LocalGrid::new(grid.gh, grid.gw)?;
        let (fh, fw) = field_size;
        if fh == 0 || fw == 0 {
            return Err(Error::InvalidArgument("empty feature grid".into()));
        }
        let ys = axis_coords(fh);
        let xs = axis_coords(fw);
        let (rh, rw) = ((grid.gh / 2) as isize, (grid.gw / 2) as isize);
        let g = grid.len();
        let mut centers = Vec::with_capacity(coords.len());
        let mut neighbors = Vec::with_capacity(coords.len() * g);
        let mut offsets = Vec::with_capacity(coords.len() * g);
        for &[y, x] in coords {
            let (ci, cj) = (nearest_cell(y, fh), nearest_cell(x, fw));
            centers.push(ci * fw + cj);
            for di in -rh..=rh {
                let i = (ci as isize + di).clamp(0, fh as isize - 1) as usize;
                for dj in -rw..=rw {
                    let j = (cj as isize + dj).clamp(0, fw as isize - 1) as usize;
                    neighbors.push(i * fw + j);
                    offsets.push([y - ys[i], x - xs[j]]);
                }
            }
        }
        Ok(Self { field_size, grid, centers, neighbors, offsets })
    }

    pub fn queries(&self) -> usize {
        self.centers.len()
    }
}

/// Field values gathered over each query's local window.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalSamples {
    pub neighbors: Vec<usize>,
    pub offsets: Vec<[f64; 2]>,
    /// `[Q * G, D]`.
    pub values: Tensor,
}

pub fn local_sample(field: &FeatureEmbedding, coords: &[[f64; 2]], grid: LocalGrid) -> Result<LocalSamples> {
    let plan = AttentionPlan::build((field.height, field.width), coords, grid)?;
    let d = field.channels;
    let mut values = Vec::with_capacity(plan.neighbors.len() * d);
    for &n in &plan.neighbors {
        values.extend_from_slice(&field.data[n * d..(n + 1) * d]);
    }
    Ok(LocalSamples {
        values: Tensor::new(vec![plan.neighbors.len(), d], values),
        neighbors: plan.neighbors,
        offsets: plan.offsets,
    })
}

/// The four projected grids of the joint embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBundle {
    pub q: FeatureEmbedding,
    pub k: FeatureEmbedding,
    pub v: FeatureEmbedding,
    pub f: FeatureEmbedding,
}

pub(crate) const PROJECTIONS: [&str; 4] = ["q", "k", "v", "f"];

/// Graph form of the four 1x1 projections of `z3` (`[N, 2C]` rows).
pub(crate) fn project_vars(g: &mut Graph, params: &ParamStore, z3: Var) -> Result<[Var; 4]> {
    let mut out = [z3; 4];
    for (slot, name) in out.iter_mut().zip(PROJECTIONS) {
        let w = g.param(&format!("proj.{name}.weight"), params.get(&format!("proj.{name}.weight"))?);
        let b = g.param(&format!("proj.{name}.bias"), params.get(&format!("proj.{name}.bias"))?);
        *slot = g.linear(z3, w, b);
    }
    Ok(out)
}

pub fn project_qkvf(z3: &FeatureEmbedding, params: &ParamStore) -> Result<LatentBundle> {
    let expected = params.get("proj.q.weight")?.shape()[1];
    if z3.channels != expected {
        return Err(Error::shape("project_qkvf", format!("expected {expected} channels, got {}", z3.channels)));
    }
    let mut g = Graph::new();
    let x = g.input(z3.to_rows());
    let vars = project_vars(&mut g, params, x)?;
    let grid = |v: Var| FeatureEmbedding::from_rows(g.value(v), z3.height, z3.width, Source::Joint);
    Ok(LatentBundle { q: grid(vars[0])?, k: grid(vars[1])?, v: grid(vars[2])?, f: grid(vars[3])? })
}

/// Softmax attention weights, `[Q * G]`.
pub(crate) fn attention_weights(q: &Tensor, k: &Tensor, wb: &Tensor, plan: &AttentionPlan) -> Vec<f64> {
    let d = q.cols();
    let g = plan.grid.len();
    let inv_sqrt = 1.0 / (d as f64).sqrt();
    let (b0, b1) = (wb.data()[0], wb.data()[1]);
    let mut weights = vec![0.0; plan.queries() * g];
    for (qi, row) in weights.chunks_mut(g).enumerate() {
        let qv = q.row(plan.centers[qi]);
        for (s, slot) in row.iter_mut().enumerate() {
            let n = qi * g + s;
            let kv = k.row(plan.neighbors[n]);
            let dot: f64 = qv.iter().zip(kv).map(|(a, b)| a * b).sum();
            let [dh, dw] = plan.offsets[n];
            *slot = dot * inv_sqrt + b0 * dh + b1 * dw;
        }
        softmax_in_place(row);
    }
    weights
}

fn attend_values(v: &Tensor, weights: &[f64], plan: &AttentionPlan, out: &mut [f64], stride: usize) {
    let d = v.cols();
    let g = plan.grid.len();
    for qi in 0..plan.queries() {
        let dst = &mut out[qi * stride..qi * stride + d];
        for s in 0..g {
            let n = qi * g + s;
            let a = weights[n];
            for (o, x) in dst.iter_mut().zip(v.row(plan.neighbors[n])) {
                *o += a * x;
            }
        }
    }
}

fn encode_frequencies(f: &Tensor, weights: &[f64], plan: &AttentionPlan, out: &mut [f64], stride: usize, offset: usize) {
    let d = f.cols();
    let g = plan.grid.len();
    let mut enc = vec![0.0; d];
    for qi in 0..plan.queries() {
        let dst = &mut out[qi * stride + offset..qi * stride + offset + d];
        for s in 0..g {
            let n = qi * g + s;
            let [dh, dw] = plan.offsets[n];
            phase_encoding(f.row(plan.neighbors[n]), dh, dw, &mut enc);
            let a = weights[n];
            for (o, e) in dst.iter_mut().zip(&enc) {
                *o += a * e;
            }
        }
    }
}

/// Fused forward: `[Q, 2D]` output and the attention weights.
pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    f: &Tensor,
    wb: &Tensor,
    plan: &AttentionPlan,
) -> (Tensor, Vec<f64>) {
    let d = q.cols();
    let weights = attention_weights(q, k, wb, plan);
    let mut out = vec![0.0; plan.queries() * 2 * d];
    attend_values(v, &weights, plan, &mut out, 2 * d);
    encode_frequencies(f, &weights, plan, &mut out, 2 * d, d);
    (Tensor::new(vec![plan.queries(), 2 * d], out), weights)
}

pub(crate) struct AttentionGrads {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub f: Tensor,
    pub wb: Tensor,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    grad_out: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    f: &Tensor,
    plan: &AttentionPlan,
    weights: &[f64],
) -> AttentionGrads {
    let d = q.cols();
    let pairs = d / 2;
    let g = plan.grid.len();
    let inv_sqrt = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut df = vec![0.0; f.len()];
    let mut dwb = [0.0; 2];
    let mut enc = vec![0.0; d];
    let mut da = vec![0.0; g];
    for qi in 0..plan.queries() {
        let go = grad_out.row(qi);
        let (dz, dfe) = go.split_at(d);
        for s in 0..g {
            let n = qi * g + s;
            let nb = plan.neighbors[n];
            let [dh, dw] = plan.offsets[n];
            let a = weights[n];
            let vr = v.row(nb);
            let fr = f.row(nb);
            phase_encoding(fr, dh, dw, &mut enc);
            let mut acc: f64 = dz.iter().zip(vr).map(|(x, y)| x * y).sum();
            acc += dfe.iter().zip(&enc).map(|(x, y)| x * y).sum::<f64>();
            da[s] = acc;
            for (o, x) in dv[nb * d..(nb + 1) * d].iter_mut().zip(dz) {
                *o += a * x;
            }
            // enc = [cos(pi phi_c), sin(pi phi_c)]
            for c in 0..pairs {
                let (cos, sin) = (enc[c], enc[pairs + c]);
                let dphi = a * PI * (-dfe[c] * sin + dfe[pairs + c] * cos);
                df[nb * d + 2 * c] += dphi * dh;
                df[nb * d + 2 * c + 1] += dphi * dw;
            }
        }
        let w = &weights[qi * g..(qi + 1) * g];
        let mean: f64 = w.iter().zip(&da).map(|(x, y)| x * y).sum();
        let center = plan.centers[qi];
        for s in 0..g {
            let n = qi * g + s;
            let nb = plan.neighbors[n];
            let ds = w[s] * (da[s] - mean);
            if ds == 0.0 {
                continue;
            }
            let [dh, dw] = plan.offsets[n];
            dwb[0] += ds * dh;
            dwb[1] += ds * dw;
            let scaled = ds * inv_sqrt;
            let (qrow, krow) = (q.row(center), k.row(nb));
            for c in 0..d {
                dq[center * d + c] += scaled * krow[c];
                dk[nb * d + c] += scaled * qrow[c];
            }
        }
    }
    AttentionGrads {
        q: Tensor::new(q.shape().to_vec(), dq),
        k: Tensor::new(k.shape().to_vec(), dk),
        v: Tensor::new(v.shape().to_vec(), dv),
        f: Tensor::new(f.shape().to_vec(), df),
        wb: Tensor::new(vec![2], dwb.to_vec()),
    }
}

/// Output of [`cslab`]: attended values per query and the weights used.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// `[Q, D]`.
    pub values: Tensor,
    /// `[Q, G]`; each row sums to one.
    pub weights: Tensor,
}

fn check_field(op: &'static str, field: &FeatureEmbedding, plan: &AttentionPlan, d: usize) -> Result<()> {
    if (field.height, field.width) != plan.field_size {
        return Err(Error::shape(
            op,
            format!("field {}x{} vs plan {:?}", field.height, field.width, plan.field_size),
        ));
    }
    if field.channels != d {
        return Err(Error::shape(op, format!("{} channels vs {d}", field.channels)));
    }
    Ok(())
}

/// Cross-scale local attention over the plan's windows.
pub fn cslab(
    plan: &AttentionPlan,
    q: &FeatureEmbedding,
    k: &FeatureEmbedding,
    v: &FeatureEmbedding,
    pos_bias: [f64; 2],
) -> Result<AttentionOutput> {
    let d = q.channels;
    for field in [q, k, v] {
        check_field("cslab", field, plan, d)?;
    }
    let (qt, kt, vt) = (q.to_rows(), k.to_rows(), v.to_rows());
    let weights = attention_weights(&qt, &kt, &Tensor::new(vec![2], pos_bias.to_vec()), plan);
    let mut out = vec![0.0; plan.queries() * d];
    attend_values(&vt, &weights, plan, &mut out, d);
    Ok(AttentionOutput {
        values: Tensor::new(vec![plan.queries(), d], out),
        weights: Tensor::new(vec![plan.queries(), plan.grid.len()], weights),
    })
}

/// Local frequency encoding aggregated with previously computed weights.
pub fn lfeb(plan: &AttentionPlan, f: &FeatureEmbedding, weights: &Tensor) -> Result<Tensor> {
    check_field("lfeb", f, plan, f.channels)?;
    if !f.channels.is_multiple_of(2) {
        return Err(Error::shape("lfeb", "frequency channels must pair up"));
    }
    if weights.shape() != [plan.queries(), plan.grid.len()] {
        return Err(Error::shape("lfeb", format!("weights {:?}", weights.shape())));
    }
    let d = f.channels;
    let mut out = vec![0.0; plan.queries() * d];
    encode_frequencies(&f.to_rows(), weights.data(), plan, &mut out, d, 0);
    Ok(Tensor::new(vec![plan.queries(), d], out))
}

/// Per-neighbour encodings before aggregation, `[Q * G, D]`.
pub fn lfeb_encodings(plan: &AttentionPlan, f: &FeatureEmbedding) -> Result<Tensor> {
    check_field("lfeb", f, plan, f.channels)?;
    let d = f.channels;
    let rows = f.to_rows();
    let mut out = vec![0.0; plan.neighbors.len() * d];
    for (n, chunk) in out.chunks_mut(d).enumerate() {
        let [dh, dw] = plan.offsets[n];
        phase_encoding(rows.row(plan.neighbors[n]), dh, dw, chunk);
    }
    Ok(Tensor::new(vec![plan.neighbors.len(), d], out))
}

/// Graph form of the elementwise product followed by a learned linear map.
pub(crate) fn fuse_vars(g: &mut Graph, params: &ParamStore, z: Var, f: Var) -> Result<Var> {
    let prod = g.mul(z, f);
    let w = g.param("fuse.weight", params.get("fuse.weight")?);
    let b = g.param("fuse.bias", params.get("fuse.bias")?);
    Ok(g.linear(prod, w, b))
}

pub fn fuse(z3_new: &Tensor, f_new: &Tensor, params: &ParamStore) -> Result<Tensor> {
    if z3_new.shape() != f_new.shape() {
        return Err(Error::shape("fuse", format!("{:?} vs {:?}", z3_new.shape(), f_new.shape())));
    }
    let width = params.get("fuse.weight")?.shape()[1];
    if z3_new.cols() != width {
        return Err(Error::shape("fuse", format!("{} channels vs {width}", z3_new.cols())));
    }
    let mut g = Graph::new();
    let z = g.input(z3_new.clone());
    let f = g.input(f_new.clone());
    let out = fuse_vars(&mut g, params, z, f)?;
    Ok(g.value(out).clone())
}

/// Full super-resolution of `z3` at the given query coordinates, as a graph.
///
/// Returns the fused `[Q, 2C]` HR embedding.
pub(crate) fn super_resolve_vars(
    g: &mut Graph,
    params: &ParamStore,
    z3: Var,
    plan: Arc<AttentionPlan>,
) -> Result<Var> {
    let [q, k, v, f] = project_vars(g, params, z3)?;
    let wb = g.param("cslab.pos_bias", params.get("cslab.pos_bias")?);
    let both = g.local_attention(q, k, v, f, wb, plan);
    let d = g.value(z3).cols();
    let z_new = g.slice_cols(both, 0, d);
    let f_new = g.slice_cols(both, d, 2 * d);
    fuse_vars(g, params, z_new, f_new)
}

/// Super-resolve a joint embedding onto the HR grid of `scale`, whose low
/// resolution side is the embedding itself.
pub fn super_resolve(z3: &FeatureEmbedding, params: &ParamStore, scale: &ScaleSpec, grid: LocalGrid) -> Result<FeatureEmbedding> {
    if scale.lr_size != (z3.height, z3.width) {
        return Err(Error::shape("super_resolve", format!("scale built for {:?}", scale.lr_size)));
    }
    let coords = make_hr_coords(scale);
    let plan = Arc::new(AttentionPlan::build((z3.height, z3.width), &coords.coords, grid)?);
    let mut g = Graph::new();
    let x = g.input(z3.to_rows());
    let out = super_resolve_vars(&mut g, params, x, plan)?;
    FeatureEmbedding::from_rows(g.value(out), coords.height, coords.width, Source::Joint)
}
