//! From (frames, skeleton) to a packed flow-patch tensor: joint-centered
//! cropping, residual flow between temporally aligned patch pairs, zero-mean
//! normalization, spatial downsampling to mu x mu, temporal downsampling, and
//! the conversion into the skeleton-like 2T x K x mu^2 x N layout.
//!
//! Coordinate convention: joint channel 0 is x (column), channel 1 is y
//! (row); both in pixels of the source frames.

use crate::error::{Error, Result};
use crate::flow::{estimate_flow, FlowField, Tvl1Params};
use crate::graph::GraphTopology;
use crate::tensor::{bilinear_resize, Tensor};
use rayon::prelude::*;

/// Ordered raster frames sharing one resolution.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    /// Each frame is [H, W, C] with C = 1 or 3, intensities in [0, 1].
    pub frames: Vec<Tensor<f32>>,
    pub fps: f32,
}

impl FrameSequence {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::Input("frame sequence needs at least 2 frames".into()));
        }
        let shape = self.frames[0].shape().to_vec();
        for (i, f) in self.frames.iter().enumerate() {
            if f.shape() != shape {
                return Err(Error::dim(format!(
                    "frame {i} has shape {:?}, expected {:?}",
                    f.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.frames[0].shape()[0]
    }

    pub fn width(&self) -> usize {
        self.frames[0].shape()[1]
    }
}

/// Joint coordinates over time, layout T x K x C x N.
#[derive(Debug, Clone)]
pub struct SkeletonSequence {
    pub coords: Tensor<f32>,
    pub joint_names: Vec<String>,
    /// person_mask[t][n]: whether person slot n holds a tracked person at t.
    pub person_mask: Vec<Vec<bool>>,
}

impl SkeletonSequence {
    pub fn frames(&self) -> usize {
        self.coords.shape()[0]
    }
    pub fn joints(&self) -> usize {
        self.coords.shape()[1]
    }
    pub fn coord_dims(&self) -> usize {
        self.coords.shape()[2]
    }
    pub fn persons(&self) -> usize {
        self.coords.shape()[3]
    }

    pub fn person_valid(&self, t: usize, n: usize) -> bool {
        self.person_mask
            .get(t)
            .and_then(|row| row.get(n).copied())
            .unwrap_or(false)
    }

    /// Joint position (x, y) in pixels.
    pub fn joint_xy(&self, t: usize, k: usize, n: usize) -> (f32, f32) {
        (self.coords.at(&[t, k, 0, n]), self.coords.at(&[t, k, 1, n]))
    }
}

/// An l x l window sampled around one joint.
#[derive(Debug, Clone)]
pub struct Patch {
    pub pixels: Tensor<f32>,
    /// (t, k, n) of the joint this patch was cropped for.
    pub source_joint: (usize, usize, usize),
    /// Subpixel crop center (x, y).
    pub center: (f32, f32),
}

/// Flow patches for every (selected time, joint, person) slot.
#[derive(Debug, Clone)]
pub struct JfpSequence {
    /// Layout T' x K x mu x mu x 2 x N; channel 0 is u, channel 1 is v.
    pub flows: Tensor<f32>,
    /// Temporal interval between the two patches of a pair, in source frames.
    pub d: usize,
    pub mu: usize,
}

/// Flow-patch sequence folded into the skeleton-like 2T' x K x mu^2 x N
/// layout consumed by the patch branch.
#[derive(Debug, Clone)]
pub struct PackedJfpTensor {
    pub data: Tensor<f32>,
    /// Hash of the extraction configuration that produced this tensor.
    pub provenance: u64,
}

/// Samples an axis-aligned l x l window around `joint` = (x, y) at subpixel
/// precision; samples outside the frame are zero.
///
/// Patch pixel (i, j) reads the source at (y - l/2 + i, x - l/2 + j), so an
/// integer joint at the center of an l x l frame reproduces the frame exactly.
pub fn crop_patch(frame: &Tensor<f32>, joint: (f32, f32), l: usize) -> Result<Patch> {
    if frame.rank() != 3 {
        return Err(Error::dim(format!(
            "crop_patch expects [H, W, C], got {:?}",
            frame.shape()
        )));
    }
    if l < 2 || l % 2 != 0 {
        return Err(Error::Input(format!("patch side must be even and >= 2, got {l}")));
    }
    let (jx, jy) = joint;
    if !jx.is_finite() || !jy.is_finite() {
        return Err(Error::Input("crop_patch: non-finite joint coordinate".into()));
    }
    let (h, w, c) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let half = (l / 2) as f32;
    let mut pixels = Tensor::zeros(&[l, l, c]);
    for i in 0..l {
        let sy = jy - half + i as f32;
        for j in 0..l {
            let sx = jx - half + j as f32;
            let y0 = sy.floor() as isize;
            let x0 = sx.floor() as isize;
            let fy = sy - y0 as f32;
            let fx = sx - x0 as f32;
            let weights = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1, (1.0 - fy) * fx),
                (y0 + 1, x0, fy * (1.0 - fx)),
                (y0 + 1, x0 + 1, fy * fx),
            ];
            for ch in 0..c {
                let mut acc = 0.0f32;
                for &(yy, xx, wt) in &weights {
                    if wt > 0.0 && yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += wt * frame.data()[((yy as usize) * w + xx as usize) * c + ch];
                    }
                }
                pixels.data_mut()[(i * l + j) * c + ch] = acc;
            }
        }
    }
    Ok(Patch {
        pixels,
        source_joint: (0, 0, 0),
        center: joint,
    })
}

/// Collapses a patch to grayscale: pass-through for C=1, Rec.601 luma for C=3.
pub fn to_gray(pixels: &Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = pixels.shape();
    if pixels.rank() != 3 {
        return Err(Error::dim(format!("to_gray expects [h, w, c], got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    match c {
        1 => pixels.clone().reshape(&[h, w]),
        3 => {
            let mut out = Tensor::zeros(&[h, w]);
            for i in 0..h * w {
                let r = pixels.data()[i * 3];
                let g = pixels.data()[i * 3 + 1];
                let b = pixels.data()[i * 3 + 2];
                out.data_mut()[i] = 0.299 * r + 0.587 * g + 0.114 * b;
            }
            Ok(out)
        }
        _ => Err(Error::dim(format!("to_gray: unsupported channel count {c}"))),
    }
}

/// Residual flow between a joint-aligned patch pair: TV-L1 on the grayscale
/// patches followed by zero-mean normalization of both channels.
pub fn make_jfp(prev_patch: &Patch, next_patch: &Patch, params: &Tvl1Params) -> Result<FlowField> {
    if prev_patch.pixels.shape() != next_patch.pixels.shape() {
        return Err(Error::dim(format!(
            "make_jfp: patch shapes {:?} vs {:?}",
            prev_patch.pixels.shape(),
            next_patch.pixels.shape()
        )));
    }
    let a = to_gray(&prev_patch.pixels)?;
    let b = to_gray(&next_patch.pixels)?;
    let mut flow = estimate_flow(&a, &b, params)?;
    flow.zero_mean();
    Ok(flow)
}

/// Adds a global displacement back onto a residual field; test utility for
/// validating the motion decomposition against full-frame ground truth.
pub fn reconstruct_full_motion(vj: (f32, f32), ur: &FlowField) -> Result<FlowField> {
    if !vj.0.is_finite() || !vj.1.is_finite() {
        return Err(Error::Input("reconstruct_full_motion: non-finite displacement".into()));
    }
    Ok(FlowField {
        u: ur.u.map(|x| x + vj.0),
        v: ur.v.map(|x| x + vj.1),
    })
}

/// Displacement of joint (k, n) from frame t to t + d, in pixels (x, y).
pub fn joint_displacement(
    skel: &SkeletonSequence,
    t: usize,
    k: usize,
    n: usize,
    d: usize,
) -> Result<(f32, f32)> {
    let t2 = t + d;
    if t2 >= skel.frames() || k >= skel.joints() || n >= skel.persons() {
        return Err(Error::Input(format!(
            "joint_displacement: index (t={t}, k={k}, n={n}, d={d}) out of range"
        )));
    }
    if !skel.person_valid(t, n) || !skel.person_valid(t2, n) {
        return Err(Error::Input(format!(
            "joint_displacement: person {n} not valid at both t={t} and t={t2}"
        )));
    }
    let (x0, y0) = skel.joint_xy(t, k, n);
    let (x1, y1) = skel.joint_xy(t2, k, n);
    Ok((x1 - x0, y1 - y0))
}

/// Drops the eye and ear joints from an 18-joint pose layout, keeping the
/// remaining 14 in order.
pub fn select_joints_14(skel18: &SkeletonSequence) -> Result<SkeletonSequence> {
    if skel18.joints() != 18 {
        return Err(Error::Schema(format!(
            "select_joints_14 expects 18 joints, got {}",
            skel18.joints()
        )));
    }
    // Eyes and ears are the trailing four joints of the 18-joint layout.
    let keep: Vec<usize> = (0..14).collect();
    let (t_len, c, n) = (skel18.frames(), skel18.coord_dims(), skel18.persons());
    let mut coords = Tensor::zeros(&[t_len, 14, c, n]);
    for t in 0..t_len {
        for (new_k, &k) in keep.iter().enumerate() {
            for ch in 0..c {
                for person in 0..n {
                    coords.set(&[t, new_k, ch, person], skel18.coords.at(&[t, k, ch, person]));
                }
            }
        }
    }
    let joint_names = if skel18.joint_names.len() == 18 {
        keep.iter().map(|&k| skel18.joint_names[k].clone()).collect()
    } else {
        Vec::new()
    };
    Ok(SkeletonSequence {
        coords,
        joint_names,
        person_mask: skel18.person_mask.clone(),
    })
}

/// Patch side from the mean 2D bone length: round_to_even(alpha * mean),
/// clamped to [8, 64].
pub fn adaptive_patch_size(
    skel: &SkeletonSequence,
    topo: &GraphTopology,
    alpha: f32,
) -> Result<usize> {
    if alpha <= 0.0 {
        return Err(Error::Input("adaptive_patch_size: alpha must be > 0".into()));
    }
    if skel.joints() != topo.joints {
        return Err(Error::Schema(format!(
            "adaptive_patch_size: skeleton K={} vs topology K={}",
            skel.joints(),
            topo.joints
        )));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for t in 0..skel.frames() {
        for n in 0..skel.persons() {
            if !skel.person_valid(t, n) {
                continue;
            }
            for k in 0..skel.joints() {
                let p = topo.parent[k];
                if p == k {
                    continue;
                }
                let (x0, y0) = skel.joint_xy(t, k, n);
                let (x1, y1) = skel.joint_xy(t, p, n);
                if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
                    continue;
                }
                total += (((x0 - x1) as f64).powi(2) + ((y0 - y1) as f64).powi(2)).sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Input("adaptive_patch_size: no valid bones".into()));
    }
    let mean = total / count as f64;
    let even = 2.0 * (alpha as f64 * mean / 2.0).round();
    Ok((even as i64).clamp(8, 64) as usize)
}

/// Strided frame selection t = 0, factor, 2*factor, ... brought to exactly
/// `target_len` entries: longer runs are uniformly subsampled, shorter runs
/// repeat the last index.
pub fn temporal_downsample(total: usize, factor: usize, target_len: usize) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(Error::Input("temporal_downsample: empty sequence".into()));
    }
    if factor < 1 || target_len == 0 {
        return Err(Error::Input("temporal_downsample: factor and target must be >= 1".into()));
    }
    let strided: Vec<usize> = (0..total).step_by(factor).collect();
    let mut out = Vec::with_capacity(target_len);
    if strided.len() >= target_len {
        for i in 0..target_len {
            out.push(strided[i * strided.len() / target_len]);
        }
    } else {
        out.extend_from_slice(&strided);
        let last = *strided.last().unwrap();
        out.resize(target_len, last);
    }
    Ok(out)
}

/// Folds the flow channel axis into time: frame t emits row 2t for u and
/// 2t + 1 for v, and the mu x mu grid flattens row-major. Bijective.
pub fn pack_jfp(jfp: &JfpSequence) -> Result<PackedJfpTensor> {
    let shape = jfp.flows.shape();
    if jfp.flows.rank() != 6 || shape[4] != 2 {
        return Err(Error::dim(format!(
            "pack_jfp expects T' x K x mu x mu x 2 x N, got {shape:?}"
        )));
    }
    let (t_len, k, mu_h, mu_w, n) = (shape[0], shape[1], shape[2], shape[3], shape[5]);
    if mu_h != mu_w {
        return Err(Error::dim(format!("pack_jfp: non-square patches {mu_h}x{mu_w}")));
    }
    let mu2 = mu_h * mu_w;
    let mut data = Tensor::zeros(&[2 * t_len, k, mu2, n]);
    for t in 0..t_len {
        for joint in 0..k {
            for iy in 0..mu_h {
                for ix in 0..mu_w {
                    for ch in 0..2 {
                        for person in 0..n {
                            let v = jfp.flows.at(&[t, joint, iy, ix, ch, person]);
                            data.set(&[2 * t + ch, joint, iy * mu_w + ix, person], v);
                        }
                    }
                }
            }
        }
    }
    Ok(PackedJfpTensor { data, provenance: 0 })
}

/// Inverse of [`pack_jfp`].
pub fn unpack_jfp(packed: &PackedJfpTensor, d: usize) -> Result<JfpSequence> {
    let shape = packed.data.shape();
    if packed.data.rank() != 4 || shape[0] % 2 != 0 {
        return Err(Error::dim(format!(
            "unpack_jfp expects 2T' x K x mu^2 x N, got {shape:?}"
        )));
    }
    let (t2, k, mu2, n) = (shape[0], shape[1], shape[2], shape[3]);
    let mu = (mu2 as f64).sqrt().round() as usize;
    if mu * mu != mu2 {
        return Err(Error::dim(format!("unpack_jfp: {mu2} is not a square")));
    }
    let t_len = t2 / 2;
    let mut flows = Tensor::zeros(&[t_len, k, mu, mu, 2, n]);
    for t in 0..t_len {
        for joint in 0..k {
            for iy in 0..mu {
                for ix in 0..mu {
                    for ch in 0..2 {
                        for person in 0..n {
                            let v = packed.data.at(&[2 * t + ch, joint, iy * mu + ix, person]);
                            flows.set(&[t, joint, iy, ix, ch, person], v);
                        }
                    }
                }
            }
        }
    }
    Ok(JfpSequence { flows, d, mu })
}

/// Extraction settings for one run of the patch pipeline.
#[derive(Debug, Clone)]
pub struct ExtractConfig {
    /// Patch side length; even, >= 8.
    pub patch_side: usize,
    /// Downsampled patch resolution.
    pub mu: usize,
    pub temporal_factor: usize,
    pub target_len: usize,
    pub tvl1: Tvl1Params,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            patch_side: 32,
            mu: 8,
            temporal_factor: 2,
            target_len: 64,
            tvl1: Tvl1Params::default(),
        }
    }
}

fn downsample_field(field: &Tensor<f32>, mu: usize) -> Result<Tensor<f32>> {
    let (h, w) = (field.shape()[0], field.shape()[1]);
    let as3 = field.clone().reshape(&[h, w, 1])?;
    bilinear_resize(&as3, mu, mu)?.reshape(&[mu, mu])
}

/// Full flow-patch extraction: temporal selection, joint-aligned cropping,
/// TV-L1 residual flow, mu x mu downsampling, zero-mean normalization.
///
/// Work items are processed in parallel over (t, k, n) and written into
/// disjoint output slices, so the result is identical for any worker count.
pub fn extract_jfp_sequence(
    frames: &FrameSequence,
    skel: &SkeletonSequence,
    config: &ExtractConfig,
) -> Result<JfpSequence> {
    frames.validate()?;
    config.tvl1.validate()?;
    let total = frames.frames.len();
    if skel.frames() != total {
        return Err(Error::Schema(format!(
            "skeleton has {} frames, video has {total}",
            skel.frames()
        )));
    }
    let indices = temporal_downsample(total, config.temporal_factor, config.target_len)?;
    let d = config.temporal_factor;
    let (k, n) = (skel.joints(), skel.persons());
    let (mu, l) = (config.mu, config.patch_side);
    let t_len = indices.len();

    let items: Vec<(usize, usize, usize)> = (0..t_len)
        .flat_map(|ti| (0..k).flat_map(move |kk| (0..n).map(move |nn| (ti, kk, nn))))
        .collect();

    let results: Vec<Result<Vec<f32>>> = items
        .par_iter()
        .map(|&(ti, kk, nn)| -> Result<Vec<f32>> {
            let t = indices[ti];
            let t2 = (t + d).min(total - 1);
            if !skel.person_valid(t, nn) || !skel.person_valid(t2, nn) {
                return Ok(vec![0.0; mu * mu * 2]);
            }
            let p0 = crop_patch(&frames.frames[t], skel.joint_xy(t, kk, nn), l)?;
            let p1 = crop_patch(&frames.frames[t2], skel.joint_xy(t2, kk, nn), l)?;
            let flow = if t == t2 {
                FlowField::zeros(l, l)
            } else {
                let a = to_gray(&p0.pixels)?;
                let b = to_gray(&p1.pixels)?;
                estimate_flow(&a, &b, &config.tvl1)?
            };
            let mut u = downsample_field(&flow.u, mu)?;
            let mut v = downsample_field(&flow.v, mu)?;
            // Zero-mean after downsampling so the stored data carries the
            // invariant exactly.
            let mean_u = u.mean();
            let mean_v = v.mean();
            for x in u.data_mut() {
                *x -= mean_u;
            }
            for x in v.data_mut() {
                *x -= mean_v;
            }
            let mut out = Vec::with_capacity(mu * mu * 2);
            out.extend_from_slice(u.data());
            out.extend_from_slice(v.data());
            Ok(out)
        })
        .collect();

    let mut flows = Tensor::zeros(&[t_len, k, mu, mu, 2, n]);
    for (item, res) in items.iter().zip(results) {
        let (ti, kk, nn) = *item;
        let values = res?;
        for iy in 0..mu {
            for ix in 0..mu {
                flows.set(&[ti, kk, iy, ix, 0, nn], values[iy * mu + ix]);
                flows.set(&[ti, kk, iy, ix, 1, nn], values[mu * mu + iy * mu + ix]);
            }
        }
    }
    Ok(JfpSequence { flows, d, mu })
}

/// Appearance-patch variant: grayscale joint-centered patches downsampled to
/// mu x mu and zero-meaned (mirroring the flow patches, so the branch sees
/// texture contrast rather than absolute brightness), packed as
/// T' x K x mu^2 x N (single channel folds into time 1:1).
pub fn extract_jap_sequence(
    frames: &FrameSequence,
    skel: &SkeletonSequence,
    config: &ExtractConfig,
) -> Result<PackedJfpTensor> {
    frames.validate()?;
    let total = frames.frames.len();
    if skel.frames() != total {
        return Err(Error::Schema(format!(
            "skeleton has {} frames, video has {total}",
            skel.frames()
        )));
    }
    let indices = temporal_downsample(total, config.temporal_factor, config.target_len)?;
    let (k, n) = (skel.joints(), skel.persons());
    let (mu, l) = (config.mu, config.patch_side);
    let t_len = indices.len();

    let items: Vec<(usize, usize, usize)> = (0..t_len)
        .flat_map(|ti| (0..k).flat_map(move |kk| (0..n).map(move |nn| (ti, kk, nn))))
        .collect();

    let results: Vec<Result<Vec<f32>>> = items
        .par_iter()
        .map(|&(ti, kk, nn)| -> Result<Vec<f32>> {
            let t = indices[ti];
            if !skel.person_valid(t, nn) {
                return Ok(vec![0.0; mu * mu]);
            }
            let p = crop_patch(&frames.frames[t], skel.joint_xy(t, kk, nn), l)?;
            let gray = to_gray(&p.pixels)?;
            let mut vals = downsample_field(&gray, mu)?.into_data();
            let mean = vals.iter().sum::<f32>() / vals.len() as f32;
            for v in &mut vals {
                *v -= mean;
            }
            Ok(vals)
        })
        .collect();

    let mut data = Tensor::zeros(&[t_len, k, mu * mu, n]);
    for (item, res) in items.iter().zip(results) {
        let (ti, kk, nn) = *item;
        let values = res?;
        for (i, &v) in values.iter().enumerate() {
            data.set(&[ti, kk, i, nn], v);
        }
    }
    Ok(PackedJfpTensor { data, provenance: 0 })
}
