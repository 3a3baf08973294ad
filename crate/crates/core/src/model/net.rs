//! Forward and analytic backward passes for the block stack.
//!
//! A block is: masked spatial graph convolution Y = relu(W (X (A_norm o M)) + b),
//! then a temporal convolution over the frame axis, then relu. After the last
//! block: global average pool over (time, joints), sum over persons, linear
//! classifier.
//!
//! Activations are held internally in [N, T, K, C] order: per person the
//! activation is one contiguous (T*K) x C matrix, so the 1x1 channel
//! convolution is a single matrix product per person and each stride-1
//! temporal kernel offset is a matrix product over a contiguous row range.
//! All inner loops then run over the channel axis, which is never smaller
//! than the joint count.

use super::{GcnBlockParams, ModelParams, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_into, Scalar, Tensor};
use rayon::prelude::*;

/// Everything the backward pass needs from one sample's forward pass.
pub struct SampleCache<T> {
    /// Block inputs in internal layout, per block.
    inputs: Vec<Tensor<T>>,
    /// (A_norm o M)^T X per block (graph-mixed input).
    h: Vec<Tensor<T>>,
    /// Pre-relu spatial output per block.
    z1: Vec<Tensor<T>>,
    /// relu(z1), the temporal-conv input, per block.
    y1: Vec<Tensor<T>>,
    /// Pre-relu temporal output per block.
    z2: Vec<Tensor<T>>,
    /// Pooled feature after person sum, [d_last].
    pooled: Tensor<T>,
    /// Optional dropout mask applied to the pooled feature.
    dropout_mask: Option<Tensor<T>>,
}

impl<T: Scalar> SampleCache<T> {
    /// Smallest |z| over every relu input. Finite-difference gradient checks
    /// reject samples where this is within the probe step of a kink.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.z1
            .iter()
            .chain(self.z2.iter())
            .flat_map(|t| t.data().iter())
            .fold(f64::INFINITY, |m, &v| m.min(Scalar::to_f64(v).abs()))
    }
}

fn to_internal<T: Scalar>(x: &Tensor<T>, c: usize, t: usize, k: usize, n: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[n, t, k, c]);
    for ci in 0..c {
        for ti in 0..t {
            for ki in 0..k {
                for ni in 0..n {
                    let v = x.data()[((ci * t + ti) * k + ki) * n + ni];
                    out.data_mut()[((ni * t + ti) * k + ki) * c + ci] = v;
                }
            }
        }
    }
    out
}

fn from_internal<T: Scalar>(x: &Tensor<T>, c: usize, t: usize, k: usize, n: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[c, t, k, n]);
    for ni in 0..n {
        for ti in 0..t {
            for ki in 0..k {
                for ci in 0..c {
                    let v = x.data()[((ni * t + ti) * k + ki) * c + ci];
                    out.data_mut()[((ci * t + ti) * k + ki) * n + ni] = v;
                }
            }
        }
    }
    out
}

/// Transpose of a contiguous [r, c] matrix.
fn transposed<T: Scalar>(m: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = m[i * c + j];
        }
    }
    out
}

/// Per-offset matrices from the [d_out, d_in, kt] kernel tensor:
/// row-major [d_out, d_in] slices and their transposes.
fn kernel_slices<T: Scalar>(kernel: &Tensor<T>) -> (Vec<Vec<T>>, Vec<Vec<T>>) {
    let (dout, din, kt) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
    );
    let mut mats = Vec::with_capacity(kt);
    let mut mats_t = Vec::with_capacity(kt);
    for dt in 0..kt {
        let mut m = vec![T::zero(); dout * din];
        for o in 0..dout {
            for i in 0..din {
                m[o * din + i] = kernel.data()[(o * din + i) * kt + dt];
            }
        }
        mats_t.push(transposed(&m, dout, din));
        mats.push(m);
    }
    (mats, mats_t)
}

struct BlockForward<T> {
    h: Tensor<T>,
    z1: Tensor<T>,
    y1: Tensor<T>,
    z2: Tensor<T>,
    out: Tensor<T>,
}

/// Row range of the output (and the matching input offset) covered by
/// temporal kernel offset `dt` at stride 1.
fn stride1_range(t: usize, dt: usize, pad: usize) -> Option<(usize, usize, usize)> {
    let shift = dt as isize - pad as isize;
    let t2_min = (-shift).max(0) as usize;
    let t2_max = ((t as isize - shift).min(t as isize)) as usize;
    if t2_min >= t2_max {
        return None;
    }
    Some((t2_min, t2_max, (t2_min as isize + shift) as usize))
}

fn block_forward<T: Scalar>(
    block: &GcnBlockParams<T>,
    a_norm: &Tensor<T>,
    input: &Tensor<T>,
    stride: usize,
    kt: usize,
) -> Result<BlockForward<T>> {
    let shape = input.shape();
    let (n, t, k, din) = (shape[0], shape[1], shape[2], shape[3]);
    let dout = block.weight.shape()[0];
    if block.weight.shape()[1] != din {
        return Err(Error::dim(format!(
            "block weight expects {} input channels, got {din}",
            block.weight.shape()[1]
        )));
    }
    let am = a_norm.mul(&block.mask)?;
    let am_t = transposed(am.data(), k, k);
    let w_t = transposed(block.weight.data(), dout, din);

    // Graph mix per frame: H[t] = (Am)^T X[t], both [K, C] row-major.
    let mut h = Tensor::zeros(&[n, t, k, din]);
    for ni in 0..n {
        for ti in 0..t {
            let base = ((ni * t + ti) * k) * din;
            let xs = &input.data()[base..base + k * din];
            let hs = &mut h.data_mut()[base..base + k * din];
            matmul_into(&am_t, xs, hs, k, k, din, false);
        }
    }

    // 1x1 channel conv: one GEMM per person, Z1 = H W^T + bias.
    let rows = t * k;
    let mut z1 = Tensor::zeros(&[n, t, k, dout]);
    for ni in 0..n {
        let hs = &h.data()[ni * rows * din..(ni + 1) * rows * din];
        let zs = &mut z1.data_mut()[ni * rows * dout..(ni + 1) * rows * dout];
        matmul_into(hs, &w_t, zs, rows, din, dout, false);
        for row in zs.chunks_exact_mut(dout) {
            for (x, &b) in row.iter_mut().zip(block.bias.data()) {
                *x += b;
            }
        }
    }
    let y1 = z1.map(|x| if x > T::zero() { x } else { T::zero() });

    let t_out = (t - 1) / stride + 1;
    let pad = (kt - 1) / 2;
    let (_, kmats_t) = kernel_slices(&block.temporal);
    let mut z2 = Tensor::zeros(&[n, t_out, k, dout]);
    for ni in 0..n {
        let ys = &y1.data()[ni * rows * dout..(ni + 1) * rows * dout];
        let zs = &mut z2.data_mut()[ni * t_out * k * dout..(ni + 1) * t_out * k * dout];
        if stride == 1 {
            for dt in 0..kt {
                let Some((t2_min, t2_max, tin_min)) = stride1_range(t, dt, pad) else {
                    continue;
                };
                let seg = (t2_max - t2_min) * k;
                matmul_into(
                    &ys[tin_min * k * dout..tin_min * k * dout + seg * dout],
                    &kmats_t[dt],
                    &mut zs[t2_min * k * dout..t2_min * k * dout + seg * dout],
                    seg,
                    dout,
                    dout,
                    true,
                );
            }
        } else {
            for t2 in 0..t_out {
                for dt in 0..kt {
                    let tin = (t2 * stride + dt) as isize - pad as isize;
                    if tin < 0 || tin >= t as isize {
                        continue;
                    }
                    let tin = tin as usize;
                    matmul_into(
                        &ys[tin * k * dout..(tin + 1) * k * dout],
                        &kmats_t[dt],
                        &mut zs[t2 * k * dout..(t2 + 1) * k * dout],
                        k,
                        dout,
                        dout,
                        true,
                    );
                }
            }
        }
    }
    let out = z2.map(|x| if x > T::zero() { x } else { T::zero() });
    Ok(BlockForward { h, z1, y1, z2, out })
}

/// Forward pass over one sample `x` with layout [C_in, T_in, K, N].
///
/// `dropout_mask`, when given, multiplies the pooled feature elementwise
/// (training-time dropout; pass `None` for evaluation and gradient checks).
pub fn forward_sample<T: Scalar>(
    params: &ModelParams<T>,
    config: &NetworkConfig,
    a_norm: &Tensor<T>,
    x: &Tensor<T>,
    dropout_mask: Option<Tensor<T>>,
) -> Result<(Tensor<T>, SampleCache<T>)> {
    let expect = [config.in_channels, config.in_frames, config.joints, config.persons];
    if x.shape() != expect {
        return Err(Error::dim(format!(
            "sample shape {:?}, network expects {:?}",
            x.shape(),
            expect
        )));
    }
    let (c, t, k, n) = (expect[0], expect[1], expect[2], expect[3]);
    let mut cur = to_internal(x, c, t, k, n);

    let mut inputs = Vec::with_capacity(params.blocks.len());
    let mut hs = Vec::with_capacity(params.blocks.len());
    let mut z1s = Vec::with_capacity(params.blocks.len());
    let mut y1s = Vec::with_capacity(params.blocks.len());
    let mut z2s = Vec::with_capacity(params.blocks.len());

    for (block, bc) in params.blocks.iter().zip(&config.blocks) {
        let fwd = block_forward(block, a_norm, &cur, bc.temporal_stride, config.temporal_kernel)?;
        inputs.push(cur);
        hs.push(fwd.h);
        z1s.push(fwd.z1);
        y1s.push(fwd.y1);
        z2s.push(fwd.z2);
        cur = fwd.out;
    }

    // Mean over (time, joints), sum over persons.
    let shape = cur.shape();
    let (n_last, t_last, k_last, d_last) = (shape[0], shape[1], shape[2], shape[3]);
    let norm = T::from_f64((t_last * k_last) as f64);
    let mut pooled = Tensor::zeros(&[d_last]);
    for ni in 0..n_last {
        let mut acc = vec![T::zero(); d_last];
        let block = &cur.data()
            [ni * t_last * k_last * d_last..(ni + 1) * t_last * k_last * d_last];
        for row in block.chunks_exact(d_last) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        for (p, a) in pooled.data_mut().iter_mut().zip(acc) {
            *p += a / norm;
        }
    }

    let dropped = match &dropout_mask {
        Some(mask) => pooled.mul(mask)?,
        None => pooled.clone(),
    };

    let classes = config.num_classes;
    let mut logits = Tensor::zeros(&[classes]);
    for o in 0..classes {
        let row = &params.cls_weight.data()[o * d_last..(o + 1) * d_last];
        let mut acc = params.cls_bias.data()[o];
        for (w, f) in row.iter().zip(dropped.data()) {
            acc += *w * *f;
        }
        logits.data_mut()[o] = acc;
    }

    Ok((
        logits,
        SampleCache {
            inputs,
            h: hs,
            z1: z1s,
            y1: y1s,
            z2: z2s,
            pooled,
            dropout_mask,
        },
    ))
}

/// Backward pass for one sample. Accumulates parameter gradients into
/// `grads` and returns the input gradient in the sample layout.
pub fn backward_sample<T: Scalar>(
    params: &ModelParams<T>,
    config: &NetworkConfig,
    a_norm: &Tensor<T>,
    cache: &SampleCache<T>,
    dlogits: &Tensor<T>,
    grads: &mut ModelParams<T>,
) -> Result<Tensor<T>> {
    let d_last = config.last_channels();
    let classes = config.num_classes;
    if dlogits.len() != classes {
        return Err(Error::dim(format!(
            "dlogits has {} entries, expected {classes}",
            dlogits.len()
        )));
    }

    let dropped = match &cache.dropout_mask {
        Some(mask) => cache.pooled.mul(mask)?,
        None => cache.pooled.clone(),
    };

    // Classifier.
    let mut dfeat = Tensor::zeros(&[d_last]);
    for o in 0..classes {
        let g = dlogits.data()[o];
        grads.cls_bias.data_mut()[o] += g;
        for i in 0..d_last {
            grads.cls_weight.data_mut()[o * d_last + i] += g * dropped.data()[i];
            dfeat.data_mut()[i] += params.cls_weight.data()[o * d_last + i] * g;
        }
    }
    if let Some(mask) = &cache.dropout_mask {
        dfeat = dfeat.mul(mask)?;
    }

    // Pool backward into the last block's output gradient.
    let last_z2 = cache.z2.last().expect("at least one block");
    let shape = last_z2.shape();
    let (n_last, t_last, k_last, _) = (shape[0], shape[1], shape[2], shape[3]);
    let norm = T::from_f64((t_last * k_last) as f64);
    let scaled: Vec<T> = dfeat.data().iter().map(|&g| g / norm).collect();
    let mut dout = Tensor::zeros(shape);
    for row in dout.data_mut().chunks_exact_mut(d_last) {
        row.copy_from_slice(&scaled);
    }
    let _ = n_last;

    // Blocks in reverse.
    for bi in (0..params.blocks.len()).rev() {
        let block = &params.blocks[bi];
        let bc = &config.blocks[bi];
        let stride = bc.temporal_stride;
        let kt = config.temporal_kernel;
        let pad = (kt - 1) / 2;

        let input = &cache.inputs[bi];
        let h = &cache.h[bi];
        let z1 = &cache.z1[bi];
        let y1 = &cache.y1[bi];
        let z2 = &cache.z2[bi];
        let gb = &mut grads.blocks[bi];

        let ishape = input.shape();
        let (n, t, k, din) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let dout_ch = block.weight.shape()[0];
        let t_out = z2.shape()[1];
        let rows = t * k;

        // relu after temporal conv
        let mut dz2 = dout;
        for (g, &z) in dz2.data_mut().iter_mut().zip(z2.data()) {
            if z <= T::zero() {
                *g = T::zero();
            }
        }

        // temporal conv backward: z2 = y1 K^T per offset, so
        // dK^T[dt] += y1_seg^T dz2_seg and dy1_seg += dz2_seg K[dt].
        let (kmats, _) = kernel_slices(&block.temporal);
        let mut dkt: Vec<Vec<T>> = (0..kt).map(|_| vec![T::zero(); dout_ch * dout_ch]).collect();
        let mut dy1 = Tensor::zeros(&[n, t, k, dout_ch]);
        for ni in 0..n {
            let gz_all = &dz2.data()[ni * t_out * k * dout_ch..(ni + 1) * t_out * k * dout_ch];
            let ys_all = &y1.data()[ni * rows * dout_ch..(ni + 1) * rows * dout_ch];
            let dys_all = &mut dy1.data_mut()[ni * rows * dout_ch..(ni + 1) * rows * dout_ch];
            if stride == 1 {
                for dt in 0..kt {
                    let Some((t2_min, t2_max, tin_min)) = stride1_range(t, dt, pad) else {
                        continue;
                    };
                    let seg = (t2_max - t2_min) * k;
                    let gz = &gz_all[t2_min * k * dout_ch..t2_min * k * dout_ch + seg * dout_ch];
                    let ys = &ys_all[tin_min * k * dout_ch..tin_min * k * dout_ch + seg * dout_ch];
                    matmul_at_b(ys, gz, &mut dkt[dt], dout_ch, seg, dout_ch, true);
                    let dys = &mut dys_all
                        [tin_min * k * dout_ch..tin_min * k * dout_ch + seg * dout_ch];
                    matmul_into(gz, &kmats[dt], dys, seg, dout_ch, dout_ch, true);
                }
            } else {
                for t2 in 0..t_out {
                    let gz = &gz_all[t2 * k * dout_ch..(t2 + 1) * k * dout_ch];
                    for dt in 0..kt {
                        let tin = (t2 * stride + dt) as isize - pad as isize;
                        if tin < 0 || tin >= t as isize {
                            continue;
                        }
                        let tin = tin as usize;
                        let ys = &ys_all[tin * k * dout_ch..(tin + 1) * k * dout_ch];
                        matmul_at_b(ys, gz, &mut dkt[dt], dout_ch, k, dout_ch, true);
                        let dys = &mut dys_all[tin * k * dout_ch..(tin + 1) * k * dout_ch];
                        matmul_into(gz, &kmats[dt], dys, k, dout_ch, dout_ch, true);
                    }
                }
            }
        }
        for (dt, dk) in dkt.iter().enumerate() {
            // dk is d(K^T)[dt] in [d_in, d_out] order.
            for o in 0..dout_ch {
                for i in 0..dout_ch {
                    gb.temporal.data_mut()[(o * dout_ch + i) * kt + dt] += dk[i * dout_ch + o];
                }
            }
        }

        // relu after spatial conv
        let mut dz1 = dy1;
        for (g, &z) in dz1.data_mut().iter_mut().zip(z1.data()) {
            if z <= T::zero() {
                *g = T::zero();
            }
        }

        // spatial conv backward: z1 = h W^T, h[t] = Am^T x[t].
        let am = a_norm.mul(&block.mask)?;
        let mut dwt = vec![T::zero(); din * dout_ch];
        let mut d_am_t = Tensor::zeros(&[k, k]);
        let mut dx = Tensor::zeros(&[n, t, k, din]);
        for ni in 0..n {
            let gz_all = &dz1.data()[ni * rows * dout_ch..(ni + 1) * rows * dout_ch];
            // bias: column sums of dz1.
            for row in gz_all.chunks_exact(dout_ch) {
                for (b, &g) in gb.bias.data_mut().iter_mut().zip(row) {
                    *b += g;
                }
            }
            let hs_all = &h.data()[ni * rows * din..(ni + 1) * rows * din];
            matmul_at_b(hs_all, gz_all, &mut dwt, din, rows, dout_ch, true);
            // dh = dz1 W
            let mut dh = vec![T::zero(); rows * din];
            matmul_into(gz_all, block.weight.data(), &mut dh, rows, dout_ch, din, false);
            let xs_all = &input.data()[ni * rows * din..(ni + 1) * rows * din];
            let dx_all = &mut dx.data_mut()[ni * rows * din..(ni + 1) * rows * din];
            for ti in 0..t {
                let dh_t = &dh[ti * k * din..(ti + 1) * k * din];
                let xs_t = &xs_all[ti * k * din..(ti + 1) * k * din];
                // d(Am^T) += dh[t] x[t]^T
                matmul_a_bt(dh_t, xs_t, d_am_t.data_mut(), k, din, k, true);
                // dx[t] = Am dh[t]
                let dx_t = &mut dx_all[ti * k * din..(ti + 1) * k * din];
                matmul_into(am.data(), dh_t, dx_t, k, k, din, false);
            }
        }
        for o in 0..dout_ch {
            for i in 0..din {
                gb.weight.data_mut()[o * din + i] += dwt[i * dout_ch + o];
            }
        }
        // Mask gradient flows through the Hadamard product with A_norm;
        // d_am_t holds the gradient of Am^T, so transpose back.
        let d_am = Tensor::from_vec(&[k, k], transposed(d_am_t.data(), k, k))?;
        gb.mask.axpy(T::one(), &d_am.mul(a_norm)?)?;

        dout = dx;
    }

    let (c, t, k, n) = (config.in_channels, config.in_frames, config.joints, config.persons);
    Ok(from_internal(&dout, c, t, k, n))
}

/// Numerically stabilized softmax cross-entropy over a batch of logits with
/// one-hot labels: loss averaged over the batch, gradient (softmax - y) / B.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape() != labels.shape() {
        return Err(Error::dim(format!(
            "cross_entropy: logits {:?} vs labels {:?}",
            logits.shape(),
            labels.shape()
        )));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    // validate one-hot rows
    for row in 0..b {
        let mut ones = 0usize;
        for col in 0..c {
            let v = labels.at(&[row, col]).to_f64();
            if v == 1.0 {
                ones += 1;
            } else if v != 0.0 {
                return Err(Error::Input(format!(
                    "cross_entropy: label row {row} is not one-hot"
                )));
            }
        }
        if ones != 1 {
            return Err(Error::Input(format!(
                "cross_entropy: label row {row} has {ones} ones"
            )));
        }
    }
    let mut grad = Tensor::zeros(&[b, c]);
    let mut loss = T::zero();
    let inv_b = T::from_f64(1.0 / b as f64);
    for row in 0..b {
        let slice = &logits.data()[row * c..(row + 1) * c];
        let max = slice.iter().copied().fold(slice[0], |m, v| if v > m { v } else { m });
        let mut denom = T::zero();
        for &v in slice {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        for col in 0..c {
            let p = (slice[col] - max - log_denom).exp();
            let y = labels.at(&[row, col]);
            grad.set(&[row, col], (p - y) * inv_b);
            if y.to_f64() == 1.0 {
                loss -= (slice[col] - max - log_denom) * inv_b;
            }
        }
    }
    Ok((loss, grad))
}

/// Per-sample loss and parameter gradients for one labelled sample.
///
/// Loss is -log softmax at the label; the returned gradients are unscaled
/// (the caller averages over the batch).
pub fn sample_grads<T: Scalar>(
    params: &ModelParams<T>,
    config: &NetworkConfig,
    a_norm: &Tensor<T>,
    x: &Tensor<T>,
    label: usize,
    dropout_mask: Option<Tensor<T>>,
) -> Result<(T, ModelParams<T>, Tensor<T>)> {
    if label >= config.num_classes {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            config.num_classes
        )));
    }
    let (logits, cache) = forward_sample(params, config, a_norm, x, dropout_mask)?;
    let c = config.num_classes;
    let slice = logits.data();
    let max = slice.iter().copied().fold(slice[0], |m, v| if v > m { v } else { m });
    let mut denom = T::zero();
    for &v in slice {
        denom += (v - max).exp();
    }
    let log_denom = denom.ln();
    let loss = -(slice[label] - max - log_denom);
    let mut dlogits = Tensor::zeros(&[c]);
    for col in 0..c {
        let p = (slice[col] - max - log_denom).exp();
        let y = if col == label { T::one() } else { T::zero() };
        dlogits.data_mut()[col] = p - y;
    }
    let mut grads = params.zeros_like();
    backward_sample(params, config, a_norm, &cache, &dlogits, &mut grads)?;
    Ok((loss, grads, logits))
}

/// Evaluation-mode logits for a batch of samples, parallel over samples.
/// Output row order follows input order, so results are deterministic for
/// any worker count.
pub fn forward_batch<T: Scalar>(
    params: &ModelParams<T>,
    config: &NetworkConfig,
    a_norm: &Tensor<T>,
    batch: &[Tensor<T>],
) -> Result<Tensor<T>> {
    let c = config.num_classes;
    let rows: Vec<Result<Vec<T>>> = batch
        .par_iter()
        .map(|x| {
            forward_sample(params, config, a_norm, x, None)
                .map(|(logits, _)| logits.into_data())
        })
        .collect();
    let mut out = Tensor::zeros(&[batch.len(), c]);
    for (i, row) in rows.into_iter().enumerate() {
        let row = row?;
        out.data_mut()[i * c..(i + 1) * c].copy_from_slice(&row);
    }
    Ok(out)
}
