//! Two-branch training and score fusion.
//!
//! Both branches share the backbone in [`crate::model`]; they differ only in
//! the input tensor. The skeleton branch consumes joint coordinates (plus
//! optional bone vectors), the patch branch consumes packed flow patches or
//! appearance patches in the same skeleton-like layout.

use crate::config::TrainParams;
use crate::error::{Error, Result};
use crate::formats::{write_jsonl, ScoreEntry, ScoresFile};
use crate::graph::{bones, GraphTopology};
use crate::model::{forward_batch, sample_grads, sgd_step, ModelState, NetworkConfig};
use crate::pipeline::{PackedJfpTensor, SkeletonSequence};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

/// What a branch consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    /// Joint coordinates, centered per sample; C = coordinate dims.
    Joints,
    /// Joint coordinates concatenated with bone vectors; C doubles.
    JointsBones,
    /// Packed flow patches: channels are patch pixels, frames carry u/v rows.
    Jfp,
    /// Packed appearance patches.
    Jap,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Joints => "joints",
            Modality::JointsBones => "joints+bones",
            Modality::Jfp => "jfp",
            Modality::Jap => "jap",
        }
    }

    pub fn parse(s: &str) -> Result<Modality> {
        match s {
            "joints" => Ok(Modality::Joints),
            "joints+bones" => Ok(Modality::JointsBones),
            "jfp" => Ok(Modality::Jfp),
            "jap" => Ok(Modality::Jap),
            other => Err(Error::Input(format!("unknown modality {other:?}"))),
        }
    }
}

/// One labelled network input.
#[derive(Debug, Clone)]
pub struct BranchSample {
    pub id: String,
    pub label: usize,
    /// Layout [C, T, K, N].
    pub input: Tensor<f32>,
}

/// Skeleton coordinates [T, K, C, N] to a centered, scale-normalized network
/// input [C, T, K, N].
///
/// Centering subtracts the per-channel mean over valid (t, k, n) slots so the
/// branch sees translation-invariant coordinates; dividing by the RMS of the
/// centered coordinates brings pixel-unit inputs to unit scale (raw pixel
/// magnitudes saturate the first layer). Bones share the same divisor so the
/// two halves stay commensurate. Invalid person slots stay zero.
pub fn skeleton_input(
    skel: &SkeletonSequence,
    topo: &GraphTopology,
    modality: Modality,
) -> Result<Tensor<f32>> {
    let (t, k, c, n) = (
        skel.frames(),
        skel.joints(),
        skel.coord_dims(),
        skel.persons(),
    );
    if k != topo.joints {
        return Err(Error::Schema(format!(
            "skeleton K={k} vs topology K={}",
            topo.joints
        )));
    }
    let mut centered = center_coords(skel)?;
    let scale = 1.0 / coord_rms(skel, &centered);
    for v in centered.data_mut() {
        *v *= scale;
    }
    let place = |out: &mut Tensor<f32>, src: &Tensor<f32>, c_base: usize| {
        for ti in 0..t {
            for ki in 0..k {
                for ci in 0..c {
                    for ni in 0..n {
                        out.set(&[c_base + ci, ti, ki, ni], src.at(&[ti, ki, ci, ni]));
                    }
                }
            }
        }
    };
    match modality {
        Modality::Joints => {
            let mut out = Tensor::zeros(&[c, t, k, n]);
            place(&mut out, &centered, 0);
            Ok(out)
        }
        Modality::JointsBones => {
            // Bones are translation-invariant already; compute from raw coords.
            let mut b = bones(skel, topo)?;
            for v in b.data_mut() {
                *v *= scale;
            }
            let mut out = Tensor::zeros(&[2 * c, t, k, n]);
            place(&mut out, &centered, 0);
            place(&mut out, &b, c);
            Ok(out)
        }
        other => Err(Error::Input(format!(
            "skeleton_input does not handle modality {}",
            other.as_str()
        ))),
    }
}

/// RMS of the centered coordinates over valid person slots; floored so a
/// degenerate all-zero skeleton cannot divide by zero.
fn coord_rms(skel: &SkeletonSequence, centered: &Tensor<f32>) -> f32 {
    let (t, k, c, n) = (
        skel.frames(),
        skel.joints(),
        skel.coord_dims(),
        skel.persons(),
    );
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for ti in 0..t {
        for ni in 0..n {
            if !skel.person_valid(ti, ni) {
                continue;
            }
            for ki in 0..k {
                for ci in 0..c {
                    let v = centered.at(&[ti, ki, ci, ni]) as f64;
                    sum += v * v;
                    count += 1;
                }
            }
        }
    }
    ((sum / count.max(1) as f64).sqrt() as f32).max(1e-6)
}

fn center_coords(skel: &SkeletonSequence) -> Result<Tensor<f32>> {
    let (t, k, c, n) = (
        skel.frames(),
        skel.joints(),
        skel.coord_dims(),
        skel.persons(),
    );
    let mut sums = vec![0.0f64; c];
    let mut count = 0usize;
    for ti in 0..t {
        for ni in 0..n {
            if !skel.person_valid(ti, ni) {
                continue;
            }
            for ki in 0..k {
                for ci in 0..c {
                    sums[ci] += skel.coords.at(&[ti, ki, ci, ni]) as f64;
                }
            }
            count += k;
        }
    }
    if count == 0 {
        return Err(Error::Input("skeleton has no valid person slots".into()));
    }
    let means: Vec<f32> = sums.iter().map(|&s| (s / count as f64) as f32).collect();
    let mut out = Tensor::zeros(&[t, k, c, n]);
    for ti in 0..t {
        for ni in 0..n {
            if !skel.person_valid(ti, ni) {
                continue;
            }
            for ki in 0..k {
                for ci in 0..c {
                    out.set(&[ti, ki, ci, ni], skel.coords.at(&[ti, ki, ci, ni]) - means[ci]);
                }
            }
        }
    }
    Ok(out)
}

/// Packed patch tensor [T_rows, K, mu^2, N] to network input [mu^2, T_rows, K, N].
pub fn packed_input(packed: &PackedJfpTensor) -> Result<Tensor<f32>> {
    let shape = packed.data.shape();
    if packed.data.rank() != 4 {
        return Err(Error::dim(format!(
            "packed_input expects rank-4 data, got {shape:?}"
        )));
    }
    let (t, k, mu2, n) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = Tensor::zeros(&[mu2, t, k, n]);
    for ti in 0..t {
        for ki in 0..k {
            for ci in 0..mu2 {
                for ni in 0..n {
                    out.set(&[ci, ti, ki, ni], packed.data.at(&[ti, ki, ci, ni]));
                }
            }
        }
    }
    Ok(out)
}

/// Deterministic per-class validation split: within each class the sample
/// order is shuffled with a seed-derived stream and the first
/// round(val_fraction * count) entries go to validation.
pub fn split_train_val(
    labels: &[usize],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Input(format!(
            "val_fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let num_classes = labels.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..num_classes {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        let mut rng = Rng::new(derive_seed(seed, &[0x5711, class as u64]));
        rng.shuffle(&mut members);
        let n_val = (val_fraction * members.len() as f64).round() as usize;
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

pub struct TrainedBranch {
    pub state: ModelState<f32>,
    /// Parameters of the epoch with the best validation accuracy.
    pub best_params: crate::model::ModelParams<f32>,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

/// Trains one branch with minibatch SGD (momentum, weight decay, step decay
/// schedule). Per-sample gradients inside a batch run in parallel but reduce
/// sequentially in sample order, so the result does not depend on the worker
/// count.
pub fn train_branch(
    config: NetworkConfig,
    train_params: &TrainParams,
    topo: &GraphTopology,
    samples: &[BranchSample],
    train_idx: &[usize],
    val_idx: &[usize],
    log_path: Option<&Path>,
) -> Result<TrainedBranch> {
    if train_idx.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    if train_params.lr <= 0.0 || !(0.0..1.0).contains(&train_params.momentum) {
        return Err(Error::Input("invalid optimizer hyperparameters".into()));
    }
    for &i in train_idx.iter().chain(val_idx) {
        if i >= samples.len() {
            return Err(Error::Input(format!("split index {i} out of range")));
        }
    }
    let a_norm = &topo.adjacency_norm;
    let mut state = ModelState::<f32>::init(config)?;
    let mut shuffle_rng = Rng::new(state.config.seed).split(0x5487); // batch order stream
    let decay_epochs: Vec<usize> = train_params
        .lr_decay_at
        .iter()
        .map(|&f| (f * train_params.epochs as f64).floor() as usize)
        .collect();

    let mut best_params = state.params.clone();
    let mut best_val = -1.0f64;
    let mut history = Vec::with_capacity(train_params.epochs);
    let mut lr = train_params.lr;

    for epoch in 0..train_params.epochs {
        if decay_epochs.contains(&epoch) && epoch > 0 {
            lr *= train_params.lr_decay;
        }
        let mut order: Vec<usize> = train_idx.to_vec();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for batch in order.chunks(train_params.batch_size.max(1)) {
            let results: Vec<Result<(f32, crate::model::ModelParams<f32>)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let mask = dropout_mask(
                        &state.config,
                        train_params.dropout,
                        derive_seed(state.config.seed, &[0xd0, epoch as u64, i as u64]),
                    );
                    sample_grads(&state.params, &state.config, a_norm, &s.input, s.label, mask)
                        .map(|(loss, grads, _)| (loss, grads))
                })
                .collect();
            let mut grads = state.params.zeros_like();
            let scale = 1.0f32 / batch.len() as f32;
            for res in results {
                let (loss, g) = res?;
                loss_sum += loss as f64;
                seen += 1;
                grads.axpy(scale, &g)?;
            }
            sgd_step(
                &mut state,
                &grads,
                lr,
                train_params.momentum,
                train_params.weight_decay,
            )?;
        }
        let train_loss = loss_sum / seen.max(1) as f64;

        let val_accuracy = if val_idx.is_empty() {
            f64::NAN
        } else {
            let inputs: Vec<Tensor<f32>> =
                val_idx.iter().map(|&i| samples[i].input.clone()).collect();
            let logits = forward_batch(&state.params, &state.config, a_norm, &inputs)?;
            let labels: Vec<usize> = val_idx.iter().map(|&i| samples[i].label).collect();
            accuracy_from_logits(&logits, &labels)?
        };
        if val_accuracy.is_nan() || val_accuracy > best_val {
            best_val = if val_accuracy.is_nan() { 0.0 } else { val_accuracy };
            best_params = state.params.clone();
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_accuracy,
        });
    }

    if let Some(path) = log_path {
        write_jsonl(path, &history)?;
    }
    Ok(TrainedBranch {
        state,
        best_params,
        best_val_accuracy: best_val.max(0.0),
        history,
    })
}

fn dropout_mask(config: &NetworkConfig, p: f64, seed: u64) -> Option<Tensor<f32>> {
    if p <= 0.0 {
        return None;
    }
    let d = config.last_channels();
    let mut rng = Rng::new(seed);
    let scale = 1.0 / (1.0 - p);
    let data = (0..d)
        .map(|_| if rng.uniform_f64() < p { 0.0 } else { scale as f32 })
        .collect();
    Some(Tensor::from_vec(&[d], data).expect("mask shape"))
}

fn accuracy_from_logits(logits: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if b != labels.len() {
        return Err(Error::dim("accuracy: batch/label length mismatch"));
    }
    let mut correct = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        let slice = &logits.data()[row * c..(row + 1) * c];
        let pred = argmax(slice);
        if pred == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / b as f64)
}

/// First index attaining the maximum (ties break toward the lower class).
fn argmax<T: PartialOrd + Copy>(slice: &[T]) -> usize {
    let mut best = 0usize;
    for (i, &v) in slice.iter().enumerate().skip(1) {
        if v > slice[best] {
            best = i;
        }
    }
    best
}

/// Evaluates a parameter set on a list of samples, producing a score file.
pub fn score_samples(
    params: &crate::model::ModelParams<f32>,
    config: &NetworkConfig,
    topo: &GraphTopology,
    samples: &[BranchSample],
    indices: &[usize],
    config_hash: u64,
) -> Result<ScoresFile> {
    let inputs: Vec<Tensor<f32>> = indices.iter().map(|&i| samples[i].input.clone()).collect();
    let logits = forward_batch(params, config, &topo.adjacency_norm, &inputs)?;
    let c = config.num_classes;
    let entries = indices
        .iter()
        .enumerate()
        .map(|(row, &i)| ScoreEntry {
            id: samples[i].id.clone(),
            label: samples[i].label,
            scores: logits.data()[row * c..(row + 1) * c]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        })
        .collect();
    Ok(ScoresFile {
        config_hash,
        num_classes: c,
        entries,
    })
}

/// Weighted score blending: entries are matched by sample id, and both files
/// must agree on class count and provenance.
pub fn blend_scores(a: &ScoresFile, b: &ScoresFile, wa: f64, wb: f64) -> Result<ScoresFile> {
    if a.num_classes != b.num_classes {
        return Err(Error::Schema(format!(
            "blend: {} vs {} classes",
            a.num_classes, b.num_classes
        )));
    }
    if a.config_hash != b.config_hash {
        return Err(Error::HashMismatch {
            expected: a.config_hash,
            found: b.config_hash,
            context: "blend_scores: score files come from different configurations".into(),
        });
    }
    let index: std::collections::HashMap<&str, &ScoreEntry> =
        b.entries.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut entries = Vec::with_capacity(a.entries.len());
    for ea in &a.entries {
        let eb = index.get(ea.id.as_str()).ok_or_else(|| {
            Error::Schema(format!("blend: sample {} missing from second file", ea.id))
        })?;
        if ea.label != eb.label {
            return Err(Error::Schema(format!(
                "blend: sample {} has labels {} vs {}",
                ea.id, ea.label, eb.label
            )));
        }
        let scores = ea
            .scores
            .iter()
            .zip(&eb.scores)
            .map(|(&x, &y)| wa * x + wb * y)
            .collect();
        entries.push(ScoreEntry {
            id: ea.id.clone(),
            label: ea.label,
            scores,
        });
    }
    Ok(ScoresFile {
        config_hash: a.config_hash,
        num_classes: a.num_classes,
        entries,
    })
}

/// Fraction of entries whose label is among the k highest scores. Ties order
/// by ascending class index, matching [`argmax`].
pub fn top_k_accuracy(scores: &ScoresFile, k: usize) -> Result<f64> {
    if scores.entries.is_empty() || k == 0 {
        return Err(Error::Input("top_k_accuracy: empty input or k = 0".into()));
    }
    let mut correct = 0usize;
    for e in &scores.entries {
        if e.scores.len() != scores.num_classes {
            return Err(Error::Schema(format!(
                "entry {} has {} scores, header says {}",
                e.id,
                e.scores.len(),
                scores.num_classes
            )));
        }
        let mut order: Vec<usize> = (0..e.scores.len()).collect();
        // stable sort keeps ascending class index among ties
        order.sort_by(|&i, &j| e.scores[j].partial_cmp(&e.scores[i]).unwrap_or(std::cmp::Ordering::Equal));
        if order[..k.min(order.len())].contains(&e.label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / scores.entries.len() as f64)
}

/// Per-class top-1 accuracy, indexed by class id.
pub fn per_class_accuracy(scores: &ScoresFile) -> Result<Vec<f64>> {
    let c = scores.num_classes;
    let mut correct = vec![0usize; c];
    let mut total = vec![0usize; c];
    for e in &scores.entries {
        if e.label >= c {
            return Err(Error::Schema(format!(
                "entry {} has label {} for {c} classes",
                e.id, e.label
            )));
        }
        total[e.label] += 1;
        if argmax(&e.scores) == e.label {
            correct[e.label] += 1;
        }
    }
    Ok((0..c)
        .map(|i| {
            if total[i] == 0 {
                f64::NAN
            } else {
                correct[i] as f64 / total[i] as f64
            }
        })
        .collect())
}
