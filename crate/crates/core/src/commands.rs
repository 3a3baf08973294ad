//! End-to-end operations behind the command-line tool: dataset generation,
//! patch extraction, branch training, evaluation, and score blending. Tests
//! drive the same functions, so the CLI is a thin argument parser.
//!
//! Every artifact carries the hash of the run configuration that produced
//! it, and every consumer refuses inputs whose hash does not match its own
//! configuration.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{
    read_frame_dir, read_jfpc, read_manifest, read_scores, read_skeleton, write_jfpc,
    write_scores, Manifest, ScoresFile,
};
use crate::graph::{build_topology, pose14_topology, GraphTopology};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, NetworkConfig};
use crate::pipeline::{
    adaptive_patch_size, extract_jap_sequence, extract_jfp_sequence, pack_jfp, select_joints_14,
    temporal_downsample, ExtractConfig, SkeletonSequence,
};
use crate::rng::derive_seed;
use crate::synth::{generate_dataset, SynthConfig};
use crate::tensor::Tensor;
use crate::twostream::{
    blend_scores, packed_input, score_samples, skeleton_input, split_train_val, top_k_accuracy,
    train_branch, BranchSample, Modality, TrainedBranch,
};
use rayon::prelude::*;
use std::path::{Path, PathBuf};

/// Generates the synthetic benchmark dataset under `out_dir`.
pub fn run_synth_gen(
    config: &RunConfig,
    num_classes: usize,
    samples_per_class: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    let synth = SynthConfig {
        num_classes,
        samples_per_class,
        seed: config.seed,
        ..SynthConfig::default()
    };
    generate_dataset(&synth, config.hash(), out_dir)
}

/// Derives the joint graph the dataset uses, honoring the joint preset.
pub fn dataset_topology(config: &RunConfig, dataset_dir: &Path, manifest: &Manifest) -> Result<GraphTopology> {
    if config.joint_preset == "pose14" {
        return Ok(pose14_topology());
    }
    let first = manifest
        .samples
        .first()
        .ok_or_else(|| Error::Schema("manifest has no samples".into()))?;
    let (skel, parent) = read_skeleton(&dataset_dir.join(&first.dir).join("skeleton.json"))?;
    topology_from_parent(&parent, skel.joints())
}

/// Tree topology implied by a parent map (root points at itself).
pub fn topology_from_parent(parent: &[usize], joints: usize) -> Result<GraphTopology> {
    let edges: Vec<(usize, usize)> = parent
        .iter()
        .enumerate()
        .filter(|&(k, &p)| k != p)
        .map(|(k, &p)| (p, k))
        .collect();
    build_topology(&edges, joints, parent.to_vec(), true)
}

fn apply_preset(config: &RunConfig, skel: SkeletonSequence) -> Result<SkeletonSequence> {
    match config.joint_preset.as_str() {
        "pose14" => select_joints_14(&skel),
        "none" | "synth7" => Ok(skel),
        other => Err(Error::Input(format!("unknown joint preset {other:?}"))),
    }
}

fn extract_config(config: &RunConfig, skel: &SkeletonSequence, topo: &GraphTopology) -> Result<ExtractConfig> {
    let patch_side = match config.adaptive_alpha {
        Some(alpha) => adaptive_patch_size(skel, topo, alpha)?,
        None => config.patch_side,
    };
    Ok(ExtractConfig {
        patch_side,
        mu: config.mu,
        temporal_factor: config.temporal_factor,
        target_len: config.target_len,
        tvl1: config.tvl1.clone(),
    })
}

pub fn feature_extension(modality: Modality) -> Result<&'static str> {
    match modality {
        Modality::Jfp => Ok("jfpc"),
        Modality::Jap => Ok("japc"),
        other => Err(Error::Input(format!(
            "modality {} has no feature files",
            other.as_str()
        ))),
    }
}

#[derive(Debug)]
pub struct ExtractSummary {
    pub extracted: Vec<String>,
    /// Per-sample failures; extraction keeps going past individual samples.
    pub failed: Vec<(String, String)>,
}

/// Extracts packed patch tensors for every sample into `out_dir`, one file
/// per sample named `<id>.<ext>`.
pub fn run_extract(
    config: &RunConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    modality: Modality,
) -> Result<ExtractSummary> {
    let manifest = read_manifest(&dataset_dir.join("manifest.json"))?;
    let hash = config.hash();
    if manifest.config_hash != hash {
        return Err(Error::HashMismatch {
            expected: hash,
            found: manifest.config_hash,
            context: "dataset was generated under a different configuration".into(),
        });
    }
    let ext = feature_extension(modality)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let topo = dataset_topology(config, dataset_dir, &manifest)?;

    let outcomes: Vec<(String, Result<()>)> = manifest
        .samples
        .par_iter()
        .map(|sample| {
            let run = || -> Result<()> {
                let dir = dataset_dir.join(&sample.dir);
                let frames = read_frame_dir(&dir, 30.0)?;
                let (skel, _) = read_skeleton(&dir.join("skeleton.json"))?;
                let skel = apply_preset(config, skel)?;
                let ec = extract_config(config, &skel, &topo)?;
                let mut packed = match modality {
                    Modality::Jfp => pack_jfp(&extract_jfp_sequence(&frames, &skel, &ec)?)?,
                    Modality::Jap => extract_jap_sequence(&frames, &skel, &ec)?,
                    _ => unreachable!("feature_extension rejected other modalities"),
                };
                packed.provenance = hash;
                write_jfpc(&out_dir.join(format!("{}.{ext}", sample.id)), &packed)
            };
            (sample.id.clone(), run())
        })
        .collect();

    let mut summary = ExtractSummary {
        extracted: Vec::new(),
        failed: Vec::new(),
    };
    for (id, res) in outcomes {
        match res {
            Ok(()) => summary.extracted.push(id),
            Err(e) => {
                log::warn!("extraction failed for {id}: {e}");
                summary.failed.push((id, e.to_string()));
            }
        }
    }
    if summary.extracted.is_empty() {
        return Err(Error::Input(format!(
            "extraction failed for every sample; first error: {}",
            summary
                .failed
                .first()
                .map(|(id, e)| format!("{id}: {e}"))
                .unwrap_or_default()
        )));
    }
    Ok(summary)
}

/// Loads every manifest sample as a network input for the given modality.
///
/// Skeleton modalities read joints from the dataset; patch modalities read
/// packed feature files from `features_dir` and refuse provenance mismatches.
pub fn load_branch_samples(
    config: &RunConfig,
    dataset_dir: &Path,
    features_dir: Option<&Path>,
    modality: Modality,
) -> Result<(Vec<BranchSample>, GraphTopology, Manifest)> {
    let manifest = read_manifest(&dataset_dir.join("manifest.json"))?;
    let hash = config.hash();
    if manifest.config_hash != hash {
        return Err(Error::HashMismatch {
            expected: hash,
            found: manifest.config_hash,
            context: "dataset was generated under a different configuration".into(),
        });
    }
    let topo = dataset_topology(config, dataset_dir, &manifest)?;

    let inputs: Vec<Result<Option<BranchSample>>> = manifest
        .samples
        .par_iter()
        .map(|sample| -> Result<Option<BranchSample>> {
            let input = match modality {
                Modality::Joints | Modality::JointsBones => {
                    let (skel, _) =
                        read_skeleton(&dataset_dir.join(&sample.dir).join("skeleton.json"))?;
                    let skel = apply_preset(config, skel)?;
                    let skel = subsample_skeleton(&skel, config)?;
                    skeleton_input(&skel, &topo, modality)?
                }
                Modality::Jfp | Modality::Jap => {
                    let dir = features_dir.ok_or_else(|| {
                        Error::Input("patch modalities need a feature directory".into())
                    })?;
                    let ext = feature_extension(modality)?;
                    let path = dir.join(format!("{}.{ext}", sample.id));
                    if !path.exists() {
                        // extraction tolerates per-sample failures; so do we
                        return Ok(None);
                    }
                    let packed = read_jfpc(&path)?;
                    if packed.provenance != hash {
                        return Err(Error::HashMismatch {
                            expected: hash,
                            found: packed.provenance,
                            context: format!("feature file {}", path.display()),
                        });
                    }
                    packed_input(&packed)?
                }
            };
            Ok(Some(BranchSample {
                id: sample.id.clone(),
                label: sample.class_id,
                input,
            }))
        })
        .collect();

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for res in inputs {
        if let Some(s) = res? {
            samples.push(s);
        }
    }
    if samples.is_empty() {
        return Err(Error::Input("no usable samples".into()));
    }
    let shape = samples[0].input.shape().to_vec();
    for s in &samples {
        if s.input.shape() != shape {
            return Err(Error::dim(format!(
                "sample {} has shape {:?}, expected {shape:?}",
                s.id,
                s.input.shape()
            )));
        }
    }
    Ok((samples, topo, manifest))
}

/// Applies the run's temporal selection to a skeleton so both branches see
/// the same time base.
fn subsample_skeleton(skel: &SkeletonSequence, config: &RunConfig) -> Result<SkeletonSequence> {
    let indices = temporal_downsample(skel.frames(), config.temporal_factor, config.target_len)?;
    let (k, c, n) = (skel.joints(), skel.coord_dims(), skel.persons());
    let mut coords = Tensor::zeros(&[indices.len(), k, c, n]);
    let mut mask = Vec::with_capacity(indices.len());
    for (ti, &t) in indices.iter().enumerate() {
        for ki in 0..k {
            for ci in 0..c {
                for ni in 0..n {
                    coords.set(&[ti, ki, ci, ni], skel.coords.at(&[t, ki, ci, ni]));
                }
            }
        }
        mask.push((0..n).map(|ni| skel.person_valid(t, ni)).collect());
    }
    Ok(SkeletonSequence {
        coords,
        joint_names: skel.joint_names.clone(),
        person_mask: mask,
    })
}

fn modality_stream(modality: Modality) -> u64 {
    match modality {
        Modality::Joints => 1,
        Modality::JointsBones => 2,
        Modality::Jfp => 3,
        Modality::Jap => 4,
    }
}

/// Backbone shape for one branch, inferred from the sample layout.
pub fn network_config(config: &RunConfig, modality: Modality, sample: &BranchSample, num_classes: usize) -> NetworkConfig {
    let shape = sample.input.shape();
    NetworkConfig {
        in_channels: shape[0],
        in_frames: shape[1],
        joints: shape[2],
        persons: shape[3],
        num_classes,
        blocks: config.blocks.clone(),
        temporal_kernel: config.temporal_kernel,
        dropout: config.train.dropout,
        seed: derive_seed(config.seed, &[0x1a17, modality_stream(modality)]),
    }
}

pub struct TrainOutcome {
    pub branch: TrainedBranch,
    pub val_scores: ScoresFile,
    pub val_accuracy: f64,
    pub checkpoint: PathBuf,
}

/// Trains one branch end to end: load, split, train, checkpoint the best
/// epoch, and score the validation split with it.
pub fn run_train(
    config: &RunConfig,
    dataset_dir: &Path,
    features_dir: Option<&Path>,
    modality: Modality,
    checkpoint_out: &Path,
    log_out: Option<&Path>,
    scores_out: Option<&Path>,
) -> Result<TrainOutcome> {
    let (samples, topo, manifest) = load_branch_samples(config, dataset_dir, features_dir, modality)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (train_idx, val_idx) = split_train_val(
        &labels,
        config.train.val_fraction,
        derive_seed(config.seed, &[0x5b11]),
    )?;
    let net = network_config(config, modality, &samples[0], manifest.num_classes);
    let branch = train_branch(
        net.clone(),
        &config.train,
        &topo,
        &samples,
        &train_idx,
        &val_idx,
        log_out,
    )?;
    let meta = CheckpointMeta {
        config: net.clone(),
        topology: topo.to_json(),
        modality: modality.as_str().to_string(),
        config_hash: config.hash(),
    };
    save_checkpoint(checkpoint_out, &meta, &branch.best_params)?;
    let val_scores = score_samples(
        &branch.best_params,
        &net,
        &topo,
        &samples,
        &val_idx,
        config.hash(),
    )?;
    if let Some(path) = scores_out {
        write_scores(path, &val_scores)?;
    }
    let val_accuracy = top_k_accuracy(&val_scores, 1)?;
    Ok(TrainOutcome {
        branch,
        val_scores,
        val_accuracy,
        checkpoint: checkpoint_out.to_path_buf(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Val,
    All,
}

/// Scores a checkpoint on the dataset. The checkpoint records its modality
/// and configuration hash; mismatched datasets or features are refused.
pub fn run_eval(
    config: &RunConfig,
    checkpoint: &Path,
    dataset_dir: &Path,
    features_dir: Option<&Path>,
    split: EvalSplit,
    scores_out: Option<&Path>,
) -> Result<ScoresFile> {
    let (meta, params) = load_checkpoint(checkpoint)?;
    if meta.config_hash != config.hash() {
        return Err(Error::HashMismatch {
            expected: config.hash(),
            found: meta.config_hash,
            context: format!("checkpoint {}", checkpoint.display()),
        });
    }
    let modality = Modality::parse(&meta.modality)?;
    let (samples, topo, _) = load_branch_samples(config, dataset_dir, features_dir, modality)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let indices: Vec<usize> = match split {
        EvalSplit::All => (0..samples.len()).collect(),
        EvalSplit::Val => {
            split_train_val(
                &labels,
                config.train.val_fraction,
                derive_seed(config.seed, &[0x5b11]),
            )?
            .1
        }
    };
    let scores = score_samples(&params, &meta.config, &topo, &samples, &indices, config.hash())?;
    if let Some(path) = scores_out {
        write_scores(path, &scores)?;
    }
    Ok(scores)
}

/// Blends two score files and reports top-1 accuracy; optionally writes the
/// fused scores and a per-class accuracy CSV.
pub fn run_blend(
    scores_a: &Path,
    scores_b: &Path,
    weights: (f64, f64),
    out: Option<&Path>,
    per_class_csv: Option<&Path>,
) -> Result<(ScoresFile, f64)> {
    let a = read_scores(scores_a)?;
    let b = read_scores(scores_b)?;
    let fused = blend_scores(&a, &b, weights.0, weights.1)?;
    if let Some(path) = out {
        write_scores(path, &fused)?;
    }
    if let Some(path) = per_class_csv {
        write_per_class_csv(path, &fused)?;
    }
    let top1 = top_k_accuracy(&fused, 1)?;
    Ok((fused, top1))
}

pub fn write_per_class_csv(path: &Path, scores: &ScoresFile) -> Result<()> {
    let per_class = crate::twostream::per_class_accuracy(scores)?;
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .write_record(["class_id", "accuracy"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for (class, acc) in per_class.iter().enumerate() {
        writer
            .write_record([class.to_string(), format!("{acc:.6}")])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_from_parent_builds_tree() {
        let topo = topology_from_parent(&[0, 0, 1], 3).unwrap();
        assert_eq!(topo.edges.len(), 2);
        assert!(topo.adjacency.at(&[0, 1]) > 0.0);
        assert!(topo.adjacency.at(&[1, 2]) > 0.0);
        assert_eq!(topo.adjacency.at(&[0, 2]), 0.0);
    }

    #[test]
    fn extract_refuses_foreign_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig::default();
        run_synth_gen(&config, 2, 1, dir.path()).unwrap();
        let other = RunConfig { seed: 99, ..RunConfig::default() };
        let err = run_extract(&other, dir.path(), &dir.path().join("feat"), Modality::Jap);
        assert!(matches!(err, Err(Error::HashMismatch { .. })));
    }
}
