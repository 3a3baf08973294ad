//! Bit-exact on-disk formats: the "JFPC" tensor container, the skeleton JSON
//! schema, frame images, dataset manifests, labels, and score files.

use crate::error::{Error, Result};
use crate::pipeline::{FrameSequence, PackedJfpTensor, SkeletonSequence};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

// ---------------------------------------------------------------------------
// JFPC container
// ---------------------------------------------------------------------------

const JFPC_MAGIC: &[u8; 4] = b"JFPC";
const JFPC_VERSION: u32 = 1;
const DTYPE_F32_LE: u32 = 0;

/// Writes a packed tensor: magic, version, rank, extents, dtype tag, payload
/// byte length, little-endian f32 payload, then the 8-byte config hash.
pub fn write_jfpc(path: &Path, tensor: &PackedJfpTensor) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(JFPC_MAGIC);
    buf.extend_from_slice(&JFPC_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensor.data.rank() as u32).to_le_bytes());
    for &e in tensor.data.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    buf.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
    buf.extend_from_slice(&((tensor.data.len() * 4) as u64).to_le_bytes());
    for &v in tensor.data.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&tensor.provenance.to_le_bytes());
    std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_jfpc(path: &Path) -> Result<PackedJfpTensor> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Format(format!("{}: truncated", path.display())));
        }
        let out = &buf[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    if take(&mut pos, 4)? != JFPC_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let version = u32_at(&mut pos)?;
    if version != JFPC_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let rank = u32_at(&mut pos)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32_at(&mut pos)? as usize);
    }
    let dtype = u32_at(&mut pos)?;
    if dtype != DTYPE_F32_LE {
        return Err(Error::Format(format!("{}: unknown dtype {dtype}", path.display())));
    }
    let payload_b = take(&mut pos, 8)?;
    let payload_len = u64::from_le_bytes(payload_b.try_into().unwrap()) as usize;
    let expected: usize = shape.iter().product::<usize>() * 4;
    if payload_len != expected {
        return Err(Error::Format(format!(
            "{}: payload length {payload_len}, extents imply {expected}",
            path.display()
        )));
    }
    let raw = take(&mut pos, payload_len)?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let hash_b = take(&mut pos, 8)?;
    let provenance = u64::from_le_bytes(hash_b.try_into().unwrap());
    Ok(PackedJfpTensor {
        data: Tensor::from_vec(&shape, data)?,
        provenance,
    })
}

// ---------------------------------------------------------------------------
// Skeleton JSON
// ---------------------------------------------------------------------------

/// {"T", "K", "N", "C", "coords"[t][k][c][n], "joint_names", "parent"};
/// `person_mask` is an optional extension, absent slots default to valid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonJson {
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "K")]
    pub joints: usize,
    #[serde(rename = "N")]
    pub persons: usize,
    #[serde(rename = "C")]
    pub coord_dims: usize,
    pub coords: Vec<Vec<Vec<Vec<f32>>>>,
    pub joint_names: Vec<String>,
    pub parent: Vec<usize>,
    #[serde(default)]
    pub person_mask: Option<Vec<Vec<bool>>>,
}

pub fn write_skeleton(path: &Path, skel: &SkeletonSequence, parent: &[usize]) -> Result<()> {
    let (t, k, c, n) = (
        skel.frames(),
        skel.joints(),
        skel.coord_dims(),
        skel.persons(),
    );
    let mut coords = vec![vec![vec![vec![0.0f32; n]; c]; k]; t];
    for ti in 0..t {
        for ki in 0..k {
            for ci in 0..c {
                for ni in 0..n {
                    coords[ti][ki][ci][ni] = skel.coords.at(&[ti, ki, ci, ni]);
                }
            }
        }
    }
    let json = SkeletonJson {
        frames: t,
        joints: k,
        persons: n,
        coord_dims: c,
        coords,
        joint_names: skel.joint_names.clone(),
        parent: parent.to_vec(),
        person_mask: Some(skel.person_mask.clone()),
    };
    let bytes = serde_json::to_vec(&json)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_skeleton(path: &Path) -> Result<(SkeletonSequence, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let json: SkeletonJson = serde_json::from_slice(&bytes)?;
    let (t, k, c, n) = (json.frames, json.joints, json.coord_dims, json.persons);
    if json.coords.len() != t {
        return Err(Error::Schema(format!(
            "{}: coords has {} frames, header says {t}",
            path.display(),
            json.coords.len()
        )));
    }
    let mut coords = Tensor::zeros(&[t, k, c, n]);
    for (ti, frame) in json.coords.iter().enumerate() {
        if frame.len() != k {
            return Err(Error::Schema(format!(
                "{}: frame {ti} has {} joints, header says {k}",
                path.display(),
                frame.len()
            )));
        }
        for (ki, joint) in frame.iter().enumerate() {
            for (ci, chan) in joint.iter().enumerate() {
                for (ni, &v) in chan.iter().enumerate() {
                    coords.set(&[ti, ki, ci, ni], v);
                }
            }
        }
    }
    let person_mask = json
        .person_mask
        .unwrap_or_else(|| vec![vec![true; n]; t]);
    Ok((
        SkeletonSequence {
            coords,
            joint_names: json.joint_names,
            person_mask,
        },
        json.parent,
    ))
}

// ---------------------------------------------------------------------------
// Frame images
// ---------------------------------------------------------------------------

/// Writes a [H, W, 1] tensor with values in [0, 1] as an 8-bit gray PNG.
pub fn write_frame_png(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    if frame.rank() != 3 || frame.shape()[2] != 1 {
        return Err(Error::dim(format!(
            "write_frame_png expects [H, W, 1], got {:?}",
            frame.shape()
        )));
    }
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let pixels: Vec<u8> = frame
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::Format("frame buffer size mismatch".into()))?;
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads a PNG/PPM image into [H, W, C] with C in {1, 3}, values in [0, 1].
pub fn read_frame(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data: Vec<f32> = g.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
            Tensor::from_vec(&[h, w, 1], data)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let data: Vec<f32> = rgb.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
            Tensor::from_vec(&[h, w, 3], data)
        }
    }
}

/// Loads `frame_%04d.png` files from a sample directory, in index order.
pub fn read_frame_dir(dir: &Path, fps: f32) -> Result<FrameSequence> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("frame_") && (n.ends_with(".png") || n.ends_with(".ppm")))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("{}: no frame images", dir.display())));
    }
    let frames = paths
        .iter()
        .map(|p| read_frame(p))
        .collect::<Result<Vec<_>>>()?;
    let seq = FrameSequence { frames, fps };
    seq.validate()?;
    Ok(seq)
}

// ---------------------------------------------------------------------------
// Dataset manifest and labels
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    pub class_id: usize,
    /// Directory of the sample, relative to the manifest.
    pub dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: u64,
    pub seed: u64,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub frames_per_sample: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub samples: Vec<ManifestSample>,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(manifest)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn write_labels_csv(path: &Path, samples: &[ManifestSample]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .write_record(["sample_id", "class_id"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for s in samples {
        writer
            .write_record([s.id.as_str(), &s.class_id.to_string()])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Score files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: String,
    pub label: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoresFile {
    pub config_hash: u64,
    pub num_classes: usize,
    pub entries: Vec<ScoreEntry>,
}

pub fn write_scores(path: &Path, scores: &ScoresFile) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(scores)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_scores(path: &Path) -> Result<ScoresFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for row in rows {
        let line = serde_json::to_string(row)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn jfpc_roundtrip_preserves_bits() {
        let mut rng = Rng::new(5);
        let data: Vec<f32> = (0..2 * 3 * 4 * 1).map(|_| rng.uniform_f32() * 7.0 - 3.5).collect();
        let tensor = PackedJfpTensor {
            data: Tensor::from_vec(&[2, 3, 4, 1], data).unwrap(),
            provenance: 0x1234_5678_9abc_def0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jfpc");
        write_jfpc(&path, &tensor).unwrap();
        let back = read_jfpc(&path).unwrap();
        assert_eq!(back.data, tensor.data);
        assert_eq!(back.provenance, tensor.provenance);
    }

    #[test]
    fn jfpc_rejects_corruption() {
        let tensor = PackedJfpTensor {
            data: Tensor::zeros(&[2, 2, 2, 1]),
            provenance: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jfpc");
        write_jfpc(&path, &tensor).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_jfpc(&path), Err(Error::Format(_))));
        // truncation
        write_jfpc(&path, &tensor).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(read_jfpc(&path), Err(Error::Format(_))));
    }

    #[test]
    fn skeleton_json_roundtrip() {
        let mut rng = Rng::new(6);
        let coords = Tensor::from_vec(
            &[3, 2, 2, 2],
            (0..24).map(|_| rng.uniform_f32() * 100.0).collect(),
        )
        .unwrap();
        let skel = SkeletonSequence {
            coords,
            joint_names: vec!["a".into(), "b".into()],
            person_mask: vec![vec![true, false]; 3],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("skel.json");
        write_skeleton(&path, &skel, &[0, 0]).unwrap();
        let (back, parent) = read_skeleton(&path).unwrap();
        assert_eq!(parent, vec![0, 0]);
        assert_eq!(back.coords, skel.coords);
        assert_eq!(back.person_mask, skel.person_mask);
    }

    #[test]
    fn frame_png_roundtrip_within_quantization() {
        let mut rng = Rng::new(7);
        let frame =
            Tensor::from_vec(&[16, 12, 1], (0..192).map(|_| rng.uniform_f32()).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame_0000.png");
        write_frame_png(&path, &frame).unwrap();
        let back = read_frame(&path).unwrap();
        assert_eq!(back.shape(), frame.shape());
        assert!(frame.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-6);
    }
}
