//! Synthetic articulated-action generator.
//!
//! Figures are constellations of textured discs, one per joint, driven by a
//! closed-form kinematic model: a per-class global trajectory plus a local
//! motion program per joint (rotation, pulsation, texture scroll). Skeleton
//! coordinates, rendered frames, and dense ground-truth motion fields all
//! come from the same closed form, so every derived quantity has an exact
//! oracle.
//!
//! Default 6-class layout:
//!   0 translate-left, 1 translate-right     (skeleton-separable)
//!   2 limb-rotation,  3 limb-pulsation      (identical skeletons)
//!   4 scroll-up,      5 scroll-down         (identical skeletons AND silhouettes)

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::formats::{
    write_frame_png, write_jsonl, write_labels_csv, write_manifest, write_skeleton, Manifest,
    ManifestSample,
};
use crate::graph::{build_topology, GraphTopology};
use crate::pipeline::{FrameSequence, SkeletonSequence};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

pub const JOINT_COUNT: usize = 7;

const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "head", "l_shoulder", "r_shoulder", "l_hand", "r_hand", "hip", "foot",
];
/// Rooted at the hip.
const PARENT: [usize; JOINT_COUNT] = [5, 5, 5, 1, 2, 5, 5];
const RADII: [f64; JOINT_COUNT] = [10.0, 7.0, 7.0, 8.0, 8.0, 11.0, 9.0];
/// Base joint offsets (x, y) from the figure center.
const BASE_OFFSETS: [(f64, f64); JOINT_COUNT] = [
    (0.0, -34.0),
    (-14.0, -20.0),
    (14.0, -20.0),
    (-24.0, 0.0),
    (24.0, 0.0),
    (0.0, 6.0),
    (0.0, 34.0),
];
/// Painter's order; later entries draw on top.
const DRAW_ORDER: [usize; JOINT_COUNT] = [6, 5, 0, 1, 2, 3, 4];
const EDGE_WIDTH: f64 = 1.5;

/// 7-joint topology of the synthetic figure.
pub fn synth7_topology() -> GraphTopology {
    let edges = [(5, 0), (5, 1), (5, 2), (1, 3), (2, 4), (5, 6)];
    build_topology(&edges, JOINT_COUNT, PARENT.to_vec(), true).expect("static topology is valid")
}

/// Local motion program attached to one joint's disc.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LocalMotion {
    None,
    /// Texture rotates about the joint at `omega` rad/frame.
    Rotate { omega: f64 },
    /// Texture scale breathes: s(t) = 1 + amplitude * sin(2 pi freq t).
    Pulsate { amplitude: f64, freq: f64 },
    /// Texture translates inside the static silhouette at (vx, vy) px/frame.
    Scroll { vx: f64, vy: f64 },
}

/// Global trajectory of the figure center.
#[derive(Debug, Clone, Serialize)]
pub enum Trajectory {
    /// Linear drift plus a small vertical bob.
    Translate { vx: f64, bob_amp: f64, bob_period: f64 },
    /// Sinusoidal sway: primary axis 0 = x (horizontal), 1 = y (vertical).
    Sway { axis: usize, amp: f64, period: f64, phase: f64 },
}

/// Fully resolved motion model of one sample; every quantity below is a
/// closed-form function of time.
#[derive(Debug, Clone)]
pub struct ActionSpec {
    pub class_id: usize,
    pub trajectory: Trajectory,
    pub local: [LocalMotion; JOINT_COUNT],
    pub texture_seed: u64,
    /// Figure rest position (center of the undisplaced figure).
    pub origin: (f64, f64),
    /// Per-sample jitter applied to the base joint offsets, fixed over time.
    pub offset_jitter: [(f64, f64); JOINT_COUNT],
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 6,
            samples_per_class: 50,
            seed: 0,
            frames: 128,
            height: 128,
            width: 112,
            fps: 30.0,
        }
    }
}

pub const CLASS_NAMES: [&str; 6] = [
    "translate_left",
    "translate_right",
    "limb_rotation",
    "limb_pulsation",
    "scroll_up",
    "scroll_down",
];

/// Classes sharing a group index also share trajectories and textures for
/// matched sample indices, which makes those pairs skeleton-identical.
fn class_group(class_id: usize) -> usize {
    class_id / 2
}

/// One generated sample: frames, exact skeleton, and the motion model that
/// produced both.
pub struct SynthSample {
    pub frames: FrameSequence,
    pub skeleton: SkeletonSequence,
    pub label: usize,
    pub spec: ActionSpec,
    height: usize,
    width: usize,
    background: Tensor<f32>,
    textures: Vec<Texture>,
}

/// Smooth procedural texture: a sum of random sinusoids. Infinitely
/// sampleable, so rendering has no resampling error.
#[derive(Debug, Clone)]
struct Texture {
    waves: Vec<(f64, f64, f64)>,
    base: f64,
    contrast: f64,
}

impl Texture {
    fn new(seed: u64, wavelength_range: (f64, f64), base: f64, contrast: f64) -> Self {
        let mut rng = Rng::new(seed);
        let waves = (0..6)
            .map(|_| {
                let wl = rng.uniform_range(wavelength_range.0, wavelength_range.1);
                let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
                let k = std::f64::consts::TAU / wl;
                (k * angle.cos(), k * angle.sin(), rng.uniform_range(0.0, std::f64::consts::TAU))
            })
            .collect();
        Texture { waves, base, contrast }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|&(kx, ky, ph)| (kx * x + ky * y + ph).sin())
            .sum();
        self.base + self.contrast * s / self.waves.len() as f64
    }
}

impl ActionSpec {
    /// Figure-center displacement at frame t.
    fn center(&self, t: f64) -> (f64, f64) {
        match &self.trajectory {
            Trajectory::Translate { vx, bob_amp, bob_period } => (
                self.origin.0 + vx * t,
                self.origin.1 + bob_amp * (std::f64::consts::TAU * t / bob_period).sin(),
            ),
            Trajectory::Sway { axis, amp, period, phase } => {
                let primary = amp * (std::f64::consts::TAU * t / period + phase).sin();
                let secondary = 0.3 * amp * (std::f64::consts::TAU * t / (period * 1.7) + phase).sin();
                if *axis == 0 {
                    (self.origin.0 + primary, self.origin.1 + secondary)
                } else {
                    (self.origin.0 + secondary, self.origin.1 + primary)
                }
            }
        }
    }

    /// Joint position (x, y) at frame t.
    pub fn joint_pos(&self, t: f64, k: usize) -> (f64, f64) {
        let (cx, cy) = self.center(t);
        let (ox, oy) = BASE_OFFSETS[k];
        let (jx, jy) = self.offset_jitter[k];
        (cx + ox + jx, cy + oy + jy)
    }

    /// Local transform of disc k at frame t: rotation angle, scale, and
    /// texture scroll offset.
    fn local_state(&self, t: f64, k: usize) -> (f64, f64, (f64, f64)) {
        match self.local[k] {
            LocalMotion::None => (0.0, 1.0, (0.0, 0.0)),
            LocalMotion::Rotate { omega } => (omega * t, 1.0, (0.0, 0.0)),
            LocalMotion::Pulsate { amplitude, freq } => (
                0.0,
                1.0 + amplitude * (std::f64::consts::TAU * freq * t).sin(),
                (0.0, 0.0),
            ),
            LocalMotion::Scroll { vx, vy } => (0.0, 1.0, (vx * t, vy * t)),
        }
    }

    /// Image position at frame t of the material point with texture
    /// coordinate q on disc k.
    fn forward_map(&self, t: f64, k: usize, q: (f64, f64)) -> (f64, f64) {
        let (px, py) = self.joint_pos(t, k);
        let (theta, scale, (ox, oy)) = self.local_state(t, k);
        let (qx, qy) = (q.0 - ox, q.1 - oy);
        let (c, s) = (theta.cos(), theta.sin());
        (px + scale * (c * qx - s * qy), py + scale * (s * qx + c * qy))
    }

    /// Texture coordinate of image point p on disc k at frame t.
    fn inverse_map(&self, t: f64, k: usize, p: (f64, f64)) -> (f64, f64) {
        let (px, py) = self.joint_pos(t, k);
        let (theta, scale, (ox, oy)) = self.local_state(t, k);
        let (dx, dy) = ((p.0 - px) / scale, (p.1 - py) / scale);
        let (c, s) = (theta.cos(), theta.sin());
        (c * dx + s * dy + ox, -s * dx + c * dy + oy)
    }

    /// Topmost disc covering image point p at frame t, if any.
    fn top_disc(&self, t: f64, p: (f64, f64)) -> Option<usize> {
        for &k in DRAW_ORDER.iter().rev() {
            let (jx, jy) = self.joint_pos(t, k);
            let d = ((p.0 - jx).powi(2) + (p.1 - jy).powi(2)).sqrt();
            if d <= RADII[k] {
                return Some(k);
            }
        }
        None
    }

    /// Exact displacement of the scene point at pixel p from frame t to
    /// frame t + d. Background pixels are static.
    pub fn motion_at(&self, t: f64, d: f64, p: (f64, f64)) -> (f64, f64) {
        match self.top_disc(t, p) {
            None => (0.0, 0.0),
            Some(k) => {
                let q = self.inverse_map(t, k, p);
                let (nx, ny) = self.forward_map(t + d, k, q);
                (nx - p.0, ny - p.1)
            }
        }
    }
}

/// Builds the motion model for sample `index` of class `class_id`.
///
/// Trajectory, figure jitter, and textures derive from the (group, index)
/// pair so that the two classes of a group produce identical skeletons and
/// silhouettes for matched indices; only the class-specific local motion
/// magnitudes come from the (class, index) stream.
pub fn build_action_spec(config: &SynthConfig, class_id: usize, index: usize) -> Result<ActionSpec> {
    if class_id >= 6 {
        return Err(Error::Input(format!("class_id {class_id} out of range (6 classes defined)")));
    }
    let group = class_group(class_id);
    let mut pair_rng = Rng::new(derive_seed(config.seed, &[group as u64, index as u64]));
    let mut class_rng = Rng::new(derive_seed(config.seed, &[0xc1a5, class_id as u64, index as u64]));

    let (w, h) = (config.width as f64, config.height as f64);
    let mut origin = (w / 2.0, h / 2.0);
    origin.0 += pair_rng.uniform_range(-3.0, 3.0);
    origin.1 += pair_rng.uniform_range(-3.0, 3.0);

    let mut offset_jitter = [(0.0, 0.0); JOINT_COUNT];
    for j in offset_jitter.iter_mut() {
        j.0 = pair_rng.uniform_range(-2.0, 2.0);
        j.1 = pair_rng.uniform_range(-2.0, 2.0);
    }

    let trajectory = match group {
        0 => {
            let speed = pair_rng.uniform_range(0.10, 0.16);
            let dir = if class_id == 0 { -1.0 } else { 1.0 };
            // start offset against the travel direction keeps the motion centered
            origin.0 -= dir * speed * (config.frames as f64 - 1.0) / 2.0;
            Trajectory::Translate {
                vx: dir * speed,
                bob_amp: pair_rng.uniform_range(1.0, 2.5),
                bob_period: pair_rng.uniform_range(30.0, 50.0),
            }
        }
        1 => Trajectory::Sway {
            axis: 0,
            amp: pair_rng.uniform_range(4.0, 7.0),
            period: pair_rng.uniform_range(48.0, 80.0),
            phase: pair_rng.uniform_range(0.0, std::f64::consts::TAU),
        },
        _ => Trajectory::Sway {
            axis: 1,
            amp: pair_rng.uniform_range(4.0, 7.0),
            period: pair_rng.uniform_range(48.0, 80.0),
            phase: pair_rng.uniform_range(0.0, std::f64::consts::TAU),
        },
    };

    let mut local = [LocalMotion::None; JOINT_COUNT];
    match class_id {
        2 => {
            // both hands rotate
            let omega = class_rng.uniform_range(0.10, 0.16);
            local[3] = LocalMotion::Rotate { omega };
            local[4] = LocalMotion::Rotate { omega: -omega };
        }
        3 => {
            let amplitude = class_rng.uniform_range(0.18, 0.28);
            let freq = class_rng.uniform_range(0.06, 0.10);
            local[3] = LocalMotion::Pulsate { amplitude, freq };
            local[4] = LocalMotion::Pulsate { amplitude, freq };
        }
        4 | 5 => {
            let speed = class_rng.uniform_range(0.6, 1.0);
            let vy = if class_id == 4 { -speed } else { speed };
            for k in 0..JOINT_COUNT {
                local[k] = LocalMotion::Scroll { vx: 0.0, vy };
            }
        }
        _ => {}
    }

    let texture_seed = derive_seed(config.seed, &[0x7e47, group as u64, index as u64]);
    Ok(ActionSpec {
        class_id,
        trajectory,
        local,
        texture_seed,
        origin,
        offset_jitter,
    })
}

/// Renders one sample; also checks the border-margin feasibility constraint.
pub fn generate_sample(config: &SynthConfig, class_id: usize, index: usize) -> Result<SynthSample> {
    let spec = build_action_spec(config, class_id, index)?;
    let (h, w, t_total) = (config.height, config.width, config.frames);

    // Feasibility: figure discs must stay at least 16 px (half a default
    // patch) inside the frame.
    let margin = 16.0;
    for t in 0..t_total {
        for k in 0..JOINT_COUNT {
            let (x, y) = spec.joint_pos(t as f64, k);
            if x - RADII[k] < margin - RADII[k].min(margin)
                || x < margin
                || y < margin
                || x > w as f64 - margin
                || y > h as f64 - margin
            {
                return Err(Error::Input(format!(
                    "infeasible trajectory: joint {k} at ({x:.1}, {y:.1}) violates the {margin} px border margin at frame {t}"
                )));
            }
        }
    }

    let textures: Vec<Texture> = (0..JOINT_COUNT)
        .map(|k| {
            Texture::new(
                derive_seed(spec.texture_seed, &[k as u64]),
                (3.5, 10.0),
                0.5,
                0.42,
            )
        })
        .collect();
    let bg_tex = Texture::new(derive_seed(spec.texture_seed, &[0xb6]), (14.0, 30.0), 0.45, 0.10);
    let mut background = Tensor::zeros(&[h, w, 1]);
    for y in 0..h {
        for x in 0..w {
            background.set(&[y, x, 0], bg_tex.eval(x as f64, y as f64).clamp(0.0, 1.0) as f32);
        }
    }

    let mut frames = Vec::with_capacity(t_total);
    for t in 0..t_total {
        frames.push(render_frame(&spec, &textures, &background, h, w, t as f64));
    }
    let frames = FrameSequence { frames, fps: config.fps };

    let mut coords = Tensor::zeros(&[t_total, JOINT_COUNT, 2, 1]);
    for t in 0..t_total {
        for k in 0..JOINT_COUNT {
            let (x, y) = spec.joint_pos(t as f64, k);
            coords.set(&[t, k, 0, 0], x as f32);
            coords.set(&[t, k, 1, 0], y as f32);
        }
    }
    let skeleton = SkeletonSequence {
        coords,
        joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        person_mask: vec![vec![true]; t_total],
    };

    Ok(SynthSample {
        frames,
        skeleton,
        label: class_id,
        spec,
        height: h,
        width: w,
        background,
        textures,
    })
}

fn render_frame(
    spec: &ActionSpec,
    textures: &[Texture],
    background: &Tensor<f32>,
    h: usize,
    w: usize,
    t: f64,
) -> Tensor<f32> {
    let mut frame = background.clone();
    for &k in DRAW_ORDER.iter() {
        let (jx, jy) = spec.joint_pos(t, k);
        let r = RADII[k];
        let y0 = ((jy - r - EDGE_WIDTH).floor().max(0.0)) as usize;
        let y1 = ((jy + r + EDGE_WIDTH).ceil().min(h as f64 - 1.0)) as usize;
        let x0 = ((jx - r - EDGE_WIDTH).floor().max(0.0)) as usize;
        let x1 = ((jx + r + EDGE_WIDTH).ceil().min(w as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - jx).powi(2) + (y as f64 - jy).powi(2)).sqrt();
                if d >= r + EDGE_WIDTH {
                    continue;
                }
                // smooth edge falloff for anti-aliasing
                let alpha = ((r + EDGE_WIDTH - d) / EDGE_WIDTH).clamp(0.0, 1.0);
                let alpha = alpha * alpha * (3.0 - 2.0 * alpha);
                let q = spec.inverse_map(t, k, (x as f64, y as f64));
                let tex = textures[k].eval(q.0, q.1).clamp(0.0, 1.0);
                let old = frame.at(&[y, x, 0]) as f64;
                frame.set(&[y, x, 0], (old + alpha * (tex - old)) as f32);
            }
        }
    }
    frame
}

impl SynthSample {
    /// Closed-form motion field from frame t to t + d sampled on the given
    /// pixel rectangle.
    pub fn analytic_flow(&self, t: usize, d: usize, y0: usize, x0: usize, h: usize, w: usize) -> Result<FlowField> {
        if t + d >= self.frames.frames.len() {
            return Err(Error::Input(format!(
                "analytic_flow: t + d = {} out of range",
                t + d
            )));
        }
        let mut field = FlowField::zeros(h, w);
        for iy in 0..h {
            for ix in 0..w {
                let p = ((x0 + ix) as f64, (y0 + iy) as f64);
                let (mx, my) = self.spec.motion_at(t as f64, d as f64, p);
                field.u.set(&[iy, ix], mx as f32);
                field.v.set(&[iy, ix], my as f32);
            }
        }
        Ok(field)
    }

    /// Re-renders frame t + d by pulling frame-(t+d) material through the
    /// analytic maps; used by the rendering-consistency test.
    pub fn frame_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Fraction-free figure mask at frame t (1 inside any disc).
    pub fn figure_mask(&self, t: usize) -> Tensor<f32> {
        let mut mask = Tensor::zeros(&[self.height, self.width]);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.spec.top_disc(t as f64, (x as f64, y as f64)).is_some() {
                    mask.set(&[y, x], 1.0);
                }
            }
        }
        mask
    }

    pub fn background(&self) -> &Tensor<f32> {
        &self.background
    }

    pub fn texture_count(&self) -> usize {
        self.textures.len()
    }
}

#[derive(Serialize)]
struct SampleLog {
    id: String,
    class_id: usize,
}

/// Generates the full dataset on disk: frames as PNG, skeletons as JSON,
/// labels as CSV, plus a manifest carrying the config hash.
pub fn generate_dataset(config: &SynthConfig, config_hash: u64, out_dir: &Path) -> Result<Manifest> {
    if config.num_classes < 2 {
        return Err(Error::Input("num_classes must be >= 2".into()));
    }
    if config.num_classes > 6 {
        return Err(Error::Input(format!(
            "only 6 synthetic classes are defined, requested {}",
            config.num_classes
        )));
    }
    std::fs::create_dir_all(out_dir.join("samples"))
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let jobs: Vec<(usize, usize)> = (0..config.num_classes)
        .flat_map(|c| (0..config.samples_per_class).map(move |i| (c, i)))
        .collect();

    let samples: Vec<Result<ManifestSample>> = jobs
        .par_iter()
        .map(|&(class_id, index)| -> Result<ManifestSample> {
            let sample = generate_sample(config, class_id, index)?;
            let id = format!("c{class_id}_s{index:04}");
            let dir = out_dir.join("samples").join(&id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            for (t, frame) in sample.frames.frames.iter().enumerate() {
                write_frame_png(&dir.join(format!("frame_{t:04}.png")), frame)?;
            }
            write_skeleton(&dir.join("skeleton.json"), &sample.skeleton, &PARENT)?;
            Ok(ManifestSample {
                id,
                class_id,
                dir: format!("samples/c{class_id}_s{index:04}"),
            })
        })
        .collect();

    let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: 1,
        config_hash,
        seed: config.seed,
        num_classes: config.num_classes,
        class_names: CLASS_NAMES[..config.num_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        frames_per_sample: config.frames,
        frame_height: config.height,
        frame_width: config.width,
        samples,
    };
    write_manifest(&out_dir.join("manifest.json"), &manifest)?;
    write_labels_csv(&out_dir.join("labels.csv"), &manifest.samples)?;
    let log: Vec<SampleLog> = manifest
        .samples
        .iter()
        .map(|s| SampleLog { id: s.id.clone(), class_id: s.class_id })
        .collect();
    write_jsonl(&out_dir.join("samples.jsonl"), &log)?;
    Ok(manifest)
}
