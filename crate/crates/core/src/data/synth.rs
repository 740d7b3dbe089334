use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::clip::{BodyEncoding, MotionClip};
use super::Skeleton;
use crate::error::{Error, Result};

pub const GENERATOR_VERSION: &str = "synth-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionClass {
    Walk,
    Wave,
    Squat,
    Turn,
}

impl ActionClass {
    pub const ALL: [ActionClass; 4] = [Self::Walk, Self::Wave, Self::Squat, Self::Turn];

    pub fn name(self) -> &'static str {
        match self {
            Self::Walk => "walk",
            Self::Wave => "wave",
            Self::Squat => "squat",
            Self::Turn => "turn",
        }
    }

    fn base_frequency(self) -> f64 {
        match self {
            Self::Walk => 1.0,
            Self::Wave => 1.5,
            Self::Squat => 0.6,
            Self::Turn => 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: Vec<ActionClass>,
    pub clips_per_class: usize,
    pub frames: usize,
    pub fps: f64,
    /// Relative spread of per-clip frequency and amplitude, in `[0, 1]`.
    pub jitter: f64,
    /// Global amplitude multiplier; 1 is the nominal motion range.
    pub amplitude: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Four classes × 100 clips of 40 frames at 25 Hz.
    pub fn standard(seed: u64) -> Self {
        Self {
            classes: ActionClass::ALL.to_vec(),
            clips_per_class: 100,
            frames: 40,
            fps: 25.0,
            jitter: 1.0,
            amplitude: 1.0,
            test_fraction: 0.2,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let mut classes = self.classes.clone();
        classes.sort();
        classes.dedup();
        if classes.len() < 2 || classes.len() != self.classes.len() {
            return Err(Error::Config("synth needs at least two distinct classes".into()));
        }
        if self.clips_per_class == 0 || self.frames == 0 || !(self.fps > 0.0) {
            return Err(Error::Config("synth counts and frame rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.jitter) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("jitter must lie in [0, 1] and test_fraction in [0, 1)".into()));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config("amplitude must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-clip motion parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub frequency: f64,
    pub amplitude: f64,
    pub phase: f64,
}

fn rx(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), a)
}

fn ry(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), a)
}

fn rz(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), a)
}

/// Limb direction for flexion `fwd` (towards +z) after abduction `side`
/// (towards `sign`·x) of a downward-pointing limb.
fn limb(side: f64, sign: f64, fwd: f64) -> Rotation3<f64> {
    rx(-fwd) * rz(sign * side)
}

/// One frame of the `synthetic9` skeleton (y up, z forward), pelvis at the
/// origin, at time `s` seconds.
fn frame(skel: &Skeleton, class: ActionClass, p: MotionParams, s: f64) -> [Vector3<f64>; 9] {
    let w = 2.0 * PI * p.frequency * s + p.phase;
    let a = p.amplitude;
    let (mut yaw, mut lean, mut nod) = (0.0, 0.0, 0.0);
    let (mut l_side, mut r_side, mut l_fwd, mut r_fwd) = (0.2, 0.2, 0.0, 0.0);
    let (mut l_bend, mut r_bend) = (0.3, 0.3);
    let (mut l_leg, mut r_leg) = (0.0, 0.0);
    let leg_side = 0.1;
    match class {
        ActionClass::Walk => {
            l_leg = 0.45 * a * w.sin();
            r_leg = -l_leg;
            l_fwd = -0.4 * a * w.sin();
            r_fwd = -l_fwd;
            l_bend = 0.3 + 0.2 * a * (1.0 + w.sin()) / 2.0;
            r_bend = 0.3 + 0.2 * a * (1.0 - w.sin()) / 2.0;
            nod = 0.05 * a * (2.0 * w).sin();
        }
        ActionClass::Wave => {
            r_side = 2.3;
            r_bend = 1.2 + 0.6 * a * w.sin();
            lean = 0.05 * a * w.sin();
        }
        ActionClass::Squat => {
            let depth = 0.5 * (1.0 - w.cos());
            lean = 0.4 * a * depth;
            l_leg = 0.3 * a * depth;
            r_leg = l_leg;
            l_fwd = 1.3 * a * depth;
            r_fwd = l_fwd;
            l_bend = 0.2;
            r_bend = 0.2;
        }
        ActionClass::Turn => {
            yaw = 0.9 * a * w.sin();
            l_side = 0.2 + 0.5 * a * (1.0 - w.cos()) / 2.0;
            r_side = l_side;
        }
    }
    let len = |e: usize| skel.limb_lengths[e];
    let down = Vector3::new(0.0, -1.0, 0.0);
    let up = Vector3::new(0.0, 1.0, 0.0);
    let body = ry(yaw) * rx(lean);
    let pelvis = Vector3::zeros();
    let chest = pelvis + body * up * len(0);
    let head = chest + body * rx(nod) * up * len(1);
    let l_arm = body * limb(l_side, -1.0, l_fwd);
    let r_arm = body * limb(r_side, 1.0, r_fwd);
    let l_elbow = chest + l_arm * down * len(2);
    let l_hand = l_elbow + l_arm * rx(-l_bend) * down * len(3);
    let r_elbow = chest + r_arm * down * len(4);
    let r_hand = r_elbow + r_arm * rx(-r_bend) * down * len(5);
    let l_foot = pelvis + ry(yaw) * limb(leg_side, -1.0, l_leg) * down * len(6);
    let r_foot = pelvis + ry(yaw) * limb(leg_side, 1.0, r_leg) * down * len(7);
    [pelvis, chest, head, l_elbow, l_hand, r_elbow, r_hand, l_foot, r_foot]
}

/// Flattened `frames × 9 × 3` coordinates; rejects parameters that push a
/// hinge outside its limits.
pub fn synth_motion(
    skel: &Skeleton,
    class: ActionClass,
    params: MotionParams,
    frames: usize,
    fps: f64,
) -> Result<Vec<f64>> {
    if skel.joint_count() != 9 {
        return Err(Error::Config(format!(
            "synthetic motions need the 9-joint skeleton, got {} joints",
            skel.joint_count()
        )));
    }
    let mut out = Vec::with_capacity(frames * 27);
    for t in 0..frames {
        let joints = frame(skel, class, params, t as f64 / fps);
        let start = out.len();
        for j in joints {
            out.extend_from_slice(&[j.x, j.y, j.z]);
        }
        for (h, angle) in skel.hinges.iter().zip(skel.hinge_angles(&out[start..])) {
            let angle = angle.unwrap_or(f64::NAN);
            if !(angle >= h.min && angle <= h.max) {
                return Err(Error::Config(format!(
                    "{} motion with amplitude {:.3} bends joint {} to {angle:.4} rad, outside [{}, {}]",
                    class.name(),
                    params.amplitude,
                    skel.joints[h.joint],
                    h.min,
                    h.max
                )));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub skeleton: Skeleton,
    pub spec: SynthSpec,
    pub clips: Vec<MotionClip>,
    pub splits: Vec<Split>,
    pub params: Vec<MotionParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub id: String,
    pub label: String,
    pub split: Split,
    pub file: String,
    pub sha256: String,
    pub params: MotionParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format: String,
    pub generator_version: String,
    pub seed: u64,
    pub spec: SynthSpec,
    pub skeleton: Skeleton,
    pub corpus_sha256: String,
    pub clips: Vec<ClipEntry>,
}

pub fn synth_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let skel = Skeleton::synthetic();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5eed_5eed_5eed);
    let n_test = (spec.test_fraction * spec.clips_per_class as f64).round() as usize;
    let mut clips = Vec::new();
    let mut splits = Vec::new();
    let mut all_params = Vec::new();
    for &class in &spec.classes {
        let mut order: Vec<usize> = (0..spec.clips_per_class).collect();
        order.shuffle(&mut split_rng);
        let mut is_test = vec![false; spec.clips_per_class];
        for &i in &order[..n_test] {
            is_test[i] = true;
        }
        for i in 0..spec.clips_per_class {
            let u1: f64 = rng.gen_range(-1.0..=1.0);
            let u2: f64 = rng.gen_range(-1.0..=1.0);
            let phase: f64 = rng.gen_range(0.0..2.0 * PI);
            let params = MotionParams {
                frequency: class.base_frequency() * (1.0 + 0.2 * spec.jitter * u1),
                amplitude: spec.amplitude * (1.0 + 0.2 * spec.jitter * u2),
                phase,
            };
            let coords = synth_motion(&skel, class, params, spec.frames, spec.fps)?;
            clips.push(MotionClip {
                id: format!("{}-{i:04}", class.name()),
                skeleton: skel.clone(),
                label: class.name().into(),
                fps: spec.fps,
                frames: spec.frames,
                joints: 9,
                coords,
                source: format!("{GENERATOR_VERSION}:{}:seed={}", class.name(), spec.seed),
            });
            splits.push(if is_test[i] { Split::Test } else { Split::Train });
            all_params.push(params);
        }
    }
    Ok(Corpus {
        skeleton: skel,
        spec: spec.clone(),
        clips,
        splits,
        params: all_params,
    })
}

impl Corpus {
    pub fn class_names(&self) -> Vec<String> {
        self.spec.classes.iter().map(|c| c.name().to_string()).collect()
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &MotionClip> {
        self.clips
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == which)
            .map(|(c, _)| c)
    }

    /// Writes `manifest.json` and `clips/<id>.clip` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, encoding: BodyEncoding) -> Result<CorpusManifest> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("clips"))?;
        let mut entries = Vec::with_capacity(self.clips.len());
        let mut all = Sha256::new();
        for ((clip, split), params) in self.clips.iter().zip(&self.splits).zip(&self.params) {
            let bytes = clip.to_bytes(encoding);
            let file = format!("clips/{}.clip", clip.id);
            std::fs::write(dir.join(&file), &bytes)?;
            let digest = Sha256::digest(&bytes);
            all.update(digest);
            entries.push(ClipEntry {
                id: clip.id.clone(),
                label: clip.label.clone(),
                split: *split,
                file,
                sha256: hex::encode(digest),
                params: *params,
            });
        }
        let manifest = CorpusManifest {
            format: "hitdvae-corpus".into(),
            generator_version: GENERATOR_VERSION.into(),
            seed: self.spec.seed,
            spec: self.spec.clone(),
            skeleton: self.skeleton.clone(),
            corpus_sha256: hex::encode(all.finalize()),
            clips: entries,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Corpus, CorpusManifest)> {
        let dir = dir.as_ref();
        let manifest: CorpusManifest =
            serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let mut clips = Vec::with_capacity(manifest.clips.len());
        let mut splits = Vec::with_capacity(manifest.clips.len());
        for e in &manifest.clips {
            let bytes = std::fs::read(dir.join(&e.file))?;
            if hex::encode(Sha256::digest(&bytes)) != e.sha256 {
                return Err(Error::Config(format!("clip `{}` does not match its manifest hash", e.id)));
            }
            clips.push(MotionClip::from_bytes(&bytes)?);
            splits.push(e.split);
        }
        let corpus = Corpus {
            skeleton: manifest.skeleton.clone(),
            spec: manifest.spec.clone(),
            clips,
            splits,
            params: manifest.clips.iter().map(|e| e.params).collect(),
        };
        Ok((corpus, manifest))
    }
}
