use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `T × J × 3` root-centred joint positions (metres) with an observed prefix
/// of `O` frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    frames: usize,
    joints: usize,
    observed: usize,
    coords: Vec<f64>,
}

impl PoseSequence {
    pub fn new(frames: usize, joints: usize, observed: usize, coords: Vec<f64>) -> Result<Self> {
        if frames == 0 || joints == 0 {
            return Err(Error::InvalidArgument("pose sequence needs frames and joints".into()));
        }
        if coords.len() != frames * joints * 3 {
            return Err(Error::InvalidShape {
                shape: vec![frames, joints, 3],
                len: coords.len(),
            });
        }
        if observed > frames {
            return Err(Error::InvalidArgument(format!(
                "observed prefix {observed} exceeds {frames} frames"
            )));
        }
        if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                context: "pose coordinates".into(),
            });
        }
        for t in 0..frames {
            let root = &coords[t * joints * 3..t * joints * 3 + 3];
            if root.iter().any(|&v| v != 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "root joint of frame {t} is {root:?}, expected the origin"
                )));
            }
        }
        Ok(Self {
            frames,
            joints,
            observed,
            coords,
        })
    }

    pub fn zeros(frames: usize, joints: usize) -> Self {
        Self {
            frames,
            joints,
            observed: 0,
            coords: vec![0.0; frames * joints * 3],
        }
    }

    pub fn from_tensor(t: &Tensor, observed: usize) -> Result<Self> {
        match t.shape() {
            [f, j, 3] => Self::new(*f, *j, observed, t.data().to_vec()),
            s => Err(Error::InvalidArgument(format!("expected [T, J, 3], got {s:?}"))),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn observed(&self) -> usize {
        self.observed
    }

    /// Length of the generated suffix `T − O`.
    pub fn generated(&self) -> usize {
        self.frames - self.observed
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn frame_len(&self) -> usize {
        self.joints * 3
    }

    /// Frame `t`, 0-based.
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.coords[t * n..(t + 1) * n]
    }

    /// Frames `start..start+len`, flattened.
    pub fn frames_slice(&self, start: usize, len: usize) -> &[f64] {
        let n = self.frame_len();
        &self.coords[start * n..(start + len) * n]
    }

    /// The generated suffix, flattened.
    pub fn future(&self) -> &[f64] {
        self.frames_slice(self.observed, self.generated())
    }

    pub fn with_observed(mut self, observed: usize) -> Result<Self> {
        if observed > self.frames {
            return Err(Error::InvalidArgument(format!(
                "observed prefix {observed} exceeds {} frames",
                self.frames
            )));
        }
        self.observed = observed;
        Ok(self)
    }

    /// Sub-sequence of `len` frames from `start`; the observed count is
    /// clipped to the window.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::InvalidArgument(format!(
                "window {start}..{} outside {} frames",
                start + len,
                self.frames
            )));
        }
        Ok(Self {
            frames: len,
            joints: self.joints,
            observed: self.observed.saturating_sub(start).min(len),
            coords: self.frames_slice(start, len).to_vec(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.frames, self.joints, 3], self.coords.clone()).expect("consistent shape")
    }
}

/// Per-frame latents `z_1..z_T`, each of width `dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSequence {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl LatentSequence {
    pub fn new(dim: usize) -> Self {
        Self { dim, values: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn push(&mut self, z: &[f64]) {
        assert_eq!(z.len(), self.dim, "latent width");
        self.values.extend_from_slice(z);
    }

    pub fn get(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.len(), self.dim], self.values.clone()).expect("consistent shape")
    }
}
