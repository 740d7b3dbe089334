use crate::data::Skeleton;
use crate::error::{Error, Result};
use crate::model::PoseSequence;
use crate::tensor::Tensor;

/// Relative distance (in mean limb lengths) under which a training sequence
/// counts as sharing the target's last observed pose.
pub const PSEUDO_GT_THRESHOLD: f64 = 0.1;
pub const PSEUDO_GT_CAP: usize = 10;

/// Pseudo ground truths: sequences whose last observed pose is close to the
/// target's.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalSet {
    sequences: Vec<PoseSequence>,
}

impl MultiModalSet {
    pub fn new(sequences: Vec<PoseSequence>) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty pseudo ground-truth set".into()))?;
        let (t, j) = (first.frames(), first.joints());
        if let Some(bad) = sequences.iter().find(|s| s.frames() != t || s.joints() != j) {
            return Err(Error::ShapeMismatch {
                op: "multimodal set",
                lhs: vec![t, j, 3],
                rhs: vec![bad.frames(), bad.joints(), 3],
            });
        }
        Ok(Self { sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[PoseSequence] {
        &self.sequences
    }

    /// `[M, len, J, 3]` holding frames `start..start + len` (0-based).
    pub fn to_tensor(&self, start: usize, len: usize) -> Result<Tensor> {
        let j = self.sequences[0].joints();
        let mut data = Vec::with_capacity(self.len() * len * j * 3);
        for s in &self.sequences {
            if start + len > s.frames() {
                return Err(Error::InvalidArgument(format!(
                    "frames {start}..{} exceed sequence length {}",
                    start + len,
                    s.frames()
                )));
            }
            data.extend_from_slice(s.frames_slice(start, len));
        }
        Tensor::new(&[self.len(), len, j, 3], data)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Picks candidates whose pose at 0-based frame `frame` lies within
/// [`PSEUDO_GT_THRESHOLD`] mean limb lengths of the target's, nearest first
/// (ties by index), capped at [`PSEUDO_GT_CAP`]. Falls back to the single
/// nearest candidate. `exclude` removes the target's own index.
pub fn select_pseudo_gt(
    target: &PoseSequence,
    candidates: &[PoseSequence],
    skeleton: &Skeleton,
    frame: usize,
    exclude: Option<usize>,
) -> Result<MultiModalSet> {
    if frame >= target.frames() {
        return Err(Error::InvalidArgument(format!(
            "anchor frame {frame} outside a {}-frame target",
            target.frames()
        )));
    }
    let scale = skeleton.mean_limb_length();
    let anchor = target.frame(frame);
    let mut ranked: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .filter(|(i, c)| Some(*i) != exclude && c.frames() == target.frames() && c.joints() == target.joints())
        .map(|(i, c)| (distance(anchor, c.frame(frame)) / scale, i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nearest = *ranked
        .first()
        .ok_or_else(|| Error::InvalidArgument("no compatible pseudo ground-truth candidates".into()))?;
    let mut chosen: Vec<usize> = ranked
        .iter()
        .take_while(|(d, _)| *d <= PSEUDO_GT_THRESHOLD)
        .take(PSEUDO_GT_CAP)
        .map(|(_, i)| *i)
        .collect();
    if chosen.is_empty() {
        chosen.push(nearest.1);
    }
    MultiModalSet::new(chosen.into_iter().map(|i| candidates[i].clone()).collect())
}
