//! Sample-quality metrics: diversity (APD), accuracy against the ground truth
//! and pseudo ground truths (ADE/FDE and their multi-modal forms), action
//! recognition accuracy and FID.

mod classifier;
mod fid;

pub use classifier::{recognition_accuracy, ActionClassifier, ClassifierConfig, ClassifierReport, LabeledSequence};
pub use fid::{fid, FeatureStats};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a future's distance to a reference is measured for ADE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Mean over frames of the per-frame L2 norm.
    #[default]
    PerFrame,
    /// L2 norm of the whole flattened future divided by the frame count.
    Flattened,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Best,
    /// Rank `⌈K/2⌉` (1-based, ascending, ties by sample index).
    Medium,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Average pairwise distance `1/(K(K−1)) Σ_i Σ_{j≠i} ‖x̂^i − x̂^j‖` of
/// flattened futures.
pub fn apd(samples: &[&[f64]]) -> Result<f64> {
    let k = samples.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("APD needs at least 2 samples, got {k}")));
    }
    check_lengths(samples, samples[0].len())?;
    let mut sum = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            sum += l2(samples[i], samples[j]);
        }
    }
    Ok(2.0 * sum / (k * (k - 1)) as f64)
}

fn check_lengths(samples: &[&[f64]], len: usize) -> Result<()> {
    if let Some(bad) = samples.iter().find(|s| s.len() != len) {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: vec![len],
            rhs: vec![bad.len()],
        });
    }
    Ok(())
}

/// Per-sample `(ADE, FDE)` against `reference`; futures are flat
/// `G × frame_len` slices.
pub fn sample_errors(
    samples: &[&[f64]],
    reference: &[f64],
    frame_len: usize,
    mode: DistanceMode,
) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to score".into()));
    }
    if frame_len == 0 || reference.is_empty() || reference.len() % frame_len != 0 {
        return Err(Error::InvalidArgument(format!(
            "future of length {} is not a whole number of {frame_len}-value frames",
            reference.len()
        )));
    }
    check_lengths(samples, reference.len())?;
    let g = reference.len() / frame_len;
    Ok(samples
        .iter()
        .map(|s| {
            let ade = match mode {
                DistanceMode::PerFrame => {
                    s.chunks(frame_len)
                        .zip(reference.chunks(frame_len))
                        .map(|(a, b)| l2(a, b))
                        .sum::<f64>()
                        / g as f64
                }
                DistanceMode::Flattened => l2(s, reference) / g as f64,
            };
            let last = (g - 1) * frame_len;
            (ade, l2(&s[last..], &reference[last..]))
        })
        .collect())
}

/// The value at rank `⌈K/2⌉` (ascending, ties by index) or the minimum.
fn pick(values: &[f64], selection: Selection) -> f64 {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    match selection {
        Selection::Best => values[order[0]],
        Selection::Medium => values[order[values.len().div_ceil(2) - 1]],
    }
}

/// `(ADE, FDE)` of the best or medium sample; the two are selected
/// independently.
pub fn ade_fde(
    samples: &[&[f64]],
    gt: &[f64],
    frame_len: usize,
    selection: Selection,
    mode: DistanceMode,
) -> Result<(f64, f64)> {
    let errs = sample_errors(samples, gt, frame_len, mode)?;
    let ade: Vec<f64> = errs.iter().map(|e| e.0).collect();
    let fde: Vec<f64> = errs.iter().map(|e| e.1).collect();
    Ok((pick(&ade, selection), pick(&fde, selection)))
}

/// [`ade_fde`] averaged over the pseudo ground-truth futures in `mm`.
pub fn mm_ade_fde(
    samples: &[&[f64]],
    mm: &[&[f64]],
    frame_len: usize,
    selection: Selection,
    mode: DistanceMode,
) -> Result<(f64, f64)> {
    if mm.is_empty() {
        return Err(Error::InvalidArgument("empty pseudo ground-truth set".into()));
    }
    let (mut a, mut f) = (0.0, 0.0);
    for gt in mm {
        let (da, df) = ade_fde(samples, gt, frame_len, selection, mode)?;
        a += da;
        f += df;
    }
    let m = mm.len() as f64;
    Ok((a / m, f / m))
}

/// Futures of one evaluated observation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    /// `K` generated futures, each `G × frame_len`.
    pub samples: Vec<Vec<f64>>,
    pub gt: Vec<f64>,
    pub pseudo: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: Option<f64>,
    pub fid: Option<f64>,
    pub apd: f64,
    pub ade_b: f64,
    pub fde_b: f64,
    pub mmade_b: f64,
    pub mmfde_b: f64,
    pub ade_m: f64,
    pub fde_m: f64,
    pub mmade_m: f64,
    pub mmfde_m: f64,
    pub sequences: usize,
    pub samples: usize,
    /// Mean pseudo ground-truth count per sequence.
    pub pseudo_mean: f64,
    pub distance: DistanceMode,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "Acc,FID,APD,ADEb,FDEb,MMADEb,MMFDEb,ADEm,FDEm,MMADEm,MMFDEm";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut row = vec![opt(self.acc), opt(self.fid)];
        row.extend(
            [
                self.apd, self.ade_b, self.fde_b, self.mmade_b, self.mmfde_b, self.ade_m, self.fde_m,
                self.mmade_m, self.mmfde_m,
            ]
            .iter()
            .map(|v| v.to_string()),
        );
        row.join(",")
    }

    /// Best-sample values never exceed medium ones and distances are
    /// non-negative.
    pub fn invariants_hold(&self) -> bool {
        let d = [
            self.apd, self.ade_b, self.fde_b, self.mmade_b, self.mmfde_b, self.ade_m, self.fde_m,
            self.mmade_m, self.mmfde_m,
        ];
        d.iter().all(|v| *v >= 0.0)
            && self.ade_b <= self.ade_m
            && self.fde_b <= self.fde_m
            && self.mmade_b <= self.mmade_m
            && self.mmfde_b <= self.mmfde_m
    }
}

/// Distance metrics averaged over `cases`; accuracy and FID are left empty.
pub fn evaluate(cases: &[EvalCase], frame_len: usize, mode: DistanceMode) -> Result<MetricReport> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let k = cases[0].samples.len();
    let mut sums = [0.0; 9];
    let mut pseudo = 0usize;
    for case in cases {
        if case.samples.len() != k {
            return Err(Error::InvalidArgument(format!(
                "every case needs {k} samples, got {}",
                case.samples.len()
            )));
        }
        let s: Vec<&[f64]> = case.samples.iter().map(Vec::as_slice).collect();
        let mm: Vec<&[f64]> = case.pseudo.iter().map(Vec::as_slice).collect();
        let (ab, fb) = ade_fde(&s, &case.gt, frame_len, Selection::Best, mode)?;
        let (am, fm) = ade_fde(&s, &case.gt, frame_len, Selection::Medium, mode)?;
        let (mab, mfb) = mm_ade_fde(&s, &mm, frame_len, Selection::Best, mode)?;
        let (mam, mfm) = mm_ade_fde(&s, &mm, frame_len, Selection::Medium, mode)?;
        let apd = if k >= 2 { apd(&s)? } else { 0.0 };
        for (acc, v) in sums.iter_mut().zip([apd, ab, fb, mab, mfb, am, fm, mam, mfm]) {
            *acc += v;
        }
        pseudo += mm.len();
    }
    let n = cases.len() as f64;
    let m = sums.map(|v| v / n);
    Ok(MetricReport {
        acc: None,
        fid: None,
        apd: m[0],
        ade_b: m[1],
        fde_b: m[2],
        mmade_b: m[3],
        mmfde_b: m[4],
        ade_m: m[5],
        fde_m: m[6],
        mmade_m: m[7],
        mmfde_m: m[8],
        sequences: cases.len(),
        samples: k,
        pseudo_mean: pseudo as f64 / n,
        distance: mode,
    })
}
