//! Training objectives: reconstruction, KL, diversity and pose-realism terms
//! and their weighted total.

mod pseudo;
mod terms;

pub use pseudo::{select_pseudo_gt, MultiModalSet, PSEUDO_GT_CAP, PSEUDO_GT_THRESHOLD};
pub use terms::{
    angle_loss, diversity_term, kl_w_loss, kl_z_loss, limb_loss, multimodal_loss, per_sample_mse,
    recon_loss, AngleLoss, PosePrior, DEGENERATE_LIMB,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub multimodal: f64,
    pub kl_z: f64,
    pub kl_w: f64,
    pub div_lower: f64,
    pub div_upper: f64,
    pub limb: f64,
    pub angle: f64,
    pub nf: f64,
    pub alpha_lower: f64,
    pub alpha_upper: f64,
}

impl LossWeights {
    pub fn humaneva() -> Self {
        Self {
            recon: 10.0,
            multimodal: 5.0,
            kl_z: 0.5,
            kl_w: 0.1,
            div_lower: 0.1,
            div_upper: 0.2,
            limb: 100.0,
            angle: 1.0,
            nf: 0.001,
            alpha_lower: 15.0,
            alpha_upper: 50.0,
        }
    }

    pub fn h36m() -> Self {
        Self {
            recon: 20.0,
            multimodal: 10.0,
            nf: 0.01,
            alpha_lower: 100.0,
            alpha_upper: 300.0,
            ..Self::humaneva()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("recon", self.recon),
            ("multimodal", self.multimodal),
            ("kl_z", self.kl_z),
            ("kl_w", self.kl_w),
            ("div_lower", self.div_lower),
            ("div_upper", self.div_upper),
            ("limb", self.limb),
            ("angle", self.angle),
            ("nf", self.nf),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight `{name}` must be non-negative, got {v}")));
            }
        }
        for (name, v) in [("alpha_lower", self.alpha_lower), ("alpha_upper", self.alpha_upper)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{name}` must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted per-term values and the weighted total of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub multimodal: f64,
    pub kl_z: f64,
    pub kl_w: f64,
    pub div_lower: f64,
    pub div_upper: f64,
    pub limb: f64,
    pub angle: f64,
    pub nf: f64,
    pub total: f64,
}

pub const TERM_NAMES: [&str; 9] = [
    "recon",
    "multimodal",
    "kl_z",
    "kl_w",
    "div_lower",
    "div_upper",
    "limb",
    "angle",
    "nf",
];

fn coefficients(w: &LossWeights, anneal: f64) -> [f64; 9] {
    [
        w.recon,
        w.multimodal,
        anneal * w.kl_z,
        anneal * w.kl_w,
        w.div_lower,
        w.div_upper,
        w.limb,
        w.angle,
        w.nf,
    ]
}

fn check_anneal(anneal: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&anneal) {
        return Err(Error::InvalidArgument(format!("KL multiplier {anneal} outside [0, 1]")));
    }
    Ok(())
}

fn check_terms(values: &[f64; 9]) -> Result<()> {
    for (name, &v) in TERM_NAMES.iter().zip(values) {
        if !v.is_finite() {
            return Err(Error::NonFiniteTerm { name, value: v });
        }
    }
    Ok(())
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "epoch,step,recon,multimodal,kl_z,kl_w,div_lower,div_upper,limb,angle,nf,total";

    /// Weighted total of raw term values in [`TERM_NAMES`] order.
    pub fn from_terms(values: [f64; 9], weights: &LossWeights, anneal: f64) -> Result<Self> {
        check_anneal(anneal)?;
        check_terms(&values)?;
        let total = values
            .iter()
            .zip(coefficients(weights, anneal))
            .fold(0.0, |acc, (v, c)| acc + c * v);
        Ok(Self::with_total(values, total))
    }

    fn with_total(v: [f64; 9], total: f64) -> Self {
        Self {
            recon: v[0],
            multimodal: v[1],
            kl_z: v[2],
            kl_w: v[3],
            div_lower: v[4],
            div_upper: v[5],
            limb: v[6],
            angle: v[7],
            nf: v[8],
            total,
        }
    }

    pub fn values(&self) -> [f64; 9] {
        [
            self.recon,
            self.multimodal,
            self.kl_z,
            self.kl_w,
            self.div_lower,
            self.div_upper,
            self.limb,
            self.angle,
            self.nf,
        ]
    }

    pub fn csv_row(&self, epoch: usize, step: usize) -> String {
        let mut row = format!("{epoch},{step}");
        for v in self.values().iter().chain([&self.total]) {
            row.push(',');
            row.push_str(&v.to_string());
        }
        row
    }
}

/// The nine loss terms of one step as graph nodes, in [`TERM_NAMES`] order.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'a> {
    pub recon: Var<'a>,
    pub multimodal: Var<'a>,
    pub kl_z: Var<'a>,
    pub kl_w: Var<'a>,
    pub div_lower: Var<'a>,
    pub div_upper: Var<'a>,
    pub limb: Var<'a>,
    pub angle: Var<'a>,
    pub nf: Var<'a>,
}

impl<'a> LossTerms<'a> {
    fn vars(&self) -> [Var<'a>; 9] {
        [
            self.recon,
            self.multimodal,
            self.kl_z,
            self.kl_w,
            self.div_lower,
            self.div_upper,
            self.limb,
            self.angle,
            self.nf,
        ]
    }
}

/// `λ_R R + λ_MM MM + a(λ_z KLz + λ_w KLw) + λ_l Dl + λ_u Du + λ_L L + λ_A A + λ_NF NF`.
pub fn total_loss<'a>(
    terms: &LossTerms<'a>,
    weights: &LossWeights,
    anneal: f64,
) -> Result<(Var<'a>, LossBreakdown)> {
    check_anneal(anneal)?;
    let vars = terms.vars();
    let mut values = [0.0; 9];
    for (v, var) in values.iter_mut().zip(&vars) {
        *v = var.item();
    }
    check_terms(&values)?;
    let mut total: Option<Var<'a>> = None;
    for (var, c) in vars.iter().zip(coefficients(weights, anneal)) {
        let term = var.scale(c);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    let total = total.expect("nine terms");
    let breakdown = LossBreakdown::with_total(values, total.item());
    Ok((total, breakdown))
}
