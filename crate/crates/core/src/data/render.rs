use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::Skeleton;
use crate::error::{Error, Result};

/// Coordinate pair drawn as (horizontal, vertical); vertical always points up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// x right, y up.
    Front,
    /// z right, y up.
    Side,
    /// x right, z up.
    Top,
}

impl Projection {
    fn axes(self) -> (usize, usize) {
        match self {
            Self::Front => (0, 1),
            Self::Side => (2, 1),
            Self::Top => (0, 2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub projection: Projection,
    /// Zero-based frame indices, one panel each, left to right.
    pub frames: Vec<usize>,
    /// Pixels per metre.
    pub scale: f64,
    /// Panel width and height in pixels.
    pub panel: f64,
    pub stroke_width: f64,
}

impl RenderOptions {
    pub fn new(frames: Vec<usize>) -> Self {
        Self {
            projection: Projection::Front,
            frames,
            scale: 60.0,
            panel: 160.0,
            stroke_width: 2.0,
        }
    }
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

pub fn sample_color(k: usize) -> String {
    if k < PALETTE.len() {
        PALETTE[k].to_string()
    } else {
        // Golden-angle hue walk beyond the fixed palette.
        let hue = (k as f64 * 137.507_764) % 360.0;
        format!("hsl({hue:.1},65%,45%)")
    }
}

/// Stick figures of `samples` (each a flat `frames × joints × 3` array),
/// overlaid per panel with one colour per sample. Produces `K·F·E` lines.
pub fn render_svg(skeleton: &Skeleton, samples: &[&[f64]], options: &RenderOptions) -> Result<String> {
    let j = skeleton.joint_count();
    let frame_len = 3 * j;
    for (k, s) in samples.iter().enumerate() {
        if s.len() % frame_len != 0 {
            return Err(Error::InvalidArgument(format!(
                "sample {k} holds {} values, not a multiple of {frame_len}",
                s.len()
            )));
        }
        let frames = s.len() / frame_len;
        if let Some(&f) = options.frames.iter().find(|&&f| f >= frames) {
            return Err(Error::InvalidArgument(format!(
                "frame {f} requested but sample {k} has {frames} frames"
            )));
        }
    }
    let (h_axis, v_axis) = options.projection.axes();
    let p = options.panel;
    let width = p * options.frames.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{p}" viewBox="0 0 {width} {p}">"#
    );
    for (panel, &frame) in options.frames.iter().enumerate() {
        let cx = p * (panel as f64 + 0.5);
        let cy = p * 0.5;
        let _ = writeln!(svg, r#"  <g id="frame-{frame}">"#);
        for (k, s) in samples.iter().enumerate() {
            let pose = &s[frame * frame_len..(frame + 1) * frame_len];
            let color = sample_color(k);
            for &(a, b) in &skeleton.edges {
                let pt = |i: usize| {
                    (
                        cx + options.scale * pose[3 * i + h_axis],
                        cy - options.scale * pose[3 * i + v_axis],
                    )
                };
                let ((x1, y1), (x2, y2)) = (pt(a), pt(b));
                let _ = writeln!(
                    svg,
                    r#"    <line x1="{x1:.3}" y1="{y1:.3}" x2="{x2:.3}" y2="{y2:.3}" stroke="{color}" stroke-width="{}" stroke-linecap="round"/>"#,
                    options.stroke_width
                );
            }
        }
        let _ = writeln!(svg, "  </g>");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
