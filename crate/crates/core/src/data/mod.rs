//! Skeletons, the synthetic motion corpus, clip files and SVG rendering.

mod clip;
mod render;
mod skeleton;
mod synth;

pub use clip::{preprocess, BodyEncoding, MotionClip, CLIP_FORMAT, CLIP_VERSION};
pub use render::{render_svg, sample_color, Projection, RenderOptions};
pub use skeleton::{Hinge, Skeleton};
pub use synth::{
    synth_corpus, synth_motion, ActionClass, ClipEntry, Corpus, CorpusManifest, MotionParams, Split,
    SynthSpec, GENERATOR_VERSION,
};
