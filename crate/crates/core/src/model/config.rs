use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width, head count and feed-forward width of one attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub width: usize,
    pub heads: usize,
    pub ff: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub joints: usize,
    pub d_z: usize,
    pub d_w: usize,
    pub encoder: BlockConfig,
    pub z_decoder: BlockConfig,
    pub x_decoder: BlockConfig,
    pub spatial_blocks: usize,
    pub spatial_hidden: usize,
    pub temporal_blocks: usize,
    pub temporal_hidden: usize,
    /// Frames the w-posterior reads (the temporal GCN node count).
    pub w_window: usize,
    pub positional_encoding: bool,
    pub logvar_clamp: f64,
}

impl ModelConfig {
    /// Full-size network (d_z = 16, d_w = 32, 64/4/256 encoder and z-decoder,
    /// 256/4/1024 x-decoder, GCN 1×8 spatial and 4×64 temporal).
    pub fn full(joints: usize, w_window: usize) -> Self {
        Self {
            joints,
            d_z: 16,
            d_w: 32,
            encoder: BlockConfig { width: 64, heads: 4, ff: 256 },
            z_decoder: BlockConfig { width: 64, heads: 4, ff: 256 },
            x_decoder: BlockConfig { width: 256, heads: 4, ff: 1024 },
            spatial_blocks: 1,
            spatial_hidden: 8,
            temporal_blocks: 4,
            temporal_hidden: 64,
            w_window,
            positional_encoding: true,
            logvar_clamp: 10.0,
        }
    }

    /// Small sizes for fast training on the synthetic corpus.
    pub fn small(joints: usize, w_window: usize) -> Self {
        Self {
            joints,
            d_z: 8,
            d_w: 16,
            encoder: BlockConfig { width: 32, heads: 2, ff: 64 },
            z_decoder: BlockConfig { width: 32, heads: 2, ff: 64 },
            x_decoder: BlockConfig { width: 64, heads: 4, ff: 128 },
            spatial_blocks: 1,
            spatial_hidden: 8,
            temporal_blocks: 2,
            temporal_hidden: 16,
            w_window,
            positional_encoding: true,
            logvar_clamp: 10.0,
        }
    }

    /// Tiny sizes for finite-difference checks.
    pub fn micro(joints: usize, w_window: usize) -> Self {
        Self {
            joints,
            d_z: 2,
            d_w: 2,
            encoder: BlockConfig { width: 4, heads: 2, ff: 4 },
            z_decoder: BlockConfig { width: 4, heads: 2, ff: 4 },
            x_decoder: BlockConfig { width: 4, heads: 2, ff: 4 },
            spatial_blocks: 1,
            spatial_hidden: 2,
            temporal_blocks: 1,
            temporal_hidden: 3,
            w_window,
            positional_encoding: true,
            logvar_clamp: 10.0,
        }
    }

    /// Per-frame pose feature width `J · spatial_hidden`.
    pub fn feature_dim(&self) -> usize {
        self.joints * self.spatial_hidden
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("joints", self.joints),
            ("d_z", self.d_z),
            ("d_w", self.d_w),
            ("spatial_blocks", self.spatial_blocks),
            ("spatial_hidden", self.spatial_hidden),
            ("temporal_blocks", self.temporal_blocks),
            ("temporal_hidden", self.temporal_hidden),
            ("w_window", self.w_window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.joints < 2 {
            return Err(Error::Config("model.joints must be at least 2".into()));
        }
        for (name, b) in [
            ("encoder", self.encoder),
            ("z_decoder", self.z_decoder),
            ("x_decoder", self.x_decoder),
        ] {
            if b.width == 0 || b.heads == 0 || b.ff == 0 {
                return Err(Error::Config(format!("model.{name} sizes must be positive")));
            }
            if b.width % b.heads != 0 {
                return Err(Error::Config(format!(
                    "model.{name}.width {} is not divisible by {} heads",
                    b.width, b.heads
                )));
            }
        }
        if !(self.logvar_clamp > 0.0 && self.logvar_clamp.is_finite()) {
            return Err(Error::Config("model.logvar_clamp must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_sizes() {
        let c = ModelConfig::full(15, 15);
        assert_eq!((c.d_z, c.d_w), (16, 32));
        assert_eq!(c.x_decoder, BlockConfig { width: 256, heads: 4, ff: 1024 });
        assert!(c.validate().is_ok());
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut c = ModelConfig::small(9, 10);
        c.encoder.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(ModelConfig::micro(3, 3)).unwrap();
        v["dz"] = 2.into();
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}
