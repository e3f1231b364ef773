//! Pipeline thresholds and defaults.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::sha256_hex;

#[derive(Debug, Error)]
#[error("invalid pipeline config: {0}")]
pub struct ConfigError(pub String);

/// Every tunable threshold in the pipeline, with the defaults the annotation
/// rules were designed around. All normalized bounds live in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Objects below this box-area / image-area ratio are dropped.
    pub area_threshold_k: f64,
    /// Regional captions kept per object.
    pub caption_top_k: usize,
    /// Answers kept per attribute query.
    pub attribute_top_k: usize,
    /// Horizontal zones: left `[0, left)`, middle `[left, right]`,
    /// right `(right, 1]`.
    pub horiz_left_bound: f64,
    pub horiz_right_bound: f64,
    /// Vertical zones: top `[0, top)`, bottom `(bottom, 1]`, no middle label.
    pub vert_top_bound: f64,
    pub vert_bottom_bound: f64,
    /// Depth labels are emitted only when min-area/max-area is below this.
    pub depth_enable_ratio: f64,
    /// Per-object area/max-area zones: behind `[0, behind)`,
    /// front `(front, 1]`.
    pub depth_behind_bound: f64,
    pub depth_front_bound: f64,
    /// Model-generated boxes must score strictly above this; human boxes
    /// (no score) always pass.
    pub det_confidence_min: Option<f64>,
    pub rng_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            area_threshold_k: 0.05,
            caption_top_k: 5,
            attribute_top_k: 3,
            horiz_left_bound: 0.25,
            horiz_right_bound: 0.75,
            vert_top_bound: 0.25,
            vert_bottom_bound: 0.75,
            depth_enable_ratio: 0.4,
            depth_behind_bound: 0.4,
            depth_front_bound: 0.8,
            det_confidence_min: Some(0.8),
            rng_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError(format!("{name}={v} outside [0, 1]")))
            }
        };
        unit("horiz_left_bound", self.horiz_left_bound)?;
        unit("horiz_right_bound", self.horiz_right_bound)?;
        unit("vert_top_bound", self.vert_top_bound)?;
        unit("vert_bottom_bound", self.vert_bottom_bound)?;
        unit("depth_enable_ratio", self.depth_enable_ratio)?;
        unit("depth_behind_bound", self.depth_behind_bound)?;
        unit("depth_front_bound", self.depth_front_bound)?;
        if let Some(c) = self.det_confidence_min {
            unit("det_confidence_min", c)?;
        }
        if self.horiz_left_bound >= self.horiz_right_bound {
            return Err(ConfigError(format!(
                "horiz_left_bound={} must be < horiz_right_bound={}",
                self.horiz_left_bound, self.horiz_right_bound
            )));
        }
        if self.depth_behind_bound >= self.depth_front_bound {
            return Err(ConfigError(format!(
                "depth_behind_bound={} must be < depth_front_bound={}",
                self.depth_behind_bound, self.depth_front_bound
            )));
        }
        if !(self.area_threshold_k > 0.0 && self.area_threshold_k < 1.0) {
            return Err(ConfigError(format!(
                "area_threshold_k={} outside (0, 1)",
                self.area_threshold_k
            )));
        }
        if self.caption_top_k == 0 || self.attribute_top_k == 0 {
            return Err(ConfigError("top-k values must be at least 1".into()));
        }
        Ok(())
    }

    /// Hash of the full configuration, recorded in output manifests so
    /// downstream consumers can detect configuration drift.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();

        let json = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn default_values_are_pinned() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.area_threshold_k, 0.05);
        assert_eq!(cfg.caption_top_k, 5);
        assert_eq!(cfg.attribute_top_k, 3);
        assert_eq!(cfg.horiz_left_bound, 0.25);
        assert_eq!(cfg.horiz_right_bound, 0.75);
        assert_eq!(cfg.vert_top_bound, 0.25);
        assert_eq!(cfg.vert_bottom_bound, 0.75);
        assert_eq!(cfg.depth_enable_ratio, 0.4);
        assert_eq!(cfg.depth_behind_bound, 0.4);
        assert_eq!(cfg.depth_front_bound, 0.8);
        assert_eq!(cfg.det_confidence_min, Some(0.8));
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.horiz_left_bound = 0.8;
        assert!(cfg.validate().is_err());

        let mut cfg = PipelineConfig::default();
        cfg.area_threshold_k = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = PipelineConfig::default();
        cfg.depth_front_bound = 0.3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        b.rng_seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
