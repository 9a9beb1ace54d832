//! Model, schedule, and training configuration with two built-in presets.
//!
//! `desk` is the small profile everything trains and tests under; `full`
//! carries the full-scale constants and is only constructed and shape-checked.
//! Configs round-trip through TOML so runs can pin exact settings on disk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Number of transformer blocks.
    pub depth: usize,
    /// Token embedding width C.
    pub dim: usize,
    /// Attention heads; must divide `dim`.
    pub heads: usize,
    /// Patch side in pixels.
    pub patch_size_px: usize,
    /// Template crop side in pixels.
    pub template_size_px: usize,
    /// Search crop side in pixels.
    pub search_size_px: usize,
    /// 1-indexed encoder layers that run relevance pruning, ascending.
    pub relevance_layers: Vec<usize>,
    /// Per-stage kept-token ratios, same length as `relevance_layers`.
    pub keep_ratios: Vec<f64>,
    /// FFN hidden width as a multiple of `dim`.
    pub mlp_ratio: usize,
    /// Hidden widths of the token-ranking MLP.
    pub rank_hidden: [usize; 2],
    /// Renormalize masked attention rows instead of leaving them sub-unit.
    pub renormalize_masked: bool,
}

impl EncoderConfig {
    /// Tokens per template crop.
    pub fn n_z(&self) -> usize {
        let g = self.template_size_px / self.patch_size_px;
        g * g
    }

    /// Tokens per search crop.
    pub fn n_x(&self) -> usize {
        let g = self.search_size_px / self.patch_size_px;
        g * g
    }

    /// Search grid side G.
    pub fn grid(&self) -> usize {
        self.search_size_px / self.patch_size_px
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dim == 0 || self.heads == 0 {
            return Err(Error::Config("depth, dim, heads must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.template_size_px % self.patch_size_px != 0
            || self.search_size_px % self.patch_size_px != 0
        {
            return Err(Error::Config(format!(
                "crop sizes {}/{} not divisible by patch size {}",
                self.template_size_px, self.search_size_px, self.patch_size_px
            )));
        }
        if self.relevance_layers.len() != self.keep_ratios.len() {
            return Err(Error::Config(format!(
                "{} relevance layers but {} keep ratios",
                self.relevance_layers.len(),
                self.keep_ratios.len()
            )));
        }
        let mut prev = 0;
        for &l in &self.relevance_layers {
            if l == 0 || l > self.depth {
                return Err(Error::Config(format!(
                    "relevance layer {l} outside 1..={}",
                    self.depth
                )));
            }
            if l <= prev {
                return Err(Error::Config(
                    "relevance layers must be strictly ascending".into(),
                ));
            }
            prev = l;
        }
        for &q in &self.keep_ratios {
            if !(0.0 < q && q <= 1.0) {
                return Err(Error::Config(format!("keep ratio {q} outside (0, 1]")));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    /// Total memory capacity as a multiple of template token count N_z
    /// (anchor block included).
    pub capacity_factor: usize,
}

impl MemoryConfig {
    pub fn n_max(&self, n_z: usize) -> usize {
        self.capacity_factor * n_z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Update interval in frames while t is small.
    pub base_interval_frames: usize,
    /// The interval doubles each time t crosses a multiple of this.
    pub doubling_period_frames: usize,
    /// Doubling stops once t exceeds this frame index.
    pub doubling_until_frame: usize,
    /// Interval in frames after doubling stops.
    pub terminal_interval_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    /// Search crop covers this multiple of the target box area.
    pub search_area_factor: f64,
    /// Template crop covers this multiple of the target box area.
    pub template_area_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_score: f64,
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub lambda_ratio: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate for ranking MLPs and the prediction head.
    pub lr_rank_and_head: f64,
    /// Learning rate for everything else.
    pub lr_backbone: f64,
    pub weight_decay: f64,
    /// Gumbel temperature at step 0, decayed linearly to `tau_end`.
    pub tau_start: f64,
    pub tau_end: f64,
    pub steps: usize,
    /// Templates standing in for memory in stage-1 training.
    pub templates_stage1: usize,
    /// Templates in stage-2 training.
    pub templates_stage2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub encoder: EncoderConfig,
    pub memory: MemoryConfig,
    pub schedule: ScheduleConfig,
    pub crop: CropConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            name: "desk".into(),
            encoder: EncoderConfig {
                depth: 6,
                dim: 64,
                heads: 4,
                patch_size_px: 8,
                template_size_px: 32,
                search_size_px: 64,
                relevance_layers: vec![2, 4, 5],
                keep_ratios: vec![0.9, 0.8, 0.7],
                mlp_ratio: 4,
                rank_hidden: [384, 192],
                renormalize_masked: false,
            },
            memory: MemoryConfig { capacity_factor: 3 },
            schedule: ScheduleConfig {
                base_interval_frames: 5,
                doubling_period_frames: 100,
                doubling_until_frame: 500,
                terminal_interval_frames: 160,
            },
            crop: CropConfig {
                search_area_factor: 4.0,
                template_area_factor: 2.0,
            },
            loss: LossConfig {
                lambda_score: 1.0,
                lambda_iou: 2.0,
                lambda_l1: 5.0,
                lambda_ratio: 1.0,
                focal_alpha: 2.0,
                focal_beta: 4.0,
            },
            train: TrainConfig {
                lr_rank_and_head: 4e-4,
                lr_backbone: 4e-5,
                weight_decay: 1e-4,
                tau_start: 1.0,
                tau_end: 0.1,
                steps: 200,
                templates_stage1: 3,
                templates_stage2: 7,
            },
        }
    }

    pub fn full() -> Self {
        let mut cfg = Self::desk();
        cfg.name = "full".into();
        cfg.encoder.depth = 12;
        cfg.encoder.dim = 768;
        cfg.encoder.heads = 12;
        cfg.encoder.patch_size_px = 16;
        cfg.encoder.template_size_px = 128;
        cfg.encoder.search_size_px = 256;
        cfg.encoder.relevance_layers = vec![4, 7, 10];
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected desk or full)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.memory.capacity_factor < 1 {
            return Err(Error::Config("capacity_factor must be at least 1".into()));
        }
        if self.schedule.base_interval_frames == 0
            || self.schedule.terminal_interval_frames < self.schedule.base_interval_frames
        {
            return Err(Error::Config(
                "schedule intervals must be positive and non-decreasing".into(),
            ));
        }
        if self.crop.search_area_factor < 1.0 || self.crop.template_area_factor < 1.0 {
            return Err(Error::Config("crop area factors must be at least 1".into()));
        }
        for (name, v) in [
            ("lambda_score", self.loss.lambda_score),
            ("lambda_iou", self.loss.lambda_iou),
            ("lambda_l1", self.loss.lambda_l1),
            ("lambda_ratio", self.loss.lambda_ratio),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        if self.train.tau_start <= 0.0 || self.train.tau_end <= 0.0 {
            return Err(Error::Config("gumbel temperatures must be positive".into()));
        }
        if self.train.templates_stage1 == 0 || self.train.templates_stage2 == 0 {
            return Err(Error::Config("template counts must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }
}
