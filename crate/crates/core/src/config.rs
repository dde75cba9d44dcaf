//! Flat, versioned training configuration.
//!
//! Every field has a default, so `{}` is a complete config. Unknown keys are
//! rejected when parsing and [`TrainConfig::validate`] checks ranges.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentPolicy, MultiCropConfig};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossWeights};
use crate::model::Architecture;
use crate::vit::ViTConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub data: String,
    pub out_dir: String,
    pub seed: u64,

    pub epochs: u64,
    pub batch_size: usize,
    pub base_lr: f32,
    pub final_lr: f32,
    pub warmup_start_lr: f32,
    pub warmup_epochs: u64,
    pub weight_decay: f32,
    pub patch_embed_lr_scale: f32,
    pub clip_norm: f32,
    pub ema_start: f32,
    pub ema_end: f32,

    pub tau_g_start: f32,
    pub tau_g_end: f32,
    pub tau_g_warmup_epochs: u64,
    pub tau_instance: f32,
    pub tau_local_group: f32,
    pub tau_student_group: f32,
    pub center_momentum: f32,
    pub lambda_instance: f32,
    pub lambda_local_group: f32,
    pub lambda_group: f32,
    pub normalize_prototypes: bool,

    pub global_crops: usize,
    pub local_crops: usize,
    pub global_scale_min: f32,
    pub global_scale_max: f32,
    pub local_scale_min: f32,
    pub local_scale_max: f32,

    pub buffer_capacity: usize,
    pub num_prototypes: usize,
    pub k: usize,

    pub image_size_global: usize,
    pub image_size_local: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub drop_path_rate: f32,
    pub head_hidden_dim: usize,
    pub head_out_dim: usize,
    pub predictor_hidden_dim: usize,
    pub aggregator_heads: usize,

    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            version: CONFIG_VERSION,
            data: "data/train".into(),
            out_dir: "runs/default".into(),
            seed: 0,
            epochs: 50,
            batch_size: 32,
            base_lr: 2.5e-5,
            final_lr: 1e-6,
            warmup_start_lr: 1e-6,
            warmup_epochs: 2,
            weight_decay: 0.1,
            patch_embed_lr_scale: 0.2,
            clip_norm: 3.0,
            ema_start: 0.996,
            ema_end: 1.0,
            tau_g_start: 0.04,
            tau_g_end: 0.07,
            tau_g_warmup_epochs: 10,
            tau_instance: 0.2,
            tau_local_group: 0.2,
            tau_student_group: 0.1,
            center_momentum: 0.9,
            lambda_instance: 1.0 / 3.0,
            lambda_local_group: 1.0 / 3.0,
            lambda_group: 1.0 / 3.0,
            normalize_prototypes: false,
            global_crops: 2,
            local_crops: 10,
            global_scale_min: 0.25,
            global_scale_max: 1.0,
            local_scale_min: 0.05,
            local_scale_max: 0.25,
            buffer_capacity: 4096,
            num_prototypes: 1024,
            k: 8,
            image_size_global: 32,
            image_size_local: 16,
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            drop_path_rate: 0.1,
            head_hidden_dim: 256,
            head_out_dim: 64,
            predictor_hidden_dim: 256,
            aggregator_heads: 4,
            checkpoint_every: 10,
        }
    }
}

fn range_err(name: &str, value: impl std::fmt::Display, rule: &str) -> Error {
    Error::Config(format!("`{name}` = {value} is out of range: {rule}"))
}

impl TrainConfig {
    /// A tiny network (d = 8, depth 1, m = 4, k = 2) on 8-px globals and
    /// 4-px locals, for tests and audits.
    pub fn micro() -> Self {
        TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 2,
            image_size_global: 8,
            image_size_local: 4,
            patch_size: 2,
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
            drop_path_rate: 0.0,
            head_hidden_dim: 16,
            head_out_dim: 8,
            predictor_hidden_dim: 16,
            aggregator_heads: 2,
            k: 2,
            num_prototypes: 4,
            buffer_capacity: 6,
            local_crops: 2,
            ..TrainConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(range_err("version", self.version, &format!("only version {CONFIG_VERSION} is supported")));
        }
        if self.epochs == 0 {
            return Err(range_err("epochs", self.epochs, "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(range_err("batch_size", self.batch_size, "must be >= 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(range_err("warmup_epochs", self.warmup_epochs, "must be < epochs"));
        }
        if !(self.final_lr >= 0.0 && self.base_lr >= self.final_lr && self.base_lr.is_finite()) {
            return Err(range_err("base_lr", self.base_lr, "need base_lr >= final_lr >= 0"));
        }
        if !(self.warmup_start_lr >= 0.0) {
            return Err(range_err("warmup_start_lr", self.warmup_start_lr, "must be >= 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(range_err("weight_decay", self.weight_decay, "must be >= 0"));
        }
        if !(self.patch_embed_lr_scale >= 0.0) {
            return Err(range_err("patch_embed_lr_scale", self.patch_embed_lr_scale, "must be >= 0"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(range_err("clip_norm", self.clip_norm, "must be > 0"));
        }
        for (name, v) in [("ema_start", self.ema_start), ("ema_end", self.ema_end), ("center_momentum", self.center_momentum)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(range_err(name, v, "must lie in [0, 1]"));
            }
        }
        for (name, v) in [
            ("tau_g_start", self.tau_g_start),
            ("tau_g_end", self.tau_g_end),
            ("tau_instance", self.tau_instance),
            ("tau_local_group", self.tau_local_group),
            ("tau_student_group", self.tau_student_group),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(range_err(name, v, "must be > 0"));
            }
        }
        if self.global_crops != 2 {
            return Err(range_err("global_crops", self.global_crops, "exactly 2 global crops are supported"));
        }
        for (name, lo, hi) in [
            ("global_scale", self.global_scale_min, self.global_scale_max),
            ("local_scale", self.local_scale_min, self.local_scale_max),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(range_err(&format!("{name}_min/{name}_max"), format!("[{lo}, {hi}]"), "need 0 < min <= max <= 1"));
            }
        }
        if self.k == 0 || self.buffer_capacity < self.k {
            return Err(range_err("buffer_capacity", self.buffer_capacity, "must be >= k >= 1"));
        }
        if self.num_prototypes == 0 {
            return Err(range_err("num_prototypes", self.num_prototypes, "must be >= 1"));
        }
        for (name, v) in [("head_hidden_dim", self.head_hidden_dim), ("head_out_dim", self.head_out_dim), ("predictor_hidden_dim", self.predictor_hidden_dim)] {
            if v == 0 {
                return Err(range_err(name, v, "must be >= 1"));
            }
        }
        self.weights().validate()?;
        self.architecture().validate()?;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { instance: self.lambda_instance, local_group: self.lambda_local_group, group: self.lambda_group }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            vit: ViTConfig {
                image_size_global: self.image_size_global,
                image_size_local: self.image_size_local,
                patch_size: self.patch_size,
                embed_dim: self.embed_dim,
                depth: self.depth,
                num_heads: self.num_heads,
                mlp_ratio: self.mlp_ratio,
                drop_path_rate: self.drop_path_rate,
            },
            head_hidden_dim: self.head_hidden_dim,
            head_out_dim: self.head_out_dim,
            predictor_hidden_dim: self.predictor_hidden_dim,
            aggregator_heads: self.aggregator_heads,
            k: self.k,
            num_prototypes: self.num_prototypes,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau_instance: self.tau_instance,
            tau_local_group: self.tau_local_group,
            tau_student_group: self.tau_student_group,
            center_momentum: self.center_momentum,
            weights: self.weights(),
            k: self.k,
            normalize_prototypes: self.normalize_prototypes,
        }
    }

    pub fn multicrop(&self) -> MultiCropConfig {
        MultiCropConfig {
            global_size: self.image_size_global,
            local_size: self.image_size_local,
            num_locals: self.local_crops,
            global_scale: (self.global_scale_min, self.global_scale_max),
            local_scale: (self.local_scale_min, self.local_scale_max),
            teacher_policy: AugmentPolicy::weak(),
            student_policy: AugmentPolicy::strong(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(TrainConfig::from_json("{}").unwrap(), TrainConfig::default());
        let round = TrainConfig::from_json(&TrainConfig::default().to_json()).unwrap();
        assert_eq!(round, TrainConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_json(r#"{"epochz": 3}"#).unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
    }

    #[test]
    fn range_errors_name_the_field() {
        for (json, field) in [
            (r#"{"epochs": 2, "warmup_epochs": 2}"#, "warmup_epochs"),
            (r#"{"global_crops": 3}"#, "global_crops"),
            (r#"{"lambda_group": -1}"#, "group"),
            (r#"{"embed_dim": 30}"#, "embed_dim"),
            (r#"{"ema_start": 1.5}"#, "ema_start"),
        ] {
            let err = TrainConfig::from_json(json).unwrap_err().to_string();
            assert!(err.contains(field), "{json}: {err}");
        }
    }
}
