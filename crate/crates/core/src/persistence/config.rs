//! Run configuration: a flat `key = value` text format with dotted
//! namespaces. Empty files yield the full defaults; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::FusionKind;
use crate::error::{Error, Result};
use crate::features::{ArchConfig, BackboneKind};
use crate::losses::{LossConfig, TemporalMode};
use crate::training::{AblationFlags, FeMode, TrainConfig};

/// Everything a run needs; snapshotted into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Distillation weight (`loss.alpha`).
    pub alpha: f64,
    pub ablation: AblationFlags,
    pub fusion: FusionKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::resnet50(),
            train: TrainConfig::default(),
            alpha: 0.7,
            ablation: AblationFlags::default(),
            fusion: FusionKind::Mutual,
        }
    }
}

impl RunConfig {
    /// Loss configuration implied by the flags; `temporal_mode` follows the
    /// encoder flag (encoded when present, else plain when TD is on).
    pub fn loss_config(&self) -> LossConfig {
        let temporal_mode = if self.ablation.fe != FeMode::Off {
            TemporalMode::Encoded
        } else if self.ablation.td {
            TemporalMode::Plain
        } else {
            TemporalMode::None
        };
        LossConfig {
            alpha: self.alpha,
            temporal_mode,
            spatial_distill: self.ablation.sd,
            temporal_distill: self.ablation.td,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "loss.alpha must be in [0,1], got {}",
                self.alpha
            )));
        }
        self.train.validate()?;
        self.ablation.validate()?;
        for (name, v) in [
            ("arch.low_channels", self.arch.low_channels),
            ("arch.high_channels", self.arch.high_channels),
            ("arch.phi_channels", self.arch.phi_channels),
            ("arch.aspp_channels", self.arch.aspp_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in self.arch.std.iter().enumerate() {
            if *v <= 0.0 {
                return Err(Error::Config(format!("arch.std[{name}] must be positive")));
            }
        }
        Ok(())
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: `{v}` is not a number")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: `{v}` is not an integer")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: `{v}` is not an integer")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: `{v}` is not a boolean"))),
    }
}

fn parse_triple(key: &str, v: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("{key}: expected three comma-separated values")));
    }
    let mut out = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = parse_f64(key, p)?;
    }
    Ok(out)
}

fn apply_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "arch.backbone" => cfg.arch.backbone = BackboneKind::parse(value)?,
        "arch.low_channels" => cfg.arch.low_channels = parse_usize(key, value)?,
        "arch.high_channels" => cfg.arch.high_channels = parse_usize(key, value)?,
        "arch.phi_channels" => cfg.arch.phi_channels = parse_usize(key, value)?,
        "arch.aspp_channels" => cfg.arch.aspp_channels = parse_usize(key, value)?,
        "arch.mean" => cfg.arch.mean = parse_triple(key, value)?,
        "arch.std" => cfg.arch.std = parse_triple(key, value)?,
        "arch.pretrained_backbone" => {
            cfg.arch.pretrained_backbone = Some(PathBuf::from(value));
        }
        "train.stage1.base_lr" => cfg.train.stage1.base_lr = parse_f64(key, value)?,
        "train.stage1.momentum" => cfg.train.stage1.momentum = parse_f64(key, value)?,
        "train.stage1.max_iter" => cfg.train.stage1.max_iter = parse_u64(key, value)?,
        "train.stage2.base_lr" => cfg.train.stage2.base_lr = parse_f64(key, value)?,
        "train.stage2.momentum" => cfg.train.stage2.momentum = parse_f64(key, value)?,
        "train.stage2.max_iter" => cfg.train.stage2.max_iter = parse_u64(key, value)?,
        "train.weight_decay" => cfg.train.weight_decay = parse_f64(key, value)?,
        "train.batch_size" => cfg.train.batch_size = parse_usize(key, value)?,
        "train.crop" => cfg.train.crop = parse_usize(key, value)?,
        "train.rotation_deg" => cfg.train.rotation_deg = parse_f64(key, value)?,
        "train.hflip" => cfg.train.hflip = parse_bool(key, value)?,
        "train.t0_max" => cfg.train.t0_max = parse_u64(key, value)? as i64,
        "train.seed" => cfg.train.seed = parse_u64(key, value)?,
        "train.checkpoint_interval" => cfg.train.checkpoint_interval = parse_u64(key, value)?,
        "train.grad_clip" => cfg.train.grad_clip = parse_f64(key, value)?,
        "loss.alpha" => cfg.alpha = parse_f64(key, value)?,
        "ablation.sd" => cfg.ablation.sd = parse_bool(key, value)?,
        "ablation.td" => cfg.ablation.td = parse_bool(key, value)?,
        "ablation.fe" => cfg.ablation.fe = FeMode::parse(value)?,
        "fusion" => cfg.fusion = FusionKind::parse(value)?,
        other => {
            return Err(Error::Config(format!("unknown config key `{other}`")));
        }
    }
    Ok(())
}

/// Parses a config document, applying defaults for absent keys.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        apply_key(&mut cfg, key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Renders a config back to the flat text form (all keys explicit).
pub fn render_config(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    kv("arch.backbone", cfg.arch.backbone.as_str().into());
    kv("arch.low_channels", cfg.arch.low_channels.to_string());
    kv("arch.high_channels", cfg.arch.high_channels.to_string());
    kv("arch.phi_channels", cfg.arch.phi_channels.to_string());
    kv("arch.aspp_channels", cfg.arch.aspp_channels.to_string());
    kv("arch.mean", format!("{},{},{}", cfg.arch.mean[0], cfg.arch.mean[1], cfg.arch.mean[2]));
    kv("arch.std", format!("{},{},{}", cfg.arch.std[0], cfg.arch.std[1], cfg.arch.std[2]));
    if let Some(p) = &cfg.arch.pretrained_backbone {
        kv("arch.pretrained_backbone", p.display().to_string());
    }
    kv("train.stage1.base_lr", cfg.train.stage1.base_lr.to_string());
    kv("train.stage1.momentum", cfg.train.stage1.momentum.to_string());
    kv("train.stage1.max_iter", cfg.train.stage1.max_iter.to_string());
    kv("train.stage2.base_lr", cfg.train.stage2.base_lr.to_string());
    kv("train.stage2.momentum", cfg.train.stage2.momentum.to_string());
    kv("train.stage2.max_iter", cfg.train.stage2.max_iter.to_string());
    kv("train.weight_decay", cfg.train.weight_decay.to_string());
    kv("train.batch_size", cfg.train.batch_size.to_string());
    kv("train.crop", cfg.train.crop.to_string());
    kv("train.rotation_deg", cfg.train.rotation_deg.to_string());
    kv("train.hflip", cfg.train.hflip.to_string());
    kv("train.t0_max", cfg.train.t0_max.to_string());
    kv("train.seed", cfg.train.seed.to_string());
    kv("train.checkpoint_interval", cfg.train.checkpoint_interval.to_string());
    kv("train.grad_clip", cfg.train.grad_clip.to_string());
    kv("loss.alpha", cfg.alpha.to_string());
    kv("ablation.sd", cfg.ablation.sd.to_string());
    kv("ablation.td", cfg.ablation.td.to_string());
    kv("ablation.fe", cfg.ablation.fe.as_str().into());
    kv("fusion", cfg.fusion.as_str().into());
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.alpha, 0.7);
        assert_eq!(cfg.train.crop, 473);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.stage1.base_lr, 1e-3);
        assert_eq!(cfg.train.stage2.base_lr, 1e-4);
        assert_eq!(cfg.train.stage1.momentum, 0.9);
        assert_eq!(cfg.train.stage2.momentum, 0.95);
        assert_eq!(cfg.train.weight_decay, 5e-4);
        assert_eq!(cfg.train.stage1.max_iter, 40000);
        assert_eq!(cfg.arch.backbone, BackboneKind::Resnet50);
    }

    #[test]
    fn alpha_out_of_range_rejected() {
        let err = parse_config("loss.alpha = 1.5").unwrap_err();
        assert!(err.to_string().contains("alpha"));
    }

    #[test]
    fn unknown_key_named_in_error() {
        let err = parse_config("training.lr = 3").unwrap_err();
        assert!(err.to_string().contains("training.lr"));
    }

    #[test]
    fn round_trip_preserves_semantics() {
        let text = "arch.backbone = tiny\ntrain.crop = 64\nloss.alpha = 0.3\nablation.fe = train_and_test\nfusion = concat\n";
        let cfg = parse_config(text).unwrap();
        let rendered = render_config(&cfg);
        let cfg2 = parse_config(&rendered).unwrap();
        assert_eq!(cfg, cfg2);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = parse_config("# a comment\n\ntrain.batch_size = 2\n").unwrap();
        assert_eq!(cfg.train.batch_size, 2);
    }
}
