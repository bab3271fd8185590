//! Run configuration: a line-based `key = value` file with `[section]`
//! headers. Serialization is canonical, so parse(serialize(c)) == c and a
//! config echo embedded in a checkpoint rebuilds the run exactly.

use crate::dataio::synth::{ShapeFamily, ShapeRule, SynthSpec};
use crate::diffmath::adamw::AdamWConfig;
use crate::diffmath::LrSchedule;
use crate::engine::ema::EmaConfig;
use crate::engine::losses::{Measure, ObjectiveConfig, PredMode};
use crate::engine::mask::{MaskPlan, MaskPolicy};
use crate::engine::train::TrainSetup;
use crate::error::{HpmError, Result};
use crate::model::{DecoderConfig, EncoderConfig, ModelConfig};
use crate::patchkit::{PatchGeometry, TargetMode};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Pack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [run]
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub output_dir: String,
    pub checkpoint_every: usize,
    // [data]
    pub source: DataSource,
    pub data_path: String,
    pub image_size: usize,
    pub channels: usize,
    pub classes: usize,
    pub frames: usize,
    pub count: usize,
    pub holdout: usize,
    pub shape: ShapeRule,
    pub fg_texture_amp: f64,
    pub bg_noise_amp: f64,
    // [geometry]
    pub patch: usize,
    pub temporal_patch: usize,
    // [model]
    pub encoder_depth: usize,
    pub encoder_width: usize,
    pub encoder_heads: usize,
    pub mlp_ratio: usize,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    // [mask]
    pub gamma: f64,
    pub alpha0: f64,
    pub alpha_t: f64,
    pub policy: MaskPolicy,
    pub per_frame: bool,
    // [objective]
    pub pred_mode: PredMode,
    pub target: TargetKind,
    pub pred_weight: f64,
    // [ema]
    pub momentum: f64,
    // [lr]
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub floor_lr: f64,
    // [optim]
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    RawPixels,
    NormalizedPixels,
    EmaFeatures,
}

impl TargetKind {
    fn as_str(&self) -> &'static str {
        match self {
            TargetKind::RawPixels => "raw_pixels",
            TargetKind::NormalizedPixels => "normalized_pixels",
            TargetKind::EmaFeatures => "ema_features",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "raw_pixels" => Ok(TargetKind::RawPixels),
            "normalized_pixels" => Ok(TargetKind::NormalizedPixels),
            "ema_features" => Ok(TargetKind::EmaFeatures),
            other => Err(HpmError::Config(format!("unknown target '{other}'"))),
        }
    }
}

fn shape_str(rule: ShapeRule) -> &'static str {
    match rule {
        ShapeRule::ByClass => "by_class",
        ShapeRule::Fixed(ShapeFamily::Disc) => "disc",
        ShapeRule::Fixed(ShapeFamily::Box) => "box",
        ShapeRule::Fixed(ShapeFamily::Bar) => "bar",
    }
}

fn shape_parse(s: &str) -> Result<ShapeRule> {
    match s {
        "by_class" => Ok(ShapeRule::ByClass),
        "disc" => Ok(ShapeRule::Fixed(ShapeFamily::Disc)),
        "box" => Ok(ShapeRule::Fixed(ShapeFamily::Box)),
        "bar" => Ok(ShapeRule::Fixed(ShapeFamily::Bar)),
        other => Err(HpmError::Config(format!("unknown shape '{other}'"))),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 10,
            batch_size: 16,
            output_dir: "out".into(),
            checkpoint_every: 1,
            source: DataSource::Synth,
            data_path: String::new(),
            image_size: 32,
            channels: 3,
            classes: 4,
            frames: 1,
            count: 256,
            holdout: 64,
            shape: ShapeRule::ByClass,
            fg_texture_amp: 0.38,
            bg_noise_amp: 0.03,
            patch: 8,
            temporal_patch: 1,
            encoder_depth: 4,
            encoder_width: 64,
            encoder_heads: 4,
            mlp_ratio: 4,
            decoder_depth: 2,
            decoder_width: 64,
            decoder_heads: 4,
            gamma: 0.75,
            alpha0: 0.0,
            alpha_t: 0.5,
            policy: MaskPolicy::Argmax,
            per_frame: false,
            pred_mode: PredMode::RelativeBce,
            target: TargetKind::NormalizedPixels,
            pred_weight: 1.0,
            momentum: 0.9,
            base_lr: 0.032,
            warmup_epochs: 2.0,
            floor_lr: 0.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl RunConfig {
    /// The desk-scale reference run: 32 x 32 x 3 images, P = 8 (N = 16),
    /// gamma 0.75, alpha 0 -> 0.5, relative BCE on raw pixels, 20 epochs
    /// over 512 images, seed 7.
    pub fn reference() -> Self {
        RunConfig {
            seed: 7,
            epochs: 20,
            count: 512,
            holdout: 64,
            target: TargetKind::RawPixels,
            ..Default::default()
        }
    }

    /// Tiny everything: a 2-frame 16 x 16 clip with 8-pixel patches gives
    /// N = 8 tokens and a 2-block encoder. The gradient-check and
    /// smoke-test scale.
    pub fn toy() -> Self {
        RunConfig {
            epochs: 4,
            batch_size: 2,
            image_size: 16,
            channels: 1,
            classes: 2,
            frames: 2,
            count: 8,
            holdout: 4,
            patch: 8,
            temporal_patch: 1,
            encoder_depth: 2,
            encoder_width: 12,
            encoder_heads: 2,
            mlp_ratio: 2,
            decoder_depth: 1,
            decoder_width: 12,
            decoder_heads: 2,
            gamma: 0.5,
            base_lr: 0.1,
            warmup_epochs: 1.0,
            ..Default::default()
        }
    }

    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry {
            frames: self.frames,
            height: self.image_size,
            width: self.image_size,
            channels: self.channels,
            spatial_patch: self.patch,
            temporal_patch: self.temporal_patch,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            image_size: self.image_size,
            channels: self.channels,
            classes: self.classes,
            frames: self.frames,
            shape: self.shape,
            fg_texture_amp: self.fg_texture_amp,
            bg_noise_amp: self.bg_noise_amp,
            seed: self.seed,
        }
    }

    pub fn target_mode(&self) -> TargetMode {
        match self.target {
            TargetKind::RawPixels => TargetMode::RawPixels,
            TargetKind::NormalizedPixels => {
                TargetMode::NormalizedPixels { eps: TargetMode::DEFAULT_EPS }
            }
            TargetKind::EmaFeatures => TargetMode::EmaFeatures { eps: TargetMode::DEFAULT_EPS },
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        let measure = match self.target {
            TargetKind::EmaFeatures => Measure::EmaFeatureMse,
            _ => Measure::PixelMse,
        };
        ObjectiveConfig { pred_mode: self.pred_mode, measure, pred_weight: self.pred_weight }
    }

    pub fn model_config(&self) -> ModelConfig {
        let g = self.geometry();
        let target_dim = match self.target {
            TargetKind::EmaFeatures => self.encoder_width,
            _ => g.token_len(),
        };
        ModelConfig {
            encoder: EncoderConfig {
                depth: self.encoder_depth,
                width: self.encoder_width,
                heads: self.encoder_heads,
                mlp_ratio: self.mlp_ratio,
                token_dim: g.token_len(),
            },
            reconstructor: DecoderConfig {
                depth: self.decoder_depth,
                width: self.decoder_width,
                heads: self.decoder_heads,
                output_dim: target_dim,
            },
            loss_predictor: DecoderConfig {
                depth: self.decoder_depth,
                width: self.decoder_width,
                heads: self.decoder_heads,
                output_dim: 1,
            },
        }
    }

    pub fn mask_plan(&self) -> MaskPlan {
        MaskPlan {
            gamma: self.gamma,
            alpha0: self.alpha0,
            alpha_t: self.alpha_t,
            total_epochs: self.epochs,
            policy: self.policy,
            per_frame: self.per_frame,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            batch_size: self.batch_size,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs as f64,
            floor_lr: self.floor_lr,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn train_setup(&self) -> Result<TrainSetup> {
        let setup = TrainSetup {
            geometry: self.geometry(),
            plan: self.mask_plan(),
            objective: self.objective(),
            target_mode: self.target_mode(),
            ema: EmaConfig::new(self.momentum)?,
            schedule: self.schedule(),
        };
        setup.validate()?;
        Ok(setup)
    }

    /// FNV-1a hash of the canonical text, reported alongside eval metrics.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.serialize().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn serialize(&self) -> String {
        format!(
            "[run]\n\
             seed = {}\n\
             epochs = {}\n\
             batch_size = {}\n\
             output_dir = {}\n\
             checkpoint_every = {}\n\
             \n[data]\n\
             source = {}\n\
             path = {}\n\
             image_size = {}\n\
             channels = {}\n\
             classes = {}\n\
             frames = {}\n\
             count = {}\n\
             holdout = {}\n\
             shape = {}\n\
             fg_texture_amp = {}\n\
             bg_noise_amp = {}\n\
             \n[geometry]\n\
             patch = {}\n\
             temporal_patch = {}\n\
             \n[model]\n\
             encoder_depth = {}\n\
             encoder_width = {}\n\
             encoder_heads = {}\n\
             mlp_ratio = {}\n\
             decoder_depth = {}\n\
             decoder_width = {}\n\
             decoder_heads = {}\n\
             \n[mask]\n\
             gamma = {}\n\
             alpha0 = {}\n\
             alphaT = {}\n\
             policy = {}\n\
             per_frame = {}\n\
             \n[objective]\n\
             pred_mode = {}\n\
             target = {}\n\
             pred_weight = {}\n\
             \n[ema]\n\
             momentum = {}\n\
             \n[lr]\n\
             base_lr = {}\n\
             warmup_epochs = {}\n\
             floor_lr = {}\n\
             \n[optim]\n\
             beta1 = {}\n\
             beta2 = {}\n\
             eps = {}\n\
             weight_decay = {}\n",
            self.seed,
            self.epochs,
            self.batch_size,
            self.output_dir,
            self.checkpoint_every,
            match self.source {
                DataSource::Synth => "synth",
                DataSource::Pack => "pack",
            },
            self.data_path,
            self.image_size,
            self.channels,
            self.classes,
            self.frames,
            self.count,
            self.holdout,
            shape_str(self.shape),
            self.fg_texture_amp,
            self.bg_noise_amp,
            self.patch,
            self.temporal_patch,
            self.encoder_depth,
            self.encoder_width,
            self.encoder_heads,
            self.mlp_ratio,
            self.decoder_depth,
            self.decoder_width,
            self.decoder_heads,
            self.gamma,
            self.alpha0,
            self.alpha_t,
            self.policy.as_str(),
            self.per_frame,
            self.pred_mode.as_str(),
            self.target.as_str(),
            self.pred_weight,
            self.momentum,
            self.base_lr,
            self.warmup_epochs,
            self.floor_lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut section = String::new();
        let mut entries: BTreeMap<(String, String), (String, usize)> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| HpmError::ConfigParse {
                    line: lineno,
                    msg: "unterminated section header".into(),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| HpmError::ConfigParse {
                line: lineno,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            if section.is_empty() {
                return Err(HpmError::ConfigParse {
                    line: lineno,
                    msg: "key before any [section] header".into(),
                });
            }
            let prev = entries.insert(
                (section.clone(), key.trim().to_string()),
                (value.trim().to_string(), lineno),
            );
            if prev.is_some() {
                return Err(HpmError::ConfigParse {
                    line: lineno,
                    msg: format!("duplicate key '{}'", key.trim()),
                });
            }
        }

        let mut cfg = RunConfig::default();
        let mut used: Vec<(String, String)> = Vec::new();
        {
            let mut get = |section: &str, key: &str| -> Option<(String, usize)> {
                used.push((section.to_string(), key.to_string()));
                entries.get(&(section.to_string(), key.to_string())).cloned()
            };
            macro_rules! set {
                ($field:expr, $sec:literal, $key:literal, $conv:expr) => {
                    if let Some((value, line)) = get($sec, $key) {
                        #[allow(clippy::redundant_closure_call)]
                        {
                            $field = $conv(&value).map_err(|e: HpmError| {
                                HpmError::ConfigParse { line, msg: e.to_string() }
                            })?;
                        }
                    }
                };
            }
            let as_u64 = |v: &str| {
                v.parse::<u64>().map_err(|_| HpmError::Config(format!("bad integer '{v}'")))
            };
            let as_usize = |v: &str| {
                v.parse::<usize>().map_err(|_| HpmError::Config(format!("bad integer '{v}'")))
            };
            let as_f64 = |v: &str| {
                v.parse::<f64>().map_err(|_| HpmError::Config(format!("bad number '{v}'")))
            };
            let as_bool = |v: &str| match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(HpmError::Config(format!("bad bool '{v}'"))),
            };
            let as_string = |v: &str| -> Result<String> { Ok(v.to_string()) };

            set!(cfg.seed, "run", "seed", as_u64);
            set!(cfg.epochs, "run", "epochs", as_usize);
            set!(cfg.batch_size, "run", "batch_size", as_usize);
            set!(cfg.output_dir, "run", "output_dir", as_string);
            set!(cfg.checkpoint_every, "run", "checkpoint_every", as_usize);
            set!(cfg.source, "data", "source", |v: &str| match v {
                "synth" => Ok(DataSource::Synth),
                "pack" => Ok(DataSource::Pack),
                other => Err(HpmError::Config(format!("unknown source '{other}'"))),
            });
            set!(cfg.data_path, "data", "path", as_string);
            set!(cfg.image_size, "data", "image_size", as_usize);
            set!(cfg.channels, "data", "channels", as_usize);
            set!(cfg.classes, "data", "classes", as_usize);
            set!(cfg.frames, "data", "frames", as_usize);
            set!(cfg.count, "data", "count", as_usize);
            set!(cfg.holdout, "data", "holdout", as_usize);
            set!(cfg.shape, "data", "shape", shape_parse);
            set!(cfg.fg_texture_amp, "data", "fg_texture_amp", as_f64);
            set!(cfg.bg_noise_amp, "data", "bg_noise_amp", as_f64);
            set!(cfg.patch, "geometry", "patch", as_usize);
            set!(cfg.temporal_patch, "geometry", "temporal_patch", as_usize);
            set!(cfg.encoder_depth, "model", "encoder_depth", as_usize);
            set!(cfg.encoder_width, "model", "encoder_width", as_usize);
            set!(cfg.encoder_heads, "model", "encoder_heads", as_usize);
            set!(cfg.mlp_ratio, "model", "mlp_ratio", as_usize);
            set!(cfg.decoder_depth, "model", "decoder_depth", as_usize);
            set!(cfg.decoder_width, "model", "decoder_width", as_usize);
            set!(cfg.decoder_heads, "model", "decoder_heads", as_usize);
            set!(cfg.gamma, "mask", "gamma", as_f64);
            set!(cfg.alpha0, "mask", "alpha0", as_f64);
            set!(cfg.alpha_t, "mask", "alphaT", as_f64);
            set!(cfg.policy, "mask", "policy", MaskPolicy::parse);
            set!(cfg.per_frame, "mask", "per_frame", as_bool);
            set!(cfg.pred_mode, "objective", "pred_mode", PredMode::parse);
            set!(cfg.target, "objective", "target", TargetKind::parse);
            set!(cfg.pred_weight, "objective", "pred_weight", as_f64);
            set!(cfg.momentum, "ema", "momentum", as_f64);
            set!(cfg.base_lr, "lr", "base_lr", as_f64);
            set!(cfg.warmup_epochs, "lr", "warmup_epochs", as_f64);
            set!(cfg.floor_lr, "lr", "floor_lr", as_f64);
            set!(cfg.beta1, "optim", "beta1", as_f64);
            set!(cfg.beta2, "optim", "beta2", as_f64);
            set!(cfg.eps, "optim", "eps", as_f64);
            set!(cfg.weight_decay, "optim", "weight_decay", as_f64);
        }

        for ((section, key), (_, line)) in &entries {
            if !used.iter().any(|(s, k)| s == section && k == key) {
                return Err(HpmError::ConfigParse {
                    line: *line,
                    msg: format!("unknown key '{key}' in section [{section}]"),
                });
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialize_parse_round_trip_is_lossless() {
        for cfg in [RunConfig::default(), RunConfig::reference(), RunConfig::toy()] {
            let text = cfg.serialize();
            let back = RunConfig::parse(&text).unwrap();
            assert_eq!(cfg, back);
            assert_eq!(cfg.hash(), back.hash());
        }
    }

    #[test]
    fn parse_reports_line_numbers() {
        let text = "[run]\nseed = 7\nbatch_size = maybe\n";
        match RunConfig::parse(text) {
            Err(HpmError::ConfigParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let text = "[run]\nseed = 7\n[mask]\ntypo_key = 1\n";
        match RunConfig::parse(text) {
            Err(HpmError::ConfigParse { line, msg }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("typo_key"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut text = String::from("# reference run\n\n");
        text.push_str(&RunConfig::reference().serialize());
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, RunConfig::reference());
    }

    #[test]
    fn reference_config_matches_pinned_values() {
        let c = RunConfig::reference();
        assert_eq!(c.seed, 7);
        assert_eq!(c.epochs, 20);
        assert_eq!(c.count, 512);
        assert_eq!(c.image_size, 32);
        assert_eq!(c.patch, 8);
        assert_eq!(c.geometry().num_patches(), 16);
        assert_eq!(c.gamma, 0.75);
        assert_eq!(c.alpha0, 0.0);
        assert_eq!(c.alpha_t, 0.5);
        assert_eq!(c.pred_mode, PredMode::RelativeBce);
        assert!(c.train_setup().is_ok());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
