//! Run configuration: one flat key = value namespace covering the
//! generator, model and training sections, with two built-in dimension
//! profiles. Files use `key = value` lines with '#' comments; unknown
//! keys are rejected; later assignments win, so CLI flags appended after
//! file pairs override the file.

use crate::data::format::{apply_gen_key, gen_config_to_kv};
use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::model::{AuxKind, ModelConfig, Variant};
use crate::nn::ActivationKind;
use crate::optim::AdamConfig;
use crate::tensor::Conv3dImpl;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: "desk".into(),
            seed: 42,
            gen: GenConfig::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn apply_profile(&mut self, profile: &str) -> Result<()> {
        match profile {
            "desk" => {
                self.model = ModelConfig::desk();
                self.gen.clip_dims = self.model.clip_dims;
            }
            "paper" => {
                self.model = ModelConfig::paper();
                self.gen.clip_dims = self.model.clip_dims;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown profile {other:?} (desk|paper)"
                )))
            }
        }
        self.profile = profile.to_string();
        Ok(())
    }

    /// Applies one key = value pair. Keys span the generator, model and
    /// training sections; `profile` must come first in a pair list since
    /// it resets the model section.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_u = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad integer {v:?} for {key}")))
        };
        let parse_f = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad number {v:?} for {key}")))
        };
        let parse_b = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" | "on" => Ok(true),
                "false" | "0" | "off" => Ok(false),
                _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
            }
        };
        let parse_list = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad list entry {x:?} for {key}")))
                })
                .collect()
        };
        match key {
            "profile" => self.apply_profile(value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed {value:?}")))?;
                self.train.seed = self.seed;
            }
            // model section
            "fusion_dim" => self.model.fusion_dim = parse_u(value)?,
            "gat_dim" => self.model.gat_dim = parse_u(value)?,
            "gat_layers" => self.model.gat_layers = parse_u(value)?,
            "gat_heads" => self.model.gat_heads = parse_u(value)?,
            "attn_slope" => self.model.attn_slope = parse_f(value)?,
            "leaky_slope" => self.model.leaky_slope = parse_f(value)?,
            "activation" => self.model.activation = ActivationKind::parse(value)?,
            "velocity_features" => self.model.velocity_features = parse_b(value)?,
            "r3d_stem_width" => self.model.r3d_stem_width = parse_u(value)?,
            "r3d_stage_widths" => self.model.r3d_stage_widths = parse_list(value)?,
            "r3d_stage_blocks" => self.model.r3d_stage_blocks = parse_list(value)?,
            "fusion_mode" => self.model.fusion_mode = FusionMode::parse(value)?,
            "variant" => self.model.variant = Variant::parse(value)?,
            "aux" => {
                self.model.aux = match value {
                    "none" => None,
                    other => Some(AuxKind::parse(other)?),
                }
            }
            "dropout" => self.model.dropout = parse_f(value)?,
            "bn_momentum" => self.model.bn_momentum = parse_f(value)?,
            "bn_eps" => self.model.bn_eps = parse_f(value)?,
            "conv_impl" => {
                self.model.conv_impl = match value {
                    "direct" => Conv3dImpl::Direct,
                    "im2col" => Conv3dImpl::Im2col,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown conv_impl {other:?} (direct|im2col)"
                        )))
                    }
                }
            }
            // clip geometry is shared between the generator and the model
            "clip_channels" => {
                self.model.clip_dims[0] = parse_u(value)?;
                self.gen.clip_dims[0] = self.model.clip_dims[0];
            }
            "clip_t" => {
                self.model.clip_dims[1] = parse_u(value)?;
                self.gen.clip_dims[1] = self.model.clip_dims[1];
            }
            "clip_h" => {
                self.model.clip_dims[2] = parse_u(value)?;
                self.gen.clip_dims[2] = self.model.clip_dims[2];
            }
            "clip_w" => {
                self.model.clip_dims[3] = parse_u(value)?;
                self.gen.clip_dims[3] = self.model.clip_dims[3];
            }
            // training section
            "epochs" => self.train.epochs = parse_u(value)?,
            "batch_size" => self.train.batch_size = parse_u(value)?,
            "lr" => self.train.adam.lr = parse_f(value)?,
            "weight_decay" => self.train.adam.weight_decay = parse_f(value)?,
            "beta1" => self.train.adam.beta1 = parse_f(value)?,
            "beta2" => self.train.adam.beta2 = parse_f(value)?,
            "adam_eps" => self.train.adam.eps = parse_f(value)?,
            "val_fraction" => self.train.val_fraction = parse_f(value)?,
            // generator section
            _ => {
                let mut seed = self.seed;
                apply_gen_key(&mut self.gen, &mut seed, key, value).map_err(|_| {
                    Error::Config(format!("unknown config key {key:?}"))
                })?;
                self.seed = seed;
                self.train.seed = seed;
            }
        }
        Ok(())
    }

    /// Parses key = value text; '#' starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: missing '='", ln + 1))
            })?;
            self.apply_key(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.gen.validate()?;
        Ok(cfg)
    }

    /// Full snapshot; parsing it back reproduces the config.
    pub fn to_kv(&self) -> String {
        let mut s = String::from("# run configuration snapshot\n");
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("profile", self.profile.clone());
        kv("seed", self.seed.to_string());
        kv("fusion_dim", self.model.fusion_dim.to_string());
        kv("gat_dim", self.model.gat_dim.to_string());
        kv("gat_layers", self.model.gat_layers.to_string());
        kv("gat_heads", self.model.gat_heads.to_string());
        kv("attn_slope", self.model.attn_slope.to_string());
        kv("leaky_slope", self.model.leaky_slope.to_string());
        kv("activation", self.model.activation.name().to_string());
        kv("velocity_features", self.model.velocity_features.to_string());
        kv("r3d_stem_width", self.model.r3d_stem_width.to_string());
        kv(
            "r3d_stage_widths",
            self.model
                .r3d_stage_widths
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(
            "r3d_stage_blocks",
            self.model
                .r3d_stage_blocks
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("fusion_mode", self.model.fusion_mode.name().to_string());
        kv("variant", self.model.variant.name().to_string());
        kv(
            "aux",
            self.model.aux.map(|a| a.name().to_string()).unwrap_or_else(|| "none".into()),
        );
        kv("dropout", self.model.dropout.to_string());
        kv("bn_momentum", self.model.bn_momentum.to_string());
        kv("bn_eps", self.model.bn_eps.to_string());
        kv(
            "conv_impl",
            match self.model.conv_impl {
                Conv3dImpl::Direct => "direct".into(),
                Conv3dImpl::Im2col => "im2col".into(),
            },
        );
        kv("epochs", self.train.epochs.to_string());
        kv("batch_size", self.train.batch_size.to_string());
        kv("lr", self.train.adam.lr.to_string());
        kv("weight_decay", self.train.adam.weight_decay.to_string());
        kv("beta1", self.train.adam.beta1.to_string());
        kv("beta2", self.train.adam.beta2.to_string());
        kv("adam_eps", self.train.adam.eps.to_string());
        kv("val_fraction", self.train.val_fraction.to_string());
        // generator keys (includes clip geometry)
        s.push_str(&gen_config_to_kv(&self.gen, self.seed));
        s
    }

    /// Rebuilds training hyperparameters as an AdamConfig.
    pub fn adam(&self) -> AdamConfig {
        self.train.adam
    }
}


#[cfg(test)]
mod profile_tests {
    use super::*;

    /// The faithful-dimension profile is expressible and validates even
    /// though it is not the default.
    #[test]
    fn paper_profile_validates() {
        let cfg = crate::model::ModelConfig::paper();
        cfg.validate().unwrap();
        assert_eq!(cfg.fusion_dim, 512);
        assert_eq!(cfg.r3d_stage_widths, vec![64, 128, 256, 512]);
        let mut rc = RunConfig::default();
        rc.apply_profile("paper").unwrap();
        let text = rc.to_kv();
        assert_eq!(RunConfig::parse(&text).unwrap(), rc);
    }
}
