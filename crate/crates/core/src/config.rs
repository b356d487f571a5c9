//! Run configuration: one TOML document with the canonical blocks
//! `data.*`, `encoder.*`, `net.*`, `router.*`, `moe.*`, `stage.*` and
//! `ablation.*`. Unknown keys are rejected; omitted blocks fall back to the
//! desk-scale defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::EncoderSpec;
use crate::error::{Error, Result};
use crate::moe::MoeConfig;
use crate::net::{ModulatorKind, NetConfig};
use crate::router::RouterConfig;
use crate::synth::DataConfig;
use crate::train::StageConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// `false` disables the router's high-resolution sliding path.
    pub high_res: bool,
    /// Modulator arm: `dam`, `adaln` or `none`.
    pub modulator: ModulatorKind,
    /// `false` skips the expert bank (stage 2 becomes a no-op arm).
    pub experts: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { high_res: true, modulator: ModulatorKind::Dam, experts: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StagesConfig {
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
}

impl Default for StagesConfig {
    fn default() -> Self {
        StagesConfig {
            pretrain: StageConfig::default(),
            finetune: StageConfig::finetune_default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderSpec,
    pub net: NetConfig,
    pub router: RouterConfig,
    pub moe: MoeConfig,
    pub stage: StagesConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply the ablation switches to the dependent blocks.
    pub fn resolve(&mut self) {
        self.net.modulator = self.ablation.modulator;
        self.net.c_clip = self.encoder.embed_dim;
        self.moe.n = self.data.n();
    }

    pub fn validate(&self) -> Result<()> {
        self.data.kind_names()?;
        self.net.validate()?;
        self.moe.validate()?;
        self.stage.pretrain.validate()?;
        self.stage.finetune.validate()?;
        if self.router.k != self.moe.k {
            return Err(Error::Config(format!(
                "router.k ({}) and moe.k ({}) must agree",
                self.router.k, self.moe.k
            )));
        }
        Ok(())
    }

    /// Canonical JSON echo embedded in artifacts.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let mut cfg = RunConfig::default();
        cfg.resolve();
        cfg.validate().unwrap();
        assert_eq!(cfg.moe.n, 6);
        assert_eq!(cfg.net.c_clip, 128);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(
            &p,
            "[data]\nkinds = [\"haze\", \"gaussian-noise\"]\nper_kind = 10\nheight = 64\nwidth = 64\nsplit = [0.8, 0.1, 0.1]\n\n[moe]\nk = 1\n\n[router]\nk = 1\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.moe.n, 2); // resolved from data
        assert_eq!(cfg.stage.pretrain.lr_init, 1e-3);
        assert_eq!(cfg.stage.finetune.lr_init, 1e-4);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[net]\nbase_widht = 16\n").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::load(&dir.path().join("missing.toml")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn mismatched_k_rejected() {
        let mut cfg = RunConfig::default();
        cfg.resolve();
        cfg.router.k = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ablation_switches_propagate() {
        let mut cfg = RunConfig::default();
        cfg.ablation.modulator = ModulatorKind::Adaln;
        cfg.resolve();
        assert_eq!(cfg.net.modulator, ModulatorKind::Adaln);
    }
}
