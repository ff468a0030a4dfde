//! Run configuration: every tunable in one serialisable tree with a stable hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::DenoiserConfig;
use crate::distill::Stage2Config;
use crate::metrics::EvalConfig;
use crate::nn::sha256_hex;
use crate::potentials::PotentialWeights;
use crate::synth::WorldConfig;
use crate::tokenizer::Stage1Config;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Agent / map feature width `d`; per-agent context is `3d`.
    pub d: usize,
    /// Mode-embedding width in the tokenizer.
    pub d_e: usize,
    /// Token-embedding width for FiLM.
    pub d_tau: usize,
    /// Per-mode feature width fed to the selector.
    pub d_m: usize,
    pub hidden: usize,
    pub heads: usize,
    pub k_intent: usize,
    pub m_modes: usize,
    pub k_scene: usize,
    pub top_r: usize,
    pub beam_width: usize,
    pub w_beam: f64,
    /// Registered scene assembler: `beam`, `exhaustive` or `random`.
    pub assembler: String,
    pub t_p: usize,
    pub t_f: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_e: 32,
            d_tau: 32,
            d_m: 16,
            hidden: 64,
            heads: 4,
            k_intent: 6,
            m_modes: 6,
            k_scene: 6,
            top_r: 6,
            beam_width: 64,
            w_beam: 1.0,
            assembler: "beam".into(),
            t_p: 10,
            t_f: 10,
        }
    }
}

impl ModelConfig {
    pub fn d_h(&self) -> usize {
        3 * self.d
    }

    fn check(&self, errs: &mut Vec<String>) {
        let positive = [
            ("model.d", self.d),
            ("model.d_e", self.d_e),
            ("model.d_tau", self.d_tau),
            ("model.d_m", self.d_m),
            ("model.hidden", self.hidden),
            ("model.heads", self.heads),
            ("model.k_intent", self.k_intent),
            ("model.m_modes", self.m_modes),
            ("model.k_scene", self.k_scene),
            ("model.t_p", self.t_p),
            ("model.t_f", self.t_f),
        ];
        for (name, v) in positive {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.heads > 0 && self.d % self.heads != 0 {
            errs.push(format!("model.d ({}) must be divisible by model.heads ({})", self.d, self.heads));
        }
        if self.top_r == 0 || self.top_r > self.m_modes {
            errs.push(format!("model.top_r must be in 1..={}", self.m_modes));
        }
        if self.beam_width < self.k_scene {
            errs.push("model.beam_width must be at least model.k_scene".into());
        }
        if !(self.w_beam >= 0.0 && self.w_beam.is_finite()) {
            errs.push("model.w_beam must be finite and nonnegative".into());
        }
        if !crate::predictor::AssemblerRegistry::default().contains(&self.assembler) {
            errs.push(format!("model.assembler {:?} is not registered", self.assembler));
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub potentials: PotentialWeights,
    pub stage1: Stage1Config,
    pub denoiser: DenoiserConfig,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses TOML or JSON by file extension (`.json` is JSON, anything else TOML).
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        self.model.check(&mut errs);
        if let Err(e) = self.potentials.validate() {
            errs.push(format!("potentials: {e}"));
        }
        errs.extend(self.world.check());
        errs.extend(self.stage1.check());
        errs.extend(self.denoiser.check());
        errs.extend(self.stage2.check());
        errs.extend(self.eval.check());
        if self.world.t_p != self.model.t_p || self.world.t_f != self.model.t_f {
            errs.push("world and model horizons must agree".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    /// Canonical JSON: object keys sorted at every level.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}

/// Independent RNG stream for one pipeline stage.
pub fn stage_rng(seed: u64, stage: Stage) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64 + 1);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Stage1,
    Denoiser,
    Stage2,
}
