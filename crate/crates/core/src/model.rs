//! The full model bundle: one parameter store holding tokenizer, predictor and
//! denoiser, plus inference and dataset evaluation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::denoiser::{DenoiseError, Denoiser, RefineInput};
use crate::geom::{Futures, JointScene, Scene, V2};
use crate::metrics::{EvalRecord, EvalToken, MetricsTable};
use crate::nn::{Checkpoint, CheckpointError, ParamId, ParamStore, Tensor};
use crate::predictor::{PredictError, PredictOptions, Prediction, Predictor};
use crate::synth::Episode;
use crate::tokenizer::{winner_index, TokenBank, Tokenizer};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

/// Which component a checkpoint covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Tokenizer,
    Predictor,
    Denoiser,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Tokenizer, Component::Predictor, Component::Denoiser];

    pub fn prefix(self) -> &'static str {
        match self {
            Component::Tokenizer => crate::tokenizer::PREFIX,
            Component::Predictor => crate::predictor::PREFIX,
            Component::Denoiser => crate::denoiser::PREFIX,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Component::Tokenizer => "tokenizer.ckpt",
            Component::Predictor => "predictor.ckpt",
            Component::Denoiser => "denoiser.ckpt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub assembler: String,
    pub use_selector: bool,
    pub refine: bool,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub tok: Tokenizer,
    pub pred: Predictor,
    pub den: Denoiser,
}

impl Model {
    /// Fresh initialisation; deterministic in `cfg.seed`.
    pub fn new(cfg: &RunConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let tok = Tokenizer::new(&mut store, &cfg.model, &mut rng);
        let pred = Predictor::new(&mut store, &cfg.model, &mut rng);
        let den = Denoiser::new(&mut store, &cfg.model, &cfg.denoiser, &mut rng);
        Self {
            cfg: cfg.clone(),
            store,
            tok,
            pred,
            den,
        }
    }

    pub fn ids(&self, c: Component) -> Vec<ParamId> {
        self.store.ids_with_prefix(c.prefix()).collect()
    }

    pub fn checkpoint(&self, c: Component) -> Checkpoint {
        Checkpoint::capture(&self.store, &self.ids(c), &self.cfg.hash())
    }

    pub fn save(&self, c: Component, dir: &Path) -> Result<String, ModelError> {
        let ck = self.checkpoint(c);
        ck.save(&dir.join(c.file_name()))?;
        Ok(ck.sha256())
    }

    /// Loads a component checkpoint from `dir` if present; returns whether it was.
    pub fn load_if_present(&mut self, c: Component, dir: &Path) -> Result<bool, ModelError> {
        let path = dir.join(c.file_name());
        if !path.exists() {
            return Ok(false);
        }
        Checkpoint::load(&path)?.apply(&mut self.store)?;
        Ok(true)
    }

    /// Inference settings implied by the run configuration.
    pub fn inference_options(&self) -> InferenceOptions {
        let s2 = &self.cfg.stage2;
        InferenceOptions {
            assembler: if s2.use_selector { self.cfg.model.assembler.clone() } else { "random".into() },
            use_selector: s2.use_selector,
            refine: self.cfg.eval.refine && s2.use_sgd,
            seed: self.cfg.seed,
        }
    }

    pub fn intents(&self, scene: &Scene) -> TokenBank {
        self.tok.propose(&self.store, scene)
    }

    pub fn context(&self, scene: &Scene) -> Tensor {
        self.den.context(&self.store, scene)
    }

    /// Refines one joint future under the full guidance weights.
    pub fn refine(&self, scene: &Scene, context: &Tensor, token: V2, y: &Futures) -> Result<Futures, DenoiseError> {
        let input = RefineInput { scene, context, token };
        let (y, _) = self.den.refine(
            &self.store,
            &input,
            y,
            &self.cfg.denoiser.schedule(),
            &self.cfg.potentials,
            self.cfg.denoiser.max_halvings,
        )?;
        Ok(y)
    }

    pub fn predict(&self, scene: &Scene, token: V2, opts: &InferenceOptions) -> Result<Prediction, ModelError> {
        let popts = PredictOptions {
            assembler: opts.assembler.clone(),
            use_selector: opts.use_selector,
            seed: opts.seed,
        };
        let mut p = self.pred.predict(&self.store, scene, token, &popts)?;
        if opts.refine {
            let ctx = self.context(scene);
            for s in &mut p.scenes {
                s.futures = self.refine(scene, &ctx, token, &s.futures)?;
            }
        }
        Ok(p)
    }

    pub fn eval_token(&self, ep: &Episode) -> V2 {
        match self.cfg.eval.token {
            EvalToken::Gt => ep.gt_endpoint,
            EvalToken::Winner => {
                let bank = self.intents(&ep.scene);
                bank.endpoints()[winner_index(&bank.endpoints(), ep.gt_endpoint)]
            }
            EvalToken::Top1 => self.intents(&ep.scene).tokens[0].endpoint,
        }
    }

    pub fn evaluate_episode(&self, ep: &Episode, opts: &InferenceOptions) -> Result<EvalRecord, ModelError> {
        let p = self.predict(&ep.scene, self.eval_token(ep), opts)?;
        Ok(record_of(&ep.scene, &p.scenes, &ep.gt_futures, self.cfg.eval.miss_threshold))
    }

    pub fn evaluate(&self, episodes: &[Episode], opts: &InferenceOptions) -> Result<(MetricsTable, Vec<EvalRecord>), ModelError> {
        let mut records = Vec::with_capacity(episodes.len());
        for (i, ep) in episodes.iter().enumerate() {
            let o = InferenceOptions {
                seed: opts.seed.wrapping_add(i as u64),
                ..opts.clone()
            };
            records.push(self.evaluate_episode(ep, &o)?);
        }
        Ok((MetricsTable::aggregate(&records, self.cfg.eval.zero_positive), records))
    }
}

pub fn record_of(scene: &Scene, scenes: &[JointScene], gt: &Futures, threshold: f64) -> EvalRecord {
    let cands: Vec<Futures> = scenes.iter().map(|s| s.futures.clone()).collect();
    let probs: Vec<f64> = scenes.iter().map(|s| s.score).collect();
    EvalRecord::new(scene, &cands, &probs, gt, threshold)
}

/// Every agent keeps its last observed velocity.
pub fn constant_velocity(scene: &Scene, t_f: usize) -> Futures {
    let dt = scene.dt;
    scene
        .agents
        .iter()
        .map(|a| {
            let s = a.last();
            (1..=t_f).map(|t| s.position + s.velocity * (dt * t as f64)).collect()
        })
        .collect()
}

/// Single-candidate constant-velocity joint baseline.
pub fn constant_velocity_table(episodes: &[Episode], cfg: &RunConfig) -> MetricsTable {
    let records: Vec<EvalRecord> = episodes
        .iter()
        .map(|ep| {
            let f = constant_velocity(&ep.scene, cfg.model.t_f);
            EvalRecord::new(&ep.scene, &[f], &[1.0], &ep.gt_futures, cfg.eval.miss_threshold)
        })
        .collect();
    MetricsTable::aggregate(&records, cfg.eval.zero_positive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_episode, EpisodeSpec};

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.d = 16;
        c.model.hidden = 32;
        c.denoiser.hidden = 32;
        c
    }

    #[test]
    fn init_is_deterministic_and_disjoint() {
        let a = Model::new(&small());
        let b = Model::new(&small());
        assert_eq!(a.store, b.store);
        let n: usize = Component::ALL.iter().map(|&c| a.ids(c).len()).sum();
        assert_eq!(n, a.store.len());
    }

    #[test]
    fn checkpoint_roundtrip_through_dir() {
        let a = Model::new(&small());
        let dir = tempfile::tempdir().unwrap();
        a.save(Component::Predictor, dir.path()).unwrap();
        let mut cfg = small();
        cfg.seed = 99;
        let mut b = Model::new(&cfg);
        assert!(b.load_if_present(Component::Predictor, dir.path()).unwrap());
        assert!(!b.load_if_present(Component::Denoiser, dir.path()).unwrap());
        assert_eq!(b.checkpoint(Component::Predictor).tensors, a.checkpoint(Component::Predictor).tensors);
        assert_ne!(b.checkpoint(Component::Tokenizer).tensors, a.checkpoint(Component::Tokenizer).tensors);
    }

    #[test]
    fn constant_velocity_extrapolates() {
        let cfg = small();
        let ep = generate_episode(&cfg.world, 3, &EpisodeSpec::default()).unwrap();
        let f = constant_velocity(&ep.scene, 4);
        let s = ep.scene.agents[0].last();
        assert_eq!(f[0].len(), 4);
        assert!((f[0][3] - (s.position + s.velocity * (4.0 * ep.scene.dt))).norm() < 1e-12);
    }

    #[test]
    fn evaluate_counts_every_episode() {
        let cfg = small();
        let m = Model::new(&cfg);
        let eps: Vec<Episode> = (0..3).map(|i| generate_episode(&cfg.world, i, &EpisodeSpec::default()).unwrap()).collect();
        let mut o = m.inference_options();
        o.refine = false;
        let (t, recs) = m.evaluate(&eps, &o).unwrap();
        assert_eq!(t.n, 3);
        assert_eq!(recs.len(), 3);
        assert!(t.min_fde <= t.f_fde + 1e-12);
    }
}
