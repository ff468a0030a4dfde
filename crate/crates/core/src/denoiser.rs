//! Score network ε_ψ and the deterministic project-then-guide refinement.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::encoder::{SceneEncoder, POS_SCALE};
use crate::geom::{Futures, Scene, V2};
use crate::nn::{AdamW, Graph, Grads, Mlp, NnError, ParamId, ParamStore, Tensor, Var};
use crate::potentials::{PotentialContext, PotentialRegistry, PotentialWeights};
use crate::predictor::{futures_tensor, tensor_futures};
use crate::synth::Episode;
use crate::tokenizer::shuffle;

pub const PREFIX: &str = "den.";
const SIGMA_FREQS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
const TOKEN_DIM: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum DenoiseError {
    #[error("refinement produced a non-finite value at step {step} ({stage})")]
    NonFinite { step: usize, stage: &'static str },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub t_steps: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub eta: f64,
    pub max_halvings: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            t_steps: 5,
            sigma_max: 1.0,
            sigma_min: 0.1,
            eta: 0.05,
            max_halvings: 3,
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 20,
            batch_size: 16,
            grad_clip: 10.0,
        }
    }
}

impl DenoiserConfig {
    pub fn check(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.hidden == 0 || self.t_steps == 0 || self.batch_size == 0 {
            e.push("denoiser.hidden, t_steps and batch_size must be positive".into());
        }
        if !(self.sigma_max > self.sigma_min && self.sigma_min > 0.0) {
            e.push("denoiser sigmas must satisfy sigma_max > sigma_min > 0".into());
        }
        if !(self.eta >= 0.0) || !(self.lr > 0.0) {
            e.push("denoiser.eta must be >= 0 and lr > 0".into());
        }
        e
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::linear(self.sigma_max, self.sigma_min, self.t_steps, self.eta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigmas: Vec<f64>,
    pub etas: Vec<f64>,
}

impl NoiseSchedule {
    /// σ linearly spaced from `hi` to `lo`; constant η.
    pub fn linear(hi: f64, lo: f64, steps: usize, eta: f64) -> Self {
        let sigmas = if steps == 1 {
            vec![hi]
        } else {
            (0..steps).map(|s| hi + (lo - hi) * s as f64 / (steps - 1) as f64).collect()
        };
        Self {
            sigmas,
            etas: vec![eta; steps],
        }
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.sigmas.len() == self.etas.len()
            && self.sigmas.iter().all(|s| s.is_finite() && *s > 0.0)
            && self.sigmas.windows(2).all(|w| w[1] < w[0])
            && self.etas.iter().all(|e| e.is_finite() && *e >= 0.0)
    }
}

/// `[sin(f·σ), cos(f·σ)]` over fixed frequencies.
pub fn sigma_embedding(sigma: f64) -> Vec<f64> {
    SIGMA_FREQS.iter().flat_map(|f| [(f * sigma).sin(), (f * sigma).cos()]).collect()
}

/// Per-agent noise predictor conditioned on `h_i`, the token and σ.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub encoder: SceneEncoder,
    token_mlp: Mlp,
    net: Mlp,
    t_f: usize,
}

/// Everything refinement needs that stays fixed across steps.
#[derive(Clone, Debug)]
pub struct RefineInput<'a> {
    pub scene: &'a Scene,
    /// N × 3d frozen per-agent context.
    pub context: &'a Tensor,
    pub token: V2,
}

/// Outcome of one guided step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub c_projected: f64,
    pub c_after: f64,
    pub eta_used: f64,
    pub skipped: bool,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, dcfg: &DenoiserConfig, rng: &mut impl Rng) -> Self {
        let in_dim = 4 * cfg.t_f + cfg.d_h() + TOKEN_DIM + 2 * SIGMA_FREQS.len();
        Self {
            encoder: SceneEncoder::new(store, "den.enc", cfg, rng),
            token_mlp: Mlp::new(store, "den.token", &[2, TOKEN_DIM, TOKEN_DIM], rng),
            net: Mlp::new(store, "den.net", &[in_dim, dcfg.hidden, dcfg.hidden, 2 * cfg.t_f], rng),
            t_f: cfg.t_f,
        }
    }

    pub fn param_ids(store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix(PREFIX).collect()
    }

    /// Frozen per-agent context for refinement.
    pub fn context(&self, store: &ParamStore, scene: &Scene) -> Tensor {
        let mut g = Graph::new(store);
        let e = self.encoder.encode(&mut g, scene);
        g.value(e.per_agent).clone()
    }

    /// `ε_ψ(Y, σ; h, ĝ)` as an N × 2T_f var (meters). Inputs are scaled
    /// offsets from the last observed position plus raw second differences,
    /// which are near zero on smooth paths.
    pub fn eps(&self, g: &mut Graph, context: Var, scene: &Scene, y: &Tensor, sigma: f64, token: V2) -> Var {
        let n = y.rows;
        let tf = self.t_f;
        let ego_last = scene.ego().last().position;
        let mut feats = Tensor::zeros(n, 4 * tf);
        for (i, agent) in scene.agents.iter().enumerate() {
            let h = &agent.history;
            let last = h[h.len() - 1].position;
            let prev = if h.len() > 1 { h[h.len() - 2].position } else { last };
            let p = |t: isize| -> V2 {
                match t {
                    -1 => prev,
                    0 => last,
                    _ => V2::new(y.get(i, 2 * (t as usize - 1)), y.get(i, 2 * (t as usize - 1) + 1)),
                }
            };
            for t in 0..tf {
                let cur = p(t as isize + 1);
                let rel = (cur - last) * (1.0 / POS_SCALE);
                let acc = cur - p(t as isize) * 2.0 + p(t as isize - 1);
                feats.set(i, 2 * t, rel.x);
                feats.set(i, 2 * t + 1, rel.y);
                feats.set(i, 2 * tf + 2 * t, acc.x);
                feats.set(i, 2 * tf + 2 * t + 1, acc.y);
            }
        }
        let yv = g.constant(feats);
        let trel = (token - ego_last) * (1.0 / POS_SCALE);
        let tin = g.constant(Tensor::row_vector(vec![trel.x, trel.y]));
        let temb = self.token_mlp.forward(g, tin);
        let temb = g.repeat_rows(temb, n);
        let semb = g.constant(Tensor::row_vector(sigma_embedding(sigma)));
        let semb = g.repeat_rows(semb, n);
        let x = g.concat_cols(&[yv, context, temb, semb]);
        self.net.forward(g, x)
    }

    pub fn eps_value(&self, store: &ParamStore, input: &RefineInput<'_>, y: &Tensor, sigma: f64) -> Tensor {
        let mut g = Graph::new(store);
        let c = g.constant(input.context.clone());
        let e = self.eps(&mut g, c, input.scene, y, sigma, input.token);
        g.value(e).clone()
    }

    /// Denoising loss `mean ‖ε_ψ(Y₀+ξ, σ) − ξ‖²` with σ drawn from the schedule.
    pub fn pretrain_loss(
        &self,
        g: &mut Graph,
        scene: &Scene,
        clean: &Futures,
        token: V2,
        schedule: &NoiseSchedule,
        rng: &mut impl Rng,
    ) -> Var {
        let sigma = schedule.sigmas[rng.random_range(0..schedule.len())];
        let y0 = futures_tensor(clean);
        let xi = Tensor::from_vec(
            y0.rows,
            y0.cols,
            (0..y0.len()).map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>(),
        );
        self.noise_loss(g, scene, &y0, &xi, sigma, token)
    }

    pub fn noise_loss(&self, g: &mut Graph, scene: &Scene, y0: &Tensor, xi: &Tensor, sigma: f64, token: V2) -> Var {
        let mut noisy = y0.clone();
        noisy.add_assign(xi);
        let emb = self.encoder.encode(g, scene);
        let e = self.eps(g, emb.per_agent, scene, &noisy, sigma, token);
        let target = g.constant(xi.clone());
        let d = g.sub(e, target);
        let d2 = g.square(d);
        g.mean(d2)
    }

    /// One projection `Y − ε_ψ(Y, σ)` followed by one potential-gradient step
    /// with backtracking; the step is skipped if every trial raises C.
    #[allow(clippy::too_many_arguments)]
    pub fn guided_step(
        &self,
        store: &ParamStore,
        input: &RefineInput<'_>,
        y: &Futures,
        sigma: f64,
        eta: f64,
        weights: &PotentialWeights,
        potentials: &PotentialRegistry,
        max_halvings: usize,
    ) -> (Futures, StepReport) {
        let yt = futures_tensor(y);
        let e = self.eps_value(store, input, &yt, sigma);
        let mut half = yt;
        for (v, d) in half.data.iter_mut().zip(&e.data) {
            *v -= d;
        }
        let half = tensor_futures(&half);
        guide(&half, input, eta, weights, potentials, max_halvings)
    }

    /// `t_steps` guided steps over the schedule. Deterministic.
    pub fn refine(
        &self,
        store: &ParamStore,
        input: &RefineInput<'_>,
        y_raw: &Futures,
        schedule: &NoiseSchedule,
        weights: &PotentialWeights,
        max_halvings: usize,
    ) -> Result<(Futures, Vec<StepReport>), DenoiseError> {
        let potentials = PotentialRegistry::default();
        let mut y = y_raw.clone();
        let mut reports = Vec::with_capacity(schedule.len());
        for (s, (&sigma, &eta)) in schedule.sigmas.iter().zip(&schedule.etas).enumerate() {
            let (next, rep) = self.guided_step(store, input, &y, sigma, eta, weights, &potentials, max_halvings);
            if next.iter().flatten().any(|p| !p.is_finite()) {
                return Err(DenoiseError::NonFinite { step: s, stage: "projection" });
            }
            if !rep.c_after.is_finite() {
                return Err(DenoiseError::NonFinite { step: s, stage: "guidance" });
            }
            y = next;
            reports.push(rep);
        }
        Ok((y, reports))
    }
}

/// Gradient step on C from `y` with up to `max_halvings` halvings of η.
pub fn guide(
    y: &Futures,
    input: &RefineInput<'_>,
    eta: f64,
    weights: &PotentialWeights,
    potentials: &PotentialRegistry,
    max_halvings: usize,
) -> (Futures, StepReport) {
    let ctx = PotentialContext {
        scene: input.scene,
        token: input.token,
        weights,
    };
    let rep = potentials.composite(&ctx, y);
    let c0 = rep.total;
    let zero_grad = rep.gradient.iter().flatten().all(|g| g.x == 0.0 && g.y == 0.0);
    if eta == 0.0 || zero_grad {
        return (
            y.clone(),
            StepReport {
                c_projected: c0,
                c_after: c0,
                eta_used: 0.0,
                skipped: false,
            },
        );
    }
    let mut step = eta;
    for _ in 0..=max_halvings {
        let cand: Futures = y
            .iter()
            .zip(&rep.gradient)
            .map(|(a, ga)| a.iter().zip(ga).map(|(&p, &g)| p - g * step).collect())
            .collect();
        let c1 = potentials.total(&ctx, &cand);
        if c1 <= c0 {
            return (
                cand,
                StepReport {
                    c_projected: c0,
                    c_after: c1,
                    eta_used: step,
                    skipped: false,
                },
            );
        }
        step *= 0.5;
    }
    (
        y.clone(),
        StepReport {
            c_projected: c0,
            c_after: c0,
            eta_used: 0.0,
            skipped: true,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Loss of the all-zero predictor on the same validation noise.
    pub val_zero_loss: f64,
}

/// Pretrains `den.*` on ground-truth futures conditioned on the realised endpoint.
pub fn pretrain_denoiser(
    store: &mut ParamStore,
    den: &Denoiser,
    train: &[Episode],
    val: &[Episode],
    cfg: &DenoiserConfig,
    rng: &mut impl Rng,
) -> Result<Vec<DenoiserEpoch>, NnError> {
    let ids = Denoiser::param_ids(store);
    let schedule = cfg.schedule();
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(store, cfg.lr, cfg.weight_decay, cfg.epochs * per_epoch);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Grads::new(store);
            for &i in batch {
                let ep = &train[i];
                let mut g = Graph::new(store);
                let loss = den.pretrain_loss(&mut g, &ep.scene, &ep.gt_futures, ep.gt_endpoint, &schedule, rng);
                total += g.value(loss).item();
                let l = g.scale(loss, 1.0 / batch.len() as f64);
                g.backward(l, &mut grads)?;
            }
            grads.clip(cfg.grad_clip);
            opt.step(store, &grads, &ids);
        }
        let (val_loss, val_zero_loss) = validation_loss(store, den, val, &schedule, epoch as u64);
        log.push(DenoiserEpoch {
            epoch,
            train_loss: total / train.len().max(1) as f64,
            val_loss,
            val_zero_loss,
        });
    }
    Ok(log)
}

/// Mean denoising loss on fixed (seeded) noise, and the zero-predictor's loss.
pub fn validation_loss(store: &ParamStore, den: &Denoiser, val: &[Episode], schedule: &NoiseSchedule, seed: u64) -> (f64, f64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (mut l, mut z) = (0.0, 0.0);
    for ep in val {
        let sigma = schedule.sigmas[rng.random_range(0..schedule.len())];
        let y0 = futures_tensor(&ep.gt_futures);
        let xi = Tensor::from_vec(
            y0.rows,
            y0.cols,
            (0..y0.len()).map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>(),
        );
        let mut g = Graph::new(store);
        let loss = den.noise_loss(&mut g, &ep.scene, &y0, &xi, sigma, ep.gt_endpoint);
        l += g.value(loss).item();
        z += xi.data.iter().map(|v| v * v).sum::<f64>() / xi.len() as f64;
    }
    let n = val.len().max(1) as f64;
    (l / n, z / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Agent, AgentAttr, AgentState, Category, VectorMap};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> Scene {
        let history = (0..10)
            .map(|t| AgentState {
                position: V2::new(-4.0 + 0.4 * t as f64, 0.0),
                heading: 0.0,
                velocity: V2::new(1.0, 0.0),
                acceleration: V2::ZERO,
            })
            .collect();
        let agents = vec![Agent {
            attr: AgentAttr::with_derived_radius(Category::Vehicle, 4.6, 1.9),
            history,
        }];
        Scene::new(0.4, agents, VectorMap::default())
    }

    fn zeroed() -> (ParamStore, Denoiser) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        let dcfg = DenoiserConfig {
            hidden: 8,
            ..DenoiserConfig::default()
        };
        let den = Denoiser::new(&mut store, &cfg, &dcfg, &mut rng);
        for pid in store.ids_with_prefix("den.net").collect::<Vec<_>>() {
            store.get_mut(pid).data.iter_mut().for_each(|v| *v = 0.0);
        }
        (store, den)
    }

    #[test]
    fn schedule_defaults() {
        let s = DenoiserConfig::default().schedule();
        assert_eq!(s.len(), 5);
        assert!((s.sigmas[0] - 1.0).abs() < 1e-15 && (s.sigmas[4] - 0.1).abs() < 1e-15);
        assert!(s.is_valid());
        assert!(s.etas.iter().all(|&e| e == 0.05));
    }

    #[test]
    fn zero_eta_and_zero_eps_is_identity() {
        let (store, den) = zeroed();
        let sc = scene();
        let ctx = den.context(&store, &sc);
        let input = RefineInput {
            scene: &sc,
            context: &ctx,
            token: V2::new(30.0, 10.0),
        };
        let y: Futures = vec![(0..10).map(|t| V2::new(0.5 * t as f64, 0.3)).collect()];
        let sched = NoiseSchedule::linear(1.0, 0.1, 5, 0.0);
        let (out, _) = den.refine(&store, &input, &y, &sched, &PotentialWeights::default(), 3).unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn guidance_pulls_ego_toward_the_tube() {
        let (store, den) = zeroed();
        let sc = scene();
        let ctx = den.context(&store, &sc);
        let token = V2::new(20.0, 0.0);
        let input = RefineInput {
            scene: &sc,
            context: &ctx,
            token,
        };
        let weights = PotentialWeights {
            w_ov: 0.0,
            w_obs: 0.0,
            w_end: 0.0,
            w_sm: 0.0,
            ..PotentialWeights::default()
        };
        let y: Futures = vec![(0..10).map(|t| V2::new(1.0 + t as f64, 6.0)).collect()];
        let (out, rep) = den.guided_step(&store, &input, &y, 1.0, 0.05, &weights, &PotentialRegistry::default(), 3);
        assert!(!rep.skipped && rep.c_after < rep.c_projected);
        for (a, b) in out[0].iter().zip(&y[0]) {
            assert!(a.y < b.y && (a.x - b.x).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_guidance_is_identity() {
        let (store, den) = zeroed();
        let sc = scene();
        let ctx = den.context(&store, &sc);
        let token = V2::new(9.0, 0.0);
        let input = RefineInput {
            scene: &sc,
            context: &ctx,
            token,
        };
        let y: Futures = vec![(0..10).map(|t| V2::new(t as f64, 0.0)).collect()];
        let (out, rep) = den.guided_step(&store, &input, &y, 0.5, 0.05, &PotentialWeights::default(), &PotentialRegistry::default(), 3);
        assert_eq!(out, y);
        assert_eq!(rep.c_after, 0.0);
    }

    #[test]
    fn non_finite_input_aborts_with_step() {
        let (store, den) = zeroed();
        let sc = scene();
        let ctx = den.context(&store, &sc);
        let input = RefineInput {
            scene: &sc,
            context: &ctx,
            token: V2::new(9.0, 0.0),
        };
        let mut y: Futures = vec![(0..10).map(|t| V2::new(t as f64, 0.0)).collect()];
        y[0][3].x = f64::NAN;
        let e = den
            .refine(&store, &input, &y, &NoiseSchedule::linear(1.0, 0.1, 5, 0.05), &PotentialWeights::default(), 3)
            .unwrap_err();
        assert!(matches!(e, DenoiseError::NonFinite { step: 0, .. }));
    }

    #[test]
    fn pretrain_loss_is_nonnegative_and_small_sigma_limit() {
        let (store, den) = zeroed();
        let sc = scene();
        let y: Futures = vec![(0..10).map(|t| V2::new(t as f64, 0.0)).collect()];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new(&store);
        let l = den.pretrain_loss(&mut g, &sc, &y, V2::new(9.0, 0.0), &NoiseSchedule::linear(1.0, 0.1, 5, 0.05), &mut rng);
        assert!(g.value(l).item() >= 0.0);
        // ξ = 0: the loss is the network's own squared output, zero for a zeroed net
        let y0 = futures_tensor(&y);
        let xi = Tensor::zeros(y0.rows, y0.cols);
        let l0 = den.noise_loss(&mut g, &sc, &y0, &xi, 1e-9, V2::new(9.0, 0.0));
        assert_eq!(g.value(l0).item(), 0.0);
    }
}
