//! Ego-intention-conditioned joint predictor: token embedding with FiLM,
//! exposure gate, M-mode marginal decoder, scene assembly and the learned
//! scene selector.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::encoder::{SceneEmbedding, SceneEncoder, POS_SCALE};
use crate::geom::{point_segment_distance, Futures, JointScene, Scene, Segment, V2};
use crate::nn::{sigmoid, softmax, Graph, Linear, Mlp, ParamId, ParamStore, Tensor, Var};

pub const PREFIX: &str = "pred.";
pub const PRED_FORMAT: &str = "pred/v1";
const R_MIN: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum PredictError {
    #[error("beam too narrow: beam_width {beam_width} < k_scene {k_scene}")]
    BeamTooNarrow { beam_width: usize, k_scene: usize },
    #[error("top_r {top_r} must be in 1..={m}")]
    BadTopR { top_r: usize, m: usize },
    #[error("unknown scene assembler {0:?}")]
    UnknownAssembler(String),
    #[error("exhaustive assembly over {0} assignments is too large")]
    TooManyAssignments(u128),
}

/// Per-agent mode index, in agent-index order.
pub type Assignment = Vec<usize>;

/// Plain-value view of the decoded marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalSet {
    /// N × M × T_f.
    pub trajs: Vec<Vec<Vec<V2>>>,
    /// N × M softmax scores.
    pub mode_scores: Vec<Vec<f64>>,
    /// (N·M) × d_m, row `i·M + m`.
    pub mode_feats: Tensor,
}

impl MarginalSet {
    pub fn num_agents(&self) -> usize {
        self.trajs.len()
    }

    pub fn num_modes(&self) -> usize {
        self.mode_scores.first().map_or(0, Vec::len)
    }

    pub fn scene_of(&self, a: &[usize]) -> Futures {
        a.iter().enumerate().map(|(i, &m)| self.trajs[i][m].clone()).collect()
    }
}

/// Everything an assembler may use.
#[derive(Clone, Copy, Debug)]
pub struct AssemblyInput<'a> {
    pub marginals: &'a MarginalSet,
    pub radii: &'a [f64],
    /// Agent processing order (descending exposure).
    pub order: &'a [usize],
    pub top_r: usize,
    pub k_scene: usize,
    pub beam_width: usize,
    pub w_beam: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assembled {
    /// Exactly `k_scene` entries, best first.
    pub assignments: Vec<Assignment>,
    pub costs: Vec<f64>,
    /// True when fewer than `k_scene` distinct assignments existed and the
    /// list was padded by repeating earlier ones.
    pub padded: bool,
}

pub trait SceneAssembler: Send + Sync {
    fn name(&self) -> &'static str;
    fn assemble(&self, input: &AssemblyInput<'_>) -> Result<Assembled, PredictError>;
}

/// Overlap penalty between two agents' trajectories.
fn pair_overlap(a: &[V2], b: &[V2], ra: f64, rb: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            let h = (ra + rb - p.dist(*q)).max(0.0);
            h * h
        })
        .sum()
}

/// Canonical cost of a full assignment: `−Σ scores + w_beam · Σ_{i<j} overlap`.
pub fn scene_cost(m: &MarginalSet, radii: &[f64], w_beam: f64, a: &[usize]) -> f64 {
    let mut c = 0.0;
    for (i, &mi) in a.iter().enumerate() {
        c -= m.mode_scores[i][mi];
    }
    let mut ov = 0.0;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            ov += pair_overlap(&m.trajs[i][a[i]], &m.trajs[j][a[j]], radii[i], radii[j]);
        }
    }
    c + w_beam * ov
}

/// Top-R mode indices per agent, by score (ties to the lower index).
pub fn top_modes(m: &MarginalSet, top_r: usize) -> Vec<Vec<usize>> {
    m.mode_scores
        .iter()
        .map(|s| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            idx.truncate(top_r);
            idx
        })
        .collect()
}

fn by_cost_then_lex(a: &(f64, Assignment), b: &(f64, Assignment)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1))
}

fn check_common(input: &AssemblyInput<'_>) -> Result<(), PredictError> {
    let m = input.marginals.num_modes();
    if input.top_r == 0 || input.top_r > m {
        return Err(PredictError::BadTopR { top_r: input.top_r, m });
    }
    Ok(())
}

/// Ranks full assignments canonically and pads to `k_scene`.
fn finish(input: &AssemblyInput<'_>, assignments: Vec<Assignment>) -> Assembled {
    let mut scored: Vec<(f64, Assignment)> = assignments
        .into_iter()
        .map(|a| (scene_cost(input.marginals, input.radii, input.w_beam, &a), a))
        .collect();
    scored.sort_by(by_cost_then_lex);
    scored.truncate(input.k_scene);
    let distinct = scored.len();
    let padded = distinct < input.k_scene;
    let mut i = 0;
    while scored.len() < input.k_scene {
        scored.push(scored[i % distinct].clone());
        i += 1;
    }
    let (costs, assignments) = scored.into_iter().unzip();
    Assembled {
        assignments,
        costs,
        padded,
    }
}

/// Beam search over agents in exposure order; partial cost adds each new
/// agent's negated score and its overlap with already-placed agents.
pub struct BeamAssembler;

impl SceneAssembler for BeamAssembler {
    fn name(&self) -> &'static str {
        "beam"
    }

    fn assemble(&self, input: &AssemblyInput<'_>) -> Result<Assembled, PredictError> {
        check_common(input)?;
        if input.beam_width < input.k_scene {
            return Err(PredictError::BeamTooNarrow {
                beam_width: input.beam_width,
                k_scene: input.k_scene,
            });
        }
        let m = input.marginals;
        let n = m.num_agents();
        let cands = top_modes(m, input.top_r);
        const UNSET: usize = usize::MAX;
        let mut beam: Vec<(f64, Assignment)> = vec![(0.0, vec![UNSET; n])];
        let mut placed: Vec<usize> = Vec::with_capacity(n);
        for &i in input.order {
            let mut next = Vec::with_capacity(beam.len() * cands[i].len());
            for (cost, a) in &beam {
                for &mi in &cands[i] {
                    let mut c = cost - m.mode_scores[i][mi];
                    for &j in &placed {
                        c += input.w_beam * pair_overlap(&m.trajs[i][mi], &m.trajs[j][a[j]], input.radii[i], input.radii[j]);
                    }
                    let mut na = a.clone();
                    na[i] = mi;
                    next.push((c, na));
                }
            }
            next.sort_by(by_cost_then_lex);
            next.truncate(input.beam_width);
            beam = next;
            placed.push(i);
        }
        Ok(finish(input, beam.into_iter().map(|(_, a)| a).collect()))
    }
}

/// Enumerates every top-R assignment.
pub struct ExhaustiveAssembler;

impl SceneAssembler for ExhaustiveAssembler {
    fn name(&self) -> &'static str {
        "exhaustive"
    }

    fn assemble(&self, input: &AssemblyInput<'_>) -> Result<Assembled, PredictError> {
        check_common(input)?;
        let cands = top_modes(input.marginals, input.top_r);
        let total: u128 = cands.iter().map(|c| c.len() as u128).product();
        if total > 1_000_000 {
            return Err(PredictError::TooManyAssignments(total));
        }
        let mut all = vec![Vec::new()];
        for c in &cands {
            all = all
                .into_iter()
                .flat_map(|a: Assignment| {
                    c.iter().map(move |&mi| {
                        let mut na = a.clone();
                        na.push(mi);
                        na
                    })
                })
                .collect();
        }
        Ok(finish(input, all))
    }
}

/// Uniformly samples one marginal per agent for each candidate, ignoring
/// scores and interactions; candidates keep their sampling order.
pub struct RandomAssembler;

impl SceneAssembler for RandomAssembler {
    fn name(&self) -> &'static str {
        "random"
    }

    fn assemble(&self, input: &AssemblyInput<'_>) -> Result<Assembled, PredictError> {
        let m = input.marginals;
        let mut rng = ChaCha8Rng::seed_from_u64(input.seed);
        let assignments: Vec<Assignment> = (0..input.k_scene)
            .map(|_| (0..m.num_agents()).map(|_| rng.random_range(0..m.num_modes())).collect())
            .collect();
        let costs = assignments
            .iter()
            .map(|a| scene_cost(m, input.radii, input.w_beam, a))
            .collect();
        Ok(Assembled {
            assignments,
            costs,
            padded: false,
        })
    }
}

#[derive(Clone)]
pub struct AssemblerRegistry {
    items: BTreeMap<&'static str, Arc<dyn SceneAssembler>>,
}

impl Default for AssemblerRegistry {
    fn default() -> Self {
        let mut r = Self { items: BTreeMap::new() };
        r.register(Arc::new(BeamAssembler));
        r.register(Arc::new(ExhaustiveAssembler));
        r.register(Arc::new(RandomAssembler));
        r
    }
}

impl AssemblerRegistry {
    pub fn register(&mut self, a: Arc<dyn SceneAssembler>) {
        self.items.insert(a.name(), a);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn SceneAssembler>, PredictError> {
        self.items
            .get(name)
            .cloned()
            .ok_or_else(|| PredictError::UnknownAssembler(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.items.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.items.keys().copied().collect()
    }
}

/// `e_i = σ(α[R_path − d_line(p_i, ℓ_k)]₊ + β[R_end − ‖p_i − ĝ_k‖]₊)`.
pub fn exposure_value(p: V2, token: V2, ego_last: V2, alpha: f64, beta: f64, r_path: f64, r_end: f64) -> f64 {
    let line = Segment::new(ego_last, token);
    let d_line = point_segment_distance(p, &line);
    let d_end = p.dist(token);
    sigmoid(alpha * (r_path.max(R_MIN) - d_line).max(0.0) + beta * (r_end.max(R_MIN) - d_end).max(0.0))
}

/// Graph handles of one conditioned forward pass.
#[derive(Clone, Debug)]
pub struct PredictorOutputs {
    pub embedding: SceneEmbedding,
    /// N × 1 exposures.
    pub exposure: Var,
    /// (N·M) × 2T_f, rows `i·M + m`, interleaved `x1 y1 x2 y2 …`.
    pub trajs: Var,
    /// N × M raw mode logits.
    pub mode_logits: Var,
    /// (N·M) × d_m.
    pub mode_feats: Var,
    pub marginals: MarginalSet,
    pub exposures: Vec<f64>,
}

/// Selected candidate scenes with selector output.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneCandidates {
    pub assembled: Assembled,
    pub probs: Vec<f64>,
    pub top1: usize,
}

#[derive(Clone, Debug)]
pub struct Predictor {
    pub encoder: SceneEncoder,
    token_mlp: Mlp,
    film_gamma: Linear,
    film_delta: Linear,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub r_path: ParamId,
    pub r_end: ParamId,
    gate_net: Mlp,
    decoder: Mlp,
    selector: Mlp,
    pub cfg: ModelConfig,
}

impl Predictor {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let dh = cfg.d_h();
        let per_mode = 2 * cfg.t_f + 1 + cfg.d_m;
        Self {
            encoder: SceneEncoder::new(store, "pred.enc", cfg, rng),
            token_mlp: Mlp::new(store, "pred.token", &[2, cfg.d_tau, cfg.d_tau], rng),
            film_gamma: Linear::zeros(store, "pred.film_gamma", cfg.d_tau, dh),
            film_delta: Linear::zeros(store, "pred.film_delta", cfg.d_tau, dh),
            alpha: store.add("pred.gate.alpha", Tensor::scalar(1.0)),
            beta: store.add("pred.gate.beta", Tensor::scalar(1.0)),
            r_path: store.add("pred.gate.r_path", Tensor::scalar(3.0)),
            r_end: store.add("pred.gate.r_end", Tensor::scalar(5.0)),
            gate_net: Mlp::new(store, "pred.gate.net", &[1, 16, dh], rng),
            decoder: Mlp::new(store, "pred.dec", &[dh, cfg.hidden, cfg.m_modes * per_mode], rng),
            selector: Mlp::new(store, "pred.sel", &[cfg.d + cfg.d_m, cfg.hidden, 1], rng),
            cfg: cfg.clone(),
        }
    }

    pub fn param_ids(store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix(PREFIX).collect()
    }

    /// `τ_k = MLP(ĝ_k)`; `u_i = γ(τ) ⊙ h_i + δ(τ)`.
    pub fn condition(&self, g: &mut Graph, emb: &SceneEmbedding, token: V2, ego_last: V2) -> Var {
        let rel = (token - ego_last) * (1.0 / POS_SCALE);
        let t_in = g.constant(Tensor::row_vector(vec![rel.x, rel.y]));
        let tau = self.token_mlp.forward(g, t_in);
        let gam = self.film_gamma.forward(g, tau);
        let gamma = g.add_const(gam, 1.0);
        let delta = self.film_delta.forward(g, tau);
        let u = g.mul_row(emb.per_agent, gamma);
        g.add_row(u, delta)
    }

    /// Exposure per agent (N × 1), differentiable in α, β, R_path, R_end.
    pub fn exposure_gate(&self, g: &mut Graph, last: &[V2], token: V2, ego_last: V2) -> Var {
        let line = Segment::new(ego_last, token);
        let n = last.len();
        let neg_dline = Tensor::from_vec(n, 1, last.iter().map(|&p| -point_segment_distance(p, &line)).collect());
        let neg_dend = Tensor::from_vec(n, 1, last.iter().map(|&p| -p.dist(token)).collect());
        let rp = g.param(self.r_path);
        let rp = g.clamp_min(rp, R_MIN);
        let re = g.param(self.r_end);
        let re = g.clamp_min(re, R_MIN);
        let a = g.param(self.alpha);
        let b = g.param(self.beta);
        let dl = g.constant(neg_dline);
        let de = g.constant(neg_dend);
        let hp = g.add_scalar(dl, rp);
        let hp = g.relu(hp);
        let he = g.add_scalar(de, re);
        let he = g.relu(he);
        let tp = g.mul_scalar(hp, a);
        let te = g.mul_scalar(he, b);
        let z = g.add(tp, te);
        g.sigmoid(z)
    }

    /// Full conditioned forward through the marginal decoder.
    pub fn forward(&self, g: &mut Graph, scene: &Scene, token: V2) -> PredictorOutputs {
        let emb = self.encoder.encode(g, scene);
        self.forward_from(g, scene, emb, token)
    }

    pub fn forward_from(&self, g: &mut Graph, scene: &Scene, emb: SceneEmbedding, token: V2) -> PredictorOutputs {
        let cfg = &self.cfg;
        let n = scene.num_agents();
        let (mm, tf) = (cfg.m_modes, cfg.t_f);
        let ego_last = scene.ego().last().position;
        let last = scene.last_positions();

        let u = self.condition(g, &emb, token, ego_last);
        let exposure = self.exposure_gate(g, &last, token, ego_last);
        let gate_pre = self.gate_net.forward(g, exposure);
        let gate = g.sigmoid(gate_pre);
        let u = g.mul(u, gate);

        let out = self.decoder.forward(g, u);
        let per_mode = 2 * tf + 1 + cfg.d_m;
        let rows = g.reshape(out, n * mm, per_mode);
        let disp = g.slice_cols(rows, 0, 2 * tf);
        let logit_col = g.slice_cols(rows, 2 * tf, 1);
        let mode_feats = g.slice_cols(rows, 2 * tf + 1, cfg.d_m);
        let mode_logits = g.reshape(logit_col, n, mm);

        let cum = g.constant(cumsum_matrix(tf));
        let rel = g.matmul(disp, cum);
        let mut base = Tensor::zeros(n * mm, 2 * tf);
        for i in 0..n {
            for m in 0..mm {
                let r = i * mm + m;
                for t in 0..tf {
                    base.set(r, 2 * t, last[i].x);
                    base.set(r, 2 * t + 1, last[i].y);
                }
            }
        }
        let base = g.constant(base);
        let trajs = g.add(rel, base);

        let marginals = marginal_values(g.value(trajs), g.value(mode_logits), g.value(mode_feats), n, mm, tf);
        let exposures = g.value(exposure).data.clone();
        PredictorOutputs {
            embedding: emb,
            exposure,
            trajs,
            mode_logits,
            mode_feats,
            marginals,
            exposures,
        }
    }

    pub fn assembly_order(exposures: &[f64]) -> Vec<usize> {
        let mut order: Vec<usize> = (0..exposures.len()).collect();
        order.sort_by(|&a, &b| exposures[b].total_cmp(&exposures[a]).then(a.cmp(&b)));
        order
    }

    pub fn assemble(
        &self,
        out: &PredictorOutputs,
        radii: &[f64],
        assembler: &dyn SceneAssembler,
        seed: u64,
    ) -> Result<Assembled, PredictError> {
        let order = Self::assembly_order(&out.exposures);
        assembler.assemble(&AssemblyInput {
            marginals: &out.marginals,
            radii,
            order: &order,
            top_r: self.cfg.top_r,
            k_scene: self.cfg.k_scene,
            beam_width: self.cfg.beam_width,
            w_beam: self.cfg.w_beam,
            seed,
        })
    }

    /// Selector logits (1 × K): `MLP([c; Σ_i mode_feats(i, a_j(i))])`.
    pub fn selector_logits(&self, g: &mut Graph, out: &PredictorOutputs, assignments: &[Assignment]) -> Var {
        let k = assignments.len();
        let n = out.marginals.num_agents();
        let mm = out.marginals.num_modes();
        let idx: Vec<usize> = assignments
            .iter()
            .flat_map(|a| a.iter().enumerate().map(move |(i, &m)| i * mm + m))
            .collect();
        let picked = g.gather_rows(out.mode_feats, &idx);
        let mut block = Tensor::zeros(k, k * n);
        for j in 0..k {
            for i in 0..n {
                block.set(j, j * n + i, 1.0);
            }
        }
        let block = g.constant(block);
        let summed = g.matmul(block, picked);
        let c = g.repeat_rows(out.embedding.context, k);
        let x = g.concat_cols(&[c, summed]);
        let s = self.selector.forward(g, x);
        g.reshape(s, 1, k)
    }

    /// Rows of the (N·M) × 2T_f trajectory var for one assignment: N × 2T_f.
    pub fn scene_var(&self, g: &mut Graph, out: &PredictorOutputs, a: &[usize]) -> Var {
        let mm = out.marginals.num_modes();
        let idx: Vec<usize> = a.iter().enumerate().map(|(i, &m)| i * mm + m).collect();
        g.gather_rows(out.trajs, &idx)
    }

    /// Encode → condition → gate → decode → assemble → select.
    pub fn predict(
        &self,
        store: &ParamStore,
        scene: &Scene,
        token: V2,
        opts: &PredictOptions,
    ) -> Result<Prediction, PredictError> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, scene, token);
        let assembler = AssemblerRegistry::default().get(&opts.assembler)?;
        let assembled = self.assemble(&out, &scene.radii(), assembler.as_ref(), opts.seed)?;
        let (probs, top1) = if opts.use_selector {
            let l = self.selector_logits(&mut g, &out, &assembled.assignments);
            let p = softmax(&g.value(l).data);
            let t = argmax(&p);
            (p, t)
        } else {
            let k = assembled.assignments.len();
            (vec![1.0 / k as f64; k], 0)
        };
        let scenes = assembled
            .assignments
            .iter()
            .zip(&probs)
            .map(|(a, &p)| JointScene {
                futures: out.marginals.scene_of(a),
                score: p,
            })
            .collect();
        Ok(Prediction {
            token,
            scenes,
            candidates: SceneCandidates {
                assembled,
                probs,
                top1,
            },
            exposures: out.exposures,
            marginals: out.marginals,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    pub assembler: String,
    pub use_selector: bool,
    pub seed: u64,
}

impl PredictOptions {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            assembler: cfg.assembler.clone(),
            use_selector: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub token: V2,
    /// K_scene scenes in assembly order; `score` is the selector probability.
    pub scenes: Vec<JointScene>,
    pub candidates: SceneCandidates,
    pub exposures: Vec<f64>,
    pub marginals: MarginalSet,
}

impl Prediction {
    pub fn top1(&self) -> &JointScene {
        &self.scenes[self.candidates.top1]
    }

    pub fn to_v1(&self, token_index: Option<usize>) -> PredV1 {
        PredV1 {
            format: PRED_FORMAT.to_string(),
            token_index,
            token: self.token,
            top1: self.candidates.top1,
            padded: self.candidates.assembled.padded,
            scenes: self.scenes.clone(),
            exposures: self.exposures.clone(),
        }
    }
}

/// `pred/v1` wire format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredV1 {
    pub format: String,
    pub token_index: Option<usize>,
    pub token: V2,
    pub top1: usize,
    pub padded: bool,
    pub scenes: Vec<JointScene>,
    pub exposures: Vec<f64>,
}

/// Lowest index among maxima.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `(2T) × (2T)` matrix turning interleaved displacements into cumulative offsets.
pub fn cumsum_matrix(tf: usize) -> Tensor {
    let mut c = Tensor::zeros(2 * tf, 2 * tf);
    for s in 0..tf {
        for t in s..tf {
            c.set(2 * s, 2 * t, 1.0);
            c.set(2 * s + 1, 2 * t + 1, 1.0);
        }
    }
    c
}

fn marginal_values(trajs: &Tensor, logits: &Tensor, feats: &Tensor, n: usize, mm: usize, tf: usize) -> MarginalSet {
    let trajs = (0..n)
        .map(|i| {
            (0..mm)
                .map(|m| {
                    let row = trajs.row(i * mm + m);
                    (0..tf).map(|t| V2::new(row[2 * t], row[2 * t + 1])).collect()
                })
                .collect()
        })
        .collect();
    let mode_scores = (0..n).map(|i| softmax(logits.row(i))).collect();
    MarginalSet {
        trajs,
        mode_scores,
        mode_feats: feats.clone(),
    }
}

/// Interleaved row from a trajectory.
pub fn flatten_traj(t: &[V2]) -> Vec<f64> {
    t.iter().flat_map(|p| [p.x, p.y]).collect()
}

pub fn futures_tensor(f: &Futures) -> Tensor {
    let cols = f.first().map_or(0, |a| 2 * a.len());
    Tensor::from_vec(f.len(), cols, f.iter().flat_map(|a| flatten_traj(a)).collect())
}

pub fn tensor_futures(t: &Tensor) -> Futures {
    (0..t.rows)
        .map(|r| t.row(r).chunks(2).map(|c| V2::new(c[0], c[1])).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Agent, AgentAttr, AgentState, Category, VectorMap};

    fn marg(trajs: Vec<Vec<Vec<V2>>>, scores: Vec<Vec<f64>>) -> MarginalSet {
        let n = trajs.len();
        let m = scores[0].len();
        MarginalSet {
            trajs,
            mode_scores: scores,
            mode_feats: Tensor::zeros(n * m, 2),
        }
    }

    fn input<'a>(m: &'a MarginalSet, radii: &'a [f64], order: &'a [usize], top_r: usize, k: usize, bw: usize) -> AssemblyInput<'a> {
        AssemblyInput {
            marginals: m,
            radii,
            order,
            top_r,
            k_scene: k,
            beam_width: bw,
            w_beam: 1.0,
            seed: 0,
        }
    }

    fn point_modes(n: usize, m: usize) -> MarginalSet {
        let trajs = (0..n)
            .map(|i| (0..m).map(|k| vec![V2::new(10.0 * i as f64, k as f64); 2]).collect())
            .collect();
        let scores = (0..n)
            .map(|i| softmax(&(0..m).map(|k| ((k * 7 + i * 3) % 5) as f64).collect::<Vec<_>>()))
            .collect();
        marg(trajs, scores)
    }

    #[test]
    fn single_agent_candidates_are_top_modes() {
        let m = point_modes(1, 6);
        let out = BeamAssembler.assemble(&input(&m, &[0.5], &[0], 6, 6, 64)).unwrap();
        let tops = top_modes(&m, 6);
        let got: Vec<usize> = out.assignments.iter().map(|a| a[0]).collect();
        assert_eq!(got, tops[0]);
        assert!(!out.padded);
    }

    #[test]
    fn top_r_one_pads_by_duplication() {
        let m = point_modes(2, 4);
        let out = BeamAssembler.assemble(&input(&m, &[0.5, 0.5], &[0, 1], 1, 6, 64)).unwrap();
        assert_eq!(out.assignments.len(), 6);
        assert!(out.padded);
        assert!(out.assignments.iter().all(|a| *a == out.assignments[0]));
    }

    #[test]
    fn narrow_beam_is_an_error() {
        let m = point_modes(2, 4);
        let e = BeamAssembler.assemble(&input(&m, &[0.5, 0.5], &[0, 1], 4, 6, 4)).unwrap_err();
        assert_eq!(e, PredictError::BeamTooNarrow { beam_width: 4, k_scene: 6 });
    }

    #[test]
    fn beam_matches_exhaustive_on_small_case() {
        let m = point_modes(3, 4);
        let radii = [3.0, 3.0, 3.0];
        let a = BeamAssembler.assemble(&input(&m, &radii, &[2, 0, 1], 4, 6, 64)).unwrap();
        let b = ExhaustiveAssembler.assemble(&input(&m, &radii, &[0, 1, 2], 4, 6, 64)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exposure_closed_forms() {
        let ego = V2::ZERO;
        let tok = V2::new(10.0, 0.0);
        // far from both the path and the token
        let e = exposure_value(V2::new(5.0, 20.0), tok, ego, 1.0, 1.0, 3.0, 5.0);
        assert!((e - 0.5).abs() < 1e-15);
        let e = exposure_value(tok, tok, ego, 1.0, 1.0, 2.0, 2.0);
        assert!((e - sigmoid(4.0)).abs() < 1e-15);
        assert!((e - 0.982).abs() < 1e-3);
    }

    #[test]
    fn exposure_is_monotone_on_a_grid() {
        let ego = V2::ZERO;
        let tok = V2::new(12.0, 4.0);
        for &(a, b) in &[(1.0, 1.0), (0.3, 2.0)] {
            for step in 0..40 {
                let x = -5.0 + 0.5 * step as f64;
                let mut prev: Option<f64> = None;
                for k in 0..60 {
                    let p = V2::new(x, 2.0 + 0.25 * k as f64);
                    let e = exposure_value(p, tok, ego, a, b, 3.0, 5.0);
                    assert!(e > 0.0 && e < 1.0);
                    // above the path and the token, moving up grows both distances
                    if p.y >= 4.0f64.max(x / 3.0) {
                        if let Some(q) = prev {
                            assert!(e <= q + 1e-15);
                        }
                        prev = Some(e);
                    }
                }
            }
        }
    }

    fn small_scene(n: usize) -> Scene {
        let agents = (0..n)
            .map(|i| {
                let y = -1.75 + 3.5 * (i % 2) as f64;
                let history = (0..10)
                    .map(|t| AgentState {
                        position: V2::new(-6.0 + 2.0 * i as f64 + 0.8 * t as f64, y),
                        heading: 0.0,
                        velocity: V2::new(2.0, 0.0),
                        acceleration: V2::ZERO,
                    })
                    .collect();
                Agent {
                    attr: AgentAttr::with_derived_radius(Category::Vehicle, 4.6, 1.9),
                    history,
                }
            })
            .collect();
        Scene::new(0.4, agents, VectorMap::default())
    }

    fn model() -> (ParamStore, Predictor) {
        let cfg = ModelConfig {
            d: 16,
            d_tau: 8,
            d_m: 4,
            hidden: 16,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = Predictor::new(&mut store, &cfg, &mut rng);
        (store, p)
    }

    #[test]
    fn film_starts_as_identity() {
        let (store, p) = model();
        let s = small_scene(3);
        let mut g = Graph::new(&store);
        let emb = p.encoder.encode(&mut g, &s);
        let u = p.condition(&mut g, &emb, V2::new(8.0, 5.0), V2::ZERO);
        assert_eq!(g.value(u), g.value(emb.per_agent));
    }

    #[test]
    fn different_tokens_change_features_once_film_is_nonzero() {
        let (mut store, p) = model();
        for id in ["pred.film_gamma.w", "pred.film_delta.w"] {
            let pid = store.lookup(id).unwrap();
            let t = store.get_mut(pid);
            for (k, v) in t.data.iter_mut().enumerate() {
                *v = ((k * 37 % 11) as f64 - 5.0) * 0.05;
            }
        }
        let s = small_scene(3);
        let mut g = Graph::new(&store);
        let emb = p.encoder.encode(&mut g, &s);
        let u1 = p.condition(&mut g, &emb, V2::new(8.0, 5.0), V2::ZERO);
        let u2 = p.condition(&mut g, &emb, V2::new(8.0, -5.0), V2::ZERO);
        assert_ne!(g.value(u1), g.value(u2));
    }

    #[test]
    fn zero_decoder_gives_constant_trajectories() {
        let (mut store, p) = model();
        for pid in store.ids_with_prefix("pred.dec").collect::<Vec<_>>() {
            store.get_mut(pid).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let s = small_scene(2);
        let mut g = Graph::new(&store);
        let out = p.forward(&mut g, &s, V2::new(10.0, 0.0));
        let last = s.last_positions();
        for (i, modes) in out.marginals.trajs.iter().enumerate() {
            for tr in modes {
                assert!(tr.iter().all(|&q| q == last[i]));
            }
            // zero logits → uniform scores
            assert!(out.marginals.mode_scores[i].iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
        }
    }

    #[test]
    fn single_mode_has_unit_score() {
        let cfg = ModelConfig {
            d: 16,
            m_modes: 1,
            top_r: 1,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = Predictor::new(&mut store, &cfg, &mut rng);
        let mut g = Graph::new(&store);
        let out = p.forward(&mut g, &small_scene(2), V2::new(5.0, 0.0));
        assert!(out.marginals.mode_scores.iter().all(|s| s == &vec![1.0]));
    }

    #[test]
    fn predict_is_deterministic_and_normalised() {
        let (store, p) = model();
        let s = small_scene(3);
        let opts = PredictOptions::from_model(&p.cfg);
        let a = p.predict(&store, &s, V2::new(10.0, 3.0), &opts).unwrap();
        let b = p.predict(&store, &s, V2::new(10.0, 3.0), &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.scenes.len(), 6);
        assert!((a.candidates.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let v1 = serde_json::to_value(a.to_v1(Some(2))).unwrap();
        assert_eq!(v1["format"], "pred/v1");
        assert_eq!(v1["scenes"][0]["futures"][0].as_array().unwrap().len(), 10);
    }

    #[test]
    fn duplicated_candidates_get_equal_probs() {
        let (store, p) = model();
        let s = small_scene(2);
        let mut g = Graph::new(&store);
        let out = p.forward(&mut g, &s, V2::new(10.0, 3.0));
        let a = vec![vec![1, 2], vec![0, 0], vec![1, 2]];
        let l = p.selector_logits(&mut g, &out, &a);
        let probs = softmax(&g.value(l).data);
        assert_eq!(probs[0], probs[2]);
        let single = p.selector_logits(&mut g, &out, &a[..1]);
        assert_eq!(softmax(&g.value(single).data), vec![1.0]);
    }

    #[test]
    fn permuting_non_ego_agents_permutes_futures() {
        let (store, p) = model();
        let s = small_scene(3);
        let mut sp = s.clone();
        sp.agents.swap(1, 2);
        let mut g = Graph::new(&store);
        let tok = V2::new(9.0, 1.0);
        let a = p.forward(&mut g, &s, tok);
        let b = p.forward(&mut g, &sp, tok);
        for (x, y) in [(0, 0), (1, 2), (2, 1)] {
            for (ta, tb) in a.marginals.trajs[x].iter().zip(&b.marginals.trajs[y]) {
                for (u, v) in ta.iter().zip(tb) {
                    assert!(u.dist(*v) < 1e-9);
                }
            }
        }
    }
}
