//! Stage-2 training: supervised branch, counterfactual distillation from an EMA teacher.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{DenoiseError, Denoiser, NoiseSchedule, RefineInput};
use crate::encoder::SceneEmbedding;
use crate::geom::{Futures, Scene, V2};
use crate::metrics::{ade_fde, MetricsTable};
use crate::model::{Model, ModelError};
use crate::nn::{ema_update, AdamW, Graph, Grads, NnError, ParamId, ParamStore, Tensor, Var};
use crate::potentials::{col_delta, ObstacleFrame, PotentialWeights};
use crate::predictor::{
    argmax, futures_tensor, AssemblerRegistry, PredictError, Predictor, PredictorOutputs, SceneAssembler,
};
use crate::synth::Episode;
use crate::tokenizer::{shuffle, winner_index, TokenBank, TokenSource, TokenSourceRegistry};

#[derive(Debug, Error)]
pub enum Stage2Error {
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("log write failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub p_cf: f64,
    pub tau_ema: f64,
    /// Ramp the EMA decay as `min(τ, (1+n)/(10+n))` over the first updates.
    pub ema_warmup: bool,
    /// Clearance margin (m) of the collision penalty.
    pub delta: f64,
    pub lambda_raw: f64,
    pub lambda_cons: f64,
    pub lambda_safe: f64,
    pub lambda_kd: f64,
    /// Weights inside the supervised loss: marginal regression, mode CE,
    /// selector CE, joint L2.
    pub w_marginal: f64,
    pub w_mode: f64,
    pub w_selector: f64,
    pub w_joint: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub use_selector: bool,
    pub use_sgd: bool,
    pub use_ckd: bool,
    pub teacher_mode: String,
    pub token_source: String,
    pub sigma_noise: f64,
    /// Validation episodes scored per epoch; 0 means all.
    pub val_max: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            p_cf: 0.5,
            tau_ema: 0.995,
            ema_warmup: true,
            delta: 0.2,
            lambda_raw: 1.0,
            lambda_cons: 0.5,
            lambda_safe: 1.0,
            lambda_kd: 1.0,
            w_marginal: 1.0,
            w_mode: 1.0,
            w_selector: 0.5,
            w_joint: 1.0,
            epochs: 20,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 0.01,
            grad_clip: 10.0,
            use_selector: true,
            use_sgd: true,
            use_ckd: true,
            teacher_mode: "ema_sgd".into(),
            token_source: "ranking".into(),
            sigma_noise: 1.5,
            val_max: 0,
        }
    }
}

impl Stage2Config {
    pub fn check(&self) -> Vec<String> {
        let mut e = Vec::new();
        if !(0.0..=1.0).contains(&self.p_cf) {
            e.push("stage2.p_cf must be in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.tau_ema) {
            e.push("stage2.tau_ema must be in [0, 1]".into());
        }
        let nonneg = [
            ("delta", self.delta),
            ("lambda_raw", self.lambda_raw),
            ("lambda_cons", self.lambda_cons),
            ("lambda_safe", self.lambda_safe),
            ("lambda_kd", self.lambda_kd),
            ("w_marginal", self.w_marginal),
            ("w_mode", self.w_mode),
            ("w_selector", self.w_selector),
            ("w_joint", self.w_joint),
            ("weight_decay", self.weight_decay),
            ("sigma_noise", self.sigma_noise),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                e.push(format!("stage2.{name} must be finite and >= 0"));
            }
        }
        if self.batch_size == 0 {
            e.push("stage2.batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            e.push("stage2.lr and stage2.grad_clip must be positive".into());
        }
        if TeacherRegistry::default().get(&self.teacher_mode).is_none() {
            e.push(format!("stage2.teacher_mode {:?} is not registered", self.teacher_mode));
        }
        if TokenSourceRegistry::with_noise(1.0).get(&self.token_source).is_none() {
            e.push(format!("stage2.token_source {:?} is not registered", self.token_source));
        }
        e
    }

    /// Consistency weight in effect (zero without the refinement path).
    pub fn cons_weight(&self) -> f64 {
        if self.use_sgd { self.lambda_cons } else { 0.0 }
    }

    pub fn safe_weight(&self) -> f64 {
        if self.use_sgd { self.lambda_safe } else { 0.0 }
    }

    /// EMA decay used for the update after `step` previous updates.
    pub fn tau_at(&self, step: usize) -> f64 {
        if self.ema_warmup {
            self.tau_ema.min((1.0 + step as f64) / (10.0 + step as f64))
        } else {
            self.tau_ema
        }
    }
}

/// What the teacher contributes to the distillation target.
#[derive(Clone, Debug, PartialEq)]
pub enum TeacherTarget {
    /// No teacher: the counterfactual branch is disabled.
    Absent,
    /// EMA decoder output as is.
    Raw,
    /// EMA decoder output refined under these guidance weights.
    Refined(PotentialWeights),
}

pub trait TeacherStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn target(&self, weights: &PotentialWeights) -> TeacherTarget;
}

pub struct NoTeacher;
pub struct EmaOnly;
pub struct EmaUnsafeDenoiser;
pub struct EmaSgd;

impl TeacherStrategy for NoTeacher {
    fn name(&self) -> &'static str {
        "none"
    }
    fn target(&self, _: &PotentialWeights) -> TeacherTarget {
        TeacherTarget::Absent
    }
}

impl TeacherStrategy for EmaOnly {
    fn name(&self) -> &'static str {
        "ema_only"
    }
    fn target(&self, _: &PotentialWeights) -> TeacherTarget {
        TeacherTarget::Raw
    }
}

impl TeacherStrategy for EmaUnsafeDenoiser {
    fn name(&self) -> &'static str {
        "ema_unsafe_denoiser"
    }
    fn target(&self, w: &PotentialWeights) -> TeacherTarget {
        TeacherTarget::Refined(w.disabled())
    }
}

impl TeacherStrategy for EmaSgd {
    fn name(&self) -> &'static str {
        "ema_sgd"
    }
    fn target(&self, w: &PotentialWeights) -> TeacherTarget {
        TeacherTarget::Refined(w.clone())
    }
}

#[derive(Clone)]
pub struct TeacherRegistry {
    modes: BTreeMap<&'static str, Arc<dyn TeacherStrategy>>,
}

impl Default for TeacherRegistry {
    fn default() -> Self {
        let mut r = Self { modes: BTreeMap::new() };
        r.register(Arc::new(NoTeacher));
        r.register(Arc::new(EmaOnly));
        r.register(Arc::new(EmaUnsafeDenoiser));
        r.register(Arc::new(EmaSgd));
        r
    }
}

impl TeacherRegistry {
    pub fn register(&mut self, t: Arc<dyn TeacherStrategy>) {
        self.modes.insert(t.name(), t);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn TeacherStrategy>> {
        self.modes.get(name).cloned()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.modes.keys().copied().collect()
    }
}

/// Frozen per-episode inputs: Stage-1 bank, its winner and the denoiser context.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub bank: TokenBank,
    pub k_star: usize,
    pub context: Tensor,
}

impl Prepared {
    pub fn new(model: &Model, ep: &Episode) -> Self {
        let bank = model.intents(&ep.scene);
        let k_star = winner_index(&bank.endpoints(), ep.gt_endpoint);
        Self {
            bank,
            k_star,
            context: model.context(&ep.scene),
        }
    }
}

/// Unweighted parts of the supervised branch and its weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GtTerms {
    pub marginal: f64,
    pub mode_ce: f64,
    pub selector_ce: f64,
    pub joint: f64,
    pub sup: f64,
    pub cons: f64,
    pub safe: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KdTerms {
    pub kd: f64,
    pub safe: f64,
    pub total: f64,
}

/// Batch means of one optimisation step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepBreakdown {
    pub cf: bool,
    pub l_gt: f64,
    pub l_kd: f64,
    /// Value of the differentiated objective.
    pub l_s2: f64,
    pub gt: GtTerms,
    pub kd: KdTerms,
}

pub fn draw_cf(p_cf: f64, rng: &mut impl Rng) -> bool {
    p_cf > 0.0 && rng.random::<f64>() < p_cf
}

/// `Σ ‖a − b‖² / (N·T_f)`, with `b` a constant.
fn sq_dist(g: &mut Graph, a: Var, b: &Tensor, t_f: usize) -> Var {
    let n = b.rows;
    let c = g.constant(b.clone());
    let d = g.sub(a, c);
    let d2 = g.square(d);
    let s = g.sum(d2);
    g.scale(s, 1.0 / (n * t_f) as f64)
}

/// `CoL_δ(Y) / (N·T_f)` with its analytic gradient.
fn collision(g: &mut Graph, y: Var, scene: &Scene, delta: f64, t_f: usize) -> Var {
    let f = crate::predictor::tensor_futures(g.value(y));
    let out = col_delta(&f, &scene.radii(), &ObstacleFrame::of(scene), &scene.map, delta);
    let k = 1.0 / (f.len() * t_f) as f64;
    let mut grad = futures_tensor(&out.gradient);
    grad.data.iter_mut().for_each(|v| *v *= k);
    g.custom_scalar(y, out.value * k, grad)
}

pub struct Stage2Trainer {
    pub cfg: Stage2Config,
    pred: Predictor,
    den: Denoiser,
    weights: PotentialWeights,
    schedule: NoiseSchedule,
    max_halvings: usize,
    assembler: Arc<dyn SceneAssembler>,
    teacher_mode: Arc<dyn TeacherStrategy>,
    token_source: Arc<dyn TokenSource>,
    /// θ̄: a full copy of the store whose `pred.*` entries track the EMA.
    pub teacher: ParamStore,
    opt: AdamW,
    ids: Vec<ParamId>,
    pub steps: usize,
    pub cf_batches: usize,
}

impl Stage2Trainer {
    pub fn new(model: &Model, total_steps: usize) -> Result<Self, Stage2Error> {
        let cfg = model.cfg.stage2.clone();
        let opts = model.inference_options();
        let assembler = AssemblerRegistry::default().get(&opts.assembler)?;
        let teacher_mode = TeacherRegistry::default()
            .get(&cfg.teacher_mode)
            .ok_or_else(|| Stage2Error::Config(format!("unknown teacher mode {:?}", cfg.teacher_mode)))?;
        let token_source = TokenSourceRegistry::with_noise(cfg.sigma_noise)
            .get(&cfg.token_source)
            .ok_or_else(|| Stage2Error::Config(format!("unknown token source {:?}", cfg.token_source)))?;
        let ids = Predictor::param_ids(&model.store);
        Ok(Self {
            opt: AdamW::new(&model.store, cfg.lr, cfg.weight_decay, total_steps.max(1)),
            cfg,
            pred: model.pred.clone(),
            den: model.den.clone(),
            weights: model.cfg.potentials.clone(),
            schedule: model.cfg.denoiser.schedule(),
            max_halvings: model.cfg.denoiser.max_halvings,
            assembler,
            teacher_mode,
            token_source,
            teacher: model.store.clone(),
            ids,
            steps: 0,
            cf_batches: 0,
        })
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn ckd_enabled(&self) -> bool {
        self.cfg.use_ckd && self.teacher_mode.target(&self.weights) != TeacherTarget::Absent
    }

    fn refine(
        &self,
        store: &ParamStore,
        scene: &Scene,
        prep: &Prepared,
        token: V2,
        y: &Futures,
        weights: &PotentialWeights,
    ) -> Result<Futures, DenoiseError> {
        let input = RefineInput {
            scene,
            context: &prep.context,
            token,
        };
        Ok(self.den.refine(store, &input, y, &self.schedule, weights, self.max_halvings)?.0)
    }

    /// Candidates and the selected (top-1) candidate index.
    fn select(
        &self,
        g: &mut Graph,
        out: &PredictorOutputs,
        scene: &Scene,
        seed: u64,
    ) -> Result<(Vec<Vec<usize>>, Option<Var>, usize), Stage2Error> {
        let assembled = self.pred.assemble(out, &scene.radii(), self.assembler.as_ref(), seed)?;
        if !self.cfg.use_selector {
            return Ok((assembled.assignments, None, 0));
        }
        let logits = self.pred.selector_logits(g, out, &assembled.assignments);
        let top = argmax(&g.value(logits).data);
        Ok((assembled.assignments, Some(logits), top))
    }

    /// `L_GT` for one episode, conditioned on the realised endpoint.
    pub fn supervised_branch(
        &self,
        g: &mut Graph,
        ep: &Episode,
        prep: &Prepared,
        seed: u64,
    ) -> Result<(Var, GtTerms, SceneEmbedding), Stage2Error> {
        let cfg = &self.cfg;
        let t_f = self.pred.cfg.t_f;
        let scene = &ep.scene;
        let n = scene.num_agents();
        let token = ep.gt_endpoint;
        let out = self.pred.forward(g, scene, token);
        let mm = out.marginals.num_modes();
        let gt = futures_tensor(&ep.gt_futures);
        let mut terms = GtTerms::default();

        // closest mode per agent
        let best: Vec<usize> = (0..n)
            .map(|i| {
                let errs: Vec<f64> = out.marginals.trajs[i]
                    .iter()
                    .map(|tr| -ade_fde(&vec![tr.clone()], &vec![ep.gt_futures[i].clone()]).0)
                    .collect();
                argmax(&errs)
            })
            .collect();
        let idx: Vec<usize> = best.iter().enumerate().map(|(i, &m)| i * mm + m).collect();
        let picked = g.gather_rows(out.trajs, &idx);
        let gt_c = g.constant(gt.clone());
        let diff = g.sub(picked, gt_c);
        let hub = g.smooth_l1(diff);
        let hub = g.sum(hub);
        let marginal = g.scale(hub, 1.0 / (n * t_f) as f64);
        let mut ces = Vec::with_capacity(n);
        for (i, &m) in best.iter().enumerate() {
            let row = g.slice_rows(out.mode_logits, i, 1);
            ces.push(g.cross_entropy(row, m));
        }
        let ce = g.concat_rows(&ces);
        let ce = g.sum(ce);
        let mode_ce = g.scale(ce, 1.0 / n as f64);
        terms.marginal = g.value(marginal).item();
        terms.mode_ce = g.value(mode_ce).item();
        let a = g.scale(marginal, cfg.w_marginal);
        let b = g.scale(mode_ce, cfg.w_mode);
        let mut sup = g.add(a, b);

        let (cands, logits, top) = self.select(g, &out, scene, seed)?;
        if let Some(logits) = logits {
            let fdes: Vec<f64> = cands
                .iter()
                .map(|a| -ade_fde(&out.marginals.scene_of(a), &ep.gt_futures).1)
                .collect();
            let sel = g.cross_entropy(logits, argmax(&fdes));
            let y_sel = self.pred.scene_var(g, &out, &cands[top]);
            let joint = sq_dist(g, y_sel, &gt, t_f);
            terms.selector_ce = g.value(sel).item();
            terms.joint = g.value(joint).item();
            let s = g.scale(sel, cfg.w_selector);
            let j = g.scale(joint, cfg.w_joint);
            sup = g.add(sup, s);
            sup = g.add(sup, j);
        }
        terms.sup = g.value(sup).item();
        let mut total = g.scale(sup, cfg.lambda_raw);

        let (lc, ls) = (cfg.cons_weight(), cfg.safe_weight());
        if lc > 0.0 || ls > 0.0 {
            let y_raw = self.pred.scene_var(g, &out, &cands[top]);
            if lc > 0.0 {
                let raw = out.marginals.scene_of(&cands[top]);
                let refined = self.refine(g.store(), scene, prep, token, &raw, &self.weights)?;
                let cons = sq_dist(g, y_raw, &futures_tensor(&refined), t_f);
                terms.cons = g.value(cons).item();
                let c = g.scale(cons, lc);
                total = g.add(total, c);
            }
            if ls > 0.0 {
                let safe = collision(g, y_raw, scene, cfg.delta, t_f);
                terms.safe = g.value(safe).item();
                let s = g.scale(safe, ls);
                total = g.add(total, s);
            }
        }
        terms.total = g.value(total).item();
        Ok((total, terms, out.embedding))
    }

    /// `L_KD` under a counterfactual token; `None` when no alternative token exists.
    #[allow(clippy::too_many_arguments)]
    pub fn ckd_branch(
        &self,
        g: &mut Graph,
        ep: &Episode,
        prep: &Prepared,
        emb: SceneEmbedding,
        rng: &mut dyn RngCore,
    ) -> Result<Option<(Var, KdTerms)>, Stage2Error> {
        let cfg = &self.cfg;
        let t_f = self.pred.cfg.t_f;
        let scene = &ep.scene;
        let Some(token) = self.token_source.sample(&prep.bank, prep.k_star, ep.gt_endpoint, rng) else {
            return Ok(None);
        };
        let seed = rng.next_u64();
        let stu = self.pred.forward_from(g, scene, emb, token);
        let (cands, _, top) = self.select(g, &stu, scene, seed)?;
        let y_stu = self.pred.scene_var(g, &stu, &cands[top]);
        let target = self.teacher_mode.target(&self.weights);
        if target == TeacherTarget::Absent {
            return Ok(None);
        }
        let y_teach = {
            let mut tg = Graph::new(&self.teacher);
            let out = self.pred.forward(&mut tg, scene, token);
            let (tc, _, tt) = self.select(&mut tg, &out, scene, seed)?;
            out.marginals.scene_of(&tc[tt])
        };
        let y_teach = match &target {
            TeacherTarget::Refined(w) => self.refine(g.store(), scene, prep, token, &y_teach, w)?,
            _ => y_teach,
        };
        let mut terms = KdTerms::default();
        let kd = sq_dist(g, y_stu, &futures_tensor(&y_teach), t_f);
        terms.kd = g.value(kd).item();
        let mut total = g.scale(kd, cfg.lambda_kd);
        let ls = cfg.safe_weight();
        if ls > 0.0 {
            let safe = collision(g, y_stu, scene, cfg.delta, t_f);
            terms.safe = g.value(safe).item();
            let s = g.scale(safe, ls);
            total = g.add(total, s);
        }
        terms.total = g.value(total).item();
        Ok(Some((total, terms)))
    }

    /// One batch: supervised branch always, distillation with probability
    /// `p_cf` (drawn once), AdamW on `pred.*`, then the EMA update.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        batch: &[(&Episode, &Prepared)],
        rng: &mut impl Rng,
    ) -> Result<StepBreakdown, Stage2Error> {
        let cf = self.ckd_enabled() && draw_cf(self.cfg.p_cf, rng);
        let bs = batch.len().max(1) as f64;
        let mut grads = Grads::new(store);
        let mut br = StepBreakdown {
            cf,
            ..Default::default()
        };
        for &(ep, prep) in batch {
            let mut g = Graph::new(store);
            let seed = rng.next_u64();
            let (l_gt, gt, emb) = self.supervised_branch(&mut g, ep, prep, seed)?;
            let mut loss = l_gt;
            if cf {
                if let Some((l_kd, kd)) = self.ckd_branch(&mut g, ep, prep, emb, rng)? {
                    loss = g.add(loss, l_kd);
                    accumulate_kd(&mut br.kd, &kd, bs);
                }
            }
            accumulate_gt(&mut br.gt, &gt, bs);
            br.l_s2 += g.value(loss).item() / bs;
            let scaled = g.scale(loss, 1.0 / bs);
            g.backward(scaled, &mut grads)?;
        }
        br.l_gt = br.gt.total;
        br.l_kd = br.kd.total;
        grads.clip(self.cfg.grad_clip);
        self.opt.step(store, &grads, &self.ids);
        ema_update(&mut self.teacher, store, &self.ids, self.cfg.tau_at(self.steps))?;
        self.steps += 1;
        self.cf_batches += cf as usize;
        Ok(br)
    }
}

fn accumulate_gt(acc: &mut GtTerms, t: &GtTerms, bs: f64) {
    acc.marginal += t.marginal / bs;
    acc.mode_ce += t.mode_ce / bs;
    acc.selector_ce += t.selector_ce / bs;
    acc.joint += t.joint / bs;
    acc.sup += t.sup / bs;
    acc.cons += t.cons / bs;
    acc.safe += t.safe / bs;
    acc.total += t.total / bs;
}

fn accumulate_kd(acc: &mut KdTerms, t: &KdTerms, bs: f64) {
    acc.kd += t.kd / bs;
    acc.safe += t.safe / bs;
    acc.total += t.total / bs;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Components,
    PCf,
    Teacher,
    TokenSource,
}

impl std::str::FromStr for AblationAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "components" => Ok(Self::Components),
            "p_cf" => Ok(Self::PCf),
            "teacher" => Ok(Self::Teacher),
            "token_source" => Ok(Self::TokenSource),
            _ => Err(format!("unknown ablation axis {s:?} (components, p_cf, teacher, token_source)")),
        }
    }
}

/// Named Stage-2 configurations along one ablation axis, derived from `base`.
pub fn ablation_variants(axis: AblationAxis, base: &Stage2Config) -> Vec<(String, Stage2Config)> {
    let with = |f: &dyn Fn(&mut Stage2Config)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::Components => [
            ("random", false, false, false),
            ("+JS", true, false, false),
            ("+JS+SGD", true, true, false),
            ("+JS+SGD+CKD", true, true, true),
        ]
        .into_iter()
        .map(|(name, sel, sgd, ckd)| {
            let c = with(&|c| {
                c.use_selector = sel;
                c.use_sgd = sgd;
                c.use_ckd = ckd;
            });
            (name.to_string(), c)
        })
        .collect(),
        AblationAxis::PCf => [0.0, 0.25, 0.5, 0.75]
            .into_iter()
            .map(|p| (format!("p_cf={p:.2}"), with(&|c| c.p_cf = p)))
            .collect(),
        AblationAxis::Teacher => ["none", "ema_only", "ema_unsafe_denoiser", "ema_sgd"]
            .into_iter()
            .map(|t| (t.to_string(), with(&|c| c.teacher_mode = t.to_string())))
            .collect(),
        AblationAxis::TokenSource => ["ranking", "random", "gt_noise"]
            .into_iter()
            .map(|t| (t.to_string(), with(&|c| c.token_source = t.to_string())))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub l_gt: f64,
    pub l_kd: f64,
    pub cf_rate: f64,
    pub val: MetricsTable,
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub epochs: Vec<Stage2Epoch>,
    pub teacher: ParamStore,
}

/// Trains `pred.*` with the tokenizer and denoiser frozen; one JSONL record
/// per epoch goes to `log`.
pub fn run_stage2(
    model: &mut Model,
    train: &[Episode],
    val: &[Episode],
    rng: &mut impl Rng,
    mut log: Option<&mut dyn Write>,
) -> Result<Stage2Outcome, Stage2Error> {
    let cfg = model.cfg.stage2.clone();
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut trainer = Stage2Trainer::new(model, cfg.epochs * per_epoch)?;
    let prepared: Vec<Prepared> = train.iter().map(|ep| Prepared::new(model, ep)).collect();
    let val = if cfg.val_max > 0 && cfg.val_max < val.len() { &val[..cfg.val_max] } else { val };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, rng);
        let (mut l_gt, mut l_kd, mut cf) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Episode, &Prepared)> = chunk.iter().map(|&i| (&train[i], &prepared[i])).collect();
            let br = trainer.step(&mut model.store, &batch, rng)?;
            l_gt += br.l_gt;
            l_kd += br.l_kd;
            cf += br.cf as usize;
        }
        let (table, _) = model.evaluate(val, &model.inference_options())?;
        let nb = per_epoch.max(1) as f64;
        let rec = Stage2Epoch {
            epoch,
            l_gt: l_gt / nb,
            l_kd: l_kd / nb,
            cf_rate: cf as f64 / nb,
            val: table,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec).expect("epoch record serializes"))?;
        }
        epochs.push(rec);
    }
    Ok(Stage2Outcome {
        epochs,
        teacher: trainer.teacher,
    })
}
