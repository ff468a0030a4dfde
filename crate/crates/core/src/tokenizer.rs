//! Stage-1 ego intention tokenizer: a bank of learned mode embeddings that
//! proposes endpoint tokens with a categorical distribution, trained
//! winner-takes-all, plus the counterfactual token sources.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoder::{SceneEncoder, POS_SCALE};
use crate::geom::{Scene, V2};
use crate::nn::{softmax, AdamW, Graph, Grads, Linear, Mlp, NnError, ParamId, ParamStore, Tensor, Var};
use crate::synth::Episode;

pub const PREFIX: &str = "tok.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub lambda_xy: f64,
    pub lambda_cls: f64,
    pub lambda_div: f64,
    pub sigma_div: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 20,
            batch_size: 16,
            grad_clip: 10.0,
            lambda_xy: 1.0,
            lambda_cls: 0.5,
            lambda_div: 0.1,
            sigma_div: 2.0,
        }
    }
}

impl Stage1Config {
    pub fn check(&self) -> Vec<String> {
        let mut e = Vec::new();
        if !(self.lr > 0.0) {
            e.push("stage1.lr must be positive".into());
        }
        if self.batch_size == 0 {
            e.push("stage1.batch_size must be positive".into());
        }
        if [self.lambda_xy, self.lambda_cls, self.lambda_div, self.weight_decay].iter().any(|w| !(*w >= 0.0)) {
            e.push("stage1 loss weights must be >= 0".into());
        }
        if !(self.sigma_div > 0.0) {
            e.push("stage1.sigma_div must be positive".into());
        }
        e
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionToken {
    /// Mode index `k` in the bank (stable across sorting).
    pub index: usize,
    pub endpoint: V2,
    pub logit: f64,
    pub prob: f64,
}

/// Tokens sorted by probability, descending; ties keep index order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenBank {
    pub tokens: Vec<IntentionToken>,
}

impl TokenBank {
    pub fn from_raw(endpoints: &[V2], logits: &[f64]) -> Self {
        let probs = softmax(logits);
        let mut tokens: Vec<IntentionToken> = endpoints
            .iter()
            .zip(logits)
            .zip(&probs)
            .enumerate()
            .map(|(index, ((&endpoint, &logit), &prob))| IntentionToken {
                index,
                endpoint,
                logit,
                prob,
            })
            .collect();
        tokens.sort_by(|a, b| b.prob.total_cmp(&a.prob));
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn by_index(&self, k: usize) -> Option<&IntentionToken> {
        self.tokens.iter().find(|t| t.index == k)
    }

    /// Endpoints in mode-index order.
    pub fn endpoints(&self) -> Vec<V2> {
        let mut v = vec![V2::ZERO; self.tokens.len()];
        for t in &self.tokens {
            v[t.index] = t.endpoint;
        }
        v
    }
}

/// Closest endpoint to `gt`; ties go to the lowest index.
pub fn winner_index(endpoints: &[V2], gt: V2) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, e) in endpoints.iter().enumerate() {
        let d = e.dist(gt);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Graph handles of a tokenizer forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TokenOutputs {
    /// K × 2, meters in the scene frame.
    pub endpoints: Var,
    /// 1 × K.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub encoder: SceneEncoder,
    modes: ParamId,
    f_mode: Mlp,
    end_head: Linear,
    logit_head: Linear,
    pub k: usize,
}

impl Tokenizer {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let modes = Tensor::from_vec(
            cfg.k_intent,
            cfg.d_e,
            (0..cfg.k_intent * cfg.d_e).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        Self {
            encoder: SceneEncoder::new(store, "tok.enc", cfg, rng),
            modes: store.add("tok.modes", modes),
            f_mode: Mlp::new(store, "tok.f_mode", &[cfg.d + cfg.d_e, cfg.hidden, cfg.hidden], rng),
            end_head: Linear::new(store, "tok.end", cfg.hidden, 2, rng),
            logit_head: Linear::new(store, "tok.logit", cfg.hidden, 1, rng),
            k: cfg.k_intent,
        }
    }

    pub fn forward(&self, g: &mut Graph, scene: &Scene) -> TokenOutputs {
        let emb = self.encoder.encode(g, scene);
        self.forward_context(g, emb.context, scene.ego().last().position)
    }

    /// `h_k = f_mode([c; e_k])`; endpoint and logit heads on `h_k`.
    pub fn forward_context(&self, g: &mut Graph, context: Var, ego_last: V2) -> TokenOutputs {
        let c = g.repeat_rows(context, self.k);
        let e = g.param(self.modes);
        let x = g.concat_cols(&[c, e]);
        let h = self.f_mode.forward(g, x);
        let h = g.relu(h);
        let off = self.end_head.forward(g, h);
        let off = g.scale(off, POS_SCALE);
        let base = g.constant(Tensor::from_vec(self.k, 2, [ego_last.x, ego_last.y].repeat(self.k)));
        let endpoints = g.add(off, base);
        let l = self.logit_head.forward(g, h);
        let logits = g.reshape(l, 1, self.k);
        TokenOutputs { endpoints, logits }
    }

    pub fn propose(&self, store: &ParamStore, scene: &Scene) -> TokenBank {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, scene);
        bank_from(&g, out)
    }

    pub fn param_ids(store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix(PREFIX).collect()
    }
}

pub fn bank_from(g: &Graph, out: TokenOutputs) -> TokenBank {
    let e = g.value(out.endpoints);
    let endpoints: Vec<V2> = (0..e.rows).map(|r| V2::new(e.get(r, 0), e.get(r, 1))).collect();
    TokenBank::from_raw(&endpoints, &g.value(out.logits).data)
}

/// Winner-takes-all loss: SmoothL1 on the closest endpoint, cross-entropy
/// toward it, and Gaussian repulsion over ordered endpoint pairs.
pub fn stage1_loss(g: &mut Graph, out: TokenOutputs, gt: V2, cfg: &Stage1Config) -> (Var, usize) {
    let e = g.value(out.endpoints).clone();
    let k = e.rows;
    let endpoints: Vec<V2> = (0..k).map(|r| V2::new(e.get(r, 0), e.get(r, 1))).collect();
    let k_star = winner_index(&endpoints, gt);

    let win = g.slice_rows(out.endpoints, k_star, 1);
    let target = g.constant(Tensor::row_vector(vec![gt.x, gt.y]));
    let diff = g.sub(win, target);
    let sl = g.smooth_l1(diff);
    let l_xy = g.sum(sl);
    let l_xy = g.scale(l_xy, cfg.lambda_xy);
    let ce = g.cross_entropy(out.logits, k_star);
    let l_cls = g.scale(ce, cfg.lambda_cls);
    let mut loss = g.add(l_xy, l_cls);
    if k > 1 && cfg.lambda_div > 0.0 {
        let div = diversity(g, out.endpoints, cfg.sigma_div);
        let l_div = g.scale(div, cfg.lambda_div);
        loss = g.add(loss, l_div);
    }
    (loss, k_star)
}

/// `Σ_{k≠k'} exp(−‖ĝ_k − ĝ_k'‖² / σ²)` over ordered pairs.
pub fn diversity(g: &mut Graph, endpoints: Var, sigma: f64) -> Var {
    let k = g.shape(endpoints).0;
    let (mut is, mut js) = (Vec::new(), Vec::new());
    for i in 0..k {
        for j in 0..k {
            if i != j {
                is.push(i);
                js.push(j);
            }
        }
    }
    let a = g.gather_rows(endpoints, &is);
    let b = g.gather_rows(endpoints, &js);
    let d = g.sub(a, b);
    let d2 = g.square(d);
    let ones = g.constant(Tensor::filled(2, 1, 1.0));
    let dist2 = g.matmul(d2, ones);
    let z = g.scale(dist2, -1.0 / (sigma * sigma));
    let ex = g.exp(z);
    g.sum(ex)
}

/// Counterfactual token strategy; `None` when no alternative exists.
pub trait TokenSource: Send + Sync {
    fn name(&self) -> &'static str;
    fn sample(&self, bank: &TokenBank, k_star: usize, gt_endpoint: V2, rng: &mut dyn RngCore) -> Option<V2>;
}

/// Highest-probability token other than the winner.
pub struct RankingSource;
/// Uniform over the non-winner tokens.
pub struct RandomSource;
/// Ground-truth endpoint plus isotropic Gaussian noise.
pub struct GtNoiseSource {
    pub sigma: f64,
}

impl TokenSource for RankingSource {
    fn name(&self) -> &'static str {
        "ranking"
    }
    fn sample(&self, bank: &TokenBank, k_star: usize, _gt: V2, _rng: &mut dyn RngCore) -> Option<V2> {
        bank.tokens.iter().find(|t| t.index != k_star).map(|t| t.endpoint)
    }
}

impl TokenSource for RandomSource {
    fn name(&self) -> &'static str {
        "random"
    }
    fn sample(&self, bank: &TokenBank, k_star: usize, _gt: V2, rng: &mut dyn RngCore) -> Option<V2> {
        if bank.len() < 2 {
            return None;
        }
        let mut k = rng.random_range(0..bank.len() - 1);
        if k >= k_star {
            k += 1;
        }
        bank.by_index(k).map(|t| t.endpoint)
    }
}

impl TokenSource for GtNoiseSource {
    fn name(&self) -> &'static str {
        "gt_noise"
    }
    fn sample(&self, bank: &TokenBank, _k_star: usize, gt: V2, rng: &mut dyn RngCore) -> Option<V2> {
        if bank.len() < 2 {
            return None;
        }
        if self.sigma == 0.0 {
            return Some(gt);
        }
        let n = Normal::new(0.0, self.sigma).expect("sigma is finite");
        Some(V2::new(gt.x + n.sample(rng), gt.y + n.sample(rng)))
    }
}

#[derive(Clone)]
pub struct TokenSourceRegistry {
    sources: BTreeMap<&'static str, Arc<dyn TokenSource>>,
}

impl TokenSourceRegistry {
    pub fn with_noise(sigma_noise: f64) -> Self {
        let mut r = Self {
            sources: BTreeMap::new(),
        };
        r.register(Arc::new(RankingSource));
        r.register(Arc::new(RandomSource));
        r.register(Arc::new(GtNoiseSource { sigma: sigma_noise }));
        r
    }

    pub fn register(&mut self, s: Arc<dyn TokenSource>) {
        self.sources.insert(s.name(), s);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn TokenSource>> {
        self.sources.get(name).cloned()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.sources.keys().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub loss: f64,
    /// Mean best-of-K endpoint error on the validation split.
    pub val_min_endpoint_err: f64,
}

/// Minibatch AdamW over `tok.*` parameters.
pub fn train_stage1(
    store: &mut ParamStore,
    tok: &Tokenizer,
    train: &[Episode],
    val: &[Episode],
    cfg: &Stage1Config,
    rng: &mut impl Rng,
) -> Result<Vec<Stage1Epoch>, NnError> {
    let ids = Tokenizer::param_ids(store);
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(store, cfg.lr, cfg.weight_decay, cfg.epochs * batches_per_epoch);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Grads::new(store);
            for &i in batch {
                let ep = &train[i];
                let mut g = Graph::new(store);
                let out = tok.forward(&mut g, &ep.scene);
                let (loss, _) = stage1_loss(&mut g, out, ep.gt_endpoint, cfg);
                let l = g.scale(loss, 1.0 / batch.len() as f64);
                total += g.value(loss).item();
                g.backward(l, &mut grads)?;
            }
            grads.clip(cfg.grad_clip);
            opt.step(store, &grads, &ids);
        }
        log.push(Stage1Epoch {
            epoch,
            loss: total / train.len().max(1) as f64,
            val_min_endpoint_err: min_endpoint_error(store, tok, val),
        });
    }
    Ok(log)
}

pub fn min_endpoint_error(store: &ParamStore, tok: &Tokenizer, eps: &[Episode]) -> f64 {
    if eps.is_empty() {
        return 0.0;
    }
    let s: f64 = eps
        .iter()
        .map(|ep| {
            let bank = tok.propose(store, &ep.scene);
            bank.tokens.iter().map(|t| t.endpoint.dist(ep.gt_endpoint)).fold(f64::INFINITY, f64::min)
        })
        .sum();
    s / eps.len() as f64
}

/// Fisher–Yates with the crate's RNG (stable across platforms).
pub fn shuffle<T>(v: &mut [T], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(endpoints: &[(f64, f64)], logits: &[f64]) -> TokenBank {
        let e: Vec<V2> = endpoints.iter().map(|&(x, y)| V2::new(x, y)).collect();
        TokenBank::from_raw(&e, logits)
    }

    #[test]
    fn probs_sum_to_one_and_sorted() {
        let b = bank(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], &[0.1, 2.0, 0.1]);
        let s: f64 = b.tokens.iter().map(|t| t.prob).sum();
        assert!((s - 1.0).abs() < 1e-12);
        let idx: Vec<usize> = b.tokens.iter().map(|t| t.index).collect();
        assert_eq!(idx, vec![1, 0, 2]);
        let single = bank(&[(4.0, 1.0)], &[-3.0]);
        assert_eq!(single.tokens[0].prob, 1.0);
    }

    fn graph_loss(endpoints: &[(f64, f64)], logits: &[f64], gt: V2, cfg: &Stage1Config) -> (f64, usize) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let k = endpoints.len();
        let e = g.constant(Tensor::from_vec(k, 2, endpoints.iter().flat_map(|&(x, y)| [x, y]).collect()));
        let l = g.constant(Tensor::row_vector(logits.to_vec()));
        let (loss, ks) = stage1_loss(&mut g, TokenOutputs { endpoints: e, logits: l }, gt, cfg);
        (g.value(loss).item(), ks)
    }

    #[test]
    fn exact_confident_winner_leaves_only_diversity() {
        let cfg = Stage1Config::default();
        let pts = [(0.0, 0.0), (5.0, 5.0), (-1.0, 2.0)];
        let (loss, ks) = graph_loss(&pts, &[0.0, 60.0, 0.0], V2::new(5.0, 5.0), &cfg);
        assert_eq!(ks, 1);
        let mut div = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let d2 = (pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2);
                    div += (-d2 / 4.0f64).exp();
                }
            }
        }
        assert!((loss - cfg.lambda_div * div).abs() < 1e-12, "{loss} vs {}", cfg.lambda_div * div);
    }

    #[test]
    fn coincident_modes_free_without_diversity() {
        let cfg = Stage1Config {
            lambda_div: 0.0,
            ..Stage1Config::default()
        };
        let (loss, ks) = graph_loss(&[(1.0, 1.0), (1.0, 1.0)], &[80.0, 0.0], V2::new(1.0, 1.0), &cfg);
        assert_eq!(ks, 0);
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn winner_is_shift_invariant_and_breaks_ties_low() {
        let cfg = Stage1Config::default();
        let pts = [(1.0, 0.0), (-1.0, 0.0), (3.0, 3.0)];
        let (_, a) = graph_loss(&pts, &[0.0, 1.0, 2.0], V2::ZERO, &cfg);
        let (_, b) = graph_loss(&pts, &[10.0, 11.0, 12.0], V2::ZERO, &cfg);
        assert_eq!((a, b), (0, 0));
    }

    #[test]
    fn diversity_gradient_pushes_coincident_endpoints_apart() {
        let mut store = ParamStore::new();
        let p = store.add("e", Tensor::from_vec(2, 2, vec![0.0, 0.0, 0.05, 0.0]));
        let dist = |s: &ParamStore| {
            let t = s.get(p);
            (t.get(0, 0) - t.get(1, 0)).hypot(t.get(0, 1) - t.get(1, 1))
        };
        let before = dist(&store);
        let mut grads = Grads::new(&store);
        {
            let mut g = Graph::new(&store);
            let e = g.param(p);
            let d = diversity(&mut g, e, 2.0);
            g.backward(d, &mut grads).unwrap();
        }
        let gt = grads.get(p).unwrap().clone();
        for (v, gv) in store.get_mut(p).data.iter_mut().zip(&gt.data) {
            *v -= 0.5 * gv;
        }
        assert!(dist(&store) > before);
    }

    #[test]
    fn two_token_sources_agree() {
        let b = bank(&[(0.0, 0.0), (3.0, 1.0)], &[1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reg = TokenSourceRegistry::with_noise(1.5);
        for name in ["ranking", "random"] {
            let s = reg.get(name).unwrap();
            assert_eq!(s.sample(&b, 0, V2::ZERO, &mut rng), Some(V2::new(3.0, 1.0)));
        }
        let gt = V2::new(7.0, -2.0);
        assert_eq!(GtNoiseSource { sigma: 0.0 }.sample(&b, 0, gt, &mut rng), Some(gt));
        let one = bank(&[(0.0, 0.0)], &[0.0]);
        for name in reg.names() {
            assert_eq!(reg.get(name).unwrap().sample(&one, 0, gt, &mut rng), None);
        }
    }

    #[test]
    fn ranking_skips_winner() {
        let b = bank(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], &[3.0, 2.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(RankingSource.sample(&b, 0, V2::ZERO, &mut rng), Some(V2::new(1.0, 0.0)));
        assert_eq!(RankingSource.sample(&b, 1, V2::ZERO, &mut rng), Some(V2::new(0.0, 0.0)));
    }

    #[test]
    fn random_source_is_uniform_over_non_winners() {
        let pts: Vec<(f64, f64)> = (0..6).map(|k| (k as f64, 0.0)).collect();
        let b = bank(&pts, &[0.0; 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let k_star = 2;
        let mut counts = [0usize; 6];
        let n = 10_000;
        for _ in 0..n {
            let e = RandomSource.sample(&b, k_star, V2::ZERO, &mut rng).unwrap();
            counts[e.x as usize] += 1;
        }
        assert_eq!(counts[k_star], 0);
        let expected = n as f64 / 5.0;
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != k_star)
            .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
            .sum();
        // χ²(4) upper 1% point
        assert!(chi2 < 13.277, "chi2 = {chi2}");
    }
}
