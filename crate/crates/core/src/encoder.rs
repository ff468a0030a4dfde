//! Scene encoder: per-agent temporal features, agent-axis attention,
//! category modulation, a two-stream map summary and the fused context.

use rand::Rng;

use crate::config::ModelConfig;
use crate::geom::{Scene, VectorMap, V2};
use crate::nn::{Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore, Tensor, TemporalConv, Gru, Var};

/// Position / speed / acceleration normalisers for network inputs.
pub const POS_SCALE: f64 = 10.0;
pub const VEL_SCALE: f64 = 5.0;
pub const ACC_SCALE: f64 = 2.0;

const AGENT_FEATS: usize = 8;
const PIECE_FEATS: usize = 4;

/// Graph handles for one encoded scene.
#[derive(Clone, Copy, Debug)]
pub struct SceneEmbedding {
    /// N × d.
    pub agent_feats: Var,
    /// 1 × d, max over non-ego agents (zeros when the ego is alone).
    pub social: Var,
    /// 1 × d.
    pub map_summary: Var,
    /// 1 × d.
    pub context: Var,
    /// N × 3d, rows `[f̃_i; social; m]`.
    pub per_agent: Var,
}

/// Map stream: one vertex MLP over polyline pieces, gated by the ego query.
#[derive(Clone, Debug)]
struct MapStream {
    piece: Mlp,
    key: Linear,
    value: Linear,
    null: ParamId,
}

impl MapStream {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let null = Tensor::from_vec(1, d, (0..d).map(|_| rng.random_range(-0.1..0.1)).collect());
        Self {
            piece: Mlp::new(store, &format!("{name}.piece"), &[PIECE_FEATS, d, d], rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            null: store.add(format!("{name}.null"), null),
        }
    }

    /// `elements` are vertex chains; each consecutive pair is one piece.
    fn forward(&self, g: &mut Graph, elements: &[Vec<V2>], query: Var) -> Var {
        let mut data = Vec::new();
        let mut sizes = Vec::new();
        for el in elements {
            let pieces = el.windows(2).count();
            if pieces == 0 {
                continue;
            }
            for w in el.windows(2) {
                data.extend_from_slice(&[w[0].x / POS_SCALE, w[0].y / POS_SCALE, w[1].x / POS_SCALE, w[1].y / POS_SCALE]);
            }
            sizes.push(pieces);
        }
        if sizes.is_empty() {
            return g.param(self.null);
        }
        let rows = data.len() / PIECE_FEATS;
        let x = g.constant(Tensor::from_vec(rows, PIECE_FEATS, data));
        let per_piece = self.piece.forward(g, x);
        let per_el = if sizes.iter().all(|&s| s == 1) {
            per_piece
        } else {
            g.group_max_rows(per_piece, &sizes)
        };
        let d = g.shape(per_el).1;
        let k = self.key.forward(g, per_el);
        let v = self.value.forward(g, per_el);
        let s = g.matmul_t(k, query);
        let s = g.scale(s, 1.0 / (d as f64).sqrt());
        let gate = g.sigmoid(s);
        let gated = g.mul_col(v, gate);
        g.max_rows(gated)
    }
}

#[derive(Clone, Debug)]
pub struct SceneEncoder {
    conv: TemporalConv,
    gru: Gru,
    att: MultiHeadAttention,
    ln: LayerNorm,
    cat_scale: ParamId,
    cat_shift: ParamId,
    query: Linear,
    soft: MapStream,
    hard: MapStream,
    null_map: ParamId,
    fuse: Mlp,
    pub d: usize,
}

impl SceneEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d;
        let jitter = |rng: &mut dyn rand::RngCore, base: f64| {
            Tensor::from_vec(2, d, (0..2 * d).map(|_| base + rng.random_range(-0.2..0.2)).collect())
        };
        let cat_scale = jitter(rng, 1.0);
        let cat_shift = jitter(rng, 0.0);
        let null_map = Tensor::from_vec(1, d, (0..d).map(|_| rng.random_range(-0.1..0.1)).collect());
        Self {
            conv: TemporalConv::new(store, &format!("{name}.conv"), AGENT_FEATS, d, rng),
            gru: Gru::new(store, &format!("{name}.gru"), d, d, rng),
            att: MultiHeadAttention::new(store, &format!("{name}.att"), d, cfg.heads, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            cat_scale: store.add(format!("{name}.cat_scale"), cat_scale),
            cat_shift: store.add(format!("{name}.cat_shift"), cat_shift),
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            soft: MapStream::new(store, &format!("{name}.soft"), d, rng),
            hard: MapStream::new(store, &format!("{name}.hard"), d, rng),
            null_map: store.add(format!("{name}.null_map"), null_map),
            fuse: Mlp::new(store, &format!("{name}.fuse"), &[3 * d, d, d], rng),
            d,
        }
    }

    pub fn encode(&self, g: &mut Graph, scene: &Scene) -> SceneEmbedding {
        let agent_feats = self.encode_agents(g, scene);
        let ego = g.slice_rows(agent_feats, 0, 1);
        let map_summary = self.encode_map(g, &scene.map, ego);
        let (social, context, per_agent) = self.fuse_context(g, agent_feats, map_summary);
        SceneEmbedding {
            agent_feats,
            social,
            map_summary,
            context,
            per_agent,
        }
    }

    /// Temporal conv → GRU → attention over agents (residual + norm) →
    /// per-category scale and shift.
    pub fn encode_agents(&self, g: &mut Graph, scene: &Scene) -> Var {
        let n = scene.num_agents();
        let t_p = scene.history_len();
        let seq: Vec<Tensor> = (0..t_p)
            .map(|t| {
                let mut m = Tensor::zeros(n, AGENT_FEATS);
                for (i, a) in scene.agents.iter().enumerate() {
                    let s = &a.history[t];
                    let row = [
                        s.position.x / POS_SCALE,
                        s.position.y / POS_SCALE,
                        s.heading.cos(),
                        s.heading.sin(),
                        s.velocity.x / VEL_SCALE,
                        s.velocity.y / VEL_SCALE,
                        s.acceleration.x / ACC_SCALE,
                        s.acceleration.y / ACC_SCALE,
                    ];
                    m.data[i * AGENT_FEATS..(i + 1) * AGENT_FEATS].copy_from_slice(&row);
                }
                m
            })
            .collect();
        let xs = self.conv.forward_const(g, &seq);
        let h = self.gru.run(g, &xs);
        let a = self.att.forward(g, h, h);
        let r = g.add(h, a);
        let f = self.ln.forward(g, r);
        let cats: Vec<usize> = scene.agents.iter().map(|a| a.attr.category.index()).collect();
        let sc = g.param(self.cat_scale);
        let sh = g.param(self.cat_shift);
        let scale = g.gather_rows(sc, &cats);
        let shift = g.gather_rows(sh, &cats);
        let f = g.mul(f, scale);
        g.add(f, shift)
    }

    /// Soft stream: drivable boundaries and slot outlines; hard stream:
    /// obstacle segments. Each is gated by the ego query and max-pooled; the
    /// summary is the elementwise max of the two.
    pub fn encode_map(&self, g: &mut Graph, map: &VectorMap, ego_feat: Var) -> Var {
        if map.is_empty() {
            return g.param(self.null_map);
        }
        let q = self.query.forward(g, ego_feat);
        let mut soft: Vec<Vec<V2>> = map.soft_polylines.clone();
        for slot in &map.slots {
            let c = slot.corners();
            soft.push(vec![c[0], c[1], c[2], c[3], c[0]]);
        }
        let hard: Vec<Vec<V2>> = map.hard_segments.iter().map(|s| vec![s.a, s.b]).collect();
        let ms = self.soft.forward(g, &soft, q);
        let mh = self.hard.forward(g, &hard, q);
        let both = g.concat_rows(&[ms, mh]);
        g.max_rows(both)
    }

    /// `c = MLP([f̃_0; f_social; m])`, `h_i = [f̃_i; f_social; m]`.
    pub fn fuse_context(&self, g: &mut Graph, agent_feats: Var, map_summary: Var) -> (Var, Var, Var) {
        let n = g.shape(agent_feats).0;
        let social = if n > 1 {
            let others = g.slice_rows(agent_feats, 1, n - 1);
            g.max_rows(others)
        } else {
            g.constant(Tensor::zeros(1, self.d))
        };
        let ego = g.slice_rows(agent_feats, 0, 1);
        let fused_in = g.concat_cols(&[ego, social, map_summary]);
        let context = self.fuse.forward(g, fused_in);
        let soc_rep = g.repeat_rows(social, n);
        let map_rep = g.repeat_rows(map_summary, n);
        let per_agent = g.concat_cols(&[agent_feats, soc_rep, map_rep]);
        (social, context, per_agent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Agent, AgentAttr, AgentState, Category, Segment};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d: 16,
            heads: 4,
            ..ModelConfig::default()
        }
    }

    fn agent(cat: Category, x0: f64, y0: f64, vx: f64) -> Agent {
        let attr = match cat {
            Category::Vehicle => AgentAttr::with_derived_radius(cat, 4.6, 1.9),
            Category::Pedestrian => AgentAttr::with_derived_radius(cat, 0.6, 0.6),
        };
        let history = (0..10)
            .map(|t| AgentState {
                position: V2::new(x0 + vx * 0.4 * t as f64, y0),
                heading: 0.0,
                velocity: V2::new(vx, 0.0),
                acceleration: V2::ZERO,
            })
            .collect();
        Agent { attr, history }
    }

    fn scene(agents: Vec<Agent>) -> Scene {
        let map = VectorMap {
            soft_polylines: vec![vec![V2::new(-20.0, 3.5), V2::new(0.0, 3.5), V2::new(20.0, 3.5)]],
            hard_segments: vec![Segment::new(V2::new(-5.0, -4.0), V2::new(5.0, -4.0))],
            slots: vec![],
        };
        Scene::new(0.4, agents, map)
    }

    fn setup() -> (ParamStore, SceneEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = SceneEncoder::new(&mut store, "enc", &cfg(), &mut rng);
        (store, enc)
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows).map(|r| t.row(r).to_vec()).collect()
    }

    #[test]
    fn identical_agents_get_identical_features() {
        let (store, enc) = setup();
        let s = scene(vec![
            agent(Category::Vehicle, -8.0, -1.75, 2.0),
            agent(Category::Vehicle, 5.0, 1.75, -2.0),
            agent(Category::Vehicle, 5.0, 1.75, -2.0),
        ]);
        let mut g = Graph::new(&store);
        let f = enc.encode_agents(&mut g, &s);
        let r = rows(g.value(f));
        assert_eq!(r[1], r[2]);
    }

    #[test]
    fn permuting_non_ego_agents_permutes_rows() {
        let (store, enc) = setup();
        let a = vec![
            agent(Category::Vehicle, -8.0, -1.75, 2.0),
            agent(Category::Vehicle, 5.0, 1.75, -2.0),
            agent(Category::Pedestrian, 2.0, 5.0, 0.5),
        ];
        let s1 = scene(a.clone());
        let s2 = scene(vec![a[0].clone(), a[2].clone(), a[1].clone()]);
        let mut g = Graph::new(&store);
        let e1 = enc.encode(&mut g, &s1);
        let e2 = enc.encode(&mut g, &s2);
        let (r1, r2) = (rows(g.value(e1.agent_feats)), rows(g.value(e2.agent_feats)));
        for (x, y) in [(0, 0), (1, 2), (2, 1)] {
            for (p, q) in r1[x].iter().zip(&r2[y]) {
                assert!((p - q).abs() < 1e-12);
            }
        }
        for (p, q) in g.value(e1.context).data.iter().zip(&g.value(e2.context).data) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn category_changes_features() {
        let (store, enc) = setup();
        let mut a = vec![agent(Category::Vehicle, -8.0, -1.75, 2.0), agent(Category::Vehicle, 5.0, 1.75, -1.0)];
        let s1 = scene(a.clone());
        a[1].attr.category = Category::Pedestrian;
        let s2 = scene(a);
        let mut g = Graph::new(&store);
        let f1 = enc.encode_agents(&mut g, &s1);
        let f2 = enc.encode_agents(&mut g, &s2);
        assert_ne!(g.value(f1).row(1), g.value(f2).row(1));
    }

    #[test]
    fn map_duplicates_and_empty_map() {
        let (store, enc) = setup();
        let s = scene(vec![agent(Category::Vehicle, -8.0, -1.75, 2.0)]);
        let mut dup = s.clone();
        dup.map.hard_segments.push(dup.map.hard_segments[0]);
        dup.map.soft_polylines.push(dup.map.soft_polylines[0].clone());
        let mut g = Graph::new(&store);
        let e1 = enc.encode(&mut g, &s);
        let e2 = enc.encode(&mut g, &dup);
        assert_eq!(g.value(e1.map_summary), g.value(e2.map_summary));

        let mut empty = s.clone();
        empty.map = VectorMap::default();
        let mut other = empty.clone();
        other.agents[0].history[9].position.x += 3.0;
        let e3 = enc.encode(&mut g, &empty);
        let e4 = enc.encode(&mut g, &other);
        assert_eq!(g.value(e3.map_summary), g.value(e4.map_summary));
        assert_eq!(g.value(e3.map_summary), store.get(enc.null_map));
    }

    #[test]
    fn fused_shapes_and_blocks() {
        let (store, enc) = setup();
        let s = scene(vec![
            agent(Category::Vehicle, -8.0, -1.75, 2.0),
            agent(Category::Vehicle, 5.0, 1.75, -2.0),
            agent(Category::Pedestrian, 2.0, 5.0, 0.5),
        ]);
        let mut g = Graph::new(&store);
        let e = enc.encode(&mut g, &s);
        let d = enc.d;
        assert_eq!(g.shape(e.per_agent), (3, 3 * d));
        assert_eq!(g.shape(e.context), (1, d));
        let h = g.value(e.per_agent);
        assert_eq!(h.row(0)[d..], h.row(1)[d..]);
        assert_ne!(h.row(0)[..d], h.row(1)[..d]);
    }

    #[test]
    fn lone_ego_has_zero_social() {
        let (store, enc) = setup();
        let s = scene(vec![agent(Category::Vehicle, -8.0, -1.75, 2.0)]);
        let mut g = Graph::new(&store);
        let e = enc.encode(&mut g, &s);
        assert!(g.value(e.social).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_fuse_inputs_give_bias_path() {
        let (store, enc) = setup();
        let mut g = Graph::new(&store);
        let z = g.constant(Tensor::zeros(2, enc.d));
        let m = g.constant(Tensor::zeros(1, enc.d));
        let (_, c, _) = enc.fuse_context(&mut g, z, m);
        // zero input: first layer is its bias (zero) → relu → second layer bias (zero)
        assert!(g.value(c).data.iter().all(|&v| v == 0.0));
    }
}
