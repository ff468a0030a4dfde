//! Composite geometric potential C(Y) over joint futures: agent overlap,
//! obstacle clearance, ego path tube, ego endpoint anchoring and motion
//! smoothness. Every term returns its value and the analytic gradient with
//! respect to all future positions.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geom::{
    derive_headings, footprint_at, heading_backward, point_segment_distance, point_segment_distance_grad,
    rect_segment_distance_grad, AgentAttr, Futures, Scene, Segment, VectorMap, V2,
};

/// Value of one term plus `∂value/∂futures`.
#[derive(Clone, Debug, PartialEq)]
pub struct TermOutput {
    pub value: f64,
    pub gradient: Futures,
}

impl TermOutput {
    pub fn zeros(shape_of: &Futures) -> Self {
        Self {
            value: 0.0,
            gradient: zeros_like(shape_of),
        }
    }
}

pub fn zeros_like(f: &Futures) -> Futures {
    f.iter().map(|a| vec![V2::ZERO; a.len()]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialWeights {
    pub w_ov: f64,
    pub w_obs: f64,
    pub w_tube: f64,
    pub w_end: f64,
    pub w_sm: f64,
    pub m_obs: f64,
    pub r_tube: f64,
    pub smooth_v_max: f64,
    pub smooth_a_max: f64,
}

impl Default for PotentialWeights {
    fn default() -> Self {
        Self {
            w_ov: 1.0,
            w_obs: 1.0,
            w_tube: 1.0,
            w_end: 1.0,
            w_sm: 1.0,
            m_obs: 0.3,
            r_tube: 2.0,
            smooth_v_max: 8.0,
            smooth_a_max: 4.0,
        }
    }
}

impl PotentialWeights {
    /// All term weights zeroed; margins kept.
    pub fn disabled(&self) -> Self {
        Self {
            w_ov: 0.0,
            w_obs: 0.0,
            w_tube: 0.0,
            w_end: 0.0,
            w_sm: 0.0,
            ..self.clone()
        }
    }

    pub fn weight(&self, term: &str) -> f64 {
        match term {
            "overlap" => self.w_ov,
            "obstacle" => self.w_obs,
            "tube" => self.w_tube,
            "endpoint" => self.w_end,
            "smooth" => self.w_sm,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ws = [self.w_ov, self.w_obs, self.w_tube, self.w_end, self.w_sm];
        if ws.iter().any(|w| !(*w >= 0.0)) {
            return Err("potential weights must be >= 0".into());
        }
        let margins = [self.m_obs, self.r_tube, self.smooth_v_max, self.smooth_a_max];
        if margins.iter().any(|m| !(*m > 0.0)) {
            return Err("potential margins must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerTerm {
    pub overlap: f64,
    pub obstacle: f64,
    pub tube: f64,
    pub endpoint: f64,
    pub smooth: f64,
}

impl PerTerm {
    pub fn sum(&self) -> f64 {
        self.overlap + self.obstacle + self.tube + self.endpoint + self.smooth
    }

    fn set(&mut self, name: &str, v: f64) {
        match name {
            "overlap" => self.overlap = v,
            "obstacle" => self.obstacle = v,
            "tube" => self.tube = v,
            "endpoint" => self.endpoint = v,
            "smooth" => self.smooth = v,
            _ => {}
        }
    }
}

/// Weighted per-term values (these sum to `total`) and the total gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialReport {
    pub total: f64,
    pub per_term: PerTerm,
    pub gradient: Futures,
}

/// Everything a term may read besides the futures themselves.
#[derive(Clone, Copy, Debug)]
pub struct PotentialContext<'a> {
    pub scene: &'a Scene,
    pub token: V2,
    pub weights: &'a PotentialWeights,
}

pub trait PotentialTerm: Send + Sync {
    fn name(&self) -> &'static str;
    fn evaluate(&self, ctx: &PotentialContext<'_>, futures: &Futures) -> TermOutput;
}

struct OverlapTerm;
struct ObstacleTerm;
struct TubeTerm;
struct EndpointTerm;
struct SmoothTerm;

impl PotentialTerm for OverlapTerm {
    fn name(&self) -> &'static str {
        "overlap"
    }
    fn evaluate(&self, ctx: &PotentialContext<'_>, futures: &Futures) -> TermOutput {
        c_overlap(futures, &ctx.scene.radii())
    }
}

impl PotentialTerm for ObstacleTerm {
    fn name(&self) -> &'static str {
        "obstacle"
    }
    fn evaluate(&self, ctx: &PotentialContext<'_>, futures: &Futures) -> TermOutput {
        c_obstacle(futures, &ObstacleFrame::of(ctx.scene), &ctx.scene.map, ctx.weights.m_obs)
    }
}

impl PotentialTerm for TubeTerm {
    fn name(&self) -> &'static str {
        "tube"
    }
    fn evaluate(&self, ctx: &PotentialContext<'_>, futures: &Futures) -> TermOutput {
        let mut out = TermOutput::zeros(futures);
        if futures.is_empty() {
            return out;
        }
        let ego_last = ctx.scene.ego().last().position;
        let (v, g) = c_tube(&futures[0], ctx.token, ego_last, ctx.weights.r_tube);
        out.value = v;
        out.gradient[0] = g;
        out
    }
}

impl PotentialTerm for EndpointTerm {
    fn name(&self) -> &'static str {
        "endpoint"
    }
    fn evaluate(&self, ctx: &PotentialContext<'_>, futures: &Futures) -> TermOutput {
        let mut out = TermOutput::zeros(futures);
        let Some(last) = futures.first().and_then(|f| f.last()) else {
            return out;
        };
        let (v, g) = c_endpoint(*last, ctx.token);
        out.value = v;
        *out.gradient[0].last_mut().unwrap() = g;
        out
    }
}

impl PotentialTerm for SmoothTerm {
    fn name(&self) -> &'static str {
        "smooth"
    }
    fn evaluate(&self, ctx: &PotentialContext<'_>, futures: &Futures) -> TermOutput {
        c_smooth(futures, ctx.scene.dt, ctx.weights.smooth_v_max, ctx.weights.smooth_a_max)
    }
}

/// Named potential terms; the composite is the weighted sum over this registry.
#[derive(Clone)]
pub struct PotentialRegistry {
    terms: BTreeMap<&'static str, Arc<dyn PotentialTerm>>,
    order: Vec<&'static str>,
}

impl Default for PotentialRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(OverlapTerm));
        r.register(Arc::new(ObstacleTerm));
        r.register(Arc::new(TubeTerm));
        r.register(Arc::new(EndpointTerm));
        r.register(Arc::new(SmoothTerm));
        r
    }
}

impl PotentialRegistry {
    pub fn empty() -> Self {
        Self {
            terms: BTreeMap::new(),
            order: Vec::new(),
        }
    }

    pub fn register(&mut self, term: Arc<dyn PotentialTerm>) {
        let name = term.name();
        if self.terms.insert(name, term).is_none() {
            self.order.push(name);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn PotentialTerm>> {
        self.terms.get(name)
    }

    pub fn names(&self) -> &[&'static str] {
        &self.order
    }

    pub fn composite(&self, ctx: &PotentialContext<'_>, futures: &Futures) -> PotentialReport {
        let mut per_term = PerTerm {
            overlap: 0.0,
            obstacle: 0.0,
            tube: 0.0,
            endpoint: 0.0,
            smooth: 0.0,
        };
        let mut gradient = zeros_like(futures);
        let mut total = 0.0;
        for name in &self.order {
            let w = ctx.weights.weight(name);
            if w == 0.0 {
                continue;
            }
            let out = self.terms[name].evaluate(ctx, futures);
            let v = w * out.value;
            per_term.set(name, v);
            total += v;
            for (ga, oa) in gradient.iter_mut().zip(&out.gradient) {
                for (g, o) in ga.iter_mut().zip(oa) {
                    *g += *o * w;
                }
            }
        }
        PotentialReport {
            total,
            per_term,
            gradient,
        }
    }

    /// Value only; same terms as [`Self::composite`].
    pub fn total(&self, ctx: &PotentialContext<'_>, futures: &Futures) -> f64 {
        self.composite(ctx, futures).total
    }
}

/// Weighted composite with the default five-term registry.
pub fn composite(
    futures: &Futures,
    scene: &Scene,
    token: V2,
    weights: &PotentialWeights,
) -> PotentialReport {
    let ctx = PotentialContext {
        scene,
        token,
        weights,
    };
    PotentialRegistry::default().composite(&ctx, futures)
}

/// Analytic gradient of a scalar function of the futures versus central
/// differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheck {
    /// `‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖)` over checked coordinates.
    pub rel_err: f64,
    pub checked: usize,
    /// Coordinates within `probe` of a non-differentiable switch.
    pub skipped: usize,
}

/// Compares `grad` with central differences of step `h` on `f`. A coordinate is
/// skipped when the central slope at step `probe` disagrees with the one at
/// `h`, which happens only near a kink of `f`.
pub fn check_gradient(f: impl Fn(&Futures) -> f64, futures: &Futures, grad: &Futures, h: f64, probe: f64) -> GradientCheck {
    let slope = |a: usize, t: usize, axis: usize, step: f64| {
        let mut y = futures.clone();
        let bump = |y: &mut Futures, by: f64| match axis {
            0 => y[a][t].x += by,
            _ => y[a][t].y += by,
        };
        bump(&mut y, step);
        let up = f(&y);
        bump(&mut y, -2.0 * step);
        (up - f(&y)) / (2.0 * step)
    };
    let (mut diff, mut an, mut nu) = (0.0, 0.0, 0.0);
    let (mut checked, mut skipped) = (0, 0);
    for (a, path) in futures.iter().enumerate() {
        for t in 0..path.len() {
            for axis in 0..2 {
                let fine = slope(a, t, axis, h);
                let coarse = slope(a, t, axis, probe);
                if (coarse - fine).abs() > 1e-3 * fine.abs().max(1.0) {
                    skipped += 1;
                    continue;
                }
                let g = if axis == 0 { grad[a][t].x } else { grad[a][t].y };
                diff += (g - fine).powi(2);
                an += g * g;
                nu += fine * fine;
                checked += 1;
            }
        }
    }
    let scale = an.sqrt().max(nu.sqrt());
    GradientCheck {
        rel_err: if scale == 0.0 { 0.0 } else { diff.sqrt() / scale },
        checked,
        skipped,
    }
}

/// Agent-agent overlap hinge, each unordered pair counted once.
pub fn c_overlap(futures: &Futures, radii: &[f64]) -> TermOutput {
    let mut out = TermOutput::zeros(futures);
    let n = futures.len();
    let t_f = futures.first().map_or(0, Vec::len);
    for t in 0..t_f {
        for i in 0..n {
            for j in (i + 1)..n {
                let diff = futures[i][t] - futures[j][t];
                let d = diff.norm();
                let h = radii[i] + radii[j] - d;
                if h <= 0.0 {
                    continue;
                }
                out.value += h * h;
                if d > 0.0 {
                    // d/dy_i of h² = -2h · diff/d
                    let g = diff * (-2.0 * h / d);
                    out.gradient[i][t] += g;
                    out.gradient[j][t] -= g;
                }
            }
        }
    }
    out
}

/// Per-agent footprint data needed by the obstacle term.
#[derive(Clone, Debug)]
pub struct ObstacleFrame {
    pub attrs: Vec<AgentAttr>,
    pub start_positions: Vec<V2>,
    pub start_headings: Vec<f64>,
}

impl ObstacleFrame {
    pub fn of(scene: &Scene) -> Self {
        Self {
            attrs: scene.attrs(),
            start_positions: scene.last_positions(),
            start_headings: scene.last_headings(),
        }
    }
}

/// Obstacle clearance hinge on footprint-to-nearest-hard-segment distance.
/// Headings follow the motion, so the gradient includes the heading path.
pub fn c_obstacle(futures: &Futures, frame: &ObstacleFrame, map: &VectorMap, m_obs: f64) -> TermOutput {
    let mut out = TermOutput::zeros(futures);
    if map.hard_segments.is_empty() {
        return out;
    }
    for (i, path) in futures.iter().enumerate() {
        let start = frame.start_positions[i];
        let headings = derive_headings(start, frame.start_headings[i], path);
        let mut heading_grads = vec![0.0; path.len()];
        for t in 0..path.len() {
            let fp = footprint_at(path[t], headings[t], &frame.attrs[i]);
            let (d, gc, gh) = nearest_obstacle(&fp, &map.hard_segments, m_obs);
            let h = m_obs - d;
            if h <= 0.0 {
                continue;
            }
            out.value += h * h;
            let dv_dd = -2.0 * h;
            out.gradient[i][t] += gc * dv_dd;
            heading_grads[t] += gh * dv_dd;
        }
        heading_backward(start, path, &heading_grads, &mut out.gradient[i]);
    }
    out
}

/// Nearest segment among those that can lie closer than `cutoff`; segments
/// whose centre-distance lower bound clears `cutoff` are skipped.
fn nearest_obstacle(fp: &crate::geom::OrientedRect, segs: &[Segment], cutoff: f64) -> (f64, V2, f64) {
    let half_diag = 0.5 * fp.length.hypot(fp.width);
    let mut best = (f64::INFINITY, V2::ZERO, 0.0);
    for s in segs {
        if point_segment_distance(fp.center, s) - half_diag >= cutoff {
            continue;
        }
        let r = rect_segment_distance_grad(fp, s);
        if r.0 < best.0 {
            best = r;
        }
    }
    best
}

/// Ego path-tube hinge around the segment from the ego's last position to the token.
pub fn c_tube(ego: &[V2], token: V2, ego_last: V2, r_tube: f64) -> (f64, Vec<V2>) {
    let line = Segment::new(ego_last, token);
    let mut value = 0.0;
    let mut grad = vec![V2::ZERO; ego.len()];
    for (t, &p) in ego.iter().enumerate() {
        let (d, gp, _, _) = point_segment_distance_grad(p, &line);
        let h = d - r_tube;
        if h > 0.0 {
            value += h * h;
            grad[t] = gp * (2.0 * h);
        }
    }
    (value, grad)
}

/// Squared distance from the ego's final position to the token.
pub fn c_endpoint(ego_final: V2, token: V2) -> (f64, V2) {
    let d = ego_final - token;
    (d.norm_sq(), d * 2.0)
}

/// Hinges on finite-difference speed and acceleration magnitudes.
pub fn c_smooth(futures: &Futures, dt: f64, v_max: f64, a_max: f64) -> TermOutput {
    let mut out = TermOutput::zeros(futures);
    for (i, y) in futures.iter().enumerate() {
        let n = y.len();
        if n < 2 {
            continue;
        }
        let vel: Vec<V2> = (0..n - 1).map(|t| (y[t + 1] - y[t]) * (1.0 / dt)).collect();
        // gradient w.r.t. each velocity, accumulated from both hinge families
        let mut gv = vec![V2::ZERO; vel.len()];
        for (t, v) in vel.iter().enumerate() {
            let s = v.norm();
            let h = s - v_max;
            if h > 0.0 && s > 0.0 {
                out.value += h * h;
                gv[t] += *v * (2.0 * h / s);
            }
        }
        for t in 0..vel.len().saturating_sub(1) {
            let a = (vel[t + 1] - vel[t]) * (1.0 / dt);
            let s = a.norm();
            let h = s - a_max;
            if h > 0.0 && s > 0.0 {
                out.value += h * h;
                let ga = a * (2.0 * h / s);
                gv[t + 1] += ga * (1.0 / dt);
                gv[t] -= ga * (1.0 / dt);
            }
        }
        for (t, g) in gv.iter().enumerate() {
            out.gradient[i][t + 1] += *g * (1.0 / dt);
            out.gradient[i][t] -= *g * (1.0 / dt);
        }
    }
    out
}

/// Collision penalty with clearance: overlap with radii inflated by δ/2 plus
/// obstacle clearance with margin δ.
pub fn col_delta(futures: &Futures, radii: &[f64], frame: &ObstacleFrame, map: &VectorMap, delta: f64) -> TermOutput {
    let inflated: Vec<f64> = radii.iter().map(|r| r + 0.5 * delta).collect();
    let mut out = c_overlap(futures, &inflated);
    let obs = c_obstacle(futures, frame, map, delta);
    out.value += obs.value;
    for (ga, oa) in out.gradient.iter_mut().zip(&obs.gradient) {
        for (g, o) in ga.iter_mut().zip(oa) {
            *g += *o;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Agent, AgentState, Category};

    fn agent_at(p: V2, heading: f64, cat: Category) -> Agent {
        let attr = match cat {
            Category::Vehicle => AgentAttr::with_derived_radius(cat, 4.5, 1.9),
            Category::Pedestrian => AgentAttr::with_derived_radius(cat, 0.6, 0.6),
        };
        Agent {
            attr,
            history: vec![
                AgentState {
                    position: p,
                    heading,
                    ..Default::default()
                };
                3
            ],
        }
    }

    #[test]
    fn overlap_cases() {
        let f = vec![vec![V2::ZERO], vec![V2::ZERO]];
        let out = c_overlap(&f, &[1.0, 1.0]);
        assert_eq!(out.value, 4.0);
        assert_eq!(out.gradient, vec![vec![V2::ZERO], vec![V2::ZERO]]);
        let f = vec![vec![V2::ZERO], vec![V2::new(5.0, 0.0)]];
        let out = c_overlap(&f, &[1.0, 1.0]);
        assert_eq!(out.value, 0.0);
        assert_eq!(out.gradient, zeros_like(&f));
    }

    #[test]
    fn obstacle_touching_segment() {
        let scene = Scene::new(
            0.4,
            vec![agent_at(V2::new(-1.0, 0.0), 0.0, Category::Vehicle)],
            VectorMap {
                hard_segments: vec![Segment::new(V2::new(2.25, -3.0), V2::new(2.25, 3.0))],
                ..Default::default()
            },
        );
        // footprint front edge at x = 2.25 exactly
        let f = vec![vec![V2::new(0.0, 0.0)]];
        let out = c_obstacle(&f, &ObstacleFrame::of(&scene), &scene.map, 0.5);
        assert!((out.value - 0.25).abs() < 1e-12);
        let empty = c_obstacle(&f, &ObstacleFrame::of(&scene), &VectorMap::default(), 0.5);
        assert_eq!(empty.value, 0.0);
    }

    #[test]
    fn tube_and_endpoint_cases() {
        let ego = vec![V2::new(1.0, 0.0), V2::new(2.0, 0.0)];
        let (v, _) = c_tube(&ego, V2::new(5.0, 0.0), V2::ZERO, 2.0);
        assert_eq!(v, 0.0);
        let (v, g) = c_tube(&[V2::new(2.0, 3.0)], V2::new(5.0, 0.0), V2::ZERO, 2.0);
        assert!((v - 1.0).abs() < 1e-12);
        assert!((g[0].y - 2.0).abs() < 1e-12);
        assert_eq!(c_endpoint(V2::new(1.0, 1.0), V2::new(1.0, 1.0)).0, 0.0);
        let (v, g) = c_endpoint(V2::new(3.0, 4.0), V2::ZERO);
        assert_eq!(v, 25.0);
        assert_eq!(g, V2::new(6.0, 8.0));
    }

    #[test]
    fn smooth_cases() {
        let still = vec![vec![V2::new(1.0, 1.0); 10]];
        assert_eq!(c_smooth(&still, 0.4, 8.0, 4.0).value, 0.0);
        // constant velocity v_max + 1 = 9 m/s
        let dt = 0.4;
        let path: Vec<V2> = (0..10).map(|t| V2::new(9.0 * dt * t as f64, 0.0)).collect();
        let out = c_smooth(&vec![path], dt, 8.0, 4.0);
        assert!((out.value - 9.0).abs() < 1e-9);
    }

    #[test]
    fn composite_weights() {
        let scene = Scene::new(
            0.4,
            vec![
                agent_at(V2::ZERO, 0.0, Category::Vehicle),
                agent_at(V2::new(1.0, 0.0), 0.0, Category::Vehicle),
            ],
            VectorMap::default(),
        );
        let f = vec![vec![V2::new(1.0, 0.0); 3], vec![V2::new(1.5, 0.5); 3]];
        let w = PotentialWeights::default().disabled();
        let r = composite(&f, &scene, V2::new(9.0, 9.0), &w);
        assert_eq!(r.total, 0.0);
        assert_eq!(r.gradient, zeros_like(&f));
        let w1 = PotentialWeights {
            w_ov: 1.0,
            ..w.clone()
        };
        let r = composite(&f, &scene, V2::new(9.0, 9.0), &w1);
        let alone = c_overlap(&f, &scene.radii());
        assert_eq!(r.total, alone.value);
        assert_eq!(r.gradient, alone.gradient);
    }

    #[test]
    fn col_delta_zero_reduces_to_terms() {
        let scene = Scene::new(
            0.4,
            vec![
                agent_at(V2::ZERO, 0.0, Category::Vehicle),
                agent_at(V2::new(1.0, 0.0), 0.0, Category::Pedestrian),
            ],
            VectorMap {
                hard_segments: vec![Segment::new(V2::new(0.0, 1.0), V2::new(3.0, 1.0))],
                ..Default::default()
            },
        );
        let f = vec![vec![V2::new(0.5, 0.0), V2::new(1.0, 0.2)], vec![V2::new(2.0, 0.5), V2::new(2.2, 0.5)]];
        let frame = ObstacleFrame::of(&scene);
        let c = col_delta(&f, &scene.radii(), &frame, &scene.map, 0.0);
        let ov = c_overlap(&f, &scene.radii());
        let ob = c_obstacle(&f, &frame, &scene.map, 0.0);
        assert_eq!(c.value, ov.value + ob.value);
        // with no contacts and δ = 0 the value is zero
        let far = vec![vec![V2::new(-20.0, -20.0)], vec![V2::new(20.0, -20.0)]];
        assert_eq!(col_delta(&far, &scene.radii(), &frame, &scene.map, 0.0).value, 0.0);
    }

    #[test]
    fn registry_lists_five_terms() {
        let r = PotentialRegistry::default();
        assert_eq!(r.names(), &["overlap", "obstacle", "tube", "endpoint", "smooth"]);
        assert!(r.get("tube").is_some());
        assert!(r.get("nope").is_none());
    }
}
