//! Scene and trajectory data model plus the exact 2-D primitives shared by the
//! potentials, the metrics and the generator.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Displacements shorter than this reuse the previous heading.
pub const HEADING_EPS: f64 = 1e-6;

pub const SCENE_FORMAT: &str = "scene/v1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct V2 {
    pub x: f64,
    pub y: f64,
}

impl V2 {
    pub const ZERO: V2 = V2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: V2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: V2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: V2) -> f64 {
        (self - o).norm()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Counter-clockwise rotation.
    pub fn rotate(self, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for V2 {
    fn from(a: [f64; 2]) -> Self {
        Self::new(a[0], a[1])
    }
}

impl From<V2> for [f64; 2] {
    fn from(v: V2) -> Self {
        [v.x, v.y]
    }
}

impl Add for V2 {
    type Output = V2;
    fn add(self, o: V2) -> V2 {
        V2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for V2 {
    type Output = V2;
    fn sub(self, o: V2) -> V2 {
        V2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for V2 {
    type Output = V2;
    fn mul(self, s: f64) -> V2 {
        V2::new(self.x * s, self.y * s)
    }
}

impl Neg for V2 {
    type Output = V2;
    fn neg(self) -> V2 {
        V2::new(-self.x, -self.y)
    }
}

impl AddAssign for V2 {
    fn add_assign(&mut self, o: V2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl SubAssign for V2 {
    fn sub_assign(&mut self, o: V2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub a: V2,
    pub b: V2,
}

impl Segment {
    pub fn new(a: V2, b: V2) -> Self {
        Self { a, b }
    }

    pub fn length(&self) -> f64 {
        self.a.dist(self.b)
    }

    pub fn midpoint(&self) -> V2 {
        (self.a + self.b) * 0.5
    }
}

impl Serialize for Segment {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.a, self.b].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Segment {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [a, b] = <[V2; 2]>::deserialize(d)?;
        Ok(Segment { a, b })
    }
}

/// Rectangle centred at `center`, long axis along `heading`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedRect {
    pub center: V2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedRect {
    /// Local corner offsets in CCW order starting front-left.
    pub fn local_corners(&self) -> [V2; 4] {
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        [
            V2::new(hl, hw),
            V2::new(-hl, hw),
            V2::new(-hl, -hw),
            V2::new(hl, -hw),
        ]
    }

    pub fn corners(&self) -> [V2; 4] {
        self.local_corners()
            .map(|c| self.center + c.rotate(self.heading))
    }

    pub fn edges(&self) -> [Segment; 4] {
        let c = self.corners();
        [
            Segment::new(c[0], c[1]),
            Segment::new(c[1], c[2]),
            Segment::new(c[2], c[3]),
            Segment::new(c[3], c[0]),
        ]
    }

    pub fn contains(&self, p: V2) -> bool {
        let local = (p - self.center).rotate(-self.heading);
        local.x.abs() <= 0.5 * self.length && local.y.abs() <= 0.5 * self.width
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.length > 0.0 && self.width > 0.0)
            || !self.center.is_finite()
            || !self.heading.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Vehicle,
    Pedestrian,
}

impl Category {
    pub fn index(self) -> usize {
        match self {
            Category::Vehicle => 0,
            Category::Pedestrian => 1,
        }
    }
}

/// Kinematic state; serialized as `[x, y, heading, vx, vy, ax, ay]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 7]", into = "[f64; 7]")]
pub struct AgentState {
    pub position: V2,
    pub heading: f64,
    pub velocity: V2,
    pub acceleration: V2,
}

impl From<[f64; 7]> for AgentState {
    fn from(a: [f64; 7]) -> Self {
        Self {
            position: V2::new(a[0], a[1]),
            heading: a[2],
            velocity: V2::new(a[3], a[4]),
            acceleration: V2::new(a[5], a[6]),
        }
    }
}

impl From<AgentState> for [f64; 7] {
    fn from(s: AgentState) -> Self {
        [
            s.position.x,
            s.position.y,
            s.heading,
            s.velocity.x,
            s.velocity.y,
            s.acceleration.x,
            s.acceleration.y,
        ]
    }
}

impl AgentState {
    pub fn is_valid(&self) -> bool {
        self.position.is_finite()
            && self.velocity.is_finite()
            && self.acceleration.is_finite()
            && self.heading.is_finite()
            && self.heading > -PI
            && self.heading <= PI
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentAttr {
    pub category: Category,
    /// (length, width) in meters.
    pub size: (f64, f64),
    pub safety_radius: f64,
}

impl AgentAttr {
    /// Safety radius as half the footprint diagonal.
    pub fn with_derived_radius(category: Category, length: f64, width: f64) -> Self {
        Self {
            category,
            size: (length, width),
            safety_radius: 0.5 * length.hypot(width),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    #[serde(flatten)]
    pub attr: AgentAttr,
    pub history: Vec<AgentState>,
}

impl Agent {
    pub fn last(&self) -> &AgentState {
        self.history.last().expect("agent history is never empty")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VectorMap {
    pub soft_polylines: Vec<Vec<V2>>,
    pub hard_segments: Vec<Segment>,
    pub slots: Vec<OrientedRect>,
}

impl VectorMap {
    pub fn is_empty(&self) -> bool {
        self.soft_polylines.is_empty() && self.hard_segments.is_empty() && self.slots.is_empty()
    }

    pub fn translated(&self, by: V2) -> Self {
        self.transformed(|p| p + by, 0.0)
    }

    /// Applies the rigid map `p -> f(p)` whose rotation part is `dtheta`.
    pub fn transformed(&self, f: impl Fn(V2) -> V2, dtheta: f64) -> Self {
        Self {
            soft_polylines: self
                .soft_polylines
                .iter()
                .map(|pl| pl.iter().map(|&p| f(p)).collect())
                .collect(),
            hard_segments: self
                .hard_segments
                .iter()
                .map(|s| Segment::new(f(s.a), f(s.b)))
                .collect(),
            slots: self
                .slots
                .iter()
                .map(|r| OrientedRect {
                    center: f(r.center),
                    heading: wrap_angle(r.heading + dtheta),
                    ..*r
                })
                .collect(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("scene has no agents (ego at index 0 is required)")]
    NoAgents,
    #[error("dt must be positive, got {0}")]
    BadDt(f64),
    #[error("agent {agent} has {got} history steps, expected {expected}")]
    HistoryLength {
        agent: usize,
        got: usize,
        expected: usize,
    },
    #[error("agent {agent} step {step} has a non-finite or out-of-range state")]
    BadState { agent: usize, step: usize },
    #[error("agent {0} has non-positive size or safety radius")]
    BadAttr(usize),
    #[error("polyline {0} has fewer than 2 vertices")]
    ShortPolyline(usize),
    #[error("hard segment {0} has zero length")]
    ZeroSegment(usize),
    #[error("slot {0} is degenerate")]
    DegenerateSlot(usize),
    #[error("unsupported scene format {0:?}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    #[serde(default = "scene_format")]
    pub format: String,
    pub dt: f64,
    pub agents: Vec<Agent>,
    pub map: VectorMap,
}

fn scene_format() -> String {
    SCENE_FORMAT.to_string()
}

impl Scene {
    pub fn new(dt: f64, agents: Vec<Agent>, map: VectorMap) -> Self {
        Self {
            format: scene_format(),
            dt,
            agents,
            map,
        }
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn ego(&self) -> &Agent {
        &self.agents[0]
    }

    pub fn attrs(&self) -> Vec<AgentAttr> {
        self.agents.iter().map(|a| a.attr).collect()
    }

    pub fn radii(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.attr.safety_radius).collect()
    }

    pub fn last_positions(&self) -> Vec<V2> {
        self.agents.iter().map(|a| a.last().position).collect()
    }

    pub fn last_headings(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.last().heading).collect()
    }

    pub fn history_len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.history.len())
    }

    pub fn validate(&self, t_p: usize) -> Result<(), SceneError> {
        if self.format != SCENE_FORMAT {
            return Err(SceneError::Format(self.format.clone()));
        }
        if self.agents.is_empty() {
            return Err(SceneError::NoAgents);
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SceneError::BadDt(self.dt));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.history.len() != t_p {
                return Err(SceneError::HistoryLength {
                    agent: i,
                    got: a.history.len(),
                    expected: t_p,
                });
            }
            if let Some(step) = a.history.iter().position(|s| !s.is_valid()) {
                return Err(SceneError::BadState { agent: i, step });
            }
            let (l, w) = a.attr.size;
            if !(l > 0.0 && w > 0.0 && a.attr.safety_radius > 0.0) {
                return Err(SceneError::BadAttr(i));
            }
        }
        for (i, pl) in self.map.soft_polylines.iter().enumerate() {
            if pl.len() < 2 {
                return Err(SceneError::ShortPolyline(i));
            }
        }
        for (i, s) in self.map.hard_segments.iter().enumerate() {
            if s.length() <= 0.0 {
                return Err(SceneError::ZeroSegment(i));
            }
        }
        for (i, r) in self.map.slots.iter().enumerate() {
            if r.is_degenerate() {
                return Err(SceneError::DegenerateSlot(i));
            }
        }
        Ok(())
    }
}

/// One future for all agents: `futures[agent][step]`.
pub type Futures = Vec<Vec<V2>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointScene {
    pub futures: Futures,
    pub score: f64,
}

impl JointScene {
    pub fn horizon(&self) -> usize {
        self.futures.first().map_or(0, Vec::len)
    }

    pub fn is_valid(&self) -> bool {
        let t = self.horizon();
        self.futures
            .iter()
            .all(|f| f.len() == t && f.iter().all(|p| p.is_finite()))
    }
}

/// Closest point on the closed segment and its parameter in [0, 1].
pub fn closest_point_on_segment(p: V2, seg: &Segment) -> (V2, f64) {
    let ab = seg.b - seg.a;
    let len_sq = ab.norm_sq();
    if len_sq == 0.0 {
        return (seg.a, 0.0);
    }
    let t = ((p - seg.a).dot(ab) / len_sq).clamp(0.0, 1.0);
    (seg.a + ab * t, t)
}

pub fn point_segment_distance(p: V2, seg: &Segment) -> f64 {
    let (c, _) = closest_point_on_segment(p, seg);
    p.dist(c)
}

/// Distance plus its gradient w.r.t. the point and both segment endpoints.
/// The gradient is zero when the point lies on the segment.
pub fn point_segment_distance_grad(p: V2, seg: &Segment) -> (f64, V2, V2, V2) {
    let (c, t) = closest_point_on_segment(p, seg);
    let diff = p - c;
    let d = diff.norm();
    if d == 0.0 {
        return (0.0, V2::ZERO, V2::ZERO, V2::ZERO);
    }
    let u = diff * (1.0 / d);
    (d, u, -u * (1.0 - t), -u * t)
}

fn orient(a: V2, b: V2, c: V2) -> f64 {
    (b - a).cross(c - a)
}

fn on_segment(a: V2, b: V2, p: V2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test (touching counts).
pub fn segments_intersect(s1: &Segment, s2: &Segment) -> bool {
    let d1 = orient(s2.a, s2.b, s1.a);
    let d2 = orient(s2.a, s2.b, s1.b);
    let d3 = orient(s1.a, s1.b, s2.a);
    let d4 = orient(s1.a, s1.b, s2.b);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(s2.a, s2.b, s1.a))
        || (d2 == 0.0 && on_segment(s2.a, s2.b, s1.b))
        || (d3 == 0.0 && on_segment(s1.a, s1.b, s2.a))
        || (d4 == 0.0 && on_segment(s1.a, s1.b, s2.b))
}

pub fn segment_segment_distance(s1: &Segment, s2: &Segment) -> f64 {
    if segments_intersect(s1, s2) {
        return 0.0;
    }
    point_segment_distance(s1.a, s2)
        .min(point_segment_distance(s1.b, s2))
        .min(point_segment_distance(s2.a, s1))
        .min(point_segment_distance(s2.b, s1))
}

pub fn rect_intersects_segment(rect: &OrientedRect, seg: &Segment) -> bool {
    rect.contains(seg.a) || rect.contains(seg.b) || rect.edges().iter().any(|e| segments_intersect(e, seg))
}

pub fn rect_segment_distance(rect: &OrientedRect, seg: &Segment) -> f64 {
    if rect_intersects_segment(rect, seg) {
        return 0.0;
    }
    rect.edges()
        .iter()
        .map(|e| segment_segment_distance(e, seg))
        .fold(f64::INFINITY, f64::min)
}

/// Rectangle/segment distance with its gradient w.r.t. the rectangle centre
/// and heading. Returns zero gradient on contact.
pub fn rect_segment_distance_grad(rect: &OrientedRect, seg: &Segment) -> (f64, V2, f64) {
    if rect_intersects_segment(rect, seg) {
        return (0.0, V2::ZERO, 0.0);
    }
    let local = rect.local_corners();
    let corners = rect.corners();
    let mut best = f64::INFINITY;
    let mut corner_grads = [V2::ZERO; 4];
    // rect corner vs. segment
    for k in 0..4 {
        let (d, gp, _, _) = point_segment_distance_grad(corners[k], seg);
        if d < best {
            best = d;
            corner_grads = [V2::ZERO; 4];
            corner_grads[k] = gp;
        }
    }
    // segment endpoint vs. rect edge
    for q in [seg.a, seg.b] {
        for k in 0..4 {
            let k2 = (k + 1) % 4;
            let edge = Segment::new(corners[k], corners[k2]);
            let (d, _, ga, gb) = point_segment_distance_grad(q, &edge);
            if d < best {
                best = d;
                corner_grads = [V2::ZERO; 4];
                corner_grads[k] = ga;
                corner_grads[k2] = gb;
            }
        }
    }
    let (s, c) = rect.heading.sin_cos();
    let mut g_center = V2::ZERO;
    let mut g_heading = 0.0;
    for k in 0..4 {
        g_center += corner_grads[k];
        // d/dθ of R(θ)·local
        let dr = V2::new(-s * local[k].x - c * local[k].y, c * local[k].x - s * local[k].y);
        g_heading += corner_grads[k].dot(dr);
    }
    (best, g_center, g_heading)
}

/// Separating-axis overlap test for two oriented rectangles (touching counts).
pub fn rects_intersect(r1: &OrientedRect, r2: &OrientedRect) -> bool {
    let c1 = r1.corners();
    let c2 = r2.corners();
    let axes = [
        V2::from_angle(r1.heading),
        V2::from_angle(r1.heading + 0.5 * PI),
        V2::from_angle(r2.heading),
        V2::from_angle(r2.heading + 0.5 * PI),
    ];
    for ax in axes {
        let (min1, max1) = project(&c1, ax);
        let (min2, max2) = project(&c2, ax);
        if max1 < min2 || max2 < min1 {
            return false;
        }
    }
    true
}

fn project(pts: &[V2; 4], ax: V2) -> (f64, f64) {
    pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let v = p.dot(ax);
        (lo.min(v), hi.max(v))
    })
}

pub fn footprint_at(position: V2, heading: f64, attr: &AgentAttr) -> OrientedRect {
    OrientedRect {
        center: position,
        heading,
        length: attr.size.0,
        width: attr.size.1,
    }
}

/// Headings along a predicted path: direction of each step's displacement,
/// falling back to the previous heading for near-zero moves.
pub fn derive_headings(start: V2, start_heading: f64, path: &[V2]) -> Vec<f64> {
    let mut prev_p = start;
    let mut prev_h = start_heading;
    path.iter()
        .map(|&p| {
            let d = p - prev_p;
            if d.norm() >= HEADING_EPS {
                prev_h = d.angle();
            }
            prev_p = p;
            prev_h
        })
        .collect()
}

/// Back-propagates heading gradients from [`derive_headings`] into positions.
pub fn heading_backward(start: V2, path: &[V2], heading_grads: &[f64], pos_grads: &mut [V2]) {
    let n = path.len();
    let mut carry = vec![0.0; n];
    carry.copy_from_slice(heading_grads);
    for t in (0..n).rev() {
        let prev = if t == 0 { start } else { path[t - 1] };
        let d = path[t] - prev;
        let len_sq = d.norm_sq();
        if len_sq.sqrt() >= HEADING_EPS {
            let g = V2::new(-d.y, d.x) * (carry[t] / len_sq);
            pos_grads[t] += g;
            if t > 0 {
                pos_grads[t - 1] -= g;
            }
        } else if t > 0 {
            carry[t - 1] += carry[t];
        }
    }
}

/// Footprints of one agent along a path, headings derived from motion.
pub fn footprints_along(start: &AgentState, attr: &AgentAttr, path: &[V2]) -> Vec<OrientedRect> {
    derive_headings(start.position, start.heading, path)
        .into_iter()
        .zip(path)
        .map(|(h, &p)| footprint_at(p, h, attr))
        .collect()
}

pub fn point_in_polygon(p: V2, poly: &[V2]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}
