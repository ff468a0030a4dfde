//! Procedural parking lot with scripted agents. One aisle runs along x with an
//! eastbound lane (ego side, y < 0) and a westbound lane; slot rows line both
//! sides. The ego parks left, parks right or drives through; oncoming traffic
//! yields to a crossing ego, followers run IDM, pedestrians cross and pause
//! near vehicles. Episodes are returned in the ego frame at the last observed step.

use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{
    wrap_angle, Agent, AgentAttr, AgentState, Category, Futures, OrientedRect, Scene, Segment, VectorMap, V2,
};
use crate::metrics::overlap_flag;
use crate::nn::sha256_hex;

pub const DATASET_FORMAT: &str = "dataset/v1";
const LANE_Y: f64 = 1.75;
const AISLE_HALF: f64 = 3.5;
const CAR: (f64, f64) = (4.6, 1.9);
const PED: (f64, f64) = (0.6, 0.6);
const LANE_BAND: f64 = 2.2;
const YIELD_HORIZON: f64 = 3.0;
const MAX_REJECTIONS: usize = 50;
const CROP_RADIUS: f64 = 40.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible config: {0} consecutive rejections")]
    Infeasible(usize),
    #[error("no empty slot for {0:?}")]
    NoSlot(Intent),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dataset: {0}")]
    Dataset(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    ParkLeft,
    ParkRight,
    DriveThrough,
}

impl Intent {
    pub const ALL: [Intent; 3] = [Intent::ParkLeft, Intent::ParkRight, Intent::DriveThrough];

    pub fn is_park(self) -> bool {
        self != Intent::DriveThrough
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub dt: f64,
    pub t_p: usize,
    pub t_f: usize,
    pub slot_rows: usize,
    pub slot_cols: usize,
    pub slot_width: f64,
    pub slot_depth: f64,
    /// Fraction of slots holding a parked car.
    pub occupancy: f64,
    pub agents_min: usize,
    pub agents_max: usize,
    pub ped_fraction: f64,
    /// Per-step heading noise of pedestrians (rad).
    pub policy_noise: f64,
    /// Mixture weights over park-left, park-right, drive-through.
    pub intent_mix: [f64; 3],
    pub ego_speed: (f64, f64),
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dt: 0.4,
            t_p: 10,
            t_f: 10,
            slot_rows: 2,
            slot_cols: 10,
            slot_width: 3.0,
            slot_depth: 5.5,
            occupancy: 0.5,
            agents_min: 1,
            agents_max: 5,
            ped_fraction: 0.3,
            policy_noise: 0.05,
            intent_mix: [0.35, 0.35, 0.3],
            ego_speed: (2.5, 4.0),
        }
    }
}

impl WorldConfig {
    pub fn check(&self) -> Vec<String> {
        let mut e = Vec::new();
        if (self.dt - 0.4).abs() > 1e-12 {
            e.push("world.dt must be 0.4".into());
        }
        if self.t_p < 3 || self.t_f == 0 {
            e.push("world.t_p must be >= 3 and t_f >= 1".into());
        }
        if !(1..=2).contains(&self.slot_rows) || self.slot_cols == 0 {
            e.push("world.slot_rows must be 1 or 2 and slot_cols positive".into());
        }
        if !(self.slot_width >= 2.6 && self.slot_depth >= 5.0) {
            e.push("world slots must be at least 2.6 m wide and 5 m deep".into());
        }
        if !(0.0..=1.0).contains(&self.occupancy) || !(0.0..=1.0).contains(&self.ped_fraction) {
            e.push("world.occupancy and ped_fraction must be in [0, 1]".into());
        }
        if self.agents_min > self.agents_max {
            e.push("world.agents_min must not exceed agents_max".into());
        }
        if self.intent_mix.iter().any(|w| !(*w >= 0.0)) || self.intent_mix.iter().sum::<f64>() <= 0.0 {
            e.push("world.intent_mix must be nonnegative with a positive sum".into());
        }
        if self.slot_rows == 1 && self.intent_mix[1] > 0.0 {
            e.push("world.intent_mix gives park-right weight but there is no south row".into());
        }
        if !(self.ego_speed.0 > 0.0 && self.ego_speed.1 >= self.ego_speed.0 && self.ego_speed.1 <= 5.0) {
            e.push("world.ego_speed must satisfy 0 < lo <= hi <= 5".into());
        }
        e
    }

    fn half_length(&self) -> f64 {
        0.5 * self.slot_cols as f64 * self.slot_width + 10.0
    }

    fn steps(&self) -> usize {
        self.t_p + self.t_f
    }
}

/// The lot in world coordinates plus which slots hold a parked car.
#[derive(Clone, Debug, PartialEq)]
pub struct Lot {
    pub map: VectorMap,
    pub occupied: Vec<bool>,
    /// +1 for the north row, -1 for the south row, per slot.
    pub row_side: Vec<f64>,
}

/// Slot rows, perimeter walls, lane boundaries and parked cars. The north row
/// is generated first, so a 1-row lot has only north slots.
pub fn generate_lot(cfg: &WorldConfig, rng: &mut impl Rng) -> Lot {
    let hl = cfg.half_length();
    let x0 = -0.5 * cfg.slot_cols as f64 * cfg.slot_width;
    let outer = AISLE_HALF + cfg.slot_depth;
    let wall = outer + 0.5;
    let mut map = VectorMap::default();
    let mut occupied = Vec::new();
    let mut row_side = Vec::new();
    for r in 0..cfg.slot_rows {
        let side = if r == 0 { 1.0 } else { -1.0 };
        for c in 0..cfg.slot_cols {
            let center = V2::new(x0 + (c as f64 + 0.5) * cfg.slot_width, side * (AISLE_HALF + 0.5 * cfg.slot_depth));
            map.slots.push(OrientedRect {
                center,
                heading: side * FRAC_PI_2,
                length: cfg.slot_depth,
                width: cfg.slot_width,
            });
            let parked = rng.random::<f64>() < cfg.occupancy;
            if parked {
                let jitter = V2::new(rng.random_range(-0.15..0.15), rng.random_range(-0.2..0.2));
                let car = OrientedRect {
                    center: center + jitter,
                    heading: side * FRAC_PI_2 + rng.random_range(-0.03..0.03),
                    length: CAR.0,
                    width: CAR.1,
                };
                map.hard_segments.extend(car.edges());
            }
            occupied.push(parked);
            row_side.push(side);
        }
        map.hard_segments.push(Segment::new(V2::new(-hl, side * wall), V2::new(hl, side * wall)));
        map.hard_segments.push(Segment::new(V2::new(-hl, side * AISLE_HALF), V2::new(-hl, side * wall)));
        map.hard_segments.push(Segment::new(V2::new(hl, side * AISLE_HALF), V2::new(hl, side * wall)));
    }
    let ext = hl + 30.0;
    for y in [-AISLE_HALF, 0.0, AISLE_HALF] {
        map.soft_polylines.push(vec![V2::new(-ext, y), V2::new(0.0, y), V2::new(ext, y)]);
    }
    Lot {
        map,
        occupied,
        row_side,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentEndpoint {
    pub intent: Intent,
    pub endpoint: V2,
}

/// scene/v1 plus ground-truth futures, all in the ego frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    #[serde(flatten)]
    pub scene: Scene,
    pub gt_futures: Futures,
    pub gt_endpoint: V2,
    pub intent: Intent,
    /// Where the ego would end under each maneuver class, when available.
    pub intent_endpoints: Vec<IntentEndpoint>,
}

impl Episode {
    pub fn endpoint_for(&self, intent: Intent) -> Option<V2> {
        self.intent_endpoints.iter().find(|e| e.intent == intent).map(|e| e.endpoint)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Oncoming,
    Follower,
    Lead,
    Pedestrian,
}

/// Optional overrides for scripted scenarios.
#[derive(Clone, Debug, Default)]
pub struct EpisodeSpec {
    pub intent: Option<Intent>,
    pub roles: Option<Vec<Role>>,
}

/// Arc-length parameterised polyline, extrapolated along its end tangents.
struct ArcPath {
    pts: Vec<V2>,
    cum: Vec<f64>,
}

impl ArcPath {
    fn new(pts: Vec<V2>) -> Self {
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            cum.push(cum.last().unwrap() + w[0].dist(w[1]));
        }
        Self { pts, cum }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn at(&self, s: f64) -> V2 {
        let n = self.pts.len();
        if s <= 0.0 {
            let d = self.pts[1] - self.pts[0];
            return self.pts[0] + d * (s / d.norm());
        }
        if s >= self.length() {
            let d = self.pts[n - 1] - self.pts[n - 2];
            return self.pts[n - 1] + d * ((s - self.length()) / d.norm());
        }
        let i = self.cum.partition_point(|&c| c <= s) - 1;
        let f = (s - self.cum[i]) / (self.cum[i + 1] - self.cum[i]);
        self.pts[i] + (self.pts[i + 1] - self.pts[i]) * f
    }
}

fn bezier(p: [V2; 4], n: usize) -> Vec<V2> {
    (0..=n)
        .map(|k| {
            let t = k as f64 / n as f64;
            let u = 1.0 - t;
            p[0] * (u * u * u) + p[1] * (3.0 * u * u * t) + p[2] * (3.0 * u * t * t) + p[3] * (t * t * t)
        })
        .collect()
}

/// Lane straight, a cubic turn into the slot mouth, then straight to the slot center.
fn park_path(slot: &OrientedRect, side: f64) -> ArcPath {
    let xs = slot.center.x;
    let y_lane = -LANE_Y;
    let mouth = V2::new(xs, side * (AISLE_HALF - 1.0));
    let ctrl = if side > 0.0 {
        [V2::new(xs - 6.0, y_lane), V2::new(xs - 3.0, y_lane), V2::new(xs, -0.5), mouth]
    } else {
        [V2::new(xs - 7.0, y_lane), V2::new(xs - 3.5, 0.25), V2::new(xs, 0.5), mouth]
    };
    let mut pts = vec![V2::new(xs - 80.0, y_lane)];
    pts.extend(bezier(ctrl, 40));
    pts.push(slot.center);
    ArcPath::new(pts)
}

/// Ego positions for `steps + 2` ticks (two warm-up ticks before the history).
/// A parking ego arrives at the slot center on the last tick, braking with
/// speed `min(v, sqrt(2 a (s_remaining + 0.5)))`.
fn ego_track(path: &ArcPath, v: f64, a: f64, ticks: usize, dt: f64) -> Vec<V2> {
    let mut rem = vec![0.0; ticks];
    for k in (0..ticks - 1).rev() {
        let speed = v.min((2.0 * a * (rem[k + 1] + 0.5)).sqrt());
        rem[k] = rem[k + 1] + speed * dt;
    }
    rem.iter().map(|r| path.at(path.length() - r)).collect()
}

struct Sim {
    cat: Category,
    size: (f64, f64),
    pos: Vec<V2>,
    speed: f64,
    /// +1 eastbound, -1 westbound, 0 pedestrian.
    dir: f64,
    lane_y: f64,
    v_des: f64,
    ped_heading: f64,
}

fn idm(v: f64, v0: f64, gap: f64, dv: f64) -> f64 {
    let (a, b, t_h, s0): (f64, f64, f64, f64) = (1.5, 2.0, 1.2, 2.0);
    let s_star = s0 + (v * t_h + v * dv / (2.0 * (a * b).sqrt())).max(0.0);
    let gap = gap.max(0.1);
    a * (1.0 - (v / v0.max(0.1)).powi(4) - (s_star / gap).powi(2))
}

/// Simulates one attempt in world coordinates; returns per-agent positions
/// over all ticks (ego first) and the attrs.
#[allow(clippy::too_many_arguments)]
fn roll_out(
    cfg: &WorldConfig,
    lot: &Lot,
    ego: &[V2],
    roles: &[Role],
    rng: &mut impl Rng,
) -> (Vec<Vec<V2>>, Vec<AgentAttr>) {
    let ticks = ego.len();
    let dt = cfg.dt;
    let now = ego[cfg.t_p + 1];
    let mut sims: Vec<Sim> = Vec::new();
    for role in roles {
        let sim = match role {
            Role::Oncoming => {
                let v: f64 = rng.random_range(2.0..4.5);
                let x = now.x + 6.0 + v * rng.random_range(0.5..5.0) + rng.random_range(0.0..8.0);
                Sim {
                    cat: Category::Vehicle,
                    size: CAR,
                    pos: vec![V2::new(x, LANE_Y)],
                    speed: v,
                    dir: -1.0,
                    lane_y: LANE_Y,
                    v_des: v,
                    ped_heading: 0.0,
                }
            }
            Role::Follower | Role::Lead => {
                let v: f64 = rng.random_range(2.0..4.5);
                let behind = *role == Role::Follower;
                let x = if behind {
                    ego[0].x - rng.random_range(9.0..16.0)
                } else {
                    ego[0].x + rng.random_range(10.0..20.0)
                };
                let v_des = if behind { v } else { v.max(cfg.ego_speed.1 + 0.3) };
                Sim {
                    cat: Category::Vehicle,
                    size: CAR,
                    pos: vec![V2::new(x, -LANE_Y)],
                    speed: if behind { v.min(3.0) } else { v_des },
                    dir: 1.0,
                    lane_y: -LANE_Y,
                    v_des,
                    ped_heading: 0.0,
                }
            }
            Role::Pedestrian => {
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let y = side * rng.random_range(AISLE_HALF + 0.5..AISLE_HALF + 4.0) - side * rng.random_range(0.0..6.0);
                let x = now.x + rng.random_range(-10.0..20.0);
                Sim {
                    cat: Category::Pedestrian,
                    size: PED,
                    pos: vec![V2::new(x, y)],
                    speed: rng.random_range(0.8..1.6),
                    dir: 0.0,
                    lane_y: 0.0,
                    v_des: 0.0,
                    ped_heading: -side * FRAC_PI_2 + rng.random_range(-0.3..0.3),
                }
            }
        };
        sims.push(sim);
    }
    let noise = Normal::new(0.0, cfg.policy_noise.max(1e-12)).expect("finite sigma");
    let ego_v = |k: usize| if k == 0 { 0.0 } else { ego[k].dist(ego[k - 1]) / dt };
    for k in 0..ticks - 1 {
        let cur: Vec<V2> = sims.iter().map(|s| s.pos[k]).collect();
        let speeds: Vec<f64> = sims.iter().map(|s| s.speed).collect();
        let is_vehicle: Vec<bool> = sims.iter().map(|s| s.cat == Category::Vehicle).collect();
        for i in 0..sims.len() {
            let p = cur[i];
            if sims[i].cat == Category::Pedestrian {
                let s = &mut sims[i];
                s.ped_heading += noise.sample(rng);
                let next = p + V2::from_angle(s.ped_heading) * (s.speed * dt);
                let near = ego[k + 1].dist(next) < 4.5
                    || ego[k].dist(next) < 4.5
                    || cur.iter().enumerate().any(|(j, q)| j != i && is_vehicle[j] && speeds[j] > 0.0 && q.dist(next) < 4.5);
                s.pos.push(if near { p } else { next });
                continue;
            }
            let (dir, lane_y, v) = (sims[i].dir, sims[i].lane_y, sims[i].speed);
            let len = sims[i].size.0;
            let mut gap = f64::INFINITY;
            let mut dv = 0.0;
            let consider = |q: V2, q_len: f64, q_speed: f64, gap: &mut f64, dv: &mut f64| {
                let ahead = (q.x - p.x) * dir;
                if ahead > 0.0 && (q.y - lane_y).abs() < LANE_BAND {
                    let g = ahead - 0.5 * (len + q_len);
                    if g < *gap {
                        *gap = g;
                        *dv = v - q_speed;
                    }
                }
            };
            consider(ego[k], CAR.0, ego_v(k), &mut gap, &mut dv);
            for (j, q) in cur.iter().enumerate() {
                if j != i {
                    let ql = sims[j].size.0;
                    let qs = if sims[j].cat == Category::Pedestrian { 0.0 } else { speeds[j] * sims[j].dir * dir };
                    consider(*q, ql + if sims[j].cat == Category::Pedestrian { 2.0 } else { 0.0 }, qs, &mut gap, &mut dv);
                }
            }
            if dir < 0.0 {
                // yield to an ego whose scripted path enters this lane within the
                // horizon; the stop line is the nearest conflict point on its whole path
                let conflicts: Vec<(usize, f64)> = ego
                    .iter()
                    .enumerate()
                    .skip(k)
                    .filter(|(_, q)| (q.y - lane_y).abs() < LANE_BAND + 0.5 && (q.x - p.x) * dir > -2.0)
                    .map(|(t, q)| (t, (q.x - p.x) * dir))
                    .collect();
                // free-flow arrival at the nearest conflict point vs the ego's occupancy window
                let arrive = conflicts.iter().map(|c| c.1).fold(f64::INFINITY, f64::min) / v.max(0.5);
                let window = conflicts.first().zip(conflicts.last()).map(|(a, b)| {
                    ((a.0 as f64 - k as f64) * dt, (b.0 as f64 - k as f64) * dt)
                });
                if window.is_some_and(|(t0, t1)| arrive > t0 - YIELD_HORIZON && arrive < t1 + YIELD_HORIZON) {
                    let nearest = conflicts.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
                    let g = nearest - 0.5 * (len + CAR.0) - 2.5;
                    if g < gap {
                        gap = g;
                        dv = v;
                    }
                }
            }
            let acc = if gap.is_finite() { idm(v, sims[i].v_des, gap, dv) } else { idm(v, sims[i].v_des, 1e9, 0.0) };
            let s = &mut sims[i];
            s.speed = (v + acc.clamp(-6.0, 2.0) * dt).clamp(0.0, 5.0);
            s.pos.push(p + V2::new(dir * s.speed * dt, 0.0));
        }
    }
    let mut paths = vec![ego.to_vec()];
    let mut attrs = vec![AgentAttr::with_derived_radius(Category::Vehicle, CAR.0, CAR.1)];
    for s in sims {
        attrs.push(AgentAttr::with_derived_radius(s.cat, s.size.0, s.size.1));
        paths.push(s.pos);
    }
    let _ = lot;
    (paths, attrs)
}

/// Kinematic states from positions by backward differences; heading follows
/// velocity, holding the previous value when nearly stopped.
fn states_of(path: &[V2], heading0: f64, dt: f64) -> Vec<AgentState> {
    let mut out = Vec::with_capacity(path.len());
    let mut heading = heading0;
    let mut prev_v = V2::ZERO;
    for k in 0..path.len() {
        let v = if k == 0 { V2::ZERO } else { (path[k] - path[k - 1]) * (1.0 / dt) };
        let v = if k == 0 && path.len() > 1 { (path[1] - path[0]) * (1.0 / dt) } else { v };
        if v.norm() > 0.1 {
            heading = v.angle();
        }
        let a = if k < 2 { V2::ZERO } else { (v - prev_v) * (1.0 / dt) };
        out.push(AgentState {
            position: path[k],
            heading: wrap_angle(heading),
            velocity: v,
            acceleration: a,
        });
        prev_v = v;
    }
    out
}

fn sample_intent(cfg: &WorldConfig, rng: &mut impl Rng) -> Intent {
    let total: f64 = cfg.intent_mix.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in cfg.intent_mix.iter().enumerate() {
        if u < *w {
            return Intent::ALL[i];
        }
        u -= w;
    }
    Intent::DriveThrough
}

fn sample_roles(cfg: &WorldConfig, rng: &mut impl Rng) -> Vec<Role> {
    let n = rng.random_range(cfg.agents_min..=cfg.agents_max);
    let (mut follower, mut lead) = (false, false);
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < cfg.ped_fraction {
                return Role::Pedestrian;
            }
            match rng.random_range(0..4) {
                0 if !follower => {
                    follower = true;
                    Role::Follower
                }
                1 if !lead => {
                    lead = true;
                    Role::Lead
                }
                _ => Role::Oncoming,
            }
        })
        .collect()
}

fn empty_slots(lot: &Lot, side: f64) -> Vec<usize> {
    (0..lot.occupied.len()).filter(|&i| !lot.occupied[i] && lot.row_side[i] == side).collect()
}

/// Generates one contact-free episode. Other agents are resampled on contact
/// while the ego maneuver stays fixed.
pub fn simulate_episode(lot: &Lot, cfg: &WorldConfig, rng: &mut impl Rng, spec: &EpisodeSpec) -> Result<Episode, SynthError> {
    let intent = spec.intent.unwrap_or_else(|| sample_intent(cfg, rng));
    let ticks = cfg.steps() + 2;
    let v = rng.random_range(cfg.ego_speed.0..=cfg.ego_speed.1);
    let a = rng.random_range(0.8..1.5);
    let (ego, slot_idx) = match intent {
        Intent::DriveThrough => {
            let hl = cfg.half_length();
            let x_now = rng.random_range(-hl..0.0);
            let x0 = x_now - v * cfg.dt * (cfg.t_p + 1) as f64;
            ((0..ticks).map(|k| V2::new(x0 + v * cfg.dt * k as f64, -LANE_Y)).collect::<Vec<_>>(), None)
        }
        _ => {
            let side = if intent == Intent::ParkLeft { 1.0 } else { -1.0 };
            let free = empty_slots(lot, side);
            if free.is_empty() {
                return Err(SynthError::NoSlot(intent));
            }
            let idx = free[rng.random_range(0..free.len())];
            let path = park_path(&lot.map.slots[idx], side);
            (ego_track(&path, v, a, ticks, cfg.dt), Some(idx))
        }
    };
    let now = ego[cfg.t_p + 1];
    let parked = VectorMap {
        hard_segments: lot.map.hard_segments.clone(),
        ..Default::default()
    };
    for _ in 0..MAX_REJECTIONS {
        let roles = spec.roles.clone().unwrap_or_else(|| sample_roles(cfg, rng));
        let (paths, attrs) = roll_out(cfg, lot, &ego, &roles, rng);
        // contact check over the whole observed and future window
        let starts: Vec<AgentState> = paths
            .iter()
            .zip(&attrs)
            .map(|(p, at)| {
                let h = if at.category == Category::Pedestrian { (p[2] - p[1]).angle() } else { (p[1] - p[0]).angle() };
                states_of(&p[..2], h, cfg.dt)[1]
            })
            .collect();
        let window: Futures = paths.iter().map(|p| p[2..].to_vec()).collect();
        if overlap_flag(&window, &attrs, &starts, &parked) {
            continue;
        }
        let agents: Vec<(AgentAttr, Vec<AgentState>)> = paths
            .iter()
            .zip(&attrs)
            .map(|(p, at)| {
                let d = p[1] - p[0];
                let h0 = if d.norm() > 1e-9 { d.angle() } else if p[0].y > 0.0 { -FRAC_PI_2 } else { FRAC_PI_2 };
                (*at, states_of(p, h0, cfg.dt)[2..].to_vec())
            })
            .collect();
        let ego_state = agents[0].1[cfg.t_p - 1];
        let theta = ego_state.heading;
        let to_ego = |q: V2| (q - now).rotate(-theta);
        let to_ego_state = |s: &AgentState| AgentState {
            position: to_ego(s.position),
            heading: wrap_angle(s.heading - theta),
            velocity: s.velocity.rotate(-theta),
            acceleration: s.acceleration.rotate(-theta),
        };
        let scene_agents: Vec<Agent> = agents
            .iter()
            .map(|(at, st)| Agent {
                attr: *at,
                history: st[..cfg.t_p].iter().map(to_ego_state).collect(),
            })
            .collect();
        let gt_futures: Futures = agents
            .iter()
            .map(|(_, st)| st[cfg.t_p..].iter().map(|s| to_ego(s.position)).collect())
            .collect();
        let map = crop(&lot.map, now).transformed(to_ego, -theta);
        let scene = Scene::new(cfg.dt, scene_agents, map);
        // headings of stationary agents are only settled here, so recheck in
        // exactly the form the metrics will see
        if crate::metrics::scene_overlap(&scene, &gt_futures) {
            continue;
        }
        let gt_endpoint = *gt_futures[0].last().unwrap();
        let intent_endpoints = alternative_endpoints(lot, cfg, &ego, v, intent, slot_idx)
            .into_iter()
            .map(|(i, e)| IntentEndpoint {
                intent: i,
                endpoint: if i == intent { gt_endpoint } else { to_ego(e) },
            })
            .collect();
        return Ok(Episode {
            scene,
            gt_futures,
            gt_endpoint,
            intent,
            intent_endpoints,
        });
    }
    Err(SynthError::Infeasible(MAX_REJECTIONS))
}

/// World-frame endpoints for each maneuver class from the current ego state.
fn alternative_endpoints(
    lot: &Lot,
    cfg: &WorldConfig,
    ego: &[V2],
    v: f64,
    realised: Intent,
    slot_idx: Option<usize>,
) -> Vec<(Intent, V2)> {
    let now = ego[cfg.t_p + 1];
    let reach = v * cfg.dt * cfg.t_f as f64;
    let mut out = Vec::new();
    for intent in Intent::ALL {
        if intent == realised {
            out.push((intent, *ego.last().unwrap()));
            continue;
        }
        match intent {
            Intent::DriveThrough => out.push((intent, V2::new(now.x + reach, -LANE_Y))),
            _ => {
                let side = if intent == Intent::ParkLeft { 1.0 } else { -1.0 };
                let target_x = slot_idx.map_or(now.x + 0.6 * reach, |i| lot.map.slots[i].center.x);
                let best = empty_slots(lot, side)
                    .into_iter()
                    .filter(|&i| lot.map.slots[i].center.x > now.x + 3.0)
                    .min_by(|&a, &b| {
                        let da = (lot.map.slots[a].center.x - target_x).abs();
                        let db = (lot.map.slots[b].center.x - target_x).abs();
                        da.total_cmp(&db)
                    });
                if let Some(i) = best {
                    out.push((intent, lot.map.slots[i].center));
                }
            }
        }
    }
    out
}

/// Keeps map elements within [`CROP_RADIUS`] of `center`.
fn crop(map: &VectorMap, center: V2) -> VectorMap {
    VectorMap {
        soft_polylines: map.soft_polylines.clone(),
        hard_segments: map
            .hard_segments
            .iter()
            .filter(|s| crate::geom::point_segment_distance(center, s) <= CROP_RADIUS)
            .copied()
            .collect(),
        slots: map.slots.iter().filter(|r| r.center.dist(center) <= CROP_RADIUS).copied().collect(),
    }
}

/// RNG for episode `index` of a dataset with `seed`: one ChaCha stream per episode.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn generate_episode(cfg: &WorldConfig, index: u64, spec: &EpisodeSpec) -> Result<Episode, SynthError> {
    let mut rng = episode_rng(cfg.seed, index);
    let mut last = None;
    // a lot with no free slot in the wanted row is redrawn
    for _ in 0..MAX_REJECTIONS {
        let lot = generate_lot(cfg, &mut rng);
        match simulate_episode(&lot, cfg, &mut rng, spec) {
            Err(SynthError::NoSlot(i)) => last = Some(SynthError::NoSlot(i)),
            other => return other,
        }
    }
    Err(last.unwrap_or(SynthError::Infeasible(MAX_REJECTIONS)))
}

pub fn generate_episodes(cfg: &WorldConfig, range: std::ops::Range<u64>) -> Result<Vec<Episode>, SynthError> {
    range.map(|i| generate_episode(cfg, i, &EpisodeSpec::default())).collect()
}

/// Ego parks left with one oncoming car that must yield, plus a pedestrian
/// walking in a far slot row. Indexing is independent of the main dataset.
pub fn yield_scenario(cfg: &WorldConfig, index: u64) -> Result<Episode, SynthError> {
    let spec = EpisodeSpec {
        intent: Some(Intent::ParkLeft),
        roles: Some(vec![Role::Oncoming]),
    };
    let mut c = cfg.clone();
    c.seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15;
    generate_episode(&c, index, &spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub file: String,
    pub split: String,
    pub intent: Intent,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub world_hash: String,
    pub n_train: usize,
    pub n_val: usize,
    pub episodes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("manifest serializes").as_bytes())
    }
}

pub fn world_hash(cfg: &WorldConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

/// Writes `manifest.json` and `episodes/NNNNNN.json`; train is indices
/// `0..n_train`, val the next `n_val`.
pub fn make_dataset(cfg: &WorldConfig, n_train: usize, n_val: usize, dir: &Path) -> Result<Manifest, SynthError> {
    let ep_dir = dir.join("episodes");
    std::fs::create_dir_all(&ep_dir)?;
    let mut entries = Vec::with_capacity(n_train + n_val);
    for i in 0..(n_train + n_val) as u64 {
        let ep = generate_episode(cfg, i, &EpisodeSpec::default())?;
        let text = serde_json::to_string(&ep)?;
        let file = format!("episodes/{i:06}.json");
        std::fs::write(dir.join(&file), &text)?;
        entries.push(ManifestEntry {
            index: i,
            file,
            split: if (i as usize) < n_train { "train" } else { "val" }.into(),
            intent: ep.intent,
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        seed: cfg.seed,
        world_hash: world_hash(cfg),
        n_train,
        n_val,
        episodes: entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Episode>,
    pub val: Vec<Episode>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(SynthError::Dataset(format!("unsupported format {:?}", manifest.format)));
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for e in &manifest.episodes {
        let path: PathBuf = dir.join(&e.file);
        let ep: Episode = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        if e.split == "train" {
            train.push(ep);
        } else {
            val.push(ep);
        }
    }
    Ok(Dataset { manifest, train, val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::point_in_polygon;
    use crate::metrics::scene_overlap;

    fn small() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn lot_is_deterministic_and_sized() {
        let cfg = WorldConfig {
            slot_rows: 2,
            slot_cols: 3,
            ..small()
        };
        let a = generate_lot(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = generate_lot(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.map.slots.len(), 6);
    }

    #[test]
    fn slots_inside_perimeter() {
        let cfg = small();
        let lot = generate_lot(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let hl = cfg.half_length();
        let w = AISLE_HALF + cfg.slot_depth + 0.5;
        let perimeter = [V2::new(-hl, -w), V2::new(hl, -w), V2::new(hl, w), V2::new(-hl, w)];
        for s in &lot.map.slots {
            assert!(s.corners().iter().all(|c| point_in_polygon(*c, &perimeter)));
        }
    }

    #[test]
    fn lone_ego_reaches_slot_center() {
        let cfg = WorldConfig {
            agents_min: 0,
            agents_max: 0,
            ..small()
        };
        for i in 0..20 {
            let spec = EpisodeSpec {
                intent: Some(if i % 2 == 0 { Intent::ParkLeft } else { Intent::ParkRight }),
                roles: None,
            };
            let ep = generate_episode(&cfg, i, &spec).unwrap();
            assert_eq!(ep.scene.num_agents(), 1);
            let slot = ep
                .scene
                .map
                .slots
                .iter()
                .map(|s| s.center.dist(ep.gt_endpoint))
                .fold(f64::INFINITY, f64::min);
            assert!(slot < 0.5, "episode {i}: {slot}");
        }
    }

    #[test]
    fn oncoming_yields_to_left_turn() {
        let cfg = small();
        let mut checked = 0;
        for i in 0..30 {
            let ep = yield_scenario(&cfg, i).unwrap();
            let r = ep.scene.radii();
            // only steps where the ego blocks the oncoming lane ahead of it
            let dir = V2::from_angle(ep.scene.agents[1].last().heading);
            let min_gap = ep.gt_futures[0]
                .iter()
                .zip(&ep.gt_futures[1])
                .filter(|(e, o)| (**e - **o).dot(dir) > 0.0 && dir.cross(**e - **o).abs() < LANE_BAND)
                .map(|(a, b)| a.dist(*b))
                .fold(f64::INFINITY, f64::min);
            assert!(min_gap >= r[0] + r[1] - 1e-9, "episode {i}: gap {min_gap}");
            checked += 1;
        }
        assert_eq!(checked, 30);
    }

    #[test]
    fn no_pedestrians_when_fraction_zero() {
        let cfg = WorldConfig {
            ped_fraction: 0.0,
            ..small()
        };
        for ep in generate_episodes(&cfg, 0..30).unwrap() {
            assert!(ep.scene.agents.iter().all(|a| a.attr.category == Category::Vehicle));
        }
    }

    #[test]
    fn episodes_are_valid_and_contact_free() {
        let cfg = small();
        for ep in generate_episodes(&cfg, 0..200).unwrap() {
            ep.scene.validate(cfg.t_p).unwrap();
            assert!(!scene_overlap(&ep.scene, &ep.gt_futures));
            assert_eq!(ep.gt_endpoint, *ep.gt_futures[0].last().unwrap());
            assert!(ep.scene.ego().last().position.norm() < 1e-9);
            assert!(ep.gt_futures.iter().all(|f| f.len() == cfg.t_f));
        }
    }

    #[test]
    fn dataset_roundtrip_and_hash() {
        let cfg = WorldConfig { seed: 7, ..small() };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = make_dataset(&cfg, 4, 2, d1.path()).unwrap();
        let m2 = make_dataset(&cfg, 4, 2, d2.path()).unwrap();
        assert_eq!(m1.hash(), m2.hash());
        let ds = load_dataset(d1.path()).unwrap();
        assert_eq!((ds.train.len(), ds.val.len()), (4, 2));
        assert_eq!(ds.train[0], generate_episode(&cfg, 0, &EpisodeSpec::default()).unwrap());
        let empty = make_dataset(&cfg, 0, 0, tempfile::tempdir().unwrap().path()).unwrap();
        assert!(empty.episodes.is_empty());
    }
}
