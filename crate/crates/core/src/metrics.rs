//! Oracle (min-) and final (f-) displacement, miss, overlap and mAP metrics
//! over K_scene joint candidates.

use serde::{Deserialize, Serialize};

use crate::geom::{
    footprints_along, point_segment_distance, rect_intersects_segment, rects_intersect, AgentAttr, AgentState,
    Category, Futures, OrientedRect, Scene, VectorMap,
};

pub const MISS_THRESHOLD: f64 = 2.0;

/// How samples without any positive candidate enter the dataset mAP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroPositive {
    /// Included with AP = 0.
    Zero,
    /// Left out of the mean.
    Skip,
}

/// How the token is chosen when evaluating a conditioned prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalToken {
    /// The Stage-1 token nearest the realised ego endpoint.
    #[default]
    Winner,
    /// The realised ego endpoint itself.
    Gt,
    /// The most probable Stage-1 token.
    Top1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub miss_threshold: f64,
    pub zero_positive: ZeroPositive,
    /// Apply denoiser refinement to every candidate before scoring.
    pub refine: bool,
    pub token: EvalToken,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            miss_threshold: MISS_THRESHOLD,
            zero_positive: ZeroPositive::Zero,
            refine: true,
            token: EvalToken::Winner,
        }
    }
}

impl EvalConfig {
    pub fn check(&self) -> Vec<String> {
        if self.miss_threshold > 0.0 && self.miss_threshold.is_finite() {
            Vec::new()
        } else {
            vec!["eval.miss_threshold must be positive".into()]
        }
    }
}

/// Scene ADE (mean over agents and steps) and FDE (mean over agents).
pub fn ade_fde(pred: &Futures, gt: &Futures) -> (f64, f64) {
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        for (a, b) in p.iter().zip(g) {
            sum += a.dist(*b);
            count += 1;
        }
    }
    let f = final_errors(pred, gt);
    let ade = if count == 0 { 0.0 } else { sum / count as f64 };
    let fde = if f.is_empty() { 0.0 } else { f.iter().sum::<f64>() / f.len() as f64 };
    (ade, fde)
}

pub fn final_errors(pred: &Futures, gt: &Futures) -> Vec<f64> {
    pred.iter()
        .zip(gt)
        .filter_map(|(p, g)| Some(p.last()?.dist(*g.last()?)))
        .collect()
}

/// Positive iff every agent ends within `threshold` of its ground truth.
pub fn candidate_positive(pred: &Futures, gt: &Futures, threshold: f64) -> bool {
    final_errors(pred, gt).iter().all(|&e| e <= threshold)
}

/// Miss iff no candidate is positive.
pub fn scene_miss(candidates: &[Futures], gt: &Futures, threshold: f64) -> bool {
    !candidates.iter().any(|c| candidate_positive(c, gt, threshold))
}

/// True if any vehicle footprint touches another footprint or a hard
/// segment at any step. Pedestrian pairs never flag.
pub fn overlap_flag(futures: &Futures, attrs: &[AgentAttr], starts: &[AgentState], map: &VectorMap) -> bool {
    let fps: Vec<Vec<OrientedRect>> = futures
        .iter()
        .enumerate()
        .map(|(i, path)| footprints_along(&starts[i], &attrs[i], path))
        .collect();
    let vehicle = |i: usize| attrs[i].category == Category::Vehicle;
    let reach = |i: usize| 0.5 * attrs[i].size.0.hypot(attrs[i].size.1);
    for i in 0..fps.len() {
        for j in i + 1..fps.len() {
            if !vehicle(i) && !vehicle(j) {
                continue;
            }
            let r = reach(i) + reach(j);
            for (a, b) in fps[i].iter().zip(&fps[j]) {
                if a.center.dist(b.center) <= r && rects_intersect(a, b) {
                    return true;
                }
            }
        }
        if vehicle(i) {
            let r = reach(i);
            for fp in &fps[i] {
                for s in &map.hard_segments {
                    if point_segment_distance(fp.center, s) <= r && rect_intersects_segment(fp, s) {
                        return true;
                    }
                }
            }
        }
    }
    false
}

pub fn scene_overlap(scene: &Scene, futures: &Futures) -> bool {
    let starts: Vec<AgentState> = scene.agents.iter().map(|a| *a.last()).collect();
    overlap_flag(futures, &scene.attrs(), &starts, &scene.map)
}

/// All-points average precision of `labels` visited in `ranking` order.
/// `None` when there are no positives.
pub fn average_precision(labels: &[bool], ranking: &[usize]) -> Option<f64> {
    let total = labels.iter().filter(|&&l| l).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut prec = Vec::with_capacity(ranking.len());
    let mut is_hit = Vec::with_capacity(ranking.len());
    for (rank, &i) in ranking.iter().enumerate() {
        if labels[i] {
            hits += 1;
        }
        prec.push(hits as f64 / (rank + 1) as f64);
        is_hit.push(labels[i]);
    }
    // all-points interpolation: precision envelope from the right, summed at each recall step
    let mut env = 0.0f64;
    let mut sum = 0.0;
    for r in (0..prec.len()).rev() {
        env = env.max(prec[r]);
        if is_hit[r] {
            sum += env;
        }
    }
    Some(sum / total as f64)
}

/// Per-sample AP with zero-positive samples scored 0.
pub fn map_score(labels: &[bool], ranking: &[usize]) -> f64 {
    average_precision(labels, ranking).unwrap_or(0.0)
}

/// Candidate indices by descending probability, ties to the lower index.
pub fn ranking_of(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss: bool,
    pub min_or: bool,
    pub f_ade: f64,
    pub f_fde: f64,
    pub f_miss: bool,
    pub f_or: bool,
    pub labels: Vec<bool>,
    pub ranking: Vec<usize>,
}

impl EvalRecord {
    /// Scores candidates against ground truth; `probs` ranks them and the
    /// first-ranked one is the final (f-) prediction.
    pub fn new(scene: &Scene, candidates: &[Futures], probs: &[f64], gt: &Futures, threshold: f64) -> Self {
        assert!(!candidates.is_empty() && candidates.len() == probs.len());
        let errs: Vec<(f64, f64)> = candidates.iter().map(|c| ade_fde(c, gt)).collect();
        let flags: Vec<bool> = candidates.iter().map(|c| scene_overlap(scene, c)).collect();
        let labels: Vec<bool> = candidates.iter().map(|c| candidate_positive(c, gt, threshold)).collect();
        let ranking = ranking_of(probs);
        let top = ranking[0];
        Self {
            min_ade: errs.iter().map(|e| e.0).fold(f64::INFINITY, f64::min),
            min_fde: errs.iter().map(|e| e.1).fold(f64::INFINITY, f64::min),
            miss: !labels.iter().any(|&l| l),
            min_or: flags.iter().all(|&f| f),
            f_ade: errs[top].0,
            f_fde: errs[top].1,
            f_miss: !labels[top],
            f_or: flags[top],
            labels,
            ranking,
        }
    }
}

/// Dataset-level table; serialized keys follow the usual column names.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    #[serde(rename = "minADE")]
    pub min_ade: f64,
    #[serde(rename = "minFDE")]
    pub min_fde: f64,
    #[serde(rename = "MR")]
    pub mr: f64,
    #[serde(rename = "OR")]
    pub or: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "f_ADE")]
    pub f_ade: f64,
    #[serde(rename = "f_FDE")]
    pub f_fde: f64,
    #[serde(rename = "f_MR")]
    pub f_mr: f64,
    #[serde(rename = "f_OR")]
    pub f_or: f64,
    pub n: usize,
}

pub const CSV_HEADER: &str = "minADE,minFDE,MR,OR,mAP,f_ADE,f_FDE,f_MR,f_OR,n";

impl MetricsTable {
    pub fn aggregate(records: &[EvalRecord], zero_positive: ZeroPositive) -> Self {
        let n = records.len();
        if n == 0 {
            return Self::default();
        }
        let mean = |f: &dyn Fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n as f64;
        let b = |x: bool| if x { 1.0 } else { 0.0 };
        let aps: Vec<f64> = records
            .iter()
            .filter_map(|r| match (average_precision(&r.labels, &r.ranking), zero_positive) {
                (Some(ap), _) => Some(ap),
                (None, ZeroPositive::Zero) => Some(0.0),
                (None, ZeroPositive::Skip) => None,
            })
            .collect();
        Self {
            min_ade: mean(&|r| r.min_ade),
            min_fde: mean(&|r| r.min_fde),
            mr: mean(&|r| b(r.miss)),
            or: mean(&|r| b(r.min_or)),
            map: if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 },
            f_ade: mean(&|r| r.f_ade),
            f_fde: mean(&|r| r.f_fde),
            f_mr: mean(&|r| b(r.f_miss)),
            f_or: mean(&|r| b(r.f_or)),
            n,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.min_ade, self.min_fde, self.mr, self.or, self.map, self.f_ade, self.f_fde, self.f_mr, self.f_or, self.n
        )
    }
}
