//! Losses and metrics on plain arrays. Trajectories are indexed
//! `[mode][step]`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::scene::Point;

/// Log-probabilities are taken of `max(p, PROB_EPS)`.
pub const PROB_EPS: f64 = 1e-7;
/// Softening of the displacement norm in the angle loss.
pub const ANGLE_EPS: f64 = 1e-12;

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn ade(traj: &[Point], gt: &[Point]) -> f64 {
    assert_eq!(traj.len(), gt.len());
    traj.iter().zip(gt).map(|(a, b)| dist(*a, *b)).sum::<f64>() / gt.len() as f64
}

pub fn fde(traj: &[Point], gt: &[Point]) -> f64 {
    dist(*traj.last().unwrap(), *gt.last().unwrap())
}

fn argmin_by(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Mode with the lowest ADE, ties to the lowest index.
pub fn best_mode(trajs: &[Vec<Point>], gt: &[Point]) -> usize {
    argmin_by(trajs.iter().map(|t| ade(t, gt)))
}

/// Laplace negative log-likelihood summed over x/y and averaged over steps.
pub fn laplace_nll(mu: &[Point], scale: &[Point], gt: &[Point]) -> f64 {
    let mut total = 0.0;
    for ((m, s), y) in mu.iter().zip(scale).zip(gt) {
        for d in 0..2 {
            total += (2.0 * s[d]).ln() + (y[d] - m[d]).abs() / s[d];
        }
    }
    total / gt.len() as f64
}

/// Laplace NLL of the ADE-best mode.
pub fn regression_loss(mu: &[Vec<Point>], scale: &[Vec<Point>], gt: &[Point]) -> f64 {
    let k = best_mode(mu, gt);
    laplace_nll(&mu[k], &scale[k], gt)
}

/// `softmax(-FDE_k / tau)`.
pub fn soft_targets(trajs: &[Vec<Point>], gt: &[Point], tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = trajs.iter().map(|t| -fde(t, gt) / tau).collect();
    softmax(&logits)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy of the predicted probabilities against soft targets.
pub fn classification_loss(probs: &[f64], targets: &[f64]) -> f64 {
    -probs
        .iter()
        .zip(targets)
        .map(|(p, t)| t * p.max(PROB_EPS).ln())
        .sum::<f64>()
}

/// Mean squared error between the predicted residual and the stage-one
/// error of the same mode.
pub fn deviation_loss(delta: &[Point], stage1: &[Point], gt: &[Point]) -> f64 {
    let mut total = 0.0;
    for ((d, s), y) in delta.iter().zip(stage1).zip(gt) {
        total += (d[0] - (y[0] - s[0])).powi(2) + (d[1] - (y[1] - s[1])).powi(2);
    }
    total / gt.len() as f64
}

/// Headings of successive displacements, the first measured from the origin.
pub fn displacement_headings(traj: &[Point]) -> Vec<f64> {
    let mut prev = [0.0, 0.0];
    traj.iter()
        .map(|p| {
            let h = (p[1] - prev[1]).atan2(p[0] - prev[0]);
            prev = *p;
            h
        })
        .collect()
}

/// `-mean_t cos(theta_hat_t - theta_t)`.
pub fn angle_loss(traj: &[Point], headings: &[f64]) -> f64 {
    let pred = displacement_headings(traj);
    -pred
        .iter()
        .zip(headings)
        .map(|(a, b)| (a - b).cos())
        .sum::<f64>()
        / headings.len() as f64
}

/// Smallest mean squared error over modes.
pub fn behavior_loss(coarse: &[Vec<Point>], gt: &[Point]) -> f64 {
    coarse
        .iter()
        .map(|c| {
            c.iter()
                .zip(gt)
                .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
                .sum::<f64>()
                / gt.len() as f64
        })
        .fold(f64::INFINITY, f64::min)
}

/// Binary cross-entropy of per-step segment scores against one-hot labels,
/// summed over steps and valid segments.
pub fn lane_loss(scores: &[Vec<f64>], labels: &[usize], valid: &[bool]) -> f64 {
    let eps = crate::lane::BCE_EPS;
    let mut total = 0.0;
    for (row, &label) in scores.iter().zip(labels) {
        for (m, &p) in row.iter().enumerate() {
            if !valid[m] {
                continue;
            }
            let p = p.clamp(eps, 1.0 - eps);
            total -= if m == label { p.ln() } else { (1.0 - p).ln() };
        }
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lane: f64,
    /// Fixed at 1 in the stage objectives; exposed for ablations.
    pub behavior: f64,
    pub deviation: f64,
    pub angle: f64,
    /// Temperature of the soft classification targets.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lane: 1.0,
            behavior: 1.0,
            deviation: 1.0,
            angle: 0.1,
            tau: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    One,
    Two,
}

/// Named loss components of one stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub reg: f64,
    pub cls: f64,
    pub lane: Option<f64>,
    pub behavior: Option<f64>,
    pub deviation: Option<f64>,
    pub angle: Option<f64>,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.reg
            + self.cls
            + w.lane * self.lane.unwrap_or(0.0)
            + w.behavior * self.behavior.unwrap_or(0.0)
            + w.deviation * self.deviation.unwrap_or(0.0)
            + w.angle * self.angle.unwrap_or(0.0)
    }

    /// Stage one ignores the deviation and angle terms.
    pub fn stage_total(&self, w: &LossWeights, stage: Stage) -> f64 {
        match stage {
            Stage::One => Self {
                deviation: None,
                angle: None,
                ..self.clone()
            }
            .total(w),
            Stage::Two => self.total(w),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![("reg", self.reg), ("cls", self.cls)];
        let opt = [
            ("lane", self.lane),
            ("behavior", self.behavior),
            ("deviation", self.deviation),
            ("angle", self.angle),
        ];
        v.extend(opt.into_iter().filter_map(|(n, x)| x.map(|x| (n, x))));
        v
    }
}

/// Indices of the `k` most probable modes, ties to the lowest index.
pub fn top_modes(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn min_ade(trajs: &[Vec<Point>], probs: &[f64], gt: &[Point], k: usize) -> f64 {
    top_modes(probs, k)
        .into_iter()
        .map(|i| ade(&trajs[i], gt))
        .fold(f64::INFINITY, f64::min)
}

pub fn min_fde(trajs: &[Vec<Point>], probs: &[f64], gt: &[Point], k: usize) -> f64 {
    top_modes(probs, k)
        .into_iter()
        .map(|i| fde(&trajs[i], gt))
        .fold(f64::INFINITY, f64::min)
}

/// `minFDE + (1 - p)^2` with `p` the probability of the FDE-best mode.
pub fn b_min_fde(trajs: &[Vec<Point>], probs: &[f64], gt: &[Point], k: usize) -> f64 {
    let cand = top_modes(probs, k);
    let best = cand[argmin_by(cand.iter().map(|&i| fde(&trajs[i], gt)))];
    fde(&trajs[best], gt) + (1.0 - probs[best]).powi(2)
}

/// Metrics at one `K_eval`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub b_min_fde: f64,
}

impl KMetrics {
    pub fn of(trajs: &[Vec<Point>], probs: &[f64], gt: &[Point], k: usize) -> Self {
        Self {
            k,
            min_ade: min_ade(trajs, probs, gt, k),
            min_fde: min_fde(trajs, probs, gt, k),
            b_min_fde: b_min_fde(trajs, probs, gt, k),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub index: usize,
    pub per_k: Vec<KMetrics>,
    /// Lane queries whose top-scored segment is the label, and their count.
    pub lane_hits: Option<(usize, usize)>,
}

/// Per-scene metrics and their means for every requested `K_eval`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub mean: Vec<KMetrics>,
    /// Fraction of lane queries whose top-scored segment is the label.
    pub lane_top1: Option<f64>,
    pub scenes: Vec<SceneMetrics>,
}

impl MetricsReport {
    pub fn from_scenes(ks: &[usize], scenes: Vec<SceneMetrics>) -> Self {
        let n = scenes.len().max(1) as f64;
        let mean = ks
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let mut m = KMetrics {
                    k,
                    ..KMetrics::default()
                };
                for s in &scenes {
                    m.min_ade += s.per_k[i].min_ade / n;
                    m.min_fde += s.per_k[i].min_fde / n;
                    m.b_min_fde += s.per_k[i].b_min_fde / n;
                }
                m
            })
            .collect();
        let (hits, total) = scenes
            .iter()
            .filter_map(|s| s.lane_hits)
            .fold((0, 0), |(h, t), (a, b)| (h + a, t + b));
        Self {
            ks: ks.to_vec(),
            mean,
            lane_top1: (total > 0).then(|| hits as f64 / total as f64),
            scenes,
        }
    }

    pub fn at(&self, k: usize) -> Option<&KMetrics> {
        self.mean.iter().find(|m| m.k == k)
    }
}

impl fmt::Display for MetricsReport {
    /// One header line and one value line, three columns per `K`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut head = String::new();
        let mut vals = String::new();
        for m in &self.mean {
            for (name, v) in [("minADE", m.min_ade), ("minFDE", m.min_fde), ("b-minFDE", m.b_min_fde)] {
                let label = format!("{name}_{}", m.k);
                let w = label.len().max(10);
                head.push_str(&format!("{label:>w$} "));
                vals.push_str(&format!("{v:>w$.4} "));
            }
        }
        if let Some(acc) = self.lane_top1 {
            head.push_str(&format!("{:>10}", "lane_top1"));
            vals.push_str(&format!("{acc:>10.4}"));
        }
        writeln!(f, "scenes: {}", self.scenes.len())?;
        writeln!(f, "{}", head.trim_end())?;
        write!(f, "{}", vals.trim_end())
    }
}
