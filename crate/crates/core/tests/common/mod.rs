//! Shared helpers for the integration tests: random small scenes and
//! brute-force reference implementations.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use blnet::scene::{
    headings_from_positions, nearest_segment_labels, AgentStep, AgentTrack, Frame, GroundTruth, LaneSegment,
    LaneVector, Point, Scene, SceneMeta,
};

pub const ATTR: usize = 4;

#[derive(Clone, Copy, Debug)]
pub struct Shape {
    pub segments: usize,
    pub vectors: usize,
    pub agents: usize,
    pub history: usize,
    pub future: usize,
}

impl Shape {
    /// Matches the tiny model configuration.
    pub const TINY: Shape = Shape {
        segments: 3,
        vectors: 3,
        agents: 2,
        history: 4,
        future: 3,
    };
}

fn attrs(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..ATTR).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn polyline(rng: &mut ChaCha8Rng, n: usize, start: Point, heading: f64, step: f64) -> Vec<Point> {
    let mut pts = vec![start];
    let mut h = heading;
    for _ in 0..n {
        h += rng.random_range(-0.3..0.3);
        let len = step * rng.random_range(0.6..1.4);
        let p = *pts.last().unwrap();
        pts.push([p[0] + len * h.cos(), p[1] + len * h.sin()]);
    }
    pts
}

/// A random valid scene in the target-centric frame. With `masks` some
/// vectors, steps, segments and agents are masked out; the target agent and
/// segment 0 always stay fully observed.
pub fn random_scene(rng: &mut ChaCha8Rng, shape: Shape, masks: bool) -> Scene {
    let segments: Vec<LaneSegment> = (0..shape.segments)
        .map(|i| {
            let start = [rng.random_range(-25.0..25.0), rng.random_range(-25.0..25.0)];
            let heading = rng.random_range(-3.1..3.1);
            let step = rng.random_range(2.0..6.0);
            let pts = polyline(rng, shape.vectors, start, heading, step);
            let mut mask = vec![true; shape.vectors];
            if masks && i > 0 {
                if rng.random_bool(0.2) {
                    mask = vec![false; shape.vectors];
                } else {
                    let keep = rng.random_range(1..=shape.vectors);
                    mask = (0..shape.vectors).map(|s| s < keep).collect();
                }
            }
            let vectors = (0..shape.vectors)
                .map(|s| {
                    if mask[s] {
                        let pred = if s == 0 { pts[0] } else { pts[s - 1] };
                        LaneVector::new(pts[s], pts[s + 1], pred, attrs(rng))
                    } else {
                        LaneVector::padding(ATTR)
                    }
                })
                .collect();
            LaneSegment {
                id: i as u32,
                vectors,
                mask,
            }
        })
        .collect();

    let speed = rng.random_range(1.0..3.0);
    let agents: Vec<AgentTrack> = (0..shape.agents)
        .map(|i| {
            let (pts, mut mask) = if i == 0 {
                // ends at the origin heading along +x
                let pts: Vec<Point> = (0..=shape.history)
                    .map(|s| [-((shape.history - s) as f64) * speed, rng.random_range(-0.05..0.05)])
                    .map(|mut p| {
                        if p[0] == 0.0 {
                            p[1] = 0.0;
                        }
                        p
                    })
                    .collect();
                (pts, vec![true; shape.history])
            } else {
                let start = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
                let (heading, step) = (rng.random_range(-3.1..3.1), rng.random_range(0.5..3.0));
                let pts = polyline(rng, shape.history, start, heading, step);
                (pts, vec![true; shape.history])
            };
            if masks && i > 0 {
                if rng.random_bool(0.2) {
                    mask = vec![false; shape.history];
                } else {
                    let first = rng.random_range(0..shape.history);
                    mask = (0..shape.history).map(|s| s >= first).collect();
                }
            }
            let steps = (0..shape.history)
                .map(|s| {
                    if mask[s] {
                        AgentStep::new(pts[s], pts[s + 1], attrs(rng))
                    } else {
                        AgentStep::padding(ATTR)
                    }
                })
                .collect();
            AgentTrack {
                id: i as u32,
                is_target: i == 0,
                steps,
                mask,
            }
        })
        .collect();

    let future: Vec<Point> = polyline(rng, shape.future, [0.0, 0.0], 0.0, speed)[1..].to_vec();
    let ground_truth = GroundTruth {
        headings: headings_from_positions(&future),
        lane_labels: nearest_segment_labels(&segments, &future),
        positions: future,
    };
    let scene = Scene {
        meta: SceneMeta {
            num_segments: shape.segments,
            vectors_per_segment: shape.vectors,
            num_agents: shape.agents,
            history_len: shape.history,
            future_len: shape.future,
            frame: Frame::TargetCentric,
        },
        segments,
        agents,
        ground_truth,
    };
    scene.validate().expect("random scene is valid");
    scene
}

/// Overwrites every masked vector, masked step and fully masked element
/// with random finite values.
pub fn perturb_masked(rng: &mut ChaCha8Rng, scene: &Scene) -> Scene {
    let mut out = scene.clone();
    let r = |rng: &mut ChaCha8Rng| rng.random_range(-1e3..1e3);
    for seg in &mut out.segments {
        for (v, &ok) in seg.vectors.iter_mut().zip(&seg.mask) {
            if !ok {
                let attributes = (0..ATTR).map(|_| r(rng)).collect();
                *v = LaneVector::new([r(rng), r(rng)], [r(rng), r(rng)], [r(rng), r(rng)], attributes);
            }
        }
    }
    for agent in &mut out.agents {
        for (s, &ok) in agent.steps.iter_mut().zip(&agent.mask) {
            if !ok {
                let attributes = (0..ATTR).map(|_| r(rng)).collect();
                *s = AgentStep::new([r(rng), r(rng)], [r(rng), r(rng)], attributes);
            }
        }
    }
    out
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.random_range(-spread..spread), rng.random_range(-spread..spread)])
        .collect()
}

pub fn random_probs(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Brute-force references written independently of the library.
pub mod oracle {
    use blnet::scene::Point;

    fn d(a: Point, b: Point) -> f64 {
        ((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])).sqrt()
    }

    /// Modes allowed at `K_eval = k`: those with fewer than `k` modes
    /// strictly more probable (index breaks ties).
    fn allowed(probs: &[f64], k: usize) -> Vec<usize> {
        (0..probs.len())
            .filter(|&i| {
                let ahead = (0..probs.len())
                    .filter(|&j| probs[j] > probs[i] || (probs[j] == probs[i] && j < i))
                    .count();
                ahead < k
            })
            .collect()
    }

    pub fn min_ade(trajs: &[Vec<Point>], probs: &[f64], gt: &[Point], k: usize) -> f64 {
        let mut best = f64::MAX;
        for i in allowed(probs, k) {
            let mut s = 0.0;
            for t in 0..gt.len() {
                s += d(trajs[i][t], gt[t]);
            }
            best = best.min(s / gt.len() as f64);
        }
        best
    }

    pub fn min_fde(trajs: &[Vec<Point>], probs: &[f64], gt: &[Point], k: usize) -> f64 {
        let last = gt.len() - 1;
        allowed(probs, k)
            .into_iter()
            .map(|i| d(trajs[i][last], gt[last]))
            .fold(f64::MAX, f64::min)
    }

    pub fn b_min_fde(trajs: &[Vec<Point>], probs: &[f64], gt: &[Point], k: usize) -> f64 {
        let last = gt.len() - 1;
        let mut best: Option<(f64, usize)> = None;
        for i in allowed(probs, k) {
            let f = d(trajs[i][last], gt[last]);
            if best.is_none_or(|(b, _)| f < b) {
                best = Some((f, i));
            }
        }
        let (f, i) = best.unwrap();
        f + (1.0 - probs[i]) * (1.0 - probs[i])
    }

    pub fn behavior_loss(coarse: &[Vec<Point>], gt: &[Point]) -> f64 {
        let mut best = f64::MAX;
        for c in coarse {
            let mut s = 0.0;
            for t in 0..gt.len() {
                s += d(c[t], gt[t]).powi(2);
            }
            best = best.min(s / gt.len() as f64);
        }
        best
    }

    pub fn lane_loss(scores: &[Vec<f64>], labels: &[usize], valid: &[bool]) -> f64 {
        let mut s = 0.0;
        for t in 0..labels.len() {
            for m in 0..valid.len() {
                if !valid[m] {
                    continue;
                }
                let p = scores[t][m].clamp(1e-7, 1.0 - 1e-7);
                let y = if labels[t] == m { 1.0 } else { 0.0 };
                s -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
        }
        s
    }

    pub fn deviation_loss(delta: &[Point], stage1: &[Point], gt: &[Point]) -> f64 {
        let mut s = 0.0;
        for t in 0..gt.len() {
            let target = [gt[t][0] - stage1[t][0], gt[t][1] - stage1[t][1]];
            s += d(delta[t], target).powi(2);
        }
        s / gt.len() as f64
    }

    pub fn angle_loss(traj: &[Point], headings: &[f64]) -> f64 {
        let mut s = 0.0;
        for t in 0..traj.len() {
            let prev = if t == 0 { [0.0, 0.0] } else { traj[t - 1] };
            let h = (traj[t][1] - prev[1]).atan2(traj[t][0] - prev[0]);
            s += (h - headings[t]).cos();
        }
        -s / traj.len() as f64
    }
}
