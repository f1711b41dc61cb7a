//! Deterministic synthetic driving scenes.
//!
//! Every scene shares one junction layout: an approach lane that splits into
//! straight, left-turn and right-turn branches, a parallel adjacent lane and a
//! lane-change connector between the two. The scenario decides which path the
//! target follows, so intent labels come from construction. Agents move at
//! constant speed along lane center-lines with truncated Gaussian position
//! noise. Scenes are emitted in the target-centric frame.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{
    headings_from_positions, nearest_segment_labels, normalize_to_target_frame, save_scene,
    AgentStep, AgentTrack, Frame, GroundTruth, LaneSegment, LaneVector, Point, RigidTransform,
    Scene, SceneError, SceneMeta,
};

/// Lane attribute layout: direction one-hot (straight, left, right) then a
/// traffic-light flag.
pub const LANE_ATTR_DIM: usize = 4;
/// Agent attribute layout: category one-hot (vehicle, pedestrian, cyclist)
/// then a validity flag.
pub const AGENT_ATTR_DIM: usize = 4;

const LANE_WIDTH: f64 = 3.5;
const VECTOR_LEN: f64 = 2.5;
const DENSE_STEP: f64 = 0.05;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("infeasible geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Straight,
    LeftTurn,
    RightTurn,
    LaneChange,
    SlowTraffic,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::Straight,
        ScenarioKind::LeftTurn,
        ScenarioKind::RightTurn,
        ScenarioKind::LaneChange,
        ScenarioKind::SlowTraffic,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::LeftTurn => "left_turn",
            ScenarioKind::RightTurn => "right_turn",
            ScenarioKind::LaneChange => "lane_change",
            ScenarioKind::SlowTraffic => "slow_traffic",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Proportions over scenario kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMix {
    pub straight: f64,
    pub left_turn: f64,
    pub right_turn: f64,
    pub lane_change: f64,
    pub slow_traffic: f64,
}

impl Default for ScenarioMix {
    fn default() -> Self {
        Self {
            straight: 0.3,
            left_turn: 0.2,
            right_turn: 0.2,
            lane_change: 0.15,
            slow_traffic: 0.15,
        }
    }
}

impl ScenarioMix {
    pub fn only(kind: ScenarioKind) -> Self {
        let mut m = Self {
            straight: 0.0,
            left_turn: 0.0,
            right_turn: 0.0,
            lane_change: 0.0,
            slow_traffic: 0.0,
        };
        *m.weight_mut(kind) = 1.0;
        m
    }

    pub fn weight(&self, kind: ScenarioKind) -> f64 {
        match kind {
            ScenarioKind::Straight => self.straight,
            ScenarioKind::LeftTurn => self.left_turn,
            ScenarioKind::RightTurn => self.right_turn,
            ScenarioKind::LaneChange => self.lane_change,
            ScenarioKind::SlowTraffic => self.slow_traffic,
        }
    }

    pub fn weight_mut(&mut self, kind: ScenarioKind) -> &mut f64 {
        match kind {
            ScenarioKind::Straight => &mut self.straight,
            ScenarioKind::LeftTurn => &mut self.left_turn,
            ScenarioKind::RightTurn => &mut self.right_turn,
            ScenarioKind::LaneChange => &mut self.lane_change,
            ScenarioKind::SlowTraffic => &mut self.slow_traffic,
        }
    }

    fn pick(&self, u: f64) -> ScenarioKind {
        let mut acc = 0.0;
        let mut last = ScenarioKind::Straight;
        for kind in ScenarioKind::ALL {
            let w = self.weight(kind);
            if w <= 0.0 {
                continue;
            }
            acc += w;
            last = kind;
            if u < acc {
                return kind;
            }
        }
        last
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub scenario_mix: ScenarioMix,
    pub num_segments: usize,
    pub vectors_per_segment: usize,
    pub num_agents: usize,
    pub history_len: usize,
    pub future_len: usize,
    /// Target speed range in m/s.
    pub speed_range: (f64, f64),
    /// Position noise standard deviation in meters.
    pub noise_std: f64,
    /// Sampling interval in seconds.
    pub dt: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenario_mix: ScenarioMix::default(),
            num_segments: 24,
            vectors_per_segment: 4,
            num_agents: 4,
            history_len: 8,
            future_len: 12,
            speed_range: (4.0, 10.0),
            noise_std: 0.05,
            dt: 0.25,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Config(m.to_string()));
        let total: f64 = ScenarioKind::ALL.iter().map(|&k| self.scenario_mix.weight(k)).sum();
        if ScenarioKind::ALL.iter().any(|&k| self.scenario_mix.weight(k) < 0.0) {
            return bad("scenario proportions must be non-negative");
        }
        if (total - 1.0).abs() > 1e-9 {
            return bad("scenario proportions must sum to 1");
        }
        if self.history_len < 2 || self.future_len < 2 {
            return bad("T_h and T_f must be at least 2");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be a finite non-negative number");
        }
        if self.num_segments == 0 || self.vectors_per_segment == 0 || self.num_agents == 0 {
            return bad("N_m, S and N_v must be positive");
        }
        let (lo, hi) = self.speed_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("speed_range must satisfy 0 < min <= max");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        Ok(())
    }
}

/// Densely sampled polyline with cumulative arc length.
#[derive(Clone, Debug)]
struct Polyline {
    pts: Vec<Point>,
    cum: Vec<f64>,
}

impl Polyline {
    fn new(pts: Vec<Point>) -> Self {
        let mut cum = Vec::with_capacity(pts.len());
        let mut s = 0.0;
        for (i, p) in pts.iter().enumerate() {
            if i > 0 {
                s += dist(pts[i - 1], *p);
            }
            cum.push(s);
        }
        Self { pts, cum }
    }

    fn from_fn(len: f64, f: impl Fn(f64) -> Point) -> Self {
        let n = (len / DENSE_STEP).ceil().max(1.0) as usize;
        Self::new((0..=n).map(|i| f(i as f64 / n as f64)).collect())
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn at(&self, s: f64) -> Point {
        let s = s.clamp(0.0, self.length());
        let i = match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => return self.pts[i],
            Err(i) => i.clamp(1, self.pts.len() - 1),
        };
        let (s0, s1) = (self.cum[i - 1], self.cum[i]);
        let u = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
        let (a, b) = (self.pts[i - 1], self.pts[i]);
        [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
    }

    /// Arc length of the first dense point with `x >= x0`.
    fn arc_at_x(&self, x0: f64) -> f64 {
        self.pts
            .iter()
            .zip(&self.cum)
            .find(|(p, _)| p[0] >= x0)
            .map_or(self.length(), |(_, &s)| s)
    }

    fn slice(&self, s0: f64, s1: f64) -> Polyline {
        let n = ((s1 - s0) / DENSE_STEP).ceil().max(1.0) as usize;
        Polyline::new(
            (0..=n)
                .map(|i| self.at(s0 + (s1 - s0) * i as f64 / n as f64))
                .collect(),
        )
    }

    fn join(parts: &[&Polyline]) -> Polyline {
        let mut pts: Vec<Point> = Vec::new();
        for p in parts {
            for q in &p.pts {
                if pts.last().is_none_or(|l| dist(*l, *q) > 1e-9) {
                    pts.push(*q);
                }
            }
        }
        Polyline::new(pts)
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LaneKind {
    Approach,
    Straight,
    Left,
    Right,
    Adjacent,
    Connector,
}

struct Lane {
    kind: LaneKind,
    line: Polyline,
    predecessor: Option<LaneKind>,
    attributes: Vec<f64>,
}

struct Layout {
    lanes: Vec<Lane>,
    connector_start_x: f64,
    connector_len: f64,
}

impl Layout {
    fn lane(&self, kind: LaneKind) -> &Lane {
        self.lanes.iter().find(|l| l.kind == kind).unwrap()
    }
}

fn build_layout(rng: &mut ChaCha8Rng, back: f64, reach: f64) -> Layout {
    let x_start = -back;
    let x_int: f64 = rng.random_range(4.0..14.0);
    let x_end = x_int.max(0.0) + reach + 10.0;
    let r_left: f64 = rng.random_range(9.0..13.0);
    let r_right: f64 = rng.random_range(6.0..9.0);
    let connector_start_x: f64 = rng.random_range(1.0..4.0);
    let connector_len: f64 = rng.random_range(12.0..18.0);
    let light = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    let attrs = |dir: usize, light: f64| {
        let mut a = vec![0.0; LANE_ATTR_DIM];
        a[dir] = 1.0;
        a[3] = light;
        a
    };

    let approach = Polyline::from_fn(x_int - x_start, |u| [x_start + u * (x_int - x_start), 0.0]);
    let straight = Polyline::from_fn(x_end - x_int, |u| [x_int + u * (x_end - x_int), 0.0]);
    let after = reach + 5.0;
    let left_arc = Polyline::from_fn(r_left * PI / 2.0, |u| {
        let phi = u * PI / 2.0;
        [x_int + r_left * phi.sin(), r_left - r_left * phi.cos()]
    });
    let left_tail = Polyline::from_fn(after, |u| [x_int + r_left, r_left + u * after]);
    let right_arc = Polyline::from_fn(r_right * PI / 2.0, |u| {
        let phi = u * PI / 2.0;
        [x_int + r_right * phi.sin(), -r_right + r_right * phi.cos()]
    });
    let right_tail = Polyline::from_fn(after, |u| [x_int + r_right, -r_right - u * after]);
    let adjacent = Polyline::from_fn(x_end - x_start, |u| {
        [x_start + u * (x_end - x_start), LANE_WIDTH]
    });
    let connector = Polyline::from_fn(connector_len, |u| {
        [
            connector_start_x + u * connector_len,
            LANE_WIDTH * 0.5 * (1.0 - (PI * u).cos()),
        ]
    });

    let lanes = vec![
        Lane {
            kind: LaneKind::Approach,
            line: approach,
            predecessor: None,
            attributes: attrs(0, light),
        },
        Lane {
            kind: LaneKind::Straight,
            line: straight,
            predecessor: Some(LaneKind::Approach),
            attributes: attrs(0, 0.0),
        },
        Lane {
            kind: LaneKind::Left,
            line: Polyline::join(&[&left_arc, &left_tail]),
            predecessor: Some(LaneKind::Approach),
            attributes: attrs(1, 0.0),
        },
        Lane {
            kind: LaneKind::Right,
            line: Polyline::join(&[&right_arc, &right_tail]),
            predecessor: Some(LaneKind::Approach),
            attributes: attrs(2, 0.0),
        },
        Lane {
            kind: LaneKind::Adjacent,
            line: adjacent,
            predecessor: None,
            attributes: attrs(0, 0.0),
        },
        Lane {
            kind: LaneKind::Connector,
            line: connector,
            predecessor: Some(LaneKind::Approach),
            attributes: attrs(0, 0.0),
        },
    ];
    Layout {
        lanes,
        connector_start_x,
        connector_len,
    }
}

/// Path followed by the target for a scenario, and the lanes it uses.
fn target_path(layout: &Layout, kind: ScenarioKind) -> (Polyline, Vec<LaneKind>) {
    let approach = &layout.lane(LaneKind::Approach).line;
    match kind {
        ScenarioKind::Straight | ScenarioKind::SlowTraffic => (
            Polyline::join(&[approach, &layout.lane(LaneKind::Straight).line]),
            vec![LaneKind::Approach, LaneKind::Straight],
        ),
        ScenarioKind::LeftTurn => (
            Polyline::join(&[approach, &layout.lane(LaneKind::Left).line]),
            vec![LaneKind::Approach, LaneKind::Left],
        ),
        ScenarioKind::RightTurn => (
            Polyline::join(&[approach, &layout.lane(LaneKind::Right).line]),
            vec![LaneKind::Approach, LaneKind::Right],
        ),
        ScenarioKind::LaneChange => {
            let head = approach.slice(0.0, approach.arc_at_x(layout.connector_start_x));
            let adj = &layout.lane(LaneKind::Adjacent).line;
            let join_x = layout.connector_start_x + layout.connector_len;
            let tail = adj.slice(adj.arc_at_x(join_x), adj.length());
            (
                Polyline::join(&[&head, &layout.lane(LaneKind::Connector).line, &tail]),
                vec![LaneKind::Approach, LaneKind::Connector, LaneKind::Adjacent],
            )
        }
    }
}

struct SegmentCandidate {
    lane: LaneKind,
    vectors: Vec<LaneVector>,
    center: Point,
}

/// Resamples each lane into chained vectors and chops them into segments of
/// `s` vectors.
fn segment_lanes(layout: &Layout, s: usize) -> Vec<SegmentCandidate> {
    let mut resampled: Vec<(LaneKind, Vec<Point>)> = Vec::new();
    for lane in &layout.lanes {
        let len = lane.line.length();
        let n_seg = (len / (s as f64 * VECTOR_LEN)).ceil().max(1.0) as usize;
        let n_vec = n_seg * s;
        let pts = (0..=n_vec)
            .map(|i| lane.line.at(len * i as f64 / n_vec as f64))
            .collect();
        resampled.push((lane.kind, pts));
    }
    let mut out = Vec::new();
    for (lane, (kind, pts)) in layout.lanes.iter().zip(&resampled) {
        let first_pred = lane
            .predecessor
            .and_then(|p| resampled.iter().find(|(k, _)| *k == p))
            .map(|(_, q)| q[q.len() - 2])
            .unwrap_or_else(|| [2.0 * pts[0][0] - pts[1][0], 2.0 * pts[0][1] - pts[1][1]]);
        let n_vec = pts.len() - 1;
        for seg in 0..n_vec / s {
            let vectors: Vec<LaneVector> = (seg * s..(seg + 1) * s)
                .map(|i| {
                    let pred = if i == 0 { first_pred } else { pts[i - 1] };
                    LaneVector::new(pts[i], pts[i + 1], pred, lane.attributes.clone())
                })
                .collect();
            let mut c = [0.0; 2];
            for v in &vectors {
                let m = v.midpoint();
                c[0] += m[0] / s as f64;
                c[1] += m[1] / s as f64;
            }
            out.push(SegmentCandidate {
                lane: *kind,
                vectors,
                center: c,
            });
        }
    }
    out
}

fn sample_noise(rng: &mut ChaCha8Rng, std: f64) -> Point {
    if std == 0.0 {
        return [0.0, 0.0];
    }
    let nx: f64 = StandardNormal.sample(rng);
    let ny: f64 = StandardNormal.sample(rng);
    let mut p = [nx * std, ny * std];
    let n = (p[0] * p[0] + p[1] * p[1]).sqrt();
    // truncate at two standard deviations so ground truth stays near its lane
    if n > 2.0 * std {
        p = [p[0] * 2.0 * std / n, p[1] * 2.0 * std / n];
    }
    p
}

fn agent_attrs(valid: bool) -> Vec<f64> {
    vec![1.0, 0.0, 0.0, if valid { 1.0 } else { 0.0 }]
}

/// Positions along `path` for `count` samples ending at arc length `s_end`.
fn positions_along(path: &Polyline, s_end: f64, speed: f64, dt: f64, count: usize) -> Vec<Point> {
    (0..count)
        .map(|i| {
            let back = (count - 1 - i) as f64;
            path.at(s_end - back * speed * dt)
        })
        .collect()
}

fn track_from_positions(
    id: u32,
    is_target: bool,
    pts: &[Point],
    masked_prefix: usize,
) -> AgentTrack {
    let steps: Vec<AgentStep> = pts
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            if i < masked_prefix {
                AgentStep::padding(AGENT_ATTR_DIM)
            } else {
                AgentStep::new(w[0], w[1], agent_attrs(true))
            }
        })
        .collect();
    let mask = (0..steps.len()).map(|i| i >= masked_prefix).collect();
    AgentTrack {
        id,
        is_target,
        steps,
        mask,
    }
}

fn rng_for(cfg: &GeneratorConfig, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    rng
}

/// Generates scene `index`; identical `(seed, index)` pairs give identical
/// scenes regardless of call order.
pub fn generate_tagged(cfg: &GeneratorConfig, index: u64) -> Result<(Scene, ScenarioKind), GenError> {
    cfg.validate()?;
    let mut rng = rng_for(cfg, index);
    let kind = cfg.scenario_mix.pick(rng.random_range(0.0..1.0));
    let (v_lo, v_hi) = cfg.speed_range;
    let speed = match kind {
        ScenarioKind::SlowTraffic => v_lo * rng.random_range(0.4..0.8),
        _ => rng.random_range(v_lo..=v_hi),
    };
    let t_h = cfg.history_len;
    let t_f = cfg.future_len;
    let back = t_h as f64 * cfg.dt * v_hi.max(speed) + 15.0;
    let reach = t_f as f64 * cfg.dt * v_hi + 5.0;
    let layout = build_layout(&mut rng, back, reach);
    let (path, path_lanes) = target_path(&layout, kind);

    // the target's last observed position sits at x = 0 on the approach lane
    let s_now = path.arc_at_x(0.0);
    let hist: Vec<Point> = positions_along(&path, s_now, speed, cfg.dt, t_h + 1)
        .into_iter()
        .map(|p| add(p, sample_noise(&mut rng, cfg.noise_std)))
        .collect();
    let future: Vec<Point> = (1..=t_f)
        .map(|j| {
            let p = path.at(s_now + j as f64 * speed * cfg.dt);
            add(p, sample_noise(&mut rng, cfg.noise_std))
        })
        .collect();
    if path.length() < s_now + t_f as f64 * speed * cfg.dt {
        return Err(GenError::Geometry("target path shorter than the horizon".into()));
    }

    let mut agents = vec![track_from_positions(0, true, &hist, 0)];
    for a in 1..cfg.num_agents {
        let (line, s_end, v) = if kind == ScenarioKind::SlowTraffic && a == 1 {
            // lead vehicle on the target path
            (path.clone(), s_now + rng.random_range(8.0..15.0), speed)
        } else {
            let choices = [
                LaneKind::Adjacent,
                LaneKind::Adjacent,
                LaneKind::Straight,
                LaneKind::Approach,
                LaneKind::Left,
                LaneKind::Right,
            ];
            let lane_kind = choices[rng.random_range(0..choices.len())];
            let line = match lane_kind {
                LaneKind::Approach => Polyline::join(&[
                    &layout.lane(LaneKind::Approach).line,
                    &layout.lane(LaneKind::Straight).line,
                ]),
                k => layout.lane(k).line.clone(),
            };
            let v = rng.random_range(v_lo..=v_hi);
            let need = t_h as f64 * v * cfg.dt;
            let hi = line.length().max(need + 1e-3);
            (line, rng.random_range(need..=hi), v)
        };
        let pts: Vec<Point> = positions_along(&line, s_end, v, cfg.dt, t_h + 1)
            .into_iter()
            .map(|p| add(p, sample_noise(&mut rng, cfg.noise_std)))
            .collect();
        let masked = if t_h > 2 && rng.random_bool(0.3) {
            rng.random_range(1..t_h - 1)
        } else {
            0
        };
        agents.push(track_from_positions(a as u32, false, &pts, masked));
    }

    // keep the segments the target passes near, then the closest others
    let candidates = segment_lanes(&layout, cfg.vectors_per_segment);
    let mut required = Vec::new();
    let mut optional = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let on_path = path_lanes.contains(&c.lane);
        let near = c.vectors.iter().any(|v| {
            future
                .iter()
                .chain(std::iter::once(&hist[t_h]))
                .any(|p| dist(v.start(), *p) < 3.0 || dist(v.end(), *p) < 3.0)
        });
        if on_path && near {
            required.push(i);
        } else {
            optional.push(i);
        }
    }
    if required.len() > cfg.num_segments {
        return Err(GenError::Geometry(format!(
            "{} scenario needs {} lane segments but N_m = {}",
            kind,
            required.len(),
            cfg.num_segments
        )));
    }
    optional.sort_by(|&a, &b| {
        let da = dist(candidates[a].center, [0.0, 0.0]);
        let db = dist(candidates[b].center, [0.0, 0.0]);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let mut chosen = required;
    chosen.extend(optional.into_iter().take(cfg.num_segments - chosen.len()));
    chosen.sort_unstable();
    let mut segments: Vec<LaneSegment> = chosen
        .iter()
        .enumerate()
        .map(|(id, &i)| LaneSegment {
            id: id as u32,
            vectors: candidates[i].vectors.clone(),
            mask: vec![true; cfg.vectors_per_segment],
        })
        .collect();
    while segments.len() < cfg.num_segments {
        segments.push(LaneSegment {
            id: segments.len() as u32,
            vectors: vec![LaneVector::padding(LANE_ATTR_DIM); cfg.vectors_per_segment],
            mask: vec![false; cfg.vectors_per_segment],
        });
    }

    let raw = Scene {
        meta: SceneMeta {
            num_segments: cfg.num_segments,
            vectors_per_segment: cfg.vectors_per_segment,
            num_agents: cfg.num_agents,
            history_len: t_h,
            future_len: t_f,
            frame: Frame::World,
        },
        segments,
        agents,
        ground_truth: GroundTruth {
            positions: future,
            headings: vec![0.0; t_f],
            lane_labels: vec![0; t_f],
        },
    };
    // place the scene at a random world pose, then normalize
    let world = RigidTransform {
        angle: rng.random_range(-PI..PI),
        shift: [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)],
    };
    let raw = crate::scene::transform_scene(&raw, &world);
    let mut scene = normalize_to_target_frame(&raw)?;
    scene.ground_truth.headings = headings_from_positions(&scene.ground_truth.positions);
    scene.ground_truth.lane_labels =
        nearest_segment_labels(&scene.segments, &scene.ground_truth.positions);
    scene.validate()?;
    Ok((scene, kind))
}

pub fn generate_scene(cfg: &GeneratorConfig, index: u64) -> Result<Scene, GenError> {
    generate_tagged(cfg, index).map(|(s, _)| s)
}

fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub tag: String,
}

/// Dataset index written next to the scene files. Paths are relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GeneratorConfig,
    pub count: usize,
    pub scenes: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:05}.json")
}

/// Writes `count` scenes and a manifest into `out_dir`; returns the manifest path.
pub fn generate_dataset(
    cfg: &GeneratorConfig,
    count: usize,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf, GenError> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let io_err = |p: &Path| {
        let path = p.display().to_string();
        move |source| GenError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let (scene, kind) = generate_tagged(cfg, i as u64)?;
        let name = scene_file_name(i);
        save_scene(&scene, out_dir.join(&name))?;
        entries.push(ManifestEntry {
            path: name,
            tag: kind.tag().to_string(),
        });
    }
    let manifest = Manifest {
        config: cfg.clone(),
        count,
        scenes: entries,
    };
    let path = out_dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, GenError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| GenError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| {
        GenError::Scene(SceneError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    })
}
