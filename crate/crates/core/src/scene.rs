//! Vectorized scene representation and the on-disk scene document.
//!
//! Lanes are split into segments of `S` chained center-line vectors; agents
//! carry `T_h` chained displacement vectors. Every array has a validity mask
//! so scenes can be padded to common sizes.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = [f64; 2];

const CHAIN_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    #[default]
    World,
    TargetCentric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneVector {
    #[serde(rename = "sx")]
    pub start_x: f64,
    #[serde(rename = "sy")]
    pub start_y: f64,
    #[serde(rename = "ex")]
    pub end_x: f64,
    #[serde(rename = "ey")]
    pub end_y: f64,
    #[serde(rename = "px")]
    pub pred_x: f64,
    #[serde(rename = "py")]
    pub pred_y: f64,
    #[serde(rename = "attr")]
    pub attributes: Vec<f64>,
}

impl LaneVector {
    pub fn new(start: Point, end: Point, predecessor: Point, attributes: Vec<f64>) -> Self {
        Self {
            start_x: start[0],
            start_y: start[1],
            end_x: end[0],
            end_y: end[1],
            pred_x: predecessor[0],
            pred_y: predecessor[1],
            attributes,
        }
    }

    /// Masked padding entry.
    pub fn padding(attr_dim: usize) -> Self {
        Self::new([0.0; 2], [0.0; 2], [0.0; 2], vec![0.0; attr_dim])
    }

    pub fn start(&self) -> Point {
        [self.start_x, self.start_y]
    }

    pub fn end(&self) -> Point {
        [self.end_x, self.end_y]
    }

    pub fn predecessor(&self) -> Point {
        [self.pred_x, self.pred_y]
    }

    pub fn midpoint(&self) -> Point {
        [
            0.5 * (self.start_x + self.end_x),
            0.5 * (self.start_y + self.end_y),
        ]
    }

    fn numbers(&self) -> impl Iterator<Item = f64> + '_ {
        [
            self.start_x,
            self.start_y,
            self.end_x,
            self.end_y,
            self.pred_x,
            self.pred_y,
        ]
        .into_iter()
        .chain(self.attributes.iter().copied())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneSegment {
    pub id: u32,
    pub vectors: Vec<LaneVector>,
    pub mask: Vec<bool>,
}

impl LaneSegment {
    pub fn is_valid(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }

    /// Mean of the valid vector midpoints, or `None` for a fully masked segment.
    pub fn center(&self) -> Option<Point> {
        let mut acc = [0.0; 2];
        let mut n = 0usize;
        for (v, _) in self.vectors.iter().zip(&self.mask).filter(|(_, &m)| m) {
            let mid = v.midpoint();
            acc[0] += mid[0];
            acc[1] += mid[1];
            n += 1;
        }
        (n > 0).then(|| [acc[0] / n as f64, acc[1] / n as f64])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentStep {
    #[serde(rename = "sx")]
    pub start_x: f64,
    #[serde(rename = "sy")]
    pub start_y: f64,
    #[serde(rename = "ex")]
    pub end_x: f64,
    #[serde(rename = "ey")]
    pub end_y: f64,
    #[serde(rename = "attr")]
    pub attributes: Vec<f64>,
}

impl AgentStep {
    pub fn new(start: Point, end: Point, attributes: Vec<f64>) -> Self {
        Self {
            start_x: start[0],
            start_y: start[1],
            end_x: end[0],
            end_y: end[1],
            attributes,
        }
    }

    pub fn padding(attr_dim: usize) -> Self {
        Self::new([0.0; 2], [0.0; 2], vec![0.0; attr_dim])
    }

    pub fn start(&self) -> Point {
        [self.start_x, self.start_y]
    }

    pub fn end(&self) -> Point {
        [self.end_x, self.end_y]
    }

    fn numbers(&self) -> impl Iterator<Item = f64> + '_ {
        [self.start_x, self.start_y, self.end_x, self.end_y]
            .into_iter()
            .chain(self.attributes.iter().copied())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u32,
    pub is_target: bool,
    pub steps: Vec<AgentStep>,
    pub mask: Vec<bool>,
}

impl AgentTrack {
    pub fn is_valid(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }

    pub fn last_valid_step(&self) -> Option<&AgentStep> {
        self.steps
            .iter()
            .zip(&self.mask)
            .rev()
            .find(|(_, &m)| m)
            .map(|(s, _)| s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub positions: Vec<Point>,
    pub headings: Vec<f64>,
    pub lane_labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    #[serde(rename = "N_m")]
    pub num_segments: usize,
    #[serde(rename = "S")]
    pub vectors_per_segment: usize,
    #[serde(rename = "N_v")]
    pub num_agents: usize,
    #[serde(rename = "T_h")]
    pub history_len: usize,
    #[serde(rename = "T_f")]
    pub future_len: usize,
    pub frame: Frame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub meta: SceneMeta,
    pub segments: Vec<LaneSegment>,
    pub agents: Vec<AgentTrack>,
    pub ground_truth: GroundTruth,
}

impl Scene {
    pub fn target_index(&self) -> Option<usize> {
        self.agents.iter().position(|a| a.is_target)
    }

    pub fn target(&self) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.is_target)
    }

    pub fn lane_attr_dim(&self) -> usize {
        self.segments
            .first()
            .and_then(|s| s.vectors.first())
            .map_or(0, |v| v.attributes.len())
    }

    pub fn agent_attr_dim(&self) -> usize {
        self.agents
            .first()
            .and_then(|a| a.steps.first())
            .map_or(0, |s| s.attributes.len())
    }

    /// Segment centers for valid segments (`None` for padding).
    pub fn segment_centers(&self) -> Vec<Option<Point>> {
        self.segments.iter().map(LaneSegment::center).collect()
    }

    pub fn segment_valid(&self) -> Vec<bool> {
        self.segments.iter().map(LaneSegment::is_valid).collect()
    }

    pub fn agent_valid(&self) -> Vec<bool> {
        self.agents.iter().map(AgentTrack::is_valid).collect()
    }

    /// Checks every structural and geometric invariant.
    pub fn validate(&self) -> Result<(), SceneError> {
        let m = &self.meta;
        let fail = |msg: String| Err(SceneError::Validation(msg));
        if self.agents.is_empty() {
            return fail("scene has no agents".into());
        }
        if self.segments.is_empty() {
            return fail("scene has no lane segments".into());
        }
        if self.segments.len() != m.num_segments {
            return fail(format!(
                "meta N_m={} but {} segments present",
                m.num_segments,
                self.segments.len()
            ));
        }
        if self.agents.len() != m.num_agents {
            return fail(format!(
                "meta N_v={} but {} agents present",
                m.num_agents,
                self.agents.len()
            ));
        }
        if m.history_len == 0 || m.future_len == 0 || m.vectors_per_segment == 0 {
            return fail("T_h, T_f and S must be positive".into());
        }
        let lane_attr = self.lane_attr_dim();
        let agent_attr = self.agent_attr_dim();

        for seg in &self.segments {
            let id = seg.id;
            if seg.vectors.len() != m.vectors_per_segment || seg.mask.len() != m.vectors_per_segment {
                return fail(format!(
                    "segment {id}: expected {} vectors and mask entries, found {} and {}",
                    m.vectors_per_segment,
                    seg.vectors.len(),
                    seg.mask.len()
                ));
            }
            for (i, v) in seg.vectors.iter().enumerate() {
                if v.attributes.len() != lane_attr {
                    return fail(format!(
                        "segment {id}: vector {i} has {} attributes, expected {lane_attr}",
                        v.attributes.len()
                    ));
                }
                if v.numbers().any(|x| !x.is_finite()) {
                    return fail(format!("segment {id}: vector {i} has a non-finite value"));
                }
                if seg.mask[i] && v.start() == v.end() {
                    return fail(format!("segment {id}: vector {i} has zero length"));
                }
            }
            for i in 0..m.vectors_per_segment.saturating_sub(1) {
                if seg.mask[i] && seg.mask[i + 1] {
                    let gap = dist(seg.vectors[i].end(), seg.vectors[i + 1].start());
                    if gap > CHAIN_TOL {
                        return fail(format!(
                            "segment {id}: vectors {i} and {} are not chained (gap {gap} m)",
                            i + 1
                        ));
                    }
                }
            }
        }
        if !self.segments.iter().any(LaneSegment::is_valid) {
            return fail("every lane segment is masked".into());
        }

        let targets = self.agents.iter().filter(|a| a.is_target).count();
        if targets == 0 {
            return fail("no target agent".into());
        }
        if targets > 1 {
            return fail("multiple targets".into());
        }
        for agent in &self.agents {
            let id = agent.id;
            if agent.steps.len() != m.history_len || agent.mask.len() != m.history_len {
                return fail(format!(
                    "agent {id}: expected {} steps and mask entries, found {} and {}",
                    m.history_len,
                    agent.steps.len(),
                    agent.mask.len()
                ));
            }
            for (i, s) in agent.steps.iter().enumerate() {
                if s.attributes.len() != agent_attr {
                    return fail(format!(
                        "agent {id}: step {i} has {} attributes, expected {agent_attr}",
                        s.attributes.len()
                    ));
                }
                if s.numbers().any(|x| !x.is_finite()) {
                    return fail(format!("agent {id}: step {i} has a non-finite value"));
                }
            }
            for i in 0..m.history_len.saturating_sub(1) {
                if agent.mask[i] && agent.mask[i + 1] {
                    let gap = dist(agent.steps[i].end(), agent.steps[i + 1].start());
                    if gap > CHAIN_TOL {
                        return fail(format!(
                            "agent {id}: steps {i} and {} are not chained (gap {gap} m)",
                            i + 1
                        ));
                    }
                }
            }
            if agent.is_target && !agent.is_valid() {
                return fail(format!("agent {id}: target track is fully masked"));
            }
        }

        let gt = &self.ground_truth;
        if gt.positions.len() != m.future_len
            || gt.headings.len() != m.future_len
            || gt.lane_labels.len() != m.future_len
        {
            return fail(format!(
                "ground truth arrays must all have T_f={} entries",
                m.future_len
            ));
        }
        if gt.positions.iter().flatten().chain(&gt.headings).any(|x| !x.is_finite()) {
            return fail("ground truth has a non-finite value".into());
        }
        for (t, &l) in gt.lane_labels.iter().enumerate() {
            if l >= self.segments.len() {
                return fail(format!("lane label {l} at t={t} out of range"));
            }
            if !self.segments[l].is_valid() {
                return fail(format!("lane label {l} at t={t} refers to a masked segment"));
            }
        }
        Ok(())
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn parse_scene(text: &str, origin: &str) -> Result<Scene, SceneError> {
    let scene: Scene = serde_json::from_str(text).map_err(|e| SceneError::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    scene.validate()?;
    Ok(scene)
}

pub fn scene_to_string(scene: &Scene) -> Result<String, SceneError> {
    scene.validate()?;
    serde_json::to_string_pretty(scene).map_err(|e| SceneError::Parse {
        path: "<memory>".into(),
        message: e.to_string(),
    })
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, SceneError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scene(&text, &path.display().to_string())
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let path = path.as_ref();
    let text = scene_to_string(scene)?;
    fs::write(path, text).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = a.sin().atan2(a.cos());
    // keep the (-pi, pi] convention
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// A rigid transform `p -> R(angle) * p + shift`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub angle: f64,
    pub shift: Point,
}

impl RigidTransform {
    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.angle.sin_cos();
        [
            c * p[0] - s * p[1] + self.shift[0],
            s * p[0] + c * p[1] + self.shift[1],
        ]
    }

    /// Transform that maps `origin` to zero and rotates `heading` onto +x.
    pub fn to_local(origin: Point, heading: f64) -> Self {
        let (s, c) = (-heading).sin_cos();
        Self {
            angle: -heading,
            shift: [
                -(c * origin[0] - s * origin[1]),
                -(s * origin[0] + c * origin[1]),
            ],
        }
    }
}

/// Applies a rigid transform to every position and heading in the scene.
pub fn transform_scene(scene: &Scene, tf: &RigidTransform) -> Scene {
    let mut out = scene.clone();
    for seg in &mut out.segments {
        for v in &mut seg.vectors {
            let s = tf.apply(v.start());
            let e = tf.apply(v.end());
            let p = tf.apply(v.predecessor());
            *v = LaneVector::new(s, e, p, std::mem::take(&mut v.attributes));
        }
    }
    for agent in &mut out.agents {
        for st in &mut agent.steps {
            let s = tf.apply(st.start());
            let e = tf.apply(st.end());
            *st = AgentStep::new(s, e, std::mem::take(&mut st.attributes));
        }
    }
    for p in &mut out.ground_truth.positions {
        *p = tf.apply(*p);
    }
    for h in &mut out.ground_truth.headings {
        *h = wrap_angle(*h + tf.angle);
    }
    out
}

/// Re-expresses the scene in the target-centric frame: the target's last
/// observed position becomes the origin and its last heading points along +x.
pub fn normalize_to_target_frame(scene: &Scene) -> Result<Scene, SceneError> {
    let target = scene
        .target()
        .ok_or_else(|| SceneError::Validation("no target agent".into()))?;
    let last = target.last_valid_step().ok_or_else(|| {
        SceneError::Validation(format!("agent {}: target track is fully masked", target.id))
    })?;
    let (o, s) = (last.end(), last.start());
    let heading = (o[1] - s[1]).atan2(o[0] - s[0]);
    let tf = RigidTransform::to_local(o, heading);
    let mut out = transform_scene(scene, &tf);
    out.meta.frame = Frame::TargetCentric;
    Ok(out)
}

/// Index of the valid segment whose center is nearest to each point (ties
/// broken by lowest segment id).
pub fn nearest_segment_labels(segments: &[LaneSegment], future: &[Point]) -> Vec<usize> {
    let centers: Vec<(usize, u32, Point)> = segments
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.center().map(|c| (i, s.id, c)))
        .collect();
    assert!(!centers.is_empty(), "nearest_segment_labels needs a valid segment");
    future
        .iter()
        .map(|p| {
            let mut best = (f64::INFINITY, u32::MAX, 0usize);
            for &(i, id, c) in &centers {
                let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                if d < best.0 || (d == best.0 && id < best.1) {
                    best = (d, id, i);
                }
            }
            best.2
        })
        .collect()
}

/// Heading of each future step from the displacement to it; the first step
/// is measured from the origin.
pub fn headings_from_positions(positions: &[Point]) -> Vec<f64> {
    let mut prev = [0.0, 0.0];
    positions
        .iter()
        .map(|p| {
            let h = (p[1] - prev[1]).atan2(p[0] - prev[0]);
            prev = *p;
            h
        })
        .collect()
}
