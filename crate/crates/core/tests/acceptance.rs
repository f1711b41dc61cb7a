//! Acceptance checks. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

mod common;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use blnet::behavior::wta_l2;
use blnet::config::{ModelConfig, QueryMode};
use blnet::graph::Graph;
use blnet::lane::lane_bce;
use blnet::model::{angle_term, deviation_term, predict, LossTargets, ModelParams, Prediction};
use blnet::objectives::{self, LossWeights, Stage};
use blnet::params::ParamStore;
use blnet::scene::{normalize_to_target_frame, transform_scene, Frame, Point, RigidTransform, Scene};
use blnet::synth::{generate_scene, GeneratorConfig};
use blnet::tensor::Tensor;
use blnet::train::{evaluate, train, train_stage, TrainConfig};

use common::{oracle, random_points, random_probs, random_scene, Shape};

type Check = fn() -> Result<String, String>;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed <= budget, || {
        format!("{what} took {:.1}s, budget {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64())
    })
}

/// Time-major `(T K) x 2` tensor from `[mode][step]` points.
fn time_major(modes: &[Vec<Point>]) -> Tensor {
    let (k, t_f) = (modes.len(), modes[0].len());
    let mut data = Vec::with_capacity(2 * k * t_f);
    for t in 0..t_f {
        for m in modes {
            data.extend_from_slice(&m[t]);
        }
    }
    Tensor::from_vec(k * t_f, 2, data)
}

fn metric_and_loss_oracles() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let store = ParamStore::new();
    let tol = 1e-9;
    let mut compared = 0usize;
    for case in 0..1000 {
        let k = rng.random_range(1..=10);
        let t_f = rng.random_range(1..=30);
        let gt = random_points(&mut rng, t_f, 30.0);
        let trajs: Vec<Vec<Point>> = (0..k).map(|_| random_points(&mut rng, t_f, 30.0)).collect();
        let mut probs = random_probs(&mut rng, k);
        if case % 7 == 0 && k > 1 {
            // exercise probability ties
            probs[1] = probs[0];
        }
        let fail = |what: &str, got: f64, want: f64| format!("case {case}: {what} = {got}, oracle {want}");

        for ke in 1..=k {
            let pairs = [
                ("minADE", objectives::min_ade(&trajs, &probs, &gt, ke), oracle::min_ade(&trajs, &probs, &gt, ke)),
                ("minFDE", objectives::min_fde(&trajs, &probs, &gt, ke), oracle::min_fde(&trajs, &probs, &gt, ke)),
                ("b-minFDE", objectives::b_min_fde(&trajs, &probs, &gt, ke), oracle::b_min_fde(&trajs, &probs, &gt, ke)),
            ];
            for (what, got, want) in pairs {
                ensure(close(got, want, tol), || fail(what, got, want))?;
                compared += 1;
            }
        }

        let want = oracle::behavior_loss(&trajs, &gt);
        let got = objectives::behavior_loss(&trajs, &gt);
        ensure(close(got, want, tol), || fail("behavior", got, want))?;
        let mut g = Graph::new(&store);
        let flat: Vec<f64> = trajs.iter().flat_map(|m| m.iter().flatten().copied()).collect();
        let coarse = g.constant(Tensor::from_vec(k, 2 * t_f, flat));
        let tape = wta_l2(&mut g, coarse, &gt);
        let got = g.value(tape).item();
        ensure(close(got, want, tol), || fail("behavior (tape)", got, want))?;

        let n_m = rng.random_range(1..=12);
        let mut valid: Vec<bool> = (0..n_m).map(|_| rng.random_bool(0.7)).collect();
        valid[rng.random_range(0..n_m)] = true;
        let valid_idx: Vec<usize> = (0..n_m).filter(|&m| valid[m]).collect();
        let labels: Vec<usize> = (0..t_f).map(|_| *valid_idx.choose(&mut rng).unwrap()).collect();
        let scores: Vec<Vec<f64>> = (0..t_f)
            .map(|_| {
                let mut row = vec![0.0; n_m];
                let p = random_probs(&mut rng, valid_idx.len());
                for (&m, v) in valid_idx.iter().zip(p) {
                    row[m] = v;
                }
                row
            })
            .collect();
        let want = oracle::lane_loss(&scores, &labels, &valid);
        let got = objectives::lane_loss(&scores, &labels, &valid);
        ensure(close(got, want, tol), || fail("lane", got, want))?;
        let s = g.constant(Tensor::from_rows(&scores));
        let tape = lane_bce(&mut g, s, &labels, &valid);
        let got = g.value(tape).item();
        ensure(close(got, want, tol), || fail("lane (tape)", got, want))?;

        let best = rng.random_range(0..k);
        let stage1 = random_points(&mut rng, t_f, 30.0);
        let deltas: Vec<Vec<Point>> = (0..k).map(|_| random_points(&mut rng, t_f, 3.0)).collect();
        let want = oracle::deviation_loss(&deltas[best], &stage1, &gt);
        let got = objectives::deviation_loss(&deltas[best], &stage1, &gt);
        ensure(close(got, want, tol), || fail("deviation", got, want))?;
        let d = g.constant(time_major(&deltas));
        let tape = deviation_term(&mut g, d, best, k, &stage1, &gt);
        let got = g.value(tape).item();
        ensure(close(got, want, tol), || fail("deviation (tape)", got, want))?;

        let headings: Vec<f64> = (0..t_f).map(|_| rng.random_range(-3.2..3.2)).collect();
        let want = oracle::angle_loss(&trajs[best], &headings);
        let got = objectives::angle_loss(&trajs[best], &headings);
        ensure(close(got, want, tol), || fail("angle", got, want))?;
        let mu = g.constant(time_major(&trajs));
        let tape = angle_term(&mut g, mu, best, k, &headings);
        let got = g.value(tape).item();
        ensure(close(got, want, tol), || fail("angle (tape)", got, want))?;
        compared += 9;
    }
    within(start.elapsed(), Duration::from_secs(10), "oracle comparison")?;
    Ok(format!(
        "{compared} values on 1000 instances agree to 1e-9 in {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn perturb_params(params: &mut ModelParams, rng: &mut ChaCha8Rng, std: f64) {
    let ids: Vec<_> = params.store.ids().collect();
    for id in ids {
        for v in params.store.get_mut(id).data_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += std * n;
        }
    }
}

fn stage_loss(params: &ModelParams, scene: &Scene, stage: Stage) -> f64 {
    let mut g = Graph::new(&params.store);
    let pass = params.model.forward(&mut g, scene, stage == Stage::Two);
    let loss = params
        .model
        .loss(&mut g, &pass, scene, &LossWeights::default(), stage)
        .expect("stage loss");
    g.value(loss.total).item()
}

/// Stage loss with labels (best mode, soft targets, deviation target) held
/// at `targets`.
fn fixed_target_loss(params: &ModelParams, scene: &Scene, stage: Stage, targets: &LossTargets) -> f64 {
    let mut g = Graph::new(&params.store);
    let pass = params.model.forward(&mut g, scene, stage == Stage::Two);
    let loss = params
        .model
        .loss_with_targets(&mut g, &pass, scene, &LossWeights::default(), stage, targets)
        .expect("stage loss");
    g.value(loss.total).item()
}

fn gradient_check() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut params = ModelParams::init(ModelConfig::tiny(), 5).map_err(|e| e.to_string())?;
    perturb_params(&mut params, &mut rng, 0.2);
    let scene = random_scene(&mut rng, Shape::TINY, true);
    let h = 1e-5;
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for stage in [Stage::One, Stage::Two] {
        let (grads, targets) = {
            let mut g = Graph::new(&params.store);
            let w = LossWeights::default();
            let pass = params.model.forward(&mut g, &scene, stage == Stage::Two);
            let targets = params.model.loss_targets(&g, &pass, &scene, &w, stage).expect("targets");
            let loss = params.model.loss(&mut g, &pass, &scene, &w, stage).expect("stage loss");
            (g.backward(loss.total), targets)
        };
        let ids: Vec<_> = params.store.ids().collect();
        for id in ids {
            let n = params.store.get(id).len();
            for i in 0..n {
                let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
                let orig = params.store.get(id).data()[i];
                params.store.get_mut(id).data_mut()[i] = orig + h;
                let up = fixed_target_loss(&params, &scene, stage, &targets);
                params.store.get_mut(id).data_mut()[i] = orig - h;
                let down = fixed_target_loss(&params, &scene, stage, &targets);
                params.store.get_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let scale = analytic.abs().max(numeric.abs());
                let err = (analytic - numeric).abs();
                // absolute floor covers rounding noise of the central difference
                if err > 1e-4 * scale + 1e-7 {
                    return Err(format!(
                        "{stage:?} {}[{i}]: analytic {analytic:e}, numeric {numeric:e}",
                        params.store.name(id)
                    ));
                }
                if scale > 1e-3 {
                    worst = worst.max(err / scale);
                }
                checked += 1;
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(120), "gradient check")?;
    Ok(format!(
        "{checked} partials over both stages, worst relative error {worst:.1e} where |g| > 1e-3, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

fn small_config(rng: &mut ChaCha8Rng, future: usize) -> ModelConfig {
    ModelConfig {
        hidden: 16,
        num_heads: 2,
        dropout: 0.0,
        num_modes: rng.random_range(1..=6),
        future_len: future,
        top_m: rng.random_range(1..=3),
        nearest_n: rng.random_range(1..=3),
        ..ModelConfig::default()
    }
}

fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
    Shape {
        segments: rng.random_range(1..=8),
        vectors: rng.random_range(1..=5),
        agents: rng.random_range(1..=4),
        history: rng.random_range(1..=6),
        future: rng.random_range(1..=8),
    }
}

fn simplex_and_scales() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let tol = 1e-6;
    let mut rows = 0usize;
    let mut min_scale = f64::INFINITY;
    for case in 0..100 {
        let shape = random_shape(&mut rng);
        let mut params = ModelParams::init(small_config(&mut rng, shape.future), case).map_err(|e| e.to_string())?;
        perturb_params(&mut params, &mut rng, 0.3);
        let scene = random_scene(&mut rng, shape, true);
        let mut g = Graph::new(&params.store);
        let pass = params.model.forward(&mut g, &scene, true);
        let on_simplex = |row: &[f64]| row.iter().all(|&p| p >= -tol) && (row.iter().sum::<f64>() - 1.0).abs() <= tol;
        for &node in g.attention_nodes() {
            let w = g.attention_weights(node).expect("attention node");
            for h in 0..w.heads {
                for q in 0..w.queries {
                    ensure(on_simplex(w.row(h, q)), || format!("scene {case}: attention row {:?}", w.row(h, q)))?;
                    rows += 1;
                }
            }
        }
        for out in [Some(&pass.stage1.out), pass.stage2.as_ref().map(|s| &s.out)].into_iter().flatten() {
            let p = g.value(out.probs).data();
            ensure(on_simplex(p), || format!("scene {case}: mode probabilities {p:?}"))?;
            let s = g.value(out.scale).data().iter().copied().fold(f64::INFINITY, f64::min);
            ensure(s >= 1e-3, || format!("scene {case}: scale {s}"))?;
            min_scale = min_scale.min(s);
            rows += 1;
        }
        let lane = pass.lane.as_ref().expect("lane branch");
        let scores = g.value(lane.scores);
        for r in 0..scores.rows() {
            ensure(on_simplex(scores.row(r)), || format!("scene {case}: lane scores {:?}", scores.row(r)))?;
            rows += 1;
        }
    }
    Ok(format!("{rows} distributions on the simplex, smallest scale {min_scale:.2e}"))
}

fn max_gap(a: &[Point], b: &[Point]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).abs().max((p[1] - q[1]).abs()))
        .fold(0.0, f64::max)
}

fn scene_points(s: &Scene) -> Vec<Point> {
    let mut pts = Vec::new();
    for seg in &s.segments {
        for v in &seg.vectors {
            pts.extend([v.start(), v.end(), v.predecessor()]);
        }
    }
    for a in &s.agents {
        for st in &a.steps {
            pts.extend([st.start(), st.end()]);
        }
    }
    pts.extend(&s.ground_truth.positions);
    pts
}

fn prediction_gap(a: &Prediction, b: &Prediction) -> f64 {
    a.modes
        .iter()
        .zip(&b.modes)
        .map(|(x, y)| max_gap(&x.positions, &y.positions).max((x.probability - y.probability).abs()))
        .fold(0.0, f64::max)
}

fn equivariance() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let shape = Shape {
        segments: 6,
        vectors: 4,
        agents: 4,
        history: 5,
        future: 6,
    };
    let (mut mode_gap, mut perm_gap, mut rigid_gap, mut frame_gap) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for case in 0..20u64 {
        let cfg = ModelConfig {
            hidden: 16,
            num_heads: 2,
            dropout: 0.0,
            num_modes: 4,
            future_len: shape.future,
            ..ModelConfig::default()
        };
        let mut params = ModelParams::init(cfg, case).map_err(|e| e.to_string())?;
        perturb_params(&mut params, &mut rng, 0.1);
        let scene = random_scene(&mut rng, shape, true);
        let base = predict(&params, &scene, true).map_err(|e| e.to_string())?;

        // permuting the behavior tokens permutes the modes
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut rng);
        let mut permuted = params.clone();
        let id = permuted.store.id("behavior.tokens").expect("behavior tokens");
        let tokens = params.store.get(id).clone();
        for (i, &p) in perm.iter().enumerate() {
            permuted.store.get_mut(id).row_mut(i).copy_from_slice(tokens.row(p));
        }
        let pred = predict(&permuted, &scene, true).map_err(|e| e.to_string())?;
        for (i, &p) in perm.iter().enumerate() {
            let (a, b) = (&pred.modes[i], &base.modes[p]);
            mode_gap = mode_gap
                .max(max_gap(&a.positions, &b.positions))
                .max(max_gap(&a.scales, &b.scales))
                .max((a.probability - b.probability).abs());
        }

        // reordering segments and agents permutes the encodings and leaves
        // the prediction unchanged
        let mut seg_order: Vec<usize> = (0..shape.segments).collect();
        let mut agent_order: Vec<usize> = (0..shape.agents).collect();
        seg_order.shuffle(&mut rng);
        agent_order.shuffle(&mut rng);
        let mut shuffled = scene.clone();
        shuffled.segments = seg_order.iter().map(|&i| scene.segments[i].clone()).collect();
        shuffled.agents = agent_order.iter().map(|&i| scene.agents[i].clone()).collect();
        for l in &mut shuffled.ground_truth.lane_labels {
            *l = seg_order.iter().position(|&i| i == *l).unwrap();
        }
        let mut g = Graph::new(&params.store);
        let e0 = params.model.encoder.encode(&mut g, &scene);
        let e1 = params.model.encoder.encode(&mut g, &shuffled);
        let (m0, m1) = (g.value(e0.map_enc), g.value(e1.map_enc));
        for (new, &old) in seg_order.iter().enumerate() {
            for (a, b) in m1.row(new).iter().zip(m0.row(old)) {
                perm_gap = perm_gap.max((a - b).abs());
            }
        }
        let (a0, a1) = (g.value(e0.agent_enc), g.value(e1.agent_enc));
        for (new, &old) in agent_order.iter().enumerate() {
            for (a, b) in a1.row(new).iter().zip(a0.row(old)) {
                perm_gap = perm_gap.max((a - b).abs());
            }
        }
        for (a, b) in g.value(e1.target_enc).data().iter().zip(g.value(e0.target_enc).data()) {
            perm_gap = perm_gap.max((a - b).abs());
        }
        let pred = predict(&params, &shuffled, true).map_err(|e| e.to_string())?;
        perm_gap = perm_gap.max(prediction_gap(&pred, &base));

        // a world-frame copy normalizes to the same target-centric scene
        let tf = RigidTransform {
            angle: rng.random_range(-3.1..3.1),
            shift: [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)],
        };
        let mut world = transform_scene(&scene, &tf);
        world.meta.frame = Frame::World;
        let n0 = normalize_to_target_frame(&scene).map_err(|e| e.to_string())?;
        let n1 = normalize_to_target_frame(&world).map_err(|e| e.to_string())?;
        frame_gap = frame_gap.max(max_gap(&scene_points(&n0), &scene_points(&n1)));
        let p0 = predict(&params, &n0, true).map_err(|e| e.to_string())?;
        let p1 = predict(&params, &n1, true).map_err(|e| e.to_string())?;
        rigid_gap = rigid_gap.max(prediction_gap(&p0, &p1));
    }
    ensure(mode_gap <= 1e-9, || format!("mode permutation gap {mode_gap:e}"))?;
    ensure(perm_gap <= 1e-9, || format!("segment/agent permutation gap {perm_gap:e}"))?;
    ensure(frame_gap <= 1e-5, || format!("normalized scenes differ by {frame_gap:e} m"))?;
    ensure(rigid_gap <= 1e-5, || format!("predictions differ by {rigid_gap:e} m under a rigid transform"))?;
    Ok(format!(
        "mode {mode_gap:.1e}, segment/agent {perm_gap:.1e}, frame {frame_gap:.1e} m, prediction {rigid_gap:.1e} m"
    ))
}

fn overfit() -> Result<String, String> {
    let start = Instant::now();
    let gen = GeneratorConfig {
        seed: 11,
        ..GeneratorConfig::default()
    };
    let scenes: Vec<Scene> = (0..8).map(|i| generate_scene(&gen, i).expect("scene")).collect();
    let cfg = ModelConfig {
        hidden: 64,
        num_modes: 5,
        future_len: 12,
        top_m: 2,
        nearest_n: 2,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(cfg, 3).map_err(|e| e.to_string())?;
    let steps = 3000;
    let tc = TrainConfig {
        batch_size: 8,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut initial = None;
    let mut state = (f64::NAN, f64::NAN, f64::NAN);
    let mut met = false;
    let ran = train_stage(&mut params, &tc, &scenes, Stage::One, steps, |row, p| {
        let behavior = row.components.behavior.unwrap_or(f64::NAN);
        let first = *initial.get_or_insert(behavior);
        if (row.step + 1) % 250 != 0 {
            return true;
        }
        let r = evaluate(p, &scenes, &[5], false).expect("evaluate");
        state = (r.mean[0].min_ade, r.lane_top1.unwrap_or(0.0), behavior / first);
        met = state.0 < 0.1 && state.1 > 0.95 && state.2 < 0.01;
        !met
    })
    .map_err(|e| e.to_string())?;
    let (ade, lane, ratio) = state;
    let detail = format!(
        "{ran} steps: minADE_5 {ade:.4} m, lane top-1 {:.1}%, behavior L2 at {:.2}% of initial, {:.0}s",
        100.0 * lane,
        100.0 * ratio,
        start.elapsed().as_secs_f64()
    );
    ensure(met, || detail.clone())?;
    within(start.elapsed(), Duration::from_secs(900), "overfit")?;
    Ok(detail)
}

/// Held-out comparison shared by the refinement and query-mode criteria.
struct HeldOut {
    seeds: u64,
    stage1: usize,
    stage2: usize,
    train: Vec<Scene>,
    val: Vec<Scene>,
}

impl HeldOut {
    fn new() -> Self {
        let scenes = |seed, n| {
            let cfg = GeneratorConfig {
                seed,
                ..GeneratorConfig::default()
            };
            (0..n).map(|i| generate_scene(&cfg, i).expect("scene")).collect()
        };
        Self {
            seeds: 3,
            stage1: 1200,
            stage2: 300,
            train: scenes(1000, 512),
            val: scenes(2000, 256),
        }
    }

    fn base() -> ModelConfig {
        ModelConfig {
            hidden: 32,
            num_heads: 4,
            ..ModelConfig::default()
        }
    }

    /// Mean of `(minFDE_1, minADE_5)` over seeds; `stage2 = 0` trains stage
    /// one for the full budget.
    fn run(&self, cfg: &ModelConfig, stage1: usize, stage2: usize) -> Result<(f64, f64), String> {
        let (mut fde1, mut ade5) = (0.0, 0.0);
        for seed in 0..self.seeds {
            let mut params = ModelParams::init(cfg.clone(), seed).map_err(|e| e.to_string())?;
            let tc = TrainConfig {
                batch_size: 16,
                stage1_steps: stage1,
                stage2_steps: stage2,
                seed,
                ..TrainConfig::default()
            };
            train(&mut params, &tc, &self.train, |_, _| true).map_err(|e| e.to_string())?;
            let r = evaluate(&params, &self.val, &[1, 5], true).map_err(|e| e.to_string())?;
            fde1 += r.at(1).unwrap().min_fde / self.seeds as f64;
            ade5 += r.at(5).unwrap().min_ade / self.seeds as f64;
        }
        Ok((fde1, ade5))
    }
}

fn no_refinement() -> ModelConfig {
    ModelConfig {
        use_refinement: false,
        use_lane_continuity: false,
        ..HeldOut::base()
    }
}

static HELD_OUT: OnceLock<HeldOut> = OnceLock::new();
static PLAIN: OnceLock<Result<(f64, f64), String>> = OnceLock::new();

/// The fine-grained model without refinement, shared by both comparisons.
fn plain_run() -> Result<(f64, f64), String> {
    let h = HELD_OUT.get_or_init(HeldOut::new);
    PLAIN
        .get_or_init(|| h.run(&no_refinement(), h.stage1 + h.stage2, 0))
        .clone()
}

fn refinement_helps() -> Result<String, String> {
    let h = HELD_OUT.get_or_init(HeldOut::new);
    let (plain, _) = plain_run()?;
    let (refined, _) = h.run(&HeldOut::base(), h.stage1, h.stage2)?;
    let detail = format!("held-out minFDE_1 {refined:.4} m refined vs {plain:.4} m without");
    ensure(refined <= plain, || detail.clone())?;
    Ok(detail)
}

fn fine_grained_helps() -> Result<String, String> {
    let h = HELD_OUT.get_or_init(HeldOut::new);
    let budget = h.stage1 + h.stage2;
    let (_, fine) = plain_run()?;
    let goal = ModelConfig {
        query_mode: QueryMode::GoalOnly,
        ..no_refinement()
    };
    let (_, coarse) = h.run(&goal, budget, 0)?;
    let detail = format!("held-out minADE_5 {fine:.4} m fine-grained vs {coarse:.4} m goal-only");
    ensure(fine <= coarse, || detail.clone())?;
    Ok(detail)
}

fn bits(p: &Prediction) -> Vec<u64> {
    let mut out = Vec::new();
    for m in &p.modes {
        out.push(m.probability.to_bits());
        out.extend(m.positions.iter().flatten().map(|v| v.to_bits()));
        out.extend(m.scales.iter().flatten().map(|v| v.to_bits()));
        out.extend(m.headings.iter().map(|v| v.to_bits()));
    }
    for rows in [&p.stage1_positions, &p.deltas].into_iter().flatten() {
        out.extend(rows.iter().flatten().flatten().map(|v| v.to_bits()));
    }
    if let Some(s) = &p.lane_scores {
        out.extend(s.iter().flatten().map(|v| v.to_bits()));
    }
    out
}

fn mask_fuzz() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut total = 0;
    for case in 0..50u64 {
        let shape = random_shape(&mut rng);
        let mut params = ModelParams::init(small_config(&mut rng, shape.future), case).map_err(|e| e.to_string())?;
        perturb_params(&mut params, &mut rng, 0.1);
        let scene = random_scene(&mut rng, shape, true);
        let base = predict(&params, &scene, true).map_err(|e| e.to_string())?;
        let base_bits = bits(&base);
        let base_loss = stage_loss(&params, &scene, Stage::Two).to_bits();
        for trial in 0..20 {
            let fuzzed = common::perturb_masked(&mut rng, &scene);
            let pred = predict(&params, &fuzzed, true).map_err(|e| e.to_string())?;
            ensure(bits(&pred) == base_bits, || format!("scene {case} trial {trial}: prediction changed"))?;
            ensure(stage_loss(&params, &fuzzed, Stage::Two).to_bits() == base_loss, || {
                format!("scene {case} trial {trial}: loss changed")
            })?;
            total += 1;
        }
    }
    Ok(format!("{total} perturbations, outputs bit-identical"))
}

fn main() {
    let checks: [(&str, Check); 8] = [
        ("metric and loss oracles", metric_and_loss_oracles),
        ("finite-difference gradients", gradient_check),
        ("simplex and scale floor", simplex_and_scales),
        ("permutation and rigid-transform equivariance", equivariance),
        ("overfit eight scenes", overfit),
        ("refinement does not hurt minFDE_1", refinement_helps),
        ("fine-grained queries beat goal-only", fine_grained_helps),
        ("masked inputs are invisible", mask_fuzz),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {}. {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
