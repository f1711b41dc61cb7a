mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use blnet::config::{ModelConfig, QueryMode};
use blnet::decoder::nearest_segments;
use blnet::graph::Graph;
use blnet::lane::select_top_m;
use blnet::model::{predict, ModelParams};
use blnet::nn::CellKind;
use blnet::objectives::{LossWeights, Stage};
use blnet::scene::Point;
use blnet::tensor::Tensor;

use common::{random_scene, Shape};

fn shape() -> Shape {
    Shape {
        segments: 5,
        vectors: 3,
        agents: 3,
        history: 4,
        future: 4,
    }
}

fn config() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        num_heads: 2,
        dropout: 0.0,
        num_modes: 3,
        future_len: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn output_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scene = random_scene(&mut rng, shape(), true);
    let params = ModelParams::init(config(), 1).unwrap();
    let mut g = Graph::new(&params.store);
    let pass = params.model.forward(&mut g, &scene, true);
    assert_eq!(g.shape(pass.stage1.out.mu), (12, 2));
    assert_eq!(g.shape(pass.stage1.out.scale), (12, 2));
    assert_eq!(g.shape(pass.stage1.out.probs), (1, 3));
    assert_eq!(g.shape(pass.lane.as_ref().unwrap().scores), (4, 5));
    assert_eq!(g.shape(pass.behavior.as_ref().unwrap().coarse), (3, 8));
    let s2 = pass.stage2.as_ref().unwrap();
    assert_eq!(g.shape(s2.delta), (12, 2));
    assert_eq!(s2.nearest.len(), 12);

    let pred = predict(&params, &scene, true).unwrap();
    assert!(pred.refined);
    assert_eq!(pred.modes.len(), 3);
    assert!(pred.modes.iter().all(|m| m.positions.len() == 4 && m.headings.len() == 4));
    assert_eq!(pred.lane_scores.as_ref().unwrap().len(), 4);
    assert!(pred.deltas.is_some() && pred.stage1_positions.is_some());
}

#[test]
fn inference_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scene = random_scene(&mut rng, shape(), true);
    let a = ModelParams::init(config(), 9).unwrap();
    let b = ModelParams::init(config(), 9).unwrap();
    assert_eq!(predict(&a, &scene, true).unwrap(), predict(&b, &scene, true).unwrap());
    let c = ModelParams::init(config(), 10).unwrap();
    assert_ne!(predict(&a, &scene, true).unwrap(), predict(&c, &scene, true).unwrap());
}

#[test]
fn untrained_refinement_is_the_identity_and_skipping_it_gives_stage_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scene = random_scene(&mut rng, shape(), true);
    let params = ModelParams::init(config(), 4).unwrap();
    let refined = predict(&params, &scene, true).unwrap();
    let plain = predict(&params, &scene, false).unwrap();
    assert!(!plain.refined && plain.deltas.is_none());
    assert_eq!(refined.stage1_positions.as_ref().unwrap(), &plain.positions());
    assert_eq!(refined.positions(), plain.positions());
    assert!(refined.deltas.unwrap().iter().flatten().all(|d| *d == [0.0, 0.0]));
}

#[test]
fn masked_segments_score_zero_and_selection_follows_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ModelConfig { top_m: 2, ..config() };
    let params = ModelParams::init(cfg, 5).unwrap();
    for _ in 0..20 {
        let scene = random_scene(&mut rng, shape(), true);
        let valid = scene.segment_valid();
        let mut g = Graph::new(&params.store);
        let pass = params.model.forward(&mut g, &scene, false);
        let lane = pass.lane.as_ref().unwrap();
        let scores = g.value(lane.scores);
        for t in 0..scores.rows() {
            for (m, &ok) in valid.iter().enumerate() {
                if !ok {
                    assert_eq!(scores.get(t, m), 0.0);
                }
            }
            assert_eq!(lane.selection[t], select_top_m(scores.row(t), &valid, 2));
        }
    }
}

#[test]
fn top_m_matches_a_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let n = rng.random_range(1..10);
        // coarse values so ties happen
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        let mut valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        valid[0] = true;
        let m = rng.random_range(1..5);
        let mut all: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
        // stable sort keeps index order among equal scores
        all.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        all.truncate(m);
        assert_eq!(select_top_m(&scores, &valid, m), all);
    }
}

#[test]
fn nearest_segments_match_a_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..500 {
        let n = rng.random_range(1..10);
        let centers: Vec<Option<Point>> = (0..n)
            .map(|_| rng.random_bool(0.8).then(|| [rng.random_range(-5..5) as f64, rng.random_range(-5..5) as f64]))
            .collect();
        let p = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let k = rng.random_range(1..5);
        let dist = |c: Point| (c[0] - p[0]).hypot(c[1] - p[1]);
        let mut all: Vec<usize> = (0..n).filter(|&i| centers[i].is_some()).collect();
        all.sort_by(|&a, &b| dist(centers[a].unwrap()).partial_cmp(&dist(centers[b].unwrap())).unwrap());
        all.truncate(k);
        let got = nearest_segments(p, &centers, k);
        let gd: Vec<f64> = got.iter().map(|&i| dist(centers[i].unwrap())).collect();
        let wd: Vec<f64> = all.iter().map(|&i| dist(centers[i].unwrap())).collect();
        for (a, b) in gd.iter().zip(&wd) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(got.len(), all.len());
    }
}

#[test]
fn lane_continuity_is_causal_in_time() {
    let params = ModelParams::init(config(), 7).unwrap();
    let (k, t_f, c) = (3, 4, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input: Vec<f64> = (0..k * t_f * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let run = |data: Vec<f64>| {
        let mut g = Graph::new(&params.store);
        let x = g.constant(Tensor::from_vec(k * t_f, c, data));
        let out = params.model.decoder.encode_lane_continuity(&mut g, x);
        g.value(out).clone()
    };
    let base = run(input.clone());
    for t0 in 0..t_f {
        let mut changed = input.clone();
        for v in &mut changed[t0 * k * c..] {
            *v += 0.5;
        }
        let out = run(changed);
        for r in 0..k * t_f {
            if r / k < t0 {
                assert_eq!(out.row(r), base.row(r), "row {r} changed by a later step {t0}");
            } else {
                assert_ne!(out.row(r), base.row(r));
            }
        }
    }
}

fn names(p: &ModelParams) -> Vec<String> {
    p.store.iter().map(|(_, n, _)| n.to_string()).collect()
}

#[test]
fn disabled_components_register_no_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let scene = random_scene(&mut rng, shape(), true);
    let variants = [
        (ModelConfig { use_behavior_branch: false, ..config() }, "behavior."),
        (ModelConfig { use_lane_branch: false, ..config() }, "lane."),
        (ModelConfig { use_refinement: false, use_lane_continuity: false, ..config() }, "refine."),
        (ModelConfig { use_lane_continuity: false, ..config() }, "refine.continuity"),
    ];
    for (cfg, prefix) in variants {
        let p = ModelParams::init(cfg.clone(), 1).unwrap();
        assert!(names(&p).iter().all(|n| !n.starts_with(prefix)), "{prefix} present");
        let pred = predict(&p, &scene, true).unwrap();
        assert_eq!(pred.modes.len(), 3);
        let mut g = Graph::new(&p.store);
        let pass = p.model.forward(&mut g, &scene, true);
        let loss = p.model.loss(&mut g, &pass, &scene, &LossWeights::default(), Stage::One).unwrap();
        assert_eq!(loss.components.behavior.is_some(), cfg.use_behavior_branch);
        assert_eq!(loss.components.lane.is_some(), cfg.use_lane_branch);
        assert_eq!(pass.stage2.is_some(), cfg.use_refinement);
    }
    let no_behavior = ModelParams::init(ModelConfig { use_behavior_branch: false, ..config() }, 1).unwrap();
    assert!(names(&no_behavior).iter().any(|n| n.starts_with("decoder.mode_tokens")));
    let full = ModelParams::init(config(), 1).unwrap();
    assert!(names(&full).iter().all(|n| !n.starts_with("decoder.mode_tokens")));
}

#[test]
fn goal_only_and_lstm_variants_run() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scene = random_scene(&mut rng, shape(), true);
    let goal = ModelParams::init(ModelConfig { query_mode: QueryMode::GoalOnly, ..config() }, 1).unwrap();
    let mut g = Graph::new(&goal.store);
    let pass = goal.model.forward(&mut g, &scene, true);
    assert_eq!(g.shape(pass.lane.as_ref().unwrap().scores), (1, 5));
    assert_eq!(g.shape(pass.behavior.as_ref().unwrap().coarse), (3, 2));
    let loss = goal.model.loss(&mut g, &pass, &scene, &LossWeights::default(), Stage::Two).unwrap();
    assert!(g.value(loss.total).item().is_finite());

    let lstm = ModelParams::init(ModelConfig { decoder_cell: CellKind::Lstm, ..config() }, 1).unwrap();
    let pred = predict(&lstm, &scene, true).unwrap();
    assert!(pred.modes.iter().flat_map(|m| &m.positions).flatten().all(|v| v.is_finite()));
}

#[test]
fn mismatched_scenes_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let scene = random_scene(&mut rng, Shape { future: 6, ..shape() }, false);
    let params = ModelParams::init(config(), 1).unwrap();
    assert!(predict(&params, &scene, true).is_err());
    assert!(ModelParams::init(ModelConfig { hidden: 10, num_heads: 3, ..config() }, 1).is_err());
}
