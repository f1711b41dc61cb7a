//! Central-difference check of both stage losses at the tiny configuration.
//!
//! Labels (best mode, soft targets, deviation target) are fixed from the
//! unperturbed pass, matching what backpropagation differentiates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use blnet::config::ModelConfig;
use blnet::graph::Graph;
use blnet::model::{LossTargets, ModelParams};
use blnet::objectives::{LossWeights, Stage};
use blnet::scene::Scene;
use blnet::synth::{generate_scene, GeneratorConfig};

fn loss(p: &ModelParams, scene: &Scene, stage: Stage, t: &LossTargets) -> f64 {
    let mut g = Graph::new(&p.store);
    let pass = p.model.forward(&mut g, scene, stage == Stage::Two);
    let l = p.model.loss_with_targets(&mut g, &pass, scene, &LossWeights::default(), stage, t).unwrap();
    g.value(l.total).item()
}

fn main() {
    let gen = GeneratorConfig {
        num_segments: 3,
        vectors_per_segment: 3,
        num_agents: 2,
        history_len: 4,
        future_len: 3,
        ..GeneratorConfig::default()
    };
    let scene = generate_scene(&gen, 0).expect("scene");
    let mut p = ModelParams::init(ModelConfig::tiny(), 1).expect("config");
    // move the zero-initialised residual head away from zero
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ids: Vec<_> = p.store.ids().collect();
    for &id in &ids {
        for v in p.store.get_mut(id).data_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += 0.1 * n;
        }
    }
    let w = LossWeights::default();
    let h = 1e-5;
    for stage in [Stage::One, Stage::Two] {
        let mut g = Graph::new(&p.store);
        let pass = p.model.forward(&mut g, &scene, stage == Stage::Two);
        let targets = p.model.loss_targets(&g, &pass, &scene, &w, stage).unwrap();
        let l = p.model.loss(&mut g, &pass, &scene, &w, stage).unwrap();
        let grads = g.backward(l.total);
        let mut worst = (0.0f64, String::new());
        for &id in &ids {
            for i in 0..p.store.get(id).len() {
                let a = grads.get(id).map_or(0.0, |t| t.data()[i]);
                let orig = p.store.get(id).data()[i];
                p.store.get_mut(id).data_mut()[i] = orig + h;
                let up = loss(&p, &scene, stage, &targets);
                p.store.get_mut(id).data_mut()[i] = orig - h;
                let down = loss(&p, &scene, stage, &targets);
                p.store.get_mut(id).data_mut()[i] = orig;
                let n = (up - down) / (2.0 * h);
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
                if rel > worst.0 {
                    worst = (rel, format!("{}[{i}] analytic {a:.6e} numeric {n:.6e}", p.store.name(id)));
                }
            }
        }
        println!("{stage:?}: {} scalars, worst relative error {:.2e} at {}", p.store.num_scalars(), worst.0, worst.1);
    }
}
