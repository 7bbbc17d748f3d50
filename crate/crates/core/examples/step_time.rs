use std::time::Instant;

use autodiff::{Adam, AdamConfig, Graph, Rng};
use refgame_core::agents::{AgentsConfig, GameAgents};
use refgame_core::channel::Noise;
use refgame_core::game::{assemble_batch, game_loss};
use shapeworld::*;

fn main() {
    let widths: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let counts = SplitCounts { train_per_category: 4, val_per_category: 1, ood_per_category: 1, blobs: 1 };
    let splits = make_splits(&TaxonomyConfig::default(), &counts, &RenderConfig::default(), 1).unwrap();
    let mut cfg = AgentsConfig::default();
    if !widths.is_empty() {
        cfg.encoder.channels = widths;
    }
    let mut rng = Rng::seed_from(0);
    let mut agents = GameAgents::new(&cfg, &mut rng).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    let samples: Vec<&ImageSample> = splits.train.samples.iter().take(32).collect();
    let aug = AugmentConfig::default();
    let t0 = Instant::now();
    let mut ta = 0.0;
    let (mut tf, mut tb) = (0.0, 0.0);
    for _ in 0..10 {
        let t = Instant::now();
        let batch = assemble_batch(&samples, Some(&aug), &mut rng).unwrap();
        ta += t.elapsed().as_secs_f64();
        let mut g = Graph::new();
        let t = Instant::now();
        let out = game_loss(&mut g, &agents, &batch, Noise::Sample(&mut rng)).unwrap();
        tf += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let grads = g.backward(out.loss).unwrap();
        tb += t.elapsed().as_secs_f64();
        let pg = g.param_grads(&grads);
        adam.step(&mut agents.store, &pg);
        let up = g.take_running_updates();
        agents.store.apply_running_updates(&up);
    }
    println!("per step {:.4}s (augment {:.4}s fwd {:.4} bwd {:.4})", t0.elapsed().as_secs_f64() / 10.0, ta / 10.0, tf / 10.0, tb / 10.0);
}
