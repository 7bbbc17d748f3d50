use std::time::Instant;

use refgame_core::eval::{eval_blob_sanity, eval_game_accuracy};
use refgame_core::train::{train_with, TrainConfig, TrainedModel};
use shapeworld::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map_or(5, |a| a.parse().unwrap());
    let aug: bool = args.get(2).map_or(true, |a| a == "aug");
    let shared: bool = args.get(3).is_some_and(|a| a == "shared");
    let splits = make_splits(&TaxonomyConfig::default(), &SplitCounts::default(), &RenderConfig::default(), 1).unwrap();
    let cfg = TrainConfig { epochs, augmentations: aug, shared, ..TrainConfig::default() };
    let t = Instant::now();
    let out = train_with(&cfg, &splits.train, |m| println!("epoch {} loss {:.4} acc {:.4} time {:.1}", m.epoch, m.loss, m.acc, m.time)).unwrap();
    let TrainedModel::Game(agents) = out.model else { unreachable!() };
    let val = eval_game_accuracy(&agents, &splits.val, 32, 2048, 7).unwrap();
    let ood = eval_game_accuracy(&agents, &splits.ood, 32, 2048, 7).unwrap();
    let blob = eval_blob_sanity(&agents, 1024, 32, 1024, 7).unwrap();
    let syms = refgame_core::eval::sender_symbols(&agents, &splits.val.samples.iter().map(|s| &s.pixels).collect::<Vec<_>>()).unwrap();
    let mut u = syms.clone(); u.sort(); u.dedup();
    println!("val {val:.4} ood {ood:.4} blob {blob:.4} |P| {} total {:.0}s", u.len(), t.elapsed().as_secs_f64());
}
