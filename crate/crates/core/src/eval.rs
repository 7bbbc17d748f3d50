//! Test-time game play: argmax symbols, eval-mode batch norm, no augmentation.

use autodiff::{argmax, par, Rng, Tensor};
use serde::{Deserialize, Serialize};
use shapeworld::{generate_blobs, Dataset};

use crate::agents::{infer_rows, GameAgents, SimClr};
use crate::error::{config_err, Result};
use crate::layers::Mode;

/// Precomputed per-image game quantities: the symbol each image elicits,
/// that symbol's unit-norm embedding, and the image's unit-norm candidate
/// representation. A game is then a lookup and `n` dot products.
#[derive(Clone, Debug)]
pub struct ScoringTable {
    pub symbols: Vec<usize>,
    pub queries: Vec<Vec<f64>>,
    pub keys: Vec<Vec<f64>>,
}

pub(crate) fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::COSINE_EPS);
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ScoringTable {
    pub fn new(symbols: Vec<usize>, queries: Vec<Vec<f64>>, keys: Vec<Vec<f64>>) -> Self {
        Self { symbols, queries: queries.iter().map(|q| unit(q)).collect(), keys: keys.iter().map(|k| unit(k)).collect() }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Position chosen by the Receiver for target `target` among `candidates`.
    pub fn choose(&self, target: usize, candidates: &[usize]) -> usize {
        let scores: Vec<f64> = candidates.iter().map(|&c| dot(&self.queries[target], &self.keys[c])).collect();
        argmax(&scores)
    }
}

/// Sender argmax symbols for each image.
pub fn sender_symbols(agents: &GameAgents, images: &[&Tensor]) -> Result<Vec<usize>> {
    let v = infer_rows(images, |g, x| agents.sender.logits(g, &agents.store, x, Mode::Eval))?;
    Ok(v.iter().map(|r| argmax(r)).collect())
}

/// Scoring table of a trained Sender/Receiver pair.
pub fn game_table(agents: &GameAgents, images: &[&Tensor]) -> Result<ScoringTable> {
    let symbols = sender_symbols(agents, images)?;
    let keys = infer_rows(images, |g, x| agents.receiver.represent(g, &agents.store, x, Mode::Eval))?;
    let emb = agents.store.get(agents.receiver.embedding.weight);
    let queries = symbols.iter().map(|&s| emb.row(s).to_vec()).collect();
    Ok(ScoringTable::new(symbols, queries, keys))
}

/// SimCLR as a game player. The symbol is the argmax of `s` and is embedded
/// as its row of the first projection-head layer; each candidate is that
/// layer's linear map of its own `s` (bias omitted on both sides).
pub fn simclr_disc_table(model: &SimClr, images: &[&Tensor]) -> Result<ScoringTable> {
    let rows = infer_rows(images, |g, x| Ok(model.forward(g, x, Mode::Eval)?.s))?;
    let w = model.symbol_rows();
    let hidden = w.shape()[1];
    let symbols: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
    let keys = rows
        .iter()
        .map(|s| {
            let mut k = vec![0.0; hidden];
            for (j, &sj) in s.iter().enumerate() {
                k.iter_mut().zip(w.row(j)).for_each(|(a, b)| *a += sj * b);
            }
            k
        })
        .collect();
    let queries = symbols.iter().map(|&k| w.row(k).to_vec()).collect();
    Ok(ScoringTable::new(symbols, queries, keys))
}

/// Plays `games` games of `n` candidates drawn from the table's images. Each
/// game picks `n` distinct images in random order; a random one of them is
/// the target. Game `i` draws from its own stream of `seed`.
pub fn play_games(table: &ScoringTable, n: usize, games: usize, seed: u64) -> Result<f64> {
    if n < 2 {
        return config_err(format!("a game needs at least 2 candidates, got {n}"));
    }
    if table.len() < n {
        return config_err(format!("{} images cannot supply {n} distinct candidates", table.len()));
    }
    if games == 0 {
        return config_err("number of games must be positive");
    }
    let hits = par::map_range(games, |i| {
        let mut rng = Rng::stream(seed, &[i as u64]);
        let candidates = rng.sample_distinct(table.len(), n);
        let pos = rng.below(n);
        (table.choose(candidates[pos], &candidates) == pos) as usize
    });
    Ok(hits.iter().sum::<usize>() as f64 / games as f64)
}

fn images(data: &Dataset) -> Vec<&Tensor> {
    data.samples.iter().map(|s| &s.pixels).collect()
}

pub fn eval_game_accuracy(agents: &GameAgents, data: &Dataset, n: usize, games: usize, seed: u64) -> Result<f64> {
    if data.len() < n {
        return config_err(format!("dataset of {} images is smaller than n = {n}", data.len()));
    }
    play_games(&game_table(agents, &images(data))?, n, games, seed)
}

/// Game accuracy on `blob_count` fresh Gaussian-noise images.
pub fn eval_blob_sanity(agents: &GameAgents, blob_count: usize, n: usize, games: usize, seed: u64) -> Result<f64> {
    if blob_count < n {
        return config_err(format!("{blob_count} blobs cannot supply {n} candidates"));
    }
    let blobs = generate_blobs(blob_count, seed, agents.config.encoder.image_size)?;
    eval_game_accuracy(agents, &blobs, n, games, seed)
}

/// Per-split game accuracies with chance level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub games: usize,
    pub chance: f64,
    pub val: f64,
    pub ood: f64,
    pub blob: f64,
}

/// Pearson correlation between the pairwise cosine-similarity structures of
/// two feature sets over the same images.
pub fn similarity_structure_correlation(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let ua: Vec<Vec<f64>> = a.iter().map(|r| unit(r)).collect();
    let ub: Vec<Vec<f64>> = b.iter().map(|r| unit(r)).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..ua.len() {
        for j in i + 1..ua.len() {
            xs.push(dot(&ua[i], &ua[j]));
            ys.push(dot(&ub[i], &ub[j]));
        }
    }
    pearson(&xs, &ys)
}

pub(crate) fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
