//! Protocol interpretability metrics over (image, category, symbol) records.

use std::collections::BTreeMap;
use std::path::Path;

use autodiff::{par, Rng};
use serde::{Deserialize, Serialize};
use shapeworld::{NodeId, Taxonomy};

use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolRecord {
    pub sample_id: u64,
    /// Taxonomy leaf id.
    pub category_id: usize,
    pub symbol: usize,
}

pub fn write_records_csv(records: &[ProtocolRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<ProtocolRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

fn non_empty(records: &[ProtocolRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Input("no protocol records".into()));
    }
    Ok(())
}

/// Number of distinct symbols used.
pub fn protocol_size(records: &[ProtocolRecord]) -> Result<usize> {
    non_empty(records)?;
    let mut s: Vec<usize> = records.iter().map(|r| r.symbol).collect();
    s.sort_unstable();
    s.dedup();
    Ok(s.len())
}

/// Maps arbitrary labels to dense indices `0..k` in sorted label order.
fn densify(labels: impl Iterator<Item = usize>) -> (Vec<usize>, Vec<usize>) {
    let labels: Vec<usize> = labels.collect();
    let mut uniq = labels.clone();
    uniq.sort_unstable();
    uniq.dedup();
    let index: BTreeMap<usize, usize> = uniq.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    (labels.iter().map(|l| index[l]).collect(), uniq)
}

/// Category × symbol counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ContingencyTable {
    pub categories: Vec<usize>,
    pub symbols: Vec<usize>,
    /// `counts[c][s]`
    pub counts: Vec<Vec<usize>>,
    pub category_totals: Vec<usize>,
    pub symbol_totals: Vec<usize>,
    pub total: usize,
}

impl ContingencyTable {
    pub fn from_records(records: &[ProtocolRecord]) -> Result<Self> {
        non_empty(records)?;
        let (c_idx, categories) = densify(records.iter().map(|r| r.category_id));
        let (s_idx, symbols) = densify(records.iter().map(|r| r.symbol));
        Ok(Self::from_indices(&c_idx, &s_idx, categories, symbols))
    }

    fn from_indices(c_idx: &[usize], s_idx: &[usize], categories: Vec<usize>, symbols: Vec<usize>) -> Self {
        let mut counts = vec![vec![0; symbols.len()]; categories.len()];
        for (&c, &s) in c_idx.iter().zip(s_idx) {
            counts[c][s] += 1;
        }
        let category_totals = counts.iter().map(|r| r.iter().sum()).collect();
        let symbol_totals = (0..symbols.len()).map(|s| counts.iter().map(|r| r[s]).sum()).collect();
        Self { categories, symbols, counts, category_totals, symbol_totals, total: c_idx.len() }
    }

    pub fn category_entropy(&self) -> f64 {
        entropy(&self.category_totals, self.total)
    }

    pub fn symbol_entropy(&self) -> f64 {
        entropy(&self.symbol_totals, self.total)
    }

    pub fn joint_entropy(&self) -> f64 {
        let cells: Vec<usize> = self.counts.iter().flatten().copied().collect();
        entropy(&cells, self.total)
    }

    /// `Σ p(c,s) ln[p(c,s) / (p(c) p(s))]`.
    pub fn mutual_information(&self) -> f64 {
        let n = self.total as f64;
        let mut mi = 0.0;
        for (c, row) in self.counts.iter().enumerate() {
            for (s, &k) in row.iter().enumerate() {
                if k > 0 {
                    let p = k as f64 / n;
                    let pc = self.category_totals[c] as f64 / n;
                    let ps = self.symbol_totals[s] as f64 / n;
                    mi += p * (p / (pc * ps)).ln();
                }
            }
        }
        mi.max(0.0)
    }

    /// MI divided by the arithmetic mean of the two entropies. Both entropies
    /// zero gives 1; exactly one zero gives 0.
    pub fn nmi(&self) -> f64 {
        let (hc, hs) = (self.category_entropy(), self.symbol_entropy());
        match (hc == 0.0, hs == 0.0) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            _ => (self.mutual_information() / ((hc + hs) / 2.0)).clamp(0.0, 1.0),
        }
    }

    /// Describes a zero-entropy edge case, if any.
    pub fn nmi_edge_case(&self) -> Option<&'static str> {
        match (self.category_entropy() == 0.0, self.symbol_entropy() == 0.0) {
            (true, true) => Some("single category and single symbol: nMI defined as 1"),
            (true, false) => Some("single category: nMI defined as 0"),
            (false, true) => Some("single symbol: nMI defined as 0"),
            _ => None,
        }
    }
}

fn entropy(counts: &[usize], total: usize) -> f64 {
    let n = total as f64;
    counts.iter().filter(|&&k| k > 0).map(|&k| k as f64 / n).map(|p| -p * p.ln()).sum::<f64>().max(0.0)
}

pub fn normalized_mutual_information(records: &[ProtocolRecord]) -> Result<f64> {
    Ok(ContingencyTable::from_records(records)?.nmi())
}

/// Mean path similarity over all record pairs sharing a symbol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WnSim {
    Value { value: f64, pairs: u64 },
    NoPairs,
}

impl WnSim {
    pub fn value(self) -> Option<f64> {
        match self {
            WnSim::Value { value, .. } => Some(value),
            WnSim::NoPairs => None,
        }
    }
}

/// Pair-pooled similarity from the contingency table. Per symbol with
/// category counts `n`, the similarity summed over unordered pairs is
/// `(nᵀ S n − Σ n_c) / 2` since `S_cc = 1`; the pair count is `C(Σ n, 2)`.
fn wnsim_from_table(table: &ContingencyTable, sim: &[Vec<f64>]) -> WnSim {
    let mut total = 0.0;
    let mut pairs: u64 = 0;
    for s in 0..table.symbols.len() {
        let n: Vec<f64> = table.counts.iter().map(|r| r[s] as f64).collect();
        let size = table.symbol_totals[s] as u64;
        if size < 2 {
            continue;
        }
        let mut quad = 0.0;
        for (a, &na) in n.iter().enumerate().filter(|(_, &v)| v > 0.0) {
            for (b, &nb) in n.iter().enumerate().filter(|(_, &v)| v > 0.0) {
                quad += na * nb * sim[a][b];
            }
        }
        total += (quad - size as f64) / 2.0;
        pairs += size * (size - 1) / 2;
    }
    if pairs == 0 {
        WnSim::NoPairs
    } else {
        WnSim::Value { value: total / pairs as f64, pairs }
    }
}

fn category_similarity(taxonomy: &Taxonomy, categories: &[usize]) -> Result<Vec<Vec<f64>>> {
    let leaves: Vec<NodeId> = categories.iter().map(|&c| NodeId(c)).collect();
    Ok(taxonomy.similarity_matrix(&leaves)?)
}

pub fn wnsim(records: &[ProtocolRecord], taxonomy: &Taxonomy) -> Result<WnSim> {
    let table = ContingencyTable::from_records(records)?;
    let sim = category_similarity(taxonomy, &table.categories)?;
    Ok(wnsim_from_table(&table, &sim))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Nmi,
    Wnsim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub statistic: Statistic,
    /// `None` when the statistic is undefined (WNsim without pairs).
    pub observed: Option<f64>,
    pub p_value: Option<f64>,
    pub permutations: usize,
    pub alpha: f64,
    pub significant: bool,
}

/// Values within this relative distance of the observed statistic count as
/// reaching it, so floating-point reassociation cannot flip ties.
const TIE_TOLERANCE: f64 = 1e-12;

/// One-sided test shuffling the symbol column against fixed categories:
/// `p = (1 + #{permuted ≥ observed}) / (1 + P)`. Permutation `i` uses its own
/// stream of `seed`, so the result does not depend on scheduling.
pub fn permutation_test(
    records: &[ProtocolRecord],
    statistic: Statistic,
    taxonomy: Option<&Taxonomy>,
    permutations: usize,
    alpha: f64,
    seed: u64,
) -> Result<PermutationResult> {
    if permutations < 99 {
        return config_err(format!("permutation test needs at least 99 permutations, got {permutations}"));
    }
    non_empty(records)?;
    let (c_idx, categories) = densify(records.iter().map(|r| r.category_id));
    let (s_idx, symbols) = densify(records.iter().map(|r| r.symbol));
    let sim = match statistic {
        Statistic::Wnsim => {
            let t = taxonomy.ok_or_else(|| Error::Config("WNsim needs a taxonomy".into()))?;
            Some(category_similarity(t, &categories)?)
        }
        Statistic::Nmi => None,
    };
    let eval = |syms: &[usize]| -> Option<f64> {
        let table = ContingencyTable::from_indices(&c_idx, syms, categories.clone(), symbols.clone());
        match &sim {
            None => Some(table.nmi()),
            Some(s) => wnsim_from_table(&table, s).value(),
        }
    };
    let Some(observed) = eval(&s_idx) else {
        return Ok(PermutationResult { statistic, observed: None, p_value: None, permutations, alpha, significant: false });
    };
    let threshold = observed - TIE_TOLERANCE * observed.abs().max(1.0);
    let exceed = par::map_range(permutations, |i| {
        let mut rng = Rng::stream(seed, &[i as u64]);
        let mut perm = s_idx.clone();
        rng.shuffle(&mut perm);
        eval(&perm).is_some_and(|v| v >= threshold) as usize
    });
    let count: usize = exceed.iter().sum();
    let p = (1 + count) as f64 / (1 + permutations) as f64;
    Ok(PermutationResult { statistic, observed: Some(observed), p_value: Some(p), permutations, alpha, significant: p < alpha })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub permutations: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { permutations: 999, alpha: 0.01, seed: 0 }
    }
}

/// Protocol size, nMI and WNsim with their permutation p-values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub records: usize,
    pub protocol_size: usize,
    pub nmi: f64,
    pub wnsim: Option<f64>,
    pub wnsim_pairs: u64,
    pub nmi_test: PermutationResult,
    pub wnsim_test: PermutationResult,
    /// Edge cases and untestable statistics, in words.
    pub notes: Vec<String>,
}

pub fn analyze(records: &[ProtocolRecord], taxonomy: &Taxonomy, cfg: &AnalysisConfig) -> Result<AnalysisReport> {
    let table = ContingencyTable::from_records(records)?;
    let ws = wnsim(records, taxonomy)?;
    let nmi_test = permutation_test(records, Statistic::Nmi, None, cfg.permutations, cfg.alpha, cfg.seed)?;
    let wnsim_test = permutation_test(records, Statistic::Wnsim, Some(taxonomy), cfg.permutations, cfg.alpha, cfg.seed)?;
    let mut notes = Vec::new();
    if let Some(e) = table.nmi_edge_case() {
        notes.push(e.to_string());
    }
    if ws == WnSim::NoPairs {
        notes.push("WNsim undefined: no two records share a symbol; not testable".into());
    }
    for t in [&nmi_test, &wnsim_test] {
        if t.observed.is_some() && !t.significant {
            let name = match t.statistic {
                Statistic::Nmi => "nMI",
                Statistic::Wnsim => "WNsim",
            };
            notes.push(format!("{name} not significantly different from chance (NS)"));
        }
    }
    Ok(AnalysisReport {
        records: records.len(),
        protocol_size: protocol_size(records)?,
        nmi: table.nmi(),
        wnsim: ws.value(),
        wnsim_pairs: match ws {
            WnSim::Value { pairs, .. } => pairs,
            WnSim::NoPairs => 0,
        },
        nmi_test,
        wnsim_test,
        notes,
    })
}

/// Result of Lloyd's algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    /// Sum of squared distances to the assigned centroid after each
    /// assignment step.
    pub objective: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Convergence threshold on the largest centroid displacement.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { max_iters: 300, tol: 1e-6 }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

impl KMeans {
    pub fn predict(&self, features: &[Vec<f64>]) -> Vec<usize> {
        par::map_range(features.len(), |i| nearest(&features[i], &self.centroids).0)
    }
}

/// k-means++ seeding followed by Lloyd iterations. A cluster that loses all
/// its points is re-seeded at the point farthest from its centroid.
pub fn kmeans(features: &[Vec<f64>], k: usize, cfg: &KMeansConfig, seed: u64) -> Result<KMeans> {
    let n = features.len();
    if k == 0 || k > n {
        return config_err(format!("k = {k} must lie in 1..={n}"));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Input("features have inconsistent dimensions".into()));
    }
    let mut rng = Rng::seed_from(seed);
    let mut centroids = vec![features[rng.below(n)].clone()];
    let mut d2: Vec<f64> = features.iter().map(|f| sq_dist(f, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.uniform() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.below(n)
        };
        centroids.push(features[next].clone());
        for (i, f) in features.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(f, &centroids[centroids.len() - 1]));
        }
    }
    let mut assignments = vec![0; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let near = par::map_range(n, |i| nearest(&features[i], &centroids));
        objective.push(near.iter().map(|x| x.1).sum());
        assignments = near.iter().map(|x| x.0).collect();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (f, &a) in features.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(f).for_each(|(s, v)| *s += v);
        }
        let mut shift: f64 = 0.0;
        let mut taken = vec![false; n];
        for j in 0..k {
            let new = if counts[j] > 0 {
                sums[j].iter().map(|s| s / counts[j] as f64).collect()
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| near[a].1.total_cmp(&near[b].1).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken[far] = true;
                features[far].clone()
            };
            shift = shift.max(sq_dist(&new, &centroids[j]).sqrt());
            centroids[j] = new;
        }
        if shift < cfg.tol {
            break;
        }
    }
    let near = par::map_range(n, |i| nearest(&features[i], &centroids));
    let final_assign: Vec<usize> = near.iter().map(|x| x.0).collect();
    if final_assign != assignments {
        objective.push(near.iter().map(|x| x.1).sum());
        assignments = final_assign;
    }
    Ok(KMeans { centroids, assignments, iterations, objective })
}
