//! Multi-seed sweeps: the full pipeline once per seed, then avg / sd / min /
//! max over seeds for every reported metric.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::commands::{run_pipeline, write_json, Run};
use crate::config::RunConfig;
use crate::error::{config_err, io_err, CliError, Result};
use crate::summary::{render_table, summarize, SeedSummary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedsReport {
    pub seeds: Vec<u64>,
    pub completed: Vec<u64>,
    pub failures: Vec<SeedFailure>,
    pub rows: Vec<SeedSummary>,
}

/// Configuration of one seed's sub-run: `<run dir>/seeds/seed-<seed>`.
pub fn seed_config(cfg: &RunConfig, seed: u64) -> RunConfig {
    RunConfig { seed, out_dir: cfg.run_dir().join("seeds"), run_id: format!("seed-{seed}"), ..cfg.clone() }
}

fn run_jobs<T: Send, F: Fn(u64) -> T + Sync + Send>(seeds: &[u64], jobs: usize, f: F) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| CliError::Config(e.to_string()))?;
        return Ok(pool.install(|| seeds.par_iter().map(|&s| f(s)).collect()));
    }
    #[cfg(not(feature = "parallel"))]
    let _ = jobs;
    Ok(seeds.iter().map(|&s| f(s)).collect())
}

/// Runs every seed of `cfg.seeds` (at most `jobs` at a time), writes
/// `seeds.json` and `seeds.txt`, and fails with exit code 4 if any seed
/// failed.
pub fn cmd_seeds(cfg: &RunConfig, jobs: usize) -> Result<SeedsReport> {
    if cfg.seeds.len() < 2 {
        return config_err("a seed sweep needs at least 2 seeds");
    }
    if (1..cfg.seeds.len()).any(|i| cfg.seeds[..i].contains(&cfg.seeds[i])) {
        return config_err("seed list contains duplicates");
    }
    if jobs == 0 {
        return config_err("jobs must be at least 1");
    }
    let run = Run::open(cfg)?;
    let outcomes = run_jobs(&cfg.seeds, jobs, |s| run_pipeline(&seed_config(cfg, s)).map(|r| r.metrics()))?;
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let (mut completed, mut failures) = (Vec::new(), Vec::new());
    for (&seed, outcome) in cfg.seeds.iter().zip(outcomes) {
        match outcome {
            Ok(metrics) => {
                completed.push(seed);
                for (k, v) in metrics {
                    per_metric.entry(k).or_default().push(v);
                }
            }
            Err(e) => failures.push(SeedFailure { seed, error: e.to_string() }),
        }
    }
    let report = SeedsReport { seeds: cfg.seeds.clone(), completed, failures, rows: summarize(&per_metric) };
    write_json(&run.dir.join("seeds.json"), &serde_json::json!({ "command": "seeds", "config": cfg, "results": report }))?;
    let mut table = render_table(&report.rows);
    for f in &report.failures {
        table.push_str(&format!("seed {} failed: {}\n", f.seed, f.error));
    }
    let txt = run.dir.join("seeds.txt");
    std::fs::write(&txt, table).map_err(io_err(&txt))?;
    if !report.failures.is_empty() {
        return Err(CliError::PartialSeeds { failed: report.failures.len(), total: cfg.seeds.len() });
    }
    Ok(report)
}
