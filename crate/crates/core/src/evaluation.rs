//! Offline metrics and the simulator-based policy comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::engine::{Engine, EngineConfig};
use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::log::InteractionLog;
use crate::profiling::CfModel;
use crate::ranking::ndcg_at;
use crate::simulator::{run_scenario, Agent, EpisodeReport, ScenarioConfig, World};
use crate::types::{sort_scored, ActionId, UserId};

/// Feedback at or above this counts as relevant.
pub const DEFAULT_RELEVANCE_THRESHOLD: f64 = 0.75;

/// Named metric values plus run metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    pub metadata: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rejects non-finite values.
    pub fn insert(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::config(
                name,
                format!("metric is not finite ({value})"),
            ));
        }
        self.values.insert(name, value);
        Ok(())
    }

    pub fn meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        for (k, v) in &self.metadata {
            d.set(format!("meta.{k}"), v);
        }
        for (k, v) in &self.values {
            d.set(format!("metrics.{k}"), format!("{v:.6}"));
        }
        d
    }

    /// Two aligned columns, metadata first.
    pub fn render_columns(&self) -> String {
        let width = self
            .metadata
            .keys()
            .chain(self.values.keys())
            .map(|k| k.len())
            .max()
            .unwrap_or(0);
        let mut s = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "{k:<width$}  {v}");
        }
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k:<width$}  {v:>12.6}");
        }
        s
    }
}

/// Root mean squared error of `predict` over the test records.
pub fn evaluate_pointwise_with(
    test: &InteractionLog,
    mut predict: impl FnMut(UserId, ActionId) -> Result<f64>,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test log"));
    }
    let mut sse = 0.0;
    for r in test.records() {
        let e = predict(r.user, r.action)? - r.value();
        sse += e * e;
    }
    Ok((sse / test.len() as f64).sqrt())
}

/// RMSE of a factorization model; unknown users or actions are errors.
pub fn evaluate_pointwise(model: &CfModel, test: &InteractionLog) -> Result<f64> {
    evaluate_pointwise_with(test, |u, a| model.predict(u, a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingMetrics {
    pub k: usize,
    pub ndcg: f64,
    pub precision: f64,
    pub recall: f64,
    /// Users with at least one relevant test item.
    pub users: usize,
}

impl RankingMetrics {
    pub fn add_to(&self, report: &mut MetricReport) -> Result<()> {
        report.insert(format!("ndcg@{}", self.k), self.ndcg)?;
        report.insert(format!("precision@{}", self.k), self.precision)?;
        report.insert(format!("recall@{}", self.k), self.recall)?;
        report.meta("k", self.k);
        Ok(())
    }
}

/// Ranks `candidates` for every test user by `score` (missing scores rank
/// last, ties by ascending id) and compares against the user's mean test
/// feedback per action. Averages over users with a relevant test item.
pub fn evaluate_ranking_with(
    test: &InteractionLog,
    candidates: &[ActionId],
    k: usize,
    threshold: f64,
    score: impl Fn(UserId, ActionId) -> Option<f64>,
) -> Result<RankingMetrics> {
    if k == 0 {
        return Err(Error::config("k", "must be at least 1"));
    }
    let mut sums: BTreeMap<UserId, BTreeMap<ActionId, (f64, usize)>> = BTreeMap::new();
    for r in test.records() {
        let e = sums
            .entry(r.user)
            .or_default()
            .entry(r.action)
            .or_insert((0.0, 0));
        e.0 += r.value();
        e.1 += 1;
    }
    let (mut ndcg, mut precision, mut recall, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (user, per_action) in &sums {
        let rel: BTreeMap<ActionId, f64> = per_action
            .iter()
            .map(|(&a, &(s, c))| (a, s / c as f64))
            .collect();
        let relevant: BTreeSet<ActionId> = rel
            .iter()
            .filter(|(_, &f)| f >= threshold)
            .map(|(&a, _)| a)
            .collect();
        if relevant.is_empty() {
            continue;
        }
        let pool: BTreeSet<ActionId> = candidates
            .iter()
            .copied()
            .chain(rel.keys().copied())
            .collect();
        let mut scored: Vec<(ActionId, f64)> = pool
            .into_iter()
            .map(|a| (a, score(*user, a).unwrap_or(f64::NEG_INFINITY)))
            .collect();
        sort_scored(&mut scored);
        let gains: Vec<f64> = scored
            .iter()
            .map(|(a, _)| rel.get(a).copied().unwrap_or(0.0))
            .collect();
        let hits = scored
            .iter()
            .take(k)
            .filter(|(a, _)| relevant.contains(a))
            .count() as f64;
        ndcg += ndcg_at(&gains, k);
        precision += hits / k as f64;
        recall += hits / relevant.len() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("test users with a relevant item"));
    }
    let n_f = n as f64;
    Ok(RankingMetrics {
        k,
        ndcg: ndcg / n_f,
        precision: precision / n_f,
        recall: recall / n_f,
        users: n,
    })
}

/// Ranking metrics of a factorization model over its own actions plus the
/// test actions.
pub fn evaluate_ranking(
    model: &CfModel,
    test: &InteractionLog,
    k: usize,
    threshold: f64,
) -> Result<RankingMetrics> {
    evaluate_ranking_with(test, model.actions(), k, threshold, |u, a| {
        model.predict(u, a).ok()
    })
}

/// Cumulative-feedback distribution over simulated episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyReport {
    pub runs: Vec<EpisodeReport>,
    pub mean_cumulative_feedback: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_cumulative_feedback: f64,
    pub mean_exposure_disparity: f64,
}

impl PolicyReport {
    fn from_runs(runs: Vec<EpisodeReport>) -> Self {
        let n = runs.len() as f64;
        let mean = runs.iter().map(|r| r.cumulative_feedback).sum::<f64>() / n;
        let var = if runs.len() > 1 {
            runs.iter()
                .map(|r| (r.cumulative_feedback - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0)
        } else {
            0.0
        };
        let disparity = runs
            .iter()
            .map(EpisodeReport::exposure_disparity)
            .sum::<f64>()
            / n;
        Self {
            runs,
            mean_cumulative_feedback: mean,
            std_cumulative_feedback: var.sqrt(),
            mean_exposure_disparity: disparity,
        }
    }

    pub fn to_metrics(&self) -> Result<MetricReport> {
        let mut m = MetricReport::new();
        m.insert("cumulative-feedback.mean", self.mean_cumulative_feedback)?;
        m.insert("cumulative-feedback.std", self.std_cumulative_feedback)?;
        m.insert("exposure-disparity", self.mean_exposure_disparity)?;
        m.meta("runs", self.runs.len());
        if let Some(r) = self.runs.first() {
            m.meta("preset", r.preset);
            m.meta("agent", &r.agent);
        }
        Ok(m)
    }
}

/// Seed of episode `episode` under base seed `seed`.
pub fn run_seed(seed: u64, episode: usize) -> u64 {
    seed ^ ((episode as u64) << 32)
}

/// Runs `episodes` episodes per seed, one thread per run. `make_agent` builds
/// a fresh agent from the run's world and seed.
pub fn evaluate_agent<A, F>(
    make_agent: F,
    scenario: &ScenarioConfig,
    episodes: usize,
    seeds: &[u64],
) -> Result<PolicyReport>
where
    A: Agent,
    F: Fn(&World, u64) -> Result<A> + Sync,
{
    if episodes == 0 || seeds.is_empty() {
        return Err(Error::Empty("episodes"));
    }
    let runs: Vec<u64> = seeds
        .iter()
        .flat_map(|&s| (0..episodes).map(move |e| run_seed(s, e)))
        .collect();
    let results: Vec<Result<EpisodeReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = runs
            .iter()
            .map(|&seed| {
                let make_agent = &make_agent;
                scope.spawn(move || {
                    let world = World::new(scenario, seed)?;
                    let mut agent = make_agent(&world, seed)?;
                    Ok(run_scenario(scenario, &mut agent, seed)?.report)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("episode thread panicked"))
            .collect()
    });
    Ok(PolicyReport::from_runs(
        results.into_iter().collect::<Result<_>>()?,
    ))
}

/// [`evaluate_agent`] with the engine. Each run's engine and model seeds are
/// set to the run seed.
pub fn evaluate_policy(
    config: &EngineConfig,
    scenario: &ScenarioConfig,
    episodes: usize,
    seeds: &[u64],
) -> Result<PolicyReport> {
    evaluate_agent(
        |world, seed| {
            let mut c = config.clone();
            c.seed = seed;
            c.cf.seed = seed;
            c.seq.seed = seed;
            Engine::new(c, world.catalog.clone())
        },
        scenario,
        episodes,
        seeds,
    )
}
