//! The observe → decide → respond → update loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kv::KvDoc;
use crate::log::InteractionLog;
use crate::types::{ActionCatalog, ActionId, ContextTags, DecisionRepresentation, UserId};

use super::scenario::{Preset, ScenarioConfig};
use super::world::{response_records, rng_for, stream, Response, World};

/// What the robot perceives at one tick for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationEvent {
    pub user: UserId,
    pub tick: u64,
    pub context: ContextTags,
}

/// Anything that can choose actions in a scenario.
pub trait Agent {
    fn name(&self) -> String;

    /// Declared metadata for a user, before the episode.
    fn register_user(&mut self, user: UserId, metadata: &BTreeMap<String, String>) -> Result<()>;

    /// History gathered before the episode.
    fn warm_start(&mut self, history: &InteractionLog) -> Result<()>;

    fn act(&mut self, obs: &ObservationEvent) -> Result<DecisionRepresentation>;

    fn feedback(&mut self, decision: &DecisionRepresentation, response: &Response) -> Result<()>;
}

impl<A: Agent + ?Sized> Agent for Box<A> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn register_user(&mut self, user: UserId, metadata: &BTreeMap<String, String>) -> Result<()> {
        (**self).register_user(user, metadata)
    }

    fn warm_start(&mut self, history: &InteractionLog) -> Result<()> {
        (**self).warm_start(history)
    }

    fn act(&mut self, obs: &ObservationEvent) -> Result<DecisionRepresentation> {
        (**self).act(obs)
    }

    fn feedback(&mut self, decision: &DecisionRepresentation, response: &Response) -> Result<()> {
        (**self).feedback(decision, response)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReport {
    pub preset: Preset,
    pub agent: String,
    pub seed: u64,
    pub users: usize,
    pub ticks: usize,
    pub decisions: usize,
    pub no_ops: usize,
    /// Sum of feedback credited to executed actions.
    pub cumulative_feedback: f64,
    pub hits: usize,
    /// Top-1 hit rate per quarter of the episode.
    pub quarter_hit_rates: [f64; 4],
    /// Top-1 share per action group.
    pub exposure: BTreeMap<String, f64>,
    pub warmup_records: usize,
}

impl EpisodeReport {
    pub fn mean_feedback(&self) -> f64 {
        self.cumulative_feedback / self.decisions.max(1) as f64
    }

    pub fn hit_rate(&self) -> f64 {
        self.hits as f64 / self.decisions.max(1) as f64
    }

    /// Largest minus smallest group share.
    pub fn exposure_disparity(&self) -> f64 {
        let max = self
            .exposure
            .values()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let min = self
            .exposure
            .values()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if self.exposure.is_empty() {
            0.0
        } else {
            max - min
        }
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.set("episode.preset", self.preset);
        d.set("episode.agent", &self.agent);
        d.set("episode.seed", self.seed);
        d.set("episode.users", self.users);
        d.set("episode.ticks", self.ticks);
        d.set("episode.decisions", self.decisions);
        d.set("episode.no_ops", self.no_ops);
        d.set("episode.warmup_records", self.warmup_records);
        d.set(
            "metrics.cumulative_feedback",
            format!("{:.6}", self.cumulative_feedback),
        );
        d.set(
            "metrics.mean_feedback",
            format!("{:.6}", self.mean_feedback()),
        );
        d.set("metrics.hit_rate", format!("{:.6}", self.hit_rate()));
        for (i, r) in self.quarter_hit_rates.iter().enumerate() {
            d.set(format!("metrics.hit_rate_q{}", i + 1), format!("{r:.6}"));
        }
        d.set(
            "metrics.exposure_disparity",
            format!("{:.6}", self.exposure_disparity()),
        );
        for (g, s) in &self.exposure {
            d.set(format!("exposure.{g}"), format!("{s:.6}"));
        }
        d
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{}", self.to_kv().render());
        s
    }
}

#[derive(Debug, Clone)]
pub struct Episode {
    /// Warm-up history followed by the episode's interactions.
    pub log: InteractionLog,
    pub report: EpisodeReport,
}

/// Runs one episode of `config` with `agent`. All randomness derives from
/// `seed`; the agent only sees observations, candidates and responses.
///
/// The "mnar-exposure" preset has no decision loop: it returns one logging
/// draw (calibration slice plus biased exposure) and never calls the agent.
pub fn run_scenario<A: Agent + ?Sized>(
    config: &ScenarioConfig,
    agent: &mut A,
    seed: u64,
) -> Result<Episode> {
    let mut world = World::new(config, seed)?;
    let mut report = EpisodeReport {
        preset: config.preset,
        agent: agent.name(),
        seed,
        users: config.users,
        ticks: config.ticks,
        decisions: 0,
        no_ops: 0,
        cumulative_feedback: 0.0,
        hits: 0,
        quarter_hit_rates: [0.0; 4],
        exposure: BTreeMap::new(),
        warmup_records: 0,
    };
    if config.preset == Preset::MnarExposure {
        let full = world.full_feedback(seed);
        let log = world.mnar_log(&full, seed)?;
        report.warmup_records = log.len();
        return Ok(Episode { log, report });
    }
    if config.ticks == 0 && config.warmup == 0 {
        return Ok(Episode {
            log: InteractionLog::new(),
            report,
        });
    }

    for u in world.user_ids() {
        agent.register_user(u, &world.metadata(u))?;
    }
    let mut log = world.warmup_log(seed)?;
    report.warmup_records = log.len();
    agent.warm_start(&log)?;

    let mut feedback_rng = rng_for(seed, stream::FEEDBACK);
    let mut context_rng = rng_for(seed, stream::CONTEXT);
    let mut quarter_hits = [0usize; 4];
    let mut quarter_n = [0usize; 4];
    let mut top1: BTreeMap<String, usize> =
        world.catalog.iter().map(|e| (e.group.clone(), 0)).collect();
    for tick in 0..config.ticks {
        let quarter = (4 * tick / config.ticks).min(3);
        for user in world.user_ids() {
            let context = world.draw_context(&mut context_rng);
            let obs = ObservationEvent {
                user,
                tick: tick as u64,
                context: context.clone(),
            };
            let decision = agent.act(&obs)?;
            report.decisions += 1;
            quarter_n[quarter] += 1;
            if decision.is_no_op() {
                report.no_ops += 1;
                continue;
            }
            let target = world.target(user, &context);
            let candidates: Vec<ActionId> = decision.candidates.iter().map(|c| c.0).collect();
            let response = world.respond(
                user,
                decision.chosen,
                &candidates,
                &context,
                &mut feedback_rng,
            );
            if target == Some(decision.chosen) {
                report.hits += 1;
                quarter_hits[quarter] += 1;
            }
            report.cumulative_feedback += response.realized();
            if let Some(g) = world.catalog.group_of(decision.chosen) {
                *top1.entry(g.to_string()).or_default() += 1;
            }
            let n = if matches!(response, Response::FollowUp { .. }) {
                2
            } else {
                1
            };
            let t = world.next_timestamps(user, n);
            for r in response_records(t, user, decision.chosen, &response, &context) {
                log.append(r)?;
            }
            agent.feedback(&decision, &response)?;
        }
    }
    for q in 0..4 {
        report.quarter_hit_rates[q] = quarter_hits[q] as f64 / quarter_n[q].max(1) as f64;
    }
    let executed: usize = top1.values().sum();
    report.exposure = top1
        .into_iter()
        .map(|(g, c)| (g, c as f64 / executed.max(1) as f64))
        .collect();
    Ok(Episode { log, report })
}

fn decision(
    id: u64,
    obs: &ObservationEvent,
    candidates: Vec<(ActionId, f64)>,
    provenance: &str,
) -> DecisionRepresentation {
    let chosen = candidates.first().map_or(ActionId::NO_OP, |c| c.0);
    DecisionRepresentation {
        id,
        user: obs.user,
        tick: obs.tick,
        candidates,
        chosen,
        provenance: vec![provenance.to_string()],
    }
}

/// Always proposes the action with the best mean warm-up feedback among
/// those the context admits.
#[derive(Debug, Clone)]
pub struct PopularityPolicy {
    catalog: ActionCatalog,
    means: BTreeMap<ActionId, f64>,
    next_id: u64,
}

impl PopularityPolicy {
    pub fn new(catalog: ActionCatalog) -> Self {
        Self {
            catalog,
            means: BTreeMap::new(),
            next_id: 0,
        }
    }
}

impl Agent for PopularityPolicy {
    fn name(&self) -> String {
        "popularity".into()
    }

    fn register_user(&mut self, _user: UserId, _metadata: &BTreeMap<String, String>) -> Result<()> {
        Ok(())
    }

    fn warm_start(&mut self, history: &InteractionLog) -> Result<()> {
        let mut sums: BTreeMap<ActionId, (f64, usize)> = BTreeMap::new();
        for r in history.records() {
            let e = sums.entry(r.action).or_default();
            e.0 += r.value();
            e.1 += 1;
        }
        self.means = sums
            .into_iter()
            .map(|(a, (s, n))| (a, s / n as f64))
            .collect();
        Ok(())
    }

    fn act(&mut self, obs: &ObservationEvent) -> Result<DecisionRepresentation> {
        let mut scored: Vec<(ActionId, f64)> = self
            .catalog
            .iter()
            .filter(|e| e.admits(&obs.context))
            .map(|e| (e.id, self.means.get(&e.id).copied().unwrap_or(0.0)))
            .collect();
        crate::types::sort_scored(&mut scored);
        self.next_id += 1;
        Ok(decision(self.next_id, obs, scored, "policy=popularity"))
    }

    fn feedback(&mut self, _decision: &DecisionRepresentation, _response: &Response) -> Result<()> {
        Ok(())
    }
}

/// Uniformly random admitted action, seeded.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    catalog: ActionCatalog,
    rng: ChaCha8Rng,
    next_id: u64,
}

impl RandomPolicy {
    pub fn new(catalog: ActionCatalog, seed: u64) -> Self {
        Self {
            catalog,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 0,
        }
    }
}

impl Agent for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn register_user(&mut self, _user: UserId, _metadata: &BTreeMap<String, String>) -> Result<()> {
        Ok(())
    }

    fn warm_start(&mut self, _history: &InteractionLog) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, obs: &ObservationEvent) -> Result<DecisionRepresentation> {
        let admitted: Vec<ActionId> = self
            .catalog
            .iter()
            .filter(|e| e.admits(&obs.context))
            .map(|e| e.id)
            .collect();
        self.next_id += 1;
        let candidates = admitted
            .choose(&mut self.rng)
            .map(|&a| vec![(a, 0.0)])
            .unwrap_or_default();
        Ok(decision(self.next_id, obs, candidates, "policy=random"))
    }

    fn feedback(&mut self, _decision: &DecisionRepresentation, _response: &Response) -> Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_length_episode_is_empty() {
        let mut cfg = ScenarioConfig::preset(Preset::HeterogeneousPreferences);
        cfg.ticks = 0;
        cfg.warmup = 0;
        let w = World::new(&cfg, 0).unwrap();
        let mut agent = RandomPolicy::new(w.catalog.clone(), 0);
        let ep = run_scenario(&cfg, &mut agent, 0).unwrap();
        assert!(ep.log.is_empty());
        assert_eq!(ep.report.decisions, 0);
    }

    #[test]
    fn runs_are_deterministic() {
        for preset in Preset::ALL {
            let mut cfg = ScenarioConfig::preset(preset);
            cfg.ticks = cfg.ticks.min(20);
            let run = || {
                let w = World::new(&cfg, 5).unwrap();
                let mut agent = RandomPolicy::new(w.catalog.clone(), 5);
                let ep = run_scenario(&cfg, &mut agent, 5).unwrap();
                (ep.log.to_text(None), ep.report.render())
            };
            assert_eq!(run(), run(), "{preset}");
        }
    }

    #[test]
    fn popularity_is_static() {
        let mut cfg = ScenarioConfig::preset(Preset::HeterogeneousPreferences);
        cfg.ticks = 10;
        let w = World::new(&cfg, 2).unwrap();
        let mut agent = PopularityPolicy::new(w.catalog.clone());
        let ep = run_scenario(&cfg, &mut agent, 2).unwrap();
        let chosen: std::collections::BTreeSet<_> = ep
            .log
            .records()
            .iter()
            .filter(|r| !r.context.contains(super::super::world::WARMUP_TAG))
            .map(|r| r.action)
            .collect();
        assert_eq!(chosen.len(), 1);
    }
}
