//! The decision loop: memory state, component registry, decide and observe.

pub mod config;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::log::InteractionLog;
use crate::profiling::{
    cf_train_over, cold_start_profile, ke_train_with, profile_from_models, replay_sequences,
    seq_train_with, update_profile, CfModel, GroupStats, InitialState, ProfileModels,
    RecurrentModel, PERSONA_KEY,
};
use crate::ranking::{
    pairs_from_followup, ExactRetriever, MixtureReranker, PreferencePair, Reranker, Retriever,
    RuleRetriever,
};
use crate::responsible::{
    estimate_propensities, fair_rerank, unlearn, ExposureHistory, FairnessConstraint,
    ForgetRequest, PropensityTable, UnlearnAudit, UnlearnConfig,
};
use crate::simulator::{response_records, Agent, ObservationEvent, Response};
use crate::types::{
    ActionCatalog, ActionId, ContextTags, DecisionRepresentation, UserId, UserProfile,
};

pub use config::{EngineConfig, FairnessSettings, ProfilerSet};

/// Supplies exposure propensities for inverse-propensity weighted retraining.
pub trait PropensitySource: Send + Sync {
    fn name(&self) -> &str;
    fn estimate(&self, log: &InteractionLog) -> Result<PropensityTable>;
}

/// Naive-Bayes estimate from the log's calibration slice.
#[derive(Debug, Clone, Copy, Default)]
pub struct NaiveBayesPropensity;

impl PropensitySource for NaiveBayesPropensity {
    fn name(&self) -> &str {
        "naive-bayes"
    }

    fn estimate(&self, log: &InteractionLog) -> Result<PropensityTable> {
        estimate_propensities(log)
    }
}

/// Shared models, replaced as a whole after each training job.
#[derive(Debug, Clone, Default)]
pub struct TrainedModels {
    pub cf: Option<CfModel>,
    pub seq: Option<RecurrentModel>,
    pub ke: Option<RecurrentModel>,
    pub stats: GroupStats,
}

impl TrainedModels {
    pub fn empty(dim: usize) -> Self {
        Self {
            stats: GroupStats::from_members(std::iter::empty(), dim),
            ..Self::default()
        }
    }

    /// Persona centroids over the users the factorization model knows.
    pub fn with_stats(
        mut self,
        metadata: &BTreeMap<UserId, BTreeMap<String, String>>,
        dim: usize,
    ) -> Self {
        self.stats = match &self.cf {
            Some(cf) => GroupStats::from_members(
                cf.users().iter().map(|u| {
                    let group = metadata
                        .get(u)
                        .and_then(|m| m.get(PERSONA_KEY))
                        .map(String::as_str);
                    (group, cf.user_vector(*u).expect("user from the model"))
                }),
                dim,
            ),
            None => GroupStats::from_members(std::iter::empty(), dim),
        };
        self
    }
}

/// A slot assignment for [`Engine::swap_component`]. `None` empties the slot.
#[derive(Clone)]
pub enum Component {
    Retriever(Option<Arc<dyn Retriever>>),
    Reranker(Option<Arc<dyn Reranker>>),
    Fairness(Option<FairnessConstraint>),
    Propensity(Option<Arc<dyn PropensitySource>>),
    Profilers(ProfilerSet),
}

#[derive(Clone)]
pub struct ComponentRegistry {
    pub retriever: Arc<dyn Retriever>,
    pub reranker: Arc<dyn Reranker>,
    pub fairness: Option<FairnessConstraint>,
    pub propensity: Option<Arc<dyn PropensitySource>>,
    pub profilers: ProfilerSet,
}

impl ComponentRegistry {
    pub fn from_config(config: &EngineConfig, catalog: &ActionCatalog) -> Result<Self> {
        let retriever: Arc<dyn Retriever> = match config.retriever.as_str() {
            "rules" => Arc::new(RuleRetriever),
            _ => Arc::new(ExactRetriever),
        };
        let fairness = config
            .fairness
            .map(|f| FairnessConstraint::from_catalog(catalog, f.epsilon, f.window))
            .transpose()?;
        Ok(Self {
            retriever,
            reranker: Arc::new(MixtureReranker {
                weights: config.weights,
            }),
            fairness,
            propensity: config
                .propensity
                .then(|| Arc::new(NaiveBayesPropensity) as Arc<dyn PropensitySource>),
            profilers: config.profilers,
        })
    }

    /// One `slot = implementation` line per slot.
    pub fn describe(&self) -> Vec<String> {
        let p = self.profilers;
        let profilers: Vec<&str> = [(p.cf, "cf"), (p.seq, "seq"), (p.ke, "ke")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        vec![
            format!("retriever = {}", self.retriever.name()),
            format!("reranker = {}", self.reranker.name()),
            format!(
                "fairness = {}",
                self.fairness
                    .as_ref()
                    .map_or("none".to_string(), |f| format!(
                        "exposure-parity eps={}",
                        f.epsilon
                    ))
            ),
            format!(
                "propensity = {}",
                self.propensity.as_ref().map_or("none", |p| p.name())
            ),
            format!("profilers = {}", profilers.join(",")),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredDecision {
    pub decision: DecisionRepresentation,
    pub context: ContextTags,
    pub answered: bool,
}

#[derive(Debug, Clone, Default)]
pub struct MemoryState {
    pub profiles: BTreeMap<UserId, UserProfile>,
    pub metadata: BTreeMap<UserId, BTreeMap<String, String>>,
    pub log: InteractionLog,
    /// The most recent decisions, oldest first, at most `history_window`.
    pub decisions: VecDeque<StoredDecision>,
    pub exposure: ExposureHistory,
    /// Pairs emitted by follow-up requests, for pairwise training jobs.
    pub pairs: Vec<PreferencePair>,
    pub next_decision: u64,
    pub since_retrain: usize,
}

#[derive(Clone)]
pub struct Engine {
    config: EngineConfig,
    catalog: Arc<ActionCatalog>,
    registry: ComponentRegistry,
    models: Arc<TrainedModels>,
    state: MemoryState,
    warnings: Vec<String>,
}

impl Engine {
    pub fn new(config: EngineConfig, catalog: ActionCatalog) -> Result<Self> {
        config.validate()?;
        let registry = ComponentRegistry::from_config(&config, &catalog)?;
        let window = config.fairness.map_or(config.history_window, |f| f.window);
        Ok(Self {
            models: Arc::new(TrainedModels::empty(config.dim)),
            state: MemoryState {
                exposure: ExposureHistory::new(window),
                ..MemoryState::default()
            },
            catalog: Arc::new(catalog),
            registry,
            config,
            warnings: Vec::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn catalog(&self) -> &ActionCatalog {
        &self.catalog
    }

    pub fn registry(&self) -> &ComponentRegistry {
        &self.registry
    }

    pub fn models(&self) -> &TrainedModels {
        &self.models
    }

    pub fn state(&self) -> &MemoryState {
        &self.state
    }

    pub fn log(&self) -> &InteractionLog {
        &self.state.log
    }

    pub fn profile(&self, user: UserId) -> Option<&UserProfile> {
        self.state.profiles.get(&user)
    }

    /// Messages from fallbacks taken during training.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn view(&self) -> ProfileModels<'_> {
        let p = self.registry.profilers;
        let mut m = ProfileModels::new(
            self.models.cf.as_ref().filter(|_| p.cf),
            self.models.seq.as_ref().filter(|_| p.seq),
            self.models.ke.as_ref().filter(|_| p.ke),
        );
        m.local_steps = self.config.local_steps;
        m.local_step_size = self.config.local_step_size;
        m
    }

    fn cold_profile(&self, user: UserId) -> UserProfile {
        let empty = BTreeMap::new();
        let meta = self.state.metadata.get(&user).unwrap_or(&empty);
        cold_start_profile(user, meta, &self.models.stats, &self.view())
    }

    pub fn register_user(&mut self, user: UserId, metadata: BTreeMap<String, String>) {
        self.state.metadata.insert(user, metadata);
        if !self.state.profiles.contains_key(&user) {
            let p = self.cold_profile(user);
            self.state.profiles.insert(user, p);
        }
    }

    /// The decision for `obs` under the current state, without recording it.
    pub fn propose(&self, obs: &ObservationEvent) -> Result<DecisionRepresentation> {
        let models = self.view();
        let (profile, source) = match self.state.profiles.get(&obs.user) {
            Some(p) => (p.clone(), "stored"),
            None => (self.cold_profile(obs.user), "cold-start"),
        };
        let mut provenance = vec![format!("profile: {source}")];
        let candidates = self.registry.retriever.retrieve(
            &obs.context,
            &profile,
            &self.catalog,
            &models,
            self.config.retrieve_k,
        )?;
        provenance.push(format!(
            "retrieve: {} k={} -> {} candidates",
            self.registry.retriever.name(),
            self.config.retrieve_k,
            candidates.len()
        ));
        let decision =
            |candidates: Vec<(ActionId, f64)>, provenance: Vec<String>| DecisionRepresentation {
                id: self.state.next_decision,
                user: obs.user,
                tick: obs.tick,
                chosen: candidates.first().map_or(ActionId::NO_OP, |c| c.0),
                candidates,
                provenance,
            };
        if candidates.is_empty() {
            provenance.push("no admissible candidates: no-op".to_string());
            return Ok(decision(Vec::new(), provenance));
        }
        let mut ranked =
            self.registry
                .reranker
                .rerank(&candidates, &profile, &obs.context, &models)?;
        let weights = self.config.weights.effective(&models);
        provenance.push(format!(
            "rerank: {} weights cf={:.3} seq={:.3} ke={:.3}",
            self.registry.reranker.name(),
            weights[0],
            weights[1],
            weights[2]
        ));
        if let Some(constraint) = &self.registry.fairness {
            let (fair, audit) = fair_rerank(&ranked, constraint, &self.state.exposure);
            if audit.promotions.is_empty() {
                provenance.push("fairness: no change".to_string());
            }
            provenance.extend(audit.lines());
            ranked = fair;
        }
        Ok(decision(ranked.entries, provenance))
    }

    /// Proposes and records a decision.
    pub fn decide(&mut self, obs: &ObservationEvent) -> Result<DecisionRepresentation> {
        let decision = self.propose(obs)?;
        if !self.state.profiles.contains_key(&obs.user) {
            let p = self.cold_profile(obs.user);
            self.state.profiles.insert(obs.user, p);
        }
        if !decision.is_no_op() {
            let group = self
                .catalog
                .group_of(decision.chosen)
                .unwrap_or_default()
                .to_string();
            self.state.exposure.record(group);
        }
        self.state.decisions.push_back(StoredDecision {
            decision: decision.clone(),
            context: obs.context.clone(),
            answered: false,
        });
        while self.state.decisions.len() > self.config.history_window {
            self.state.decisions.pop_front();
        }
        self.state.next_decision += 1;
        Ok(decision)
    }

    /// Folds the user's response to a recorded decision into the log and the
    /// user's profile. Returns the preference pairs a follow-up implies.
    pub fn observe_feedback(
        &mut self,
        decision_id: u64,
        response: &Response,
    ) -> Result<Vec<PreferencePair>> {
        let idx = self
            .state
            .decisions
            .iter()
            .position(|d| d.decision.id == decision_id)
            .ok_or(Error::UnknownDecision(decision_id))?;
        let stored = &self.state.decisions[idx];
        if stored.answered {
            return Err(Error::DuplicateFeedback(decision_id));
        }
        let decision = &stored.decision;
        if decision.is_no_op() {
            return Err(Error::NotACandidate(ActionId::NO_OP));
        }
        let pairs = match response {
            Response::FollowUp { action, .. } => {
                pairs_from_followup(decision, *action, self.config.followup_pairs)?
            }
            Response::Explicit(_) => Vec::new(),
        };
        let user = decision.user;
        let t = self.state.log.last_timestamp(user).map_or(0, |t| t + 1);
        let mut records = response_records(t, user, decision.chosen, response, &stored.context);
        if matches!(response, Response::FollowUp { .. }) && !self.config.implicit_rejection {
            records.remove(0);
        }
        for r in &records {
            self.state.log.append(r.clone())?;
        }
        let profile = match self.state.profiles.get(&user) {
            Some(p) => p.clone(),
            None => self.cold_profile(user),
        };
        let updated = update_profile(&profile, &records, &self.view())?;
        self.state.profiles.insert(user, updated);
        self.state.decisions[idx].answered = true;
        self.state.pairs.extend(pairs.iter().copied());
        self.state.since_retrain += 1;
        if self.config.retrain_every > 0 && self.state.since_retrain >= self.config.retrain_every {
            self.retrain()?;
        }
        Ok(pairs)
    }

    /// Replaces one slot. Emptying the retriever or reranker is an error.
    pub fn swap_component(&mut self, component: Component) -> Result<()> {
        match component {
            Component::Retriever(None) => return Err(Error::MandatorySlot("retriever")),
            Component::Reranker(None) => return Err(Error::MandatorySlot("reranker")),
            Component::Retriever(Some(r)) => self.registry.retriever = r,
            Component::Reranker(Some(r)) => self.registry.reranker = r,
            Component::Fairness(f) => {
                if let Some(c) = &f {
                    let mut exposure = ExposureHistory::new(c.window);
                    for d in &self.state.decisions {
                        if !d.decision.is_no_op() {
                            exposure.record(c.group_of(d.decision.chosen));
                        }
                    }
                    self.state.exposure = exposure;
                }
                self.registry.fairness = f;
            }
            Component::Propensity(p) => self.registry.propensity = p,
            Component::Profilers(p) => self.registry.profilers = p,
        }
        Ok(())
    }

    /// Adds `history` to the log and retrains every enabled model.
    pub fn warm_start(&mut self, history: &InteractionLog) -> Result<()> {
        for r in history.records() {
            self.state.log.append(r.clone())?;
        }
        self.retrain()
    }

    /// Adds `history` to the log and installs previously trained models
    /// without retraining.
    pub fn restore(&mut self, history: &InteractionLog, models: TrainedModels) -> Result<()> {
        for r in history.records() {
            self.state.log.append(r.clone())?;
        }
        let models = models.with_stats(&self.state.metadata, self.config.dim);
        self.install(models)
    }

    /// Trains every enabled model on the full log, swaps the new models in and
    /// rebuilds all profiles by replaying each user's records.
    pub fn retrain(&mut self) -> Result<()> {
        self.state.since_retrain = 0;
        let log = &self.state.log;
        let d = self.config.dim;
        if log.is_empty() {
            return self.install(TrainedModels::empty(d));
        }
        let p = self.registry.profilers;
        let ids = self.catalog.ids();
        let cf = if p.cf || self.config.seq_init == InitialState::FromCf {
            let weights = match &self.registry.propensity {
                Some(src) => {
                    let table = src.estimate(log)?;
                    if let Some(w) = &table.warning {
                        self.warnings.push(w.clone());
                    }
                    Some(table.weights_for(log)?)
                }
                None => None,
            };
            Some(cf_train_over(
                log,
                &ids,
                &self.config.cf,
                weights.as_deref(),
            )?)
        } else {
            None
        };
        let init_cf = cf
            .as_ref()
            .filter(|_| self.config.seq_init == InitialState::FromCf);
        let skip_empty = |r: Result<RecurrentModel>| match r {
            Ok(m) => Ok(Some(m)),
            Err(Error::Empty(_)) => Ok(None),
            Err(e) => Err(e),
        };
        let previous =
            |m: &Option<RecurrentModel>| m.as_ref().filter(|_| self.config.incremental).cloned();
        let refit =
            |prev: Option<RecurrentModel>, fresh: &dyn Fn() -> Result<RecurrentModel>| match prev {
                Some(m) => match m.refit(log, init_cf) {
                    Err(Error::UnknownAction(_)) => fresh(),
                    r => r,
                },
                None => fresh(),
            };
        let seq = if p.seq {
            skip_empty(refit(previous(&self.models.seq), &|| {
                seq_train_with(log, &ids, &self.config.seq, init_cf)
            }))?
        } else {
            None
        };
        let ke = if p.ke {
            skip_empty(refit(previous(&self.models.ke), &|| {
                ke_train_with(log, &self.catalog, &self.config.seq, init_cf)
            }))?
        } else {
            None
        };
        let models = TrainedModels {
            cf,
            seq,
            ke,
            ..TrainedModels::default()
        }
        .with_stats(&self.state.metadata, d);
        self.install(models)
    }

    /// Swaps in externally trained models and rebuilds all profiles.
    pub fn install(&mut self, models: TrainedModels) -> Result<()> {
        self.models = Arc::new(models);
        let users: BTreeSet<UserId> = self
            .state
            .log
            .users()
            .into_iter()
            .chain(self.state.metadata.keys().copied())
            .chain(self.state.profiles.keys().copied())
            .collect();
        let mut profiles = BTreeMap::new();
        for u in users {
            profiles.insert(u, self.rebuilt_profile(u)?);
        }
        self.state.profiles = profiles;
        Ok(())
    }

    fn rebuilt_profile(&self, user: UserId) -> Result<UserProfile> {
        let empty = BTreeMap::new();
        let meta = self.state.metadata.get(&user).unwrap_or(&empty);
        let models = self.view();
        let base = profile_from_models(user, meta, &self.models.stats, &models);
        let records: Vec<_> = self
            .state
            .log
            .user_records(user)
            .into_iter()
            .cloned()
            .collect();
        replay_sequences(&base, &records, &models)
    }

    /// Unlearns the selected records from the factorization model, drops them
    /// from the log and rebuilds the user's profile.
    pub fn forget(
        &mut self,
        request: &ForgetRequest,
        config: &UnlearnConfig,
    ) -> Result<UnlearnAudit> {
        let cf = self
            .models
            .cf
            .as_ref()
            .ok_or(Error::Empty("factorization model"))?;
        let (model, audit) = unlearn(cf, &self.state.log, request, config)?;
        let mut models = (*self.models).clone();
        models.cf = Some(model);
        self.models = Arc::new(models);
        self.state.log = self
            .state
            .log
            .filter(|r| !(r.user == request.user && request.selects(r)));
        let p = self.rebuilt_profile(request.user)?;
        self.state.profiles.insert(request.user, p);
        Ok(audit)
    }
}

impl Agent for Engine {
    fn name(&self) -> String {
        "engine".to_string()
    }

    fn register_user(&mut self, user: UserId, metadata: &BTreeMap<String, String>) -> Result<()> {
        Engine::register_user(self, user, metadata.clone());
        Ok(())
    }

    fn warm_start(&mut self, history: &InteractionLog) -> Result<()> {
        Engine::warm_start(self, history)
    }

    fn act(&mut self, obs: &ObservationEvent) -> Result<DecisionRepresentation> {
        self.decide(obs)
    }

    fn feedback(&mut self, decision: &DecisionRepresentation, response: &Response) -> Result<()> {
        self.observe_feedback(decision.id, response).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ActionEntry, Feedback};

    fn catalog(n: u32) -> ActionCatalog {
        ActionCatalog::new((0..=n).map(|i| ActionEntry::new(ActionId(i), format!("a{i}"), 4)))
    }

    fn config() -> EngineConfig {
        EngineConfig {
            dim: 4,
            ..EngineConfig::default()
        }
    }

    fn obs(user: u32, tick: u64) -> ObservationEvent {
        ObservationEvent {
            user: UserId(user),
            tick,
            context: ContextTags::new(),
        }
    }

    fn warm(engine: &mut Engine) {
        let mut log = InteractionLog::new();
        for u in 0..3u32 {
            for (t, a) in (1..=5u32).enumerate() {
                let f = if (a + u) % 2 == 0 { 1.0 } else { 0.25 };
                log.append(crate::types::InteractionRecord::new(
                    t as u64,
                    UserId(u),
                    ActionId(a),
                    Feedback::explicit(f).unwrap(),
                ))
                .unwrap();
            }
        }
        engine.warm_start(&log).unwrap();
    }

    #[test]
    fn cold_start_user_gets_a_decision() {
        let mut e = Engine::new(config(), catalog(5)).unwrap();
        warm(&mut e);
        let d = e.decide(&obs(42, 0)).unwrap();
        assert!(!d.is_no_op());
        assert!(d.provenance.iter().any(|l| l.contains("cold-start")));
        assert!(d.position_of(d.chosen).is_some());
    }

    #[test]
    fn propose_is_pure() {
        let mut e = Engine::new(config(), catalog(5)).unwrap();
        warm(&mut e);
        let snapshot = e.clone();
        let a = snapshot.propose(&obs(1, 3)).unwrap();
        let b = snapshot.propose(&obs(1, 3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(e.decide(&obs(1, 3)).unwrap(), a);
    }

    #[test]
    fn empty_candidates_give_no_op() {
        let e = Engine::new(config(), catalog(0)).unwrap();
        let d = e.propose(&obs(0, 0)).unwrap();
        assert!(d.is_no_op());
        assert!(d.candidates.is_empty());
    }

    #[test]
    fn feedback_is_accepted_once() {
        let mut e = Engine::new(config(), catalog(5)).unwrap();
        warm(&mut e);
        let before = e.log().len();
        let steps = e.profile(UserId(0)).unwrap().steps;
        let d = e.decide(&obs(0, 0)).unwrap();
        let r = Response::Explicit(Feedback::explicit(1.0).unwrap());
        e.observe_feedback(d.id, &r).unwrap();
        assert_eq!(e.log().len(), before + 1);
        assert_eq!(e.profile(UserId(0)).unwrap().steps, steps + 1);
        assert!(matches!(
            e.observe_feedback(d.id, &r),
            Err(Error::DuplicateFeedback(_))
        ));
        assert!(matches!(
            e.observe_feedback(99, &r),
            Err(Error::UnknownDecision(99))
        ));
    }

    #[test]
    fn follow_up_emits_pair() {
        let mut e = Engine::new(config(), catalog(5)).unwrap();
        warm(&mut e);
        let d = e.decide(&obs(0, 0)).unwrap();
        let third = d.candidates[2].0;
        let r = Response::FollowUp {
            action: third,
            feedback: Feedback::explicit(1.0).unwrap(),
        };
        let pairs = e.observe_feedback(d.id, &r).unwrap();
        assert_eq!(
            pairs,
            vec![PreferencePair::new(UserId(0), third, d.chosen).unwrap()]
        );
        assert_eq!(e.state().pairs, pairs);
        let d2 = e.decide(&obs(0, 1)).unwrap();
        let bad = Response::FollowUp {
            action: ActionId(77),
            feedback: Feedback::explicit(1.0).unwrap(),
        };
        assert!(matches!(
            e.observe_feedback(d2.id, &bad),
            Err(Error::NotACandidate(_))
        ));
    }

    #[test]
    fn mandatory_slots_and_swaps() {
        let mut e = Engine::new(config(), catalog(5)).unwrap();
        warm(&mut e);
        assert!(matches!(
            e.swap_component(Component::Retriever(None)),
            Err(Error::MandatorySlot("retriever"))
        ));
        assert!(matches!(
            e.swap_component(Component::Reranker(None)),
            Err(Error::MandatorySlot("reranker"))
        ));
        let before = e.decide(&obs(0, 0)).unwrap();
        e.swap_component(Component::Retriever(Some(Arc::new(RuleRetriever))))
            .unwrap();
        let after = e.decide(&obs(0, 1)).unwrap();
        assert_eq!(e.state().decisions.len(), 2);
        assert_eq!(e.state().decisions[0].decision, before);
        assert!(after.provenance.iter().any(|l| l.contains("rules")));
    }

    #[test]
    fn history_is_bounded() {
        let mut c = config();
        c.history_window = 3;
        let mut e = Engine::new(c, catalog(5)).unwrap();
        for t in 0..10 {
            e.decide(&obs(0, t)).unwrap();
        }
        assert_eq!(e.state().decisions.len(), 3);
        assert_eq!(e.state().decisions[0].decision.id, 7);
    }

    #[test]
    fn two_profilers_both_weighted() {
        let mut e = Engine::new(config(), catalog(5)).unwrap();
        warm(&mut e);
        let d = e.decide(&obs(0, 0)).unwrap();
        assert!(
            d.provenance
                .iter()
                .any(|l| l.contains("cf=0.500 seq=0.500 ke=0.000")),
            "{:?}",
            d.provenance
        );
    }
}
