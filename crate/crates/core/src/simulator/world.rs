//! Ground truth of a scenario: catalog, hidden action vectors, users and
//! the per-preset response rules. Agents never see this type.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::linalg::{axpy, dot, norm};
use crate::log::InteractionLog;
use crate::profiling::PERSONA_KEY;
use crate::types::{
    ActionCatalog, ActionEntry, ActionId, Attribute, AttributeKind, ContextTags, Feedback,
    FeedbackChannel, InteractionRecord, KnowledgeProjector, TagRegistry, UserId,
};

use super::scenario::{Preset, ScenarioConfig};
use super::user::{gen_feedback, quantize, SyntheticUser};
use crate::responsible::CALIBRATION_TAG;

pub const WARMUP_TAG: &str = "warmup";

const CATEGORIES: [&str; 5] = [
    "greeting",
    "entertainment",
    "education",
    "assistance",
    "reminder",
];
const MODALITIES: [&str; 4] = ["speech", "gesture", "screen", "music"];
const ENVIRONMENTS: [&str; 3] = ["home", "kitchen", "outdoor"];
const SOCIAL: [&str; 2] = ["companionship", "task"];
const PURPOSES: [&str; 3] = ["wellbeing", "information", "routine"];

pub const LOCATION_TAGS: [&str; 2] = ["at-home", "away"];
pub const TIME_TAGS: [&str; 3] = ["morning", "after-lunch", "evening"];

/// Independent random streams of one run.
pub(crate) mod stream {
    pub const WORLD: u64 = 0;
    pub const FEEDBACK: u64 = 1;
    pub const CONTEXT: u64 = 2;
    pub const WARMUP: u64 = 3;
    pub const EXPOSURE: u64 = 4;
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// What the user does after the robot executes its top-1 action.
#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    /// Feedback on the executed action.
    Explicit(Feedback),
    /// The executed action is rejected and the user asks for `action` instead.
    FollowUp {
        action: ActionId,
        feedback: Feedback,
    },
}

impl Response {
    /// Feedback credited to the executed action.
    pub fn realized(&self) -> f64 {
        match self {
            Response::Explicit(f) => f.value(),
            Response::FollowUp { .. } => 0.0,
        }
    }
}

/// Log records implied by a response at the user's next timestamp `t`.
pub fn response_records(
    t: u64,
    user: UserId,
    chosen: ActionId,
    response: &Response,
    context: &ContextTags,
) -> Vec<InteractionRecord> {
    match response {
        Response::Explicit(f) => {
            vec![InteractionRecord::new(t, user, chosen, *f).with_context(context.clone())]
        }
        Response::FollowUp { action, feedback } => {
            let reject = Feedback::new(0.0, FeedbackChannel::Implicit).expect("0 is in range");
            let follow = Feedback::new(feedback.value(), FeedbackChannel::FollowUpReorder)
                .expect("valid feedback");
            vec![
                InteractionRecord::new(t, user, chosen, reject).with_context(context.clone()),
                InteractionRecord::new(t + 1, user, *action, follow).with_context(context.clone()),
            ]
        }
    }
}

fn unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// A unit vector within angle `max_angle` of the unit vector `c`.
fn near<R: Rng + ?Sized>(c: &[f64], max_angle: f64, rng: &mut R) -> Vec<f64> {
    if c.len() == 1 {
        return c.to_vec();
    }
    let mut v = unit(c.len(), rng);
    let along = dot(&v, c);
    axpy(-along, c, &mut v);
    let n = norm(&v);
    if n < 1e-9 {
        return c.to_vec();
    }
    v.iter_mut().for_each(|x| *x /= n);
    let theta = rng.random_range(0.0..=max_angle);
    c.iter()
        .zip(&v)
        .map(|(a, b)| theta.cos() * a + theta.sin() * b)
        .collect()
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: ScenarioConfig,
    pub catalog: ActionCatalog,
    pub tags: TagRegistry,
    q_true: BTreeMap<ActionId, Vec<f64>>,
    users: Vec<SyntheticUser>,
    metadata: BTreeMap<UserId, BTreeMap<String, String>>,
    routines: BTreeMap<UserId, Vec<ActionId>>,
    favorites: BTreeMap<(UserId, usize), ActionId>,
    /// Ticks each user has lived through (routine position).
    steps: BTreeMap<UserId, usize>,
    /// Next log timestamp per user.
    clock: BTreeMap<UserId, u64>,
}

impl World {
    pub fn new(config: &ScenarioConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, stream::WORLD);
        let cfg = config.clone();
        let projector = KnowledgeProjector::new(cfg.dim, cfg.knowledge_seed);

        let mut entries = vec![ActionEntry::new(ActionId::NO_OP, "no-op", cfg.dim)];
        let mut tags: BTreeSet<String> = [WARMUP_TAG, CALIBRATION_TAG]
            .iter()
            .map(|s| s.to_string())
            .collect();
        match cfg.preset {
            Preset::Disambiguation => {
                for g in 0..cfg.goals {
                    let tag = format!("goal:{g}");
                    tags.insert(tag.clone());
                    for l in 0..cfg.locations {
                        let id = ActionId((g * cfg.locations + l + 1) as u32);
                        let mut e = ActionEntry::new(id, format!("fetch-{g}-from-{l}"), cfg.dim);
                        e.attributes
                            .insert(Attribute::new(AttributeKind::Purpose, format!("fetch-{g}")));
                        e.attributes.insert(Attribute::new(
                            AttributeKind::Environment,
                            format!("location-{l}"),
                        ));
                        e.attributes
                            .insert(Attribute::new(AttributeKind::Category, "assistance"));
                        e.requires.insert(tag.clone());
                        e.group = format!("g{}", l % cfg.groups);
                        e.knowledge = projector.project(&e.attributes);
                        entries.push(e);
                    }
                }
            }
            _ => {
                if cfg.preset == Preset::ContextualActions {
                    tags.extend(
                        LOCATION_TAGS
                            .iter()
                            .chain(&TIME_TAGS)
                            .map(|s| s.to_string()),
                    );
                }
                for i in 1..=cfg.actions {
                    let id = ActionId(i as u32);
                    let mut e = ActionEntry::new(id, format!("action-{i}"), cfg.dim);
                    let pick = |rng: &mut ChaCha8Rng, vocab: &[&str]| {
                        vocab.choose(rng).expect("non-empty").to_string()
                    };
                    let env = pick(&mut rng, &ENVIRONMENTS);
                    let category = pick(&mut rng, &CATEGORIES);
                    let modality = pick(&mut rng, &MODALITIES);
                    e.attributes
                        .insert(Attribute::new(AttributeKind::Category, category.clone()));
                    e.attributes
                        .insert(Attribute::new(AttributeKind::Modality, modality.clone()));
                    e.attributes
                        .insert(Attribute::new(AttributeKind::Environment, env.clone()));
                    e.attributes.insert(Attribute::new(
                        AttributeKind::SocialFunction,
                        pick(&mut rng, &SOCIAL),
                    ));
                    e.attributes.insert(Attribute::new(
                        AttributeKind::Purpose,
                        pick(&mut rng, &PURPOSES),
                    ));
                    if cfg.preset == Preset::ContextualActions {
                        e.requires
                            .insert(if env == "outdoor" { "away" } else { "at-home" });
                        if modality == "music" {
                            e.excludes.insert("evening");
                        }
                        if category == "entertainment" {
                            e.excludes.insert("morning");
                        }
                    }
                    e.group = format!("g{}", (i - 1) % cfg.groups);
                    e.knowledge = projector.project(&e.attributes);
                    entries.push(e);
                }
            }
        }
        let catalog = ActionCatalog::new(entries);

        let q_true = catalog
            .ids()
            .into_iter()
            .map(|a| (a, unit(cfg.latent_dim, &mut rng)))
            .collect();

        let centroids: Vec<Vec<f64>> = (0..cfg.personas)
            .map(|_| unit(cfg.latent_dim, &mut rng))
            .collect();
        let max_angle = 0.8f64.acos() / 2.0;
        let vocabulary: BTreeSet<Attribute> = catalog
            .iter()
            .flat_map(|e| e.attributes.iter().cloned())
            .collect();
        let mut users = Vec::with_capacity(cfg.users);
        let mut metadata = BTreeMap::new();
        for i in 0..cfg.users {
            let id = UserId(i as u32);
            let g = i % cfg.personas;
            let persona = format!("p{g}");
            let p0 = near(&centroids[g], max_angle, &mut rng);
            let mut u = SyntheticUser::new(
                id,
                persona.clone(),
                p0,
                cfg.rho,
                cfg.drift_noise,
                cfg.feedback_noise,
            )?;
            if cfg.affinity_scale > 0.0 {
                for a in &vocabulary {
                    u.affinities.insert(
                        a.clone(),
                        rng.random_range(-cfg.affinity_scale..=cfg.affinity_scale),
                    );
                }
            }
            users.push(u);
            metadata.insert(id, BTreeMap::from([(PERSONA_KEY.to_string(), persona)]));
        }

        let mut routines = BTreeMap::new();
        let mut favorites = BTreeMap::new();
        match cfg.preset {
            Preset::RoutineProactive => {
                for u in &users {
                    let mut ids = catalog.ids();
                    ids.shuffle(&mut rng);
                    ids.truncate(cfg.routine_length);
                    routines.insert(u.id, ids);
                }
            }
            Preset::Disambiguation => {
                for u in &users {
                    for g in 0..cfg.goals {
                        let l = rng.random_range(0..cfg.locations);
                        favorites.insert((u.id, g), ActionId((g * cfg.locations + l + 1) as u32));
                    }
                }
            }
            _ => {}
        }

        Ok(Self {
            config: cfg,
            catalog,
            tags: TagRegistry::new(tags),
            q_true,
            steps: users.iter().map(|u| (u.id, 0)).collect(),
            clock: users.iter().map(|u| (u.id, 1)).collect(),
            users,
            metadata,
            routines,
            favorites,
        })
    }

    pub fn user_ids(&self) -> Vec<UserId> {
        self.users.iter().map(|u| u.id).collect()
    }

    /// Declared metadata (persona label) that agents may read.
    pub fn metadata(&self, user: UserId) -> BTreeMap<String, String> {
        self.metadata.get(&user).cloned().unwrap_or_default()
    }

    pub fn users(&self) -> &[SyntheticUser] {
        &self.users
    }

    pub fn q_true(&self, action: ActionId) -> Option<&[f64]> {
        self.q_true.get(&action).map(Vec::as_slice)
    }

    pub fn routine(&self, user: UserId) -> Option<&[ActionId]> {
        self.routines.get(&user).map(Vec::as_slice)
    }

    pub fn favorite(&self, user: UserId, goal: usize) -> Option<ActionId> {
        self.favorites.get(&(user, goal)).copied()
    }

    fn user_index(&self, user: UserId) -> usize {
        self.users
            .iter()
            .position(|u| u.id == user)
            .expect("user of this world")
    }

    /// Context for one observation.
    pub fn draw_context<R: Rng + ?Sized>(&self, rng: &mut R) -> ContextTags {
        let mut c = ContextTags::new();
        match self.config.preset {
            Preset::ContextualActions => {
                c.insert(if rng.random_bool(0.7) {
                    LOCATION_TAGS[0]
                } else {
                    LOCATION_TAGS[1]
                });
                c.insert(*TIME_TAGS.choose(rng).expect("non-empty"));
            }
            Preset::Disambiguation => {
                c.insert(format!("goal:{}", rng.random_range(0..self.config.goals)));
            }
            _ => {}
        }
        c
    }

    fn goal_of(context: &ContextTags) -> Option<usize> {
        context
            .iter()
            .find_map(|t| t.strip_prefix("goal:")?.parse().ok())
    }

    /// The action the user wants right now, when the scenario defines one:
    /// the routine's next step, the favorite target, or the best admitted
    /// action under the current preference.
    pub fn target(&self, user: UserId, context: &ContextTags) -> Option<ActionId> {
        match self.config.preset {
            Preset::RoutineProactive => {
                let r = self.routines.get(&user)?;
                Some(r[self.steps[&user] % r.len()])
            }
            Preset::Disambiguation => self.favorite(user, Self::goal_of(context)?),
            _ => {
                let u = &self.users[self.user_index(user)];
                let mut best: Option<(ActionId, f64)> = None;
                for e in self.catalog.iter().filter(|e| e.admits(context)) {
                    let v = u.expected_feedback(e, &self.q_true[&e.id]);
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((e.id, v));
                    }
                }
                best.map(|b| b.0)
            }
        }
    }

    /// The user's reaction to `chosen`, given the ranked `candidates`.
    /// Advances the user's clock by one tick.
    pub fn respond<R: Rng + ?Sized>(
        &mut self,
        user: UserId,
        chosen: ActionId,
        candidates: &[ActionId],
        context: &ContextTags,
        rng: &mut R,
    ) -> Response {
        let target = self.target(user, context);
        let idx = self.user_index(user);
        let response = match self.config.preset {
            Preset::RoutineProactive | Preset::Disambiguation => {
                let target = target.expect("routine and goal scenarios define a target");
                let full = Feedback::explicit(1.0).expect("in range");
                if chosen == target {
                    Response::Explicit(full)
                } else if candidates.contains(&target) {
                    Response::FollowUp {
                        action: target,
                        feedback: full,
                    }
                } else {
                    Response::Explicit(Feedback::explicit(0.0).expect("in range"))
                }
            }
            _ => {
                let entry = self
                    .catalog
                    .get(chosen)
                    .expect("chosen action is in the catalog");
                let q = &self.q_true[&chosen];
                Response::Explicit(gen_feedback(&mut self.users[idx], entry, q, rng))
            }
        };
        *self.steps.get_mut(&user).expect("known user") += 1;
        response
    }

    /// Reserves the next `n` timestamps of `user`, returning the first.
    pub fn next_timestamps(&mut self, user: UserId, n: u64) -> u64 {
        let c = self.clock.get_mut(&user).expect("known user");
        let t = *c;
        *c += n;
        t
    }

    /// Uniformly exposed history before the episode: `warmup` random admitted
    /// actions per user, tagged [`WARMUP_TAG`].
    pub fn warmup_log(&mut self, seed: u64) -> Result<InteractionLog> {
        let mut rng = rng_for(seed, stream::WARMUP);
        let mut log = InteractionLog::new();
        for _ in 0..self.config.warmup {
            for user in self.user_ids() {
                let mut context = self.draw_context(&mut rng);
                let admitted: Vec<ActionId> = self
                    .catalog
                    .iter()
                    .filter(|e| e.admits(&context))
                    .map(|e| e.id)
                    .collect();
                let Some(&chosen) = admitted.choose(&mut rng) else {
                    continue;
                };
                let response = self.respond(user, chosen, &admitted, &context, &mut rng);
                context.insert(WARMUP_TAG);
                let n = if matches!(response, Response::FollowUp { .. }) {
                    2
                } else {
                    1
                };
                let t = self.next_timestamps(user, n);
                for r in response_records(t, user, chosen, &response, &context) {
                    log.append(r)?;
                }
            }
        }
        Ok(log)
    }

    /// Fixed feedback of every (user, action) cell, drawn once from the
    /// user's long-term preference.
    pub fn full_feedback(&self, seed: u64) -> BTreeMap<(UserId, ActionId), f64> {
        let mut rng = rng_for(seed, stream::FEEDBACK);
        let mut out = BTreeMap::new();
        for u in &self.users {
            let fixed = SyntheticUser {
                p: u.p0.clone(),
                drift_noise: 0.0,
                ..u.clone()
            };
            for e in self.catalog.iter() {
                let mut v = fixed.clone();
                out.insert(
                    (u.id, e.id),
                    gen_feedback(&mut v, e, &self.q_true[&e.id], &mut rng).value(),
                );
            }
        }
        out
    }

    /// One logging draw over a fixed feedback matrix: a uniform calibration
    /// slice (`calibration_per_user` distinct actions per user, tagged
    /// [`CALIBRATION_TAG`]) followed by biased exposure where a cell is shown
    /// with probability `exposure[level]`.
    pub fn mnar_log(
        &self,
        full: &BTreeMap<(UserId, ActionId), f64>,
        exposure_seed: u64,
    ) -> Result<InteractionLog> {
        let mut rng = rng_for(exposure_seed, stream::EXPOSURE);
        let ids = self.catalog.ids();
        let calib_tags = ContextTags::from_iter([CALIBRATION_TAG.to_string()]);
        let mut log = InteractionLog::new();
        for u in &self.users {
            let mut t = 1;
            let k = self.config.calibration_per_user.min(ids.len());
            for i in rand::seq::index::sample(&mut rng, ids.len(), k) {
                let a = ids[i];
                let f = Feedback::explicit(full[&(u.id, a)])?;
                log.append(InteractionRecord::new(t, u.id, a, f).with_context(calib_tags.clone()))?;
                t += 1;
            }
            for &a in &ids {
                let v = full[&(u.id, a)];
                let p = self.config.exposure[crate::types::feedback_level(v)];
                if rng.random_bool(p) {
                    log.append(InteractionRecord::new(
                        t,
                        u.id,
                        a,
                        Feedback::explicit(quantize(v))?,
                    ))?;
                    t += 1;
                }
            }
        }
        Ok(log)
    }
}
