//! Browser demo: one simulated household served by the engine. The page asks
//! for a ranking, answers it, and toggles the exposure constraint.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use prefcore::engine::{Component, Engine, EngineConfig};
use prefcore::responsible::FairnessConstraint;
use prefcore::simulator::{ObservationEvent, Preset, Response, ScenarioConfig, World};
use prefcore::types::{ContextTags, DecisionRepresentation, Feedback, UserId};
use prefcore::{Error, Result};
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct Demo {
    engine: Engine,
    users: Vec<UserId>,
    tags: Vec<String>,
    pending: Option<DecisionRepresentation>,
    tick: u64,
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

impl Demo {
    /// Builds the world for `preset` and warm-starts the engine on its
    /// uniformly exposed history.
    pub fn build(preset: &str, seed: u64) -> Result<Self> {
        let preset: Preset = preset.parse()?;
        if preset == Preset::MnarExposure {
            return Err(Error::UnknownPreset(format!(
                "{preset} has no decision loop"
            )));
        }
        let mut scenario = ScenarioConfig::preset(preset);
        scenario.users = scenario.users.min(8);
        let mut world = World::new(&scenario, seed)?;
        let config = EngineConfig {
            seed,
            ..EngineConfig::default()
        };
        let mut engine = Engine::new(config, world.catalog.clone())?;
        for u in world.user_ids() {
            engine.register_user(u, world.metadata(u));
        }
        let warmup = world.warmup_log(seed)?;
        engine.warm_start(&warmup)?;
        Ok(Self {
            engine,
            users: world.user_ids(),
            tags: world.tags.tags().map(str::to_string).collect(),
            pending: None,
            tick: 0,
        })
    }

    /// Ranks the catalog for `user` under comma-separated `context` tags.
    pub fn try_recommend(&mut self, user: u32, context: &str) -> Result<String> {
        let obs = ObservationEvent {
            user: UserId(user),
            tick: self.tick,
            context: ContextTags::parse_separated(context, ','),
        };
        self.tick += 1;
        let d = self.engine.decide(&obs)?;
        let mut out = String::new();
        let _ = writeln!(out, "decision {} for user {user}", d.id);
        for (i, (a, s)) in d.candidates.iter().take(8).enumerate() {
            let name = self
                .engine
                .catalog()
                .get(*a)
                .map_or("?", |e| e.name.as_str());
            let _ = writeln!(out, "{:>2}. {name:<16} {s:>9.4}", i + 1);
        }
        out.push('\n');
        for line in &d.provenance {
            let _ = writeln!(out, "  {line}");
        }
        if d.is_no_op() {
            out.push_str("\nnothing to rate; try other context tags\n");
            self.pending = None;
        } else {
            self.pending = Some(d);
        }
        Ok(out)
    }

    /// Answers the pending decision: a rating of the executed action, or a
    /// request for the candidate at `follow_up_rank` (1-based) instead.
    pub fn try_respond(&mut self, rating: f64, follow_up_rank: Option<usize>) -> Result<String> {
        let d = self
            .pending
            .as_ref()
            .ok_or(Error::Empty("pending decision"))?;
        let response = match follow_up_rank {
            Some(r) => {
                let (action, _) =
                    *d.candidates
                        .get(r.wrapping_sub(1))
                        .ok_or_else(|| Error::InvalidConfig {
                            key: "follow-up rank".into(),
                            reason: format!("{r} is outside 1..={}", d.candidates.len()),
                        })?;
                Response::FollowUp {
                    action,
                    feedback: Feedback::explicit(rating)?,
                }
            }
            None => Response::Explicit(Feedback::explicit(rating)?),
        };
        let id = d.id;
        let pairs = self.engine.observe_feedback(id, &response)?;
        self.pending = None;
        let mut out = format!(
            "feedback recorded; log now holds {} records\n",
            self.engine.log().len()
        );
        for p in pairs {
            let _ = writeln!(out, "  prefers {} over {}", p.preferred, p.dispreferred);
        }
        Ok(out)
    }

    /// Enables the exposure constraint at `epsilon`, or disables it when
    /// `epsilon` is negative.
    pub fn try_set_fairness(&mut self, epsilon: f64) -> Result<String> {
        let constraint = if epsilon < 0.0 {
            None
        } else {
            let window = self.engine.config().history_window;
            Some(FairnessConstraint::from_catalog(
                self.engine.catalog(),
                epsilon,
                window,
            )?)
        };
        let on = constraint.is_some();
        self.engine
            .swap_component(Component::Fairness(constraint))?;
        Ok(self.exposure_text(on))
    }

    fn exposure_text(&self, on: bool) -> String {
        let mut out = if on {
            "fairness on\n".to_string()
        } else {
            "fairness off\n".to_string()
        };
        let shares: BTreeMap<String, f64> = self.engine.state().exposure.shares();
        for (g, s) in shares {
            let _ = writeln!(out, "  {g}: {s:.3}");
        }
        out
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(preset: &str, seed: u32) -> std::result::Result<Demo, JsError> {
        Self::build(preset, u64::from(seed)).map_err(js)
    }

    pub fn users(&self) -> Vec<u32> {
        self.users.iter().map(|u| u.0).collect()
    }

    pub fn tags(&self) -> Vec<String> {
        self.tags.clone()
    }

    pub fn recommend(&mut self, user: u32, context: &str) -> std::result::Result<String, JsError> {
        self.try_recommend(user, context).map_err(js)
    }

    /// `follow_up_rank` 0 means a plain rating.
    pub fn respond(
        &mut self,
        rating: f64,
        follow_up_rank: u32,
    ) -> std::result::Result<String, JsError> {
        let r = (follow_up_rank > 0).then_some(follow_up_rank as usize);
        self.try_respond(rating, r).map_err(js)
    }

    pub fn set_fairness(&mut self, epsilon: f64) -> std::result::Result<String, JsError> {
        self.try_set_fairness(epsilon).map_err(js)
    }
}
