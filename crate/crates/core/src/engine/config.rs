//! Engine configuration and its key=value file.

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::profiling::{CfConfig, InitialState, RecurrentConfig};
use crate::ranking::{FollowupPairs, MixtureWeights};
use crate::snapshot::{
    bind_name, init_name, optimizer_name, parse_bind, parse_init, parse_optimizer,
};

/// Which preference models are trained and mixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfilerSet {
    pub cf: bool,
    pub seq: bool,
    pub ke: bool,
}

impl Default for ProfilerSet {
    fn default() -> Self {
        Self {
            cf: true,
            seq: true,
            ke: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub seed: u64,
    pub dim: usize,
    pub retrieve_k: usize,
    /// `exact` or `rules`.
    pub retriever: String,
    pub profilers: ProfilerSet,
    pub weights: MixtureWeights,
    pub cf: CfConfig,
    pub seq: RecurrentConfig,
    pub seq_init: InitialState,
    /// Retrain all models after this many feedbacks; 0 disables.
    pub retrain_every: usize,
    /// Recurrent models continue from their current parameters on retrain.
    pub incremental: bool,
    /// Decisions kept in memory (and the fairness window when enabled).
    pub history_window: usize,
    /// Log a zero-valued implicit record for a top-1 the user turned down.
    pub implicit_rejection: bool,
    pub followup_pairs: FollowupPairs,
    pub local_steps: usize,
    pub local_step_size: f64,
    pub fairness: Option<FairnessSettings>,
    /// Reweight long-term training by estimated inverse propensities.
    pub propensity: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FairnessSettings {
    pub epsilon: f64,
    pub window: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 8,
            retrieve_k: 20,
            retriever: "exact".into(),
            profilers: ProfilerSet::default(),
            weights: MixtureWeights::default(),
            cf: CfConfig::default(),
            seq: RecurrentConfig::default(),
            seq_init: InitialState::Shared,
            retrain_every: 0,
            incremental: false,
            history_window: 100,
            implicit_rejection: true,
            followup_pairs: FollowupPairs::TopOnly,
            local_steps: 1,
            local_step_size: 0.05,
            fairness: None,
            propensity: false,
        }
    }
}

fn parse_bool(doc: &KvDoc, key: &str, default: bool) -> Result<bool> {
    match doc.get(key) {
        None => Ok(default),
        Some("true" | "yes" | "on" | "1") => Ok(true),
        Some("false" | "no" | "off" | "0") => Ok(false),
        Some(v) => Err(Error::config(
            key,
            format!("expected a boolean, found `{v}`"),
        )),
    }
}

impl EngineConfig {
    /// Model seeds and dimensions follow the engine-level `seed` and `dim`.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let d = Self::default();
        let seed = doc.get_or("engine.seed", d.seed)?;
        let dim = doc.get_or("engine.dim", d.dim)?;
        let retriever = doc
            .get("engine.retriever")
            .unwrap_or(&d.retriever)
            .to_string();
        if !["exact", "rules"].contains(&retriever.as_str()) {
            return Err(Error::config(
                "engine.retriever",
                format!("unknown retriever `{retriever}`"),
            ));
        }
        if let Some(r) = doc.get("engine.reranker") {
            if r != "mixture" {
                return Err(Error::config(
                    "engine.reranker",
                    format!("unknown reranker `{r}`"),
                ));
            }
        }
        let optimizer = parse_optimizer("cf.optimizer", doc.get("cf.optimizer").unwrap_or("sgd"))?;
        let bind = parse_bind("seq.bind", doc.get("seq.bind").unwrap_or("hadamard"))?;
        let seq_init = parse_init("seq.init", doc.get("seq.init").unwrap_or("shared"))?;
        let followup_pairs = match doc.get("engine.followup_pairs").unwrap_or("top-only") {
            "top-only" => FollowupPairs::TopOnly,
            "above-all" => FollowupPairs::AboveAll,
            other => {
                return Err(Error::config(
                    "engine.followup_pairs",
                    format!("unknown mode `{other}`"),
                ))
            }
        };
        let weights = MixtureWeights::new(
            doc.get_or("mixture.cf", d.weights.cf)?,
            doc.get_or("mixture.seq", d.weights.seq)?,
            doc.get_or("mixture.ke", d.weights.ke)?,
        )?;
        let cf = CfConfig {
            dim,
            seed,
            epochs: doc.get_or("cf.epochs", d.cf.epochs)?,
            step: doc.get_or("cf.step", d.cf.step)?,
            decay: doc.get_or("cf.decay", d.cf.decay)?,
            l2: doc.get_or("cf.l2", d.cf.l2)?,
            init_scale: doc.get_or("cf.init_scale", d.cf.init_scale)?,
            optimizer,
        };
        let seq = RecurrentConfig {
            dim,
            seed,
            epochs: doc.get_or("seq.epochs", d.seq.epochs)?,
            step: doc.get_or("seq.step", d.seq.step)?,
            decay: doc.get_or("seq.decay", d.seq.decay)?,
            l2: doc.get_or("seq.l2", d.seq.l2)?,
            init_scale: doc.get_or("seq.init_scale", d.seq.init_scale)?,
            truncation: doc.get_or("seq.truncation", d.seq.truncation)?,
            clip: doc.get_or("seq.clip", d.seq.clip)?,
            bind,
        };
        let fairness = if parse_bool(doc, "fairness.enabled", false)? {
            let epsilon: f64 = doc.get_or("fairness.epsilon", 0.1)?;
            let window = doc.get_or("fairness.window", d.history_window)?;
            Some(FairnessSettings { epsilon, window })
        } else {
            None
        };
        let cfg = Self {
            seed,
            dim,
            retrieve_k: doc.get_or("engine.retrieve_k", d.retrieve_k)?,
            retriever,
            profilers: ProfilerSet {
                cf: parse_bool(doc, "profilers.cf", d.profilers.cf)?,
                seq: parse_bool(doc, "profilers.seq", d.profilers.seq)?,
                ke: parse_bool(doc, "profilers.ke", d.profilers.ke)?,
            },
            weights,
            cf,
            seq,
            seq_init,
            retrain_every: doc.get_or("engine.retrain_every", d.retrain_every)?,
            incremental: parse_bool(doc, "engine.incremental", d.incremental)?,
            history_window: doc.get_or("engine.history_window", d.history_window)?,
            implicit_rejection: parse_bool(doc, "engine.implicit_rejection", d.implicit_rejection)?,
            followup_pairs,
            local_steps: doc.get_or("engine.local_steps", d.local_steps)?,
            local_step_size: doc.get_or("engine.local_step_size", d.local_step_size)?,
            fairness,
            propensity: parse_bool(doc, "propensity.enabled", d.propensity)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("engine.dim", "must be positive"));
        }
        if self.retrieve_k == 0 {
            return Err(Error::config("engine.retrieve_k", "must be positive"));
        }
        if self.history_window == 0 {
            return Err(Error::config("engine.history_window", "must be positive"));
        }
        if let Some(f) = self.fairness {
            if !(0.0..=1.0).contains(&f.epsilon) {
                return Err(Error::config("fairness.epsilon", "must lie in [0, 1]"));
            }
            if f.window == 0 {
                return Err(Error::config("fairness.window", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.set("engine.seed", self.seed);
        d.set("engine.dim", self.dim);
        d.set("engine.retrieve_k", self.retrieve_k);
        d.set("engine.retriever", &self.retriever);
        d.set("engine.reranker", "mixture");
        d.set("engine.retrain_every", self.retrain_every);
        d.set("engine.incremental", self.incremental);
        d.set("engine.history_window", self.history_window);
        d.set("engine.implicit_rejection", self.implicit_rejection);
        d.set(
            "engine.followup_pairs",
            match self.followup_pairs {
                FollowupPairs::TopOnly => "top-only",
                FollowupPairs::AboveAll => "above-all",
            },
        );
        d.set("engine.local_steps", self.local_steps);
        d.set("engine.local_step_size", self.local_step_size);
        d.set("profilers.cf", self.profilers.cf);
        d.set("profilers.seq", self.profilers.seq);
        d.set("profilers.ke", self.profilers.ke);
        d.set("mixture.cf", self.weights.cf);
        d.set("mixture.seq", self.weights.seq);
        d.set("mixture.ke", self.weights.ke);
        d.set("cf.epochs", self.cf.epochs);
        d.set("cf.step", self.cf.step);
        d.set("cf.decay", self.cf.decay);
        d.set("cf.l2", self.cf.l2);
        d.set("cf.init_scale", self.cf.init_scale);
        d.set("cf.optimizer", optimizer_name(self.cf.optimizer));
        d.set("seq.epochs", self.seq.epochs);
        d.set("seq.step", self.seq.step);
        d.set("seq.decay", self.seq.decay);
        d.set("seq.l2", self.seq.l2);
        d.set("seq.init_scale", self.seq.init_scale);
        d.set("seq.truncation", self.seq.truncation);
        d.set("seq.clip", self.seq.clip);
        d.set("seq.bind", bind_name(self.seq.bind));
        d.set("seq.init", init_name(self.seq_init));
        d.set("fairness.enabled", self.fairness.is_some());
        if let Some(f) = self.fairness {
            d.set("fairness.epsilon", f.epsilon);
            d.set("fairness.window", f.window);
        }
        d.set("propensity.enabled", self.propensity);
        d
    }

    pub fn digest(&self) -> String {
        self.to_kv().digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = EngineConfig {
            fairness: Some(FairnessSettings {
                epsilon: 0.2,
                window: 50,
            }),
            incremental: true,
            seq_init: InitialState::FromCf,
            ..EngineConfig::default()
        };
        c.profilers.ke = true;
        let back = EngineConfig::from_kv(&KvDoc::parse(&c.to_kv().render()).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn rejects_unknown_values() {
        for text in [
            "[engine]\nretriever = magic\n",
            "[cf]\noptimizer = adam\n",
            "[profilers]\ncf = maybe\n",
            "[engine]\nretrieve_k = 0\n",
            "[mixture]\ncf = -1\n",
        ] {
            assert!(
                EngineConfig::from_kv(&KvDoc::parse(text).unwrap()).is_err(),
                "{text}"
            );
        }
    }
}
