//! Run configuration shared by every subcommand.

use std::fs;
use std::path::Path;

use prefcore::engine::EngineConfig;
use prefcore::kv::KvDoc;
use prefcore::ranking::{PairwiseKind, RankTrainConfig};
use prefcore::responsible::{RetainScope, UnlearnConfig};
use prefcore::simulator::ScenarioConfig;

use crate::failure::Failure;

pub const REPORT_FORMAT: &str = "prefcore-report/1";

/// Config file contents plus the effective seed. Engine and model seeds follow
/// the global `--seed` when it is given.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub engine: EngineConfig,
    doc: KvDoc,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, Failure> {
        let mut doc = match path {
            Some(p) => KvDoc::parse(&fs::read_to_string(p).map_err(|e| Failure::io(p, e))?)?,
            None => KvDoc::new(),
        };
        if let Some(s) = seed {
            doc.set("engine.seed", s);
        }
        let engine = EngineConfig::from_kv(&doc)?;
        Ok(Self {
            seed: engine.seed,
            engine,
            doc,
        })
    }

    /// Scenario from the config file, with `preset` replacing `scenario.preset`.
    pub fn scenario(&self, preset: Option<&str>) -> Result<ScenarioConfig, Failure> {
        let mut doc = self.doc.clone();
        if let Some(p) = preset {
            doc.set("scenario.preset", p);
        }
        if doc.get("scenario.preset").is_none() {
            return Err(Failure::Usage(
                "no scenario: pass --preset or set scenario.preset in the config".into(),
            ));
        }
        Ok(ScenarioConfig::from_kv(&doc)?)
    }

    pub fn rank_train(&self) -> Result<RankTrainConfig, Failure> {
        let d = RankTrainConfig::default();
        let kind: PairwiseKind = self
            .doc
            .get("rank.kind")
            .unwrap_or("bpr")
            .parse()
            .map_err(|e: String| Failure::Usage(format!("rank.kind: {e}")))?;
        Ok(RankTrainConfig {
            kind,
            epochs: self.doc.get_or("rank.epochs", d.epochs)?,
            step: self.doc.get_or("rank.step", d.step)?,
            decay: self.doc.get_or("rank.decay", d.decay)?,
            seed: self.seed,
        })
    }

    pub fn unlearn(&self) -> Result<UnlearnConfig, Failure> {
        let d = UnlearnConfig::default();
        let retain_scope = match self.doc.get("unlearn.scope").unwrap_or("user") {
            "user" => RetainScope::User,
            "log" => RetainScope::Log,
            other => {
                return Err(Failure::Usage(format!(
                    "unlearn.scope: expected `user` or `log`, found `{other}`"
                )))
            }
        };
        Ok(UnlearnConfig {
            iterations: self.doc.get_or("unlearn.iterations", d.iterations)?,
            step: self.doc.get_or("unlearn.step", d.step)?,
            max_retain_increase: self
                .doc
                .get_or("unlearn.max_retain_increase", d.max_retain_increase)?,
            retain_scope,
        })
    }

    /// Digest of the normalized engine config, the command's own settings
    /// and any extra sections.
    pub fn digest(&self, command: &KvDoc, extra: &[&KvDoc]) -> String {
        let mut doc = self.engine.to_kv();
        for (k, v) in self.doc.keys_with_prefix("rank.") {
            doc.set(k, v);
        }
        for (k, v) in self.doc.keys_with_prefix("unlearn.") {
            doc.set(k, v);
        }
        for e in extra {
            doc.merge(e);
        }
        doc.merge(command);
        doc.digest()
    }
}

/// Report file text: format line, digest line, then the key = value body.
pub fn report_text(digest: &str, body: &KvDoc) -> String {
    format!("{REPORT_FORMAT}\ndigest {digest}\n{}", body.render())
}
