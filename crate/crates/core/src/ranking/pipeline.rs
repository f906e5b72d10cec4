//! Two-stage candidate pipeline: rule filter + shallow retrieval, then
//! personalized reranking over a preference mixture.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::checked_dot;
use crate::profiling::ProfileModels;
use crate::types::{
    sort_scored, ActionCatalog, ActionId, ContextTags, DecisionRepresentation, UserId, UserProfile,
};

/// `r̂ = p · q`
pub fn score(p: &[f64], q: &[f64]) -> Result<f64> {
    checked_dot(p, q)
}

/// Scored actions for one user, best first, ties by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user: UserId,
    pub entries: Vec<(ActionId, f64)>,
    /// Ideal order, when known (evaluation only).
    pub ideal: Option<Vec<ActionId>>,
}

impl RankedList {
    pub fn new(user: UserId, mut entries: Vec<(ActionId, f64)>) -> Self {
        sort_scored(&mut entries);
        Self {
            user,
            entries,
            ideal: None,
        }
    }

    pub fn actions(&self) -> Vec<ActionId> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn top(&self) -> Option<ActionId> {
        self.entries.first().map(|e| e.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tab-separated `rank  action  score` rows, score to 6 decimals.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, (a, s)) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{:.6}", i + 1, a, s);
        }
        out
    }
}

/// Convex weights over the long-term, short-term and knowledge-enhanced scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureWeights {
    pub cf: f64,
    pub seq: f64,
    pub ke: f64,
}

impl Default for MixtureWeights {
    fn default() -> Self {
        Self {
            cf: 0.4,
            seq: 0.4,
            ke: 0.2,
        }
    }
}

impl MixtureWeights {
    pub fn new(cf: f64, seq: f64, ke: f64) -> Result<Self> {
        if [cf, seq, ke].iter().any(|w| !w.is_finite() || *w < 0.0) || cf + seq + ke <= 0.0 {
            return Err(Error::config(
                "mixture",
                "weights must be non-negative with a positive sum",
            ));
        }
        Ok(Self { cf, seq, ke })
    }

    /// Weights renormalized over the models that are present.
    pub fn effective(&self, models: &ProfileModels<'_>) -> [f64; 3] {
        let w = [
            if models.cf.is_some() { self.cf } else { 0.0 },
            if models.seq.is_some() { self.seq } else { 0.0 },
            if models.ke.is_some() { self.ke } else { 0.0 },
        ];
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.map(|v| v / total)
        } else {
            [0.0; 3]
        }
    }

    /// Mixture score of one action. Components whose model does not know the
    /// action contribute 0.
    pub fn score(
        &self,
        profile: &UserProfile,
        action: ActionId,
        models: &ProfileModels<'_>,
    ) -> f64 {
        let [wc, ws, wk] = self.effective(models);
        let mut s = 0.0;
        if wc > 0.0 {
            if let Some(v) = models
                .cf
                .and_then(|m| m.predict_with(&profile.p_cf, action).ok())
            {
                s += wc * v;
            }
        }
        if ws > 0.0 {
            if let Some(v) = models
                .seq
                .and_then(|m| m.score(&profile.p_seq, action).ok())
            {
                s += ws * v;
            }
        }
        if wk > 0.0 {
            if let Some(v) = models.ke.and_then(|m| m.score(&profile.p_ke, action).ok()) {
                s += wk * v;
            }
        }
        s
    }
}

/// First stage: drop actions whose context rules conflict, score the rest by
/// the long-term embeddings and keep the best `k` (ties by ascending id).
pub fn retrieve(
    context: &ContextTags,
    profile: &UserProfile,
    catalog: &ActionCatalog,
    models: &ProfileModels<'_>,
    k: usize,
) -> Result<Vec<ActionId>> {
    if k == 0 {
        return Err(Error::config("k", "must be at least 1"));
    }
    let mut scored: Vec<(ActionId, f64)> = catalog
        .iter()
        .filter(|e| e.admits(context))
        .map(|e| {
            let s = models
                .cf
                .and_then(|m| m.predict_with(&profile.p_cf, e.id).ok())
                .unwrap_or(0.0);
            (e.id, s)
        })
        .collect();
    sort_scored(&mut scored);
    scored.truncate(k);
    Ok(scored.into_iter().map(|e| e.0).collect())
}

/// Second stage: order `candidates` by the preference mixture.
pub fn rerank(
    candidates: &[ActionId],
    profile: &UserProfile,
    _context: &ContextTags,
    models: &ProfileModels<'_>,
    weights: &MixtureWeights,
) -> Result<RankedList> {
    if candidates.is_empty() {
        return Err(Error::Empty("rerank candidates"));
    }
    let entries = candidates
        .iter()
        .map(|&a| (a, weights.score(profile, a, models)))
        .collect();
    Ok(RankedList::new(profile.id, entries))
}

/// Candidate generation slot.
pub trait Retriever: Send + Sync {
    fn name(&self) -> &str;

    fn retrieve(
        &self,
        context: &ContextTags,
        profile: &UserProfile,
        catalog: &ActionCatalog,
        models: &ProfileModels<'_>,
        k: usize,
    ) -> Result<Vec<ActionId>>;
}

/// Exhaustive top-k over the filtered catalog.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactRetriever;

impl Retriever for ExactRetriever {
    fn name(&self) -> &str {
        "exact"
    }

    fn retrieve(
        &self,
        context: &ContextTags,
        profile: &UserProfile,
        catalog: &ActionCatalog,
        models: &ProfileModels<'_>,
        k: usize,
    ) -> Result<Vec<ActionId>> {
        retrieve(context, profile, catalog, models, k)
    }
}

/// Rule filter only: every admitted action in id order, no scoring.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleRetriever;

impl Retriever for RuleRetriever {
    fn name(&self) -> &str {
        "rules"
    }

    fn retrieve(
        &self,
        context: &ContextTags,
        _profile: &UserProfile,
        catalog: &ActionCatalog,
        _models: &ProfileModels<'_>,
        k: usize,
    ) -> Result<Vec<ActionId>> {
        if k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        Ok(catalog
            .iter()
            .filter(|e| e.admits(context))
            .map(|e| e.id)
            .take(k)
            .collect())
    }
}

/// Reranking slot.
pub trait Reranker: Send + Sync {
    fn name(&self) -> &str;

    fn rerank(
        &self,
        candidates: &[ActionId],
        profile: &UserProfile,
        context: &ContextTags,
        models: &ProfileModels<'_>,
    ) -> Result<RankedList>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MixtureReranker {
    pub weights: MixtureWeights,
}

impl Reranker for MixtureReranker {
    fn name(&self) -> &str {
        "mixture"
    }

    fn rerank(
        &self,
        candidates: &[ActionId],
        profile: &UserProfile,
        context: &ContextTags,
        models: &ProfileModels<'_>,
    ) -> Result<RankedList> {
        rerank(candidates, profile, context, models, &self.weights)
    }
}

/// `(u, preferred) ≻ (u, dispreferred)`
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PreferencePair {
    pub user: UserId,
    pub preferred: ActionId,
    pub dispreferred: ActionId,
}

impl PreferencePair {
    pub fn new(user: UserId, preferred: ActionId, dispreferred: ActionId) -> Result<Self> {
        if preferred == dispreferred {
            return Err(Error::DegeneratePair(preferred));
        }
        Ok(Self {
            user,
            preferred,
            dispreferred,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FollowupPairs {
    /// Only `b ≻ top-1`.
    #[default]
    TopOnly,
    /// `b ≻` every action ranked above `b`.
    AboveAll,
}

/// Preference pairs implied by a follow-up request for candidate `b`.
pub fn pairs_from_followup(
    decision: &DecisionRepresentation,
    b: ActionId,
    mode: FollowupPairs,
) -> Result<Vec<PreferencePair>> {
    let pos = decision.position_of(b).ok_or(Error::NotACandidate(b))?;
    if b == decision.chosen {
        return Ok(Vec::new());
    }
    match mode {
        FollowupPairs::TopOnly => Ok(vec![PreferencePair::new(
            decision.user,
            b,
            decision.chosen,
        )?]),
        FollowupPairs::AboveAll => decision.candidates[..pos]
            .iter()
            .map(|&(a, _)| PreferencePair::new(decision.user, b, a))
            .collect(),
    }
}
