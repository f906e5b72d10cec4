//! Domain types shared by every module.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActionId(pub u32);

impl ActionId {
    /// Reserved for "do nothing" when no candidate survives filtering.
    pub const NO_OP: ActionId = ActionId(0);
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeedbackChannel {
    Explicit,
    Implicit,
    /// "Can you do X first?" after the robot committed to another action.
    FollowUpReorder,
}

impl FeedbackChannel {
    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackChannel::Explicit => "explicit",
            FeedbackChannel::Implicit => "implicit",
            FeedbackChannel::FollowUpReorder => "follow-up-reorder",
        }
    }
}

impl FromStr for FeedbackChannel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "explicit" => Ok(FeedbackChannel::Explicit),
            "implicit" => Ok(FeedbackChannel::Implicit),
            "follow-up-reorder" => Ok(FeedbackChannel::FollowUpReorder),
            other => Err(format!("unknown feedback channel `{other}`")),
        }
    }
}

/// Scalar feedback on the [0, 1] scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feedback {
    value: f64,
    pub channel: FeedbackChannel,
}

impl Feedback {
    pub fn new(value: f64, channel: FeedbackChannel) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::FeedbackOutOfRange(value));
        }
        Ok(Self { value, channel })
    }

    pub fn explicit(value: f64) -> Result<Self> {
        Self::new(value, FeedbackChannel::Explicit)
    }

    pub fn value(&self) -> f64 {
        self.value
    }
}

/// Graded feedback levels produced by the simulator.
pub const FEEDBACK_LEVELS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Index of the grid level nearest to `value`.
pub fn feedback_level(value: f64) -> usize {
    ((value.clamp(0.0, 1.0) * 4.0).round() as usize).min(4)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct ContextTags(BTreeSet<String>);

impl ContextTags {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.0.contains(tag)
    }

    pub fn insert(&mut self, tag: impl Into<String>) {
        self.0.insert(tag.into());
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Semicolon-joined, sorted.
    pub fn joined(&self) -> String {
        self.0.iter().cloned().collect::<Vec<_>>().join(";")
    }

    pub fn parse_joined(s: &str) -> Self {
        Self::parse_separated(s, ';')
    }

    /// Tags separated by `sep`; blanks are dropped.
    pub fn parse_separated(s: &str, sep: char) -> Self {
        s.split(sep)
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .collect()
    }
}

impl<S: Into<String>> FromIterator<S> for ContextTags {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(Into::into).collect())
    }
}

/// The finite set of tags a deployment may emit.
#[derive(Debug, Clone, Default)]
pub struct TagRegistry(BTreeSet<String>);

impl TagRegistry {
    pub fn new<I, S>(tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(tags.into_iter().map(Into::into).collect())
    }

    pub fn validate(&self, tags: &ContextTags) -> Result<()> {
        match tags.iter().find(|t| !self.0.contains(*t)) {
            Some(t) => Err(Error::UnknownTag(t.to_string())),
            None => Ok(()),
        }
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub t: u64,
    pub user: UserId,
    pub action: ActionId,
    pub feedback: Feedback,
    pub context: ContextTags,
}

impl InteractionRecord {
    pub fn new(t: u64, user: UserId, action: ActionId, feedback: Feedback) -> Self {
        Self {
            t,
            user,
            action,
            feedback,
            context: ContextTags::new(),
        }
    }

    pub fn with_context(mut self, context: ContextTags) -> Self {
        self.context = context;
        self
    }

    pub fn value(&self) -> f64 {
        self.feedback.value()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttributeKind {
    Category,
    Environment,
    Modality,
    SocialFunction,
    Purpose,
}

impl AttributeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttributeKind::Category => "category",
            AttributeKind::Environment => "environment",
            AttributeKind::Modality => "modality",
            AttributeKind::SocialFunction => "social",
            AttributeKind::Purpose => "purpose",
        }
    }
}

impl FromStr for AttributeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "category" => AttributeKind::Category,
            "environment" => AttributeKind::Environment,
            "modality" => AttributeKind::Modality,
            "social" => AttributeKind::SocialFunction,
            "purpose" => AttributeKind::Purpose,
            other => return Err(format!("unknown attribute kind `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Attribute {
    pub kind: AttributeKind,
    pub value: String,
}

impl Attribute {
    pub fn new(kind: AttributeKind, value: impl Into<String>) -> Self {
        Self {
            kind,
            value: value.into(),
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.value)
    }
}

impl FromStr for Attribute {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| format!("attribute `{s}` is not kind:value"))?;
        Ok(Attribute::new(kind.trim().parse()?, value.trim()))
    }
}

/// Dense knowledge representation `k_a` of an action.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeVector(pub Vec<f64>);

impl KnowledgeVector {
    pub fn ones(d: usize) -> Self {
        Self(vec![1.0; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Multi-hot attribute encoding passed through a fixed random projection.
///
/// Each attribute owns a ±1 column drawn from a generator seeded by the
/// projection seed and a hash of the attribute text, so the vector of an
/// attribute set does not depend on vocabulary order.
#[derive(Debug, Clone, Copy)]
pub struct KnowledgeProjector {
    pub dim: usize,
    pub seed: u64,
}

impl KnowledgeProjector {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn column(&self, attr: &Attribute) -> Vec<f64> {
        let digest = Sha256::digest(attr.to_string().as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ u64::from_le_bytes(bytes));
        (0..self.dim)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect()
    }

    pub fn project(&self, attrs: &BTreeSet<Attribute>) -> KnowledgeVector {
        let mut k = vec![0.0; self.dim];
        if attrs.is_empty() {
            return KnowledgeVector(k);
        }
        for a in attrs {
            crate::linalg::axpy(1.0, &self.column(a), &mut k);
        }
        let scale = 1.0 / (attrs.len() as f64).sqrt();
        k.iter_mut().for_each(|v| *v *= scale);
        KnowledgeVector(k)
    }
}

/// A catalog entry. Learned embeddings live in the models; the entry carries
/// the static knowledge and the context rules.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionEntry {
    pub id: ActionId,
    pub name: String,
    pub attributes: BTreeSet<Attribute>,
    pub knowledge: KnowledgeVector,
    /// Every tag here must be present in the context.
    pub requires: ContextTags,
    /// No tag here may be present in the context.
    pub excludes: ContextTags,
    /// Group label for exposure fairness.
    pub group: String,
}

impl ActionEntry {
    pub fn new(id: ActionId, name: impl Into<String>, dim: usize) -> Self {
        Self {
            id,
            name: name.into(),
            attributes: BTreeSet::new(),
            knowledge: KnowledgeVector::ones(dim),
            requires: ContextTags::new(),
            excludes: ContextTags::new(),
            group: "default".into(),
        }
    }

    pub fn admits(&self, context: &ContextTags) -> bool {
        self.requires.iter().all(|t| context.contains(t))
            && !self.excludes.iter().any(|t| context.contains(t))
    }

    pub fn has_attribute(&self, kind: AttributeKind, value: &str) -> bool {
        self.attributes
            .iter()
            .any(|a| a.kind == kind && a.value == value)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ActionCatalog {
    entries: BTreeMap<ActionId, ActionEntry>,
}

impl ActionCatalog {
    pub fn new(entries: impl IntoIterator<Item = ActionEntry>) -> Self {
        Self {
            entries: entries.into_iter().map(|e| (e.id, e)).collect(),
        }
    }

    pub fn get(&self, id: ActionId) -> Option<&ActionEntry> {
        self.entries.get(&id)
    }

    /// Entries in ascending id order, excluding the reserved no-op.
    pub fn iter(&self) -> impl Iterator<Item = &ActionEntry> {
        self.entries.values().filter(|e| e.id != ActionId::NO_OP)
    }

    pub fn ids(&self) -> Vec<ActionId> {
        self.iter().map(|e| e.id).collect()
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group_of(&self, id: ActionId) -> Option<&str> {
        self.entries.get(&id).map(|e| e.group.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub id: UserId,
    pub p_cf: Vec<f64>,
    /// Current recurrent state: the state that scores the next action.
    pub p_seq: Vec<f64>,
    pub p_ke: Vec<f64>,
    pub seq_init: Vec<f64>,
    pub ke_init: Vec<f64>,
    pub group: Option<String>,
    pub metadata: BTreeMap<String, String>,
    /// Records consumed into `p_seq` / `p_ke` so far.
    pub steps: usize,
}

impl UserProfile {
    pub fn zeros(id: UserId, d: usize) -> Self {
        Self {
            id,
            p_cf: vec![0.0; d],
            p_seq: vec![0.0; d],
            p_ke: vec![0.0; d],
            seq_init: vec![0.0; d],
            ke_init: vec![0.0; d],
            group: None,
            metadata: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.p_cf.len()
    }
}

/// Scored candidate list retained after a decision, with the executed top-1.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRepresentation {
    pub id: u64,
    pub user: UserId,
    pub tick: u64,
    pub candidates: Vec<(ActionId, f64)>,
    pub chosen: ActionId,
    pub provenance: Vec<String>,
}

impl DecisionRepresentation {
    pub fn position_of(&self, action: ActionId) -> Option<usize> {
        self.candidates.iter().position(|(a, _)| *a == action)
    }

    pub fn is_no_op(&self) -> bool {
        self.chosen == ActionId::NO_OP
    }
}

/// Sorts by score descending, ties by ascending id. Used everywhere a list is ranked.
pub fn sort_scored(entries: &mut [(ActionId, f64)]) {
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feedback_bounds() {
        assert!(Feedback::explicit(1.0).is_ok());
        assert!(Feedback::explicit(0.0).is_ok());
        assert!(Feedback::explicit(1.01).is_err());
        assert!(Feedback::explicit(f64::NAN).is_err());
    }

    #[test]
    fn knowledge_vector_is_deterministic_and_order_free() {
        let p = KnowledgeProjector::new(8, 42);
        let a: BTreeSet<_> = [
            Attribute::new(AttributeKind::Category, "greeting"),
            Attribute::new(AttributeKind::Modality, "verbal"),
        ]
        .into_iter()
        .collect();
        let b: BTreeSet<_> = [
            Attribute::new(AttributeKind::Modality, "verbal"),
            Attribute::new(AttributeKind::Category, "greeting"),
        ]
        .into_iter()
        .collect();
        assert_eq!(p.project(&a), p.project(&b));
        assert_ne!(p.project(&a), KnowledgeProjector::new(8, 43).project(&a));
    }

    #[test]
    fn predicates() {
        let mut e = ActionEntry::new(ActionId(3), "nap-reminder", 2);
        e.requires.insert("at-home");
        e.excludes.insert("guests");
        let ctx: ContextTags = ["at-home", "after-lunch"].into_iter().collect();
        assert!(e.admits(&ctx));
        assert!(!e.admits(&ContextTags::new()));
        let busy: ContextTags = ["at-home", "guests"].into_iter().collect();
        assert!(!e.admits(&busy));
    }

    #[test]
    fn registry_rejects_unknown_tags() {
        let reg = TagRegistry::new(["at-home", "after-lunch"]);
        assert!(reg.validate(&["at-home"].into_iter().collect()).is_ok());
        assert!(matches!(
            reg.validate(&["outdoors"].into_iter().collect()),
            Err(Error::UnknownTag(_))
        ));
    }

    #[test]
    fn tie_break_by_id() {
        let mut v = vec![(ActionId(5), 1.0), (ActionId(2), 1.0), (ActionId(9), 2.0)];
        sort_scored(&mut v);
        assert_eq!(v.iter().map(|e| e.0 .0).collect::<Vec<_>>(), vec![9, 2, 5]);
    }
}
