//! Top-1 exposure parity across action groups over a sliding window.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::ranking::RankedList;
use crate::types::{ActionCatalog, ActionId};

/// Group label used for actions missing from the labeling.
pub const UNASSIGNED: &str = "unassigned";

#[derive(Debug, Clone, PartialEq)]
pub struct FairnessConstraint {
    pub groups: BTreeMap<ActionId, String>,
    /// Target top-1 share per group.
    pub targets: BTreeMap<String, f64>,
    pub epsilon: f64,
    pub window: usize,
}

impl FairnessConstraint {
    pub fn new(
        groups: BTreeMap<ActionId, String>,
        targets: BTreeMap<String, f64>,
        epsilon: f64,
        window: usize,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::config(
                "fairness.epsilon",
                format!("{epsilon} outside [0, 1]"),
            ));
        }
        if window == 0 {
            return Err(Error::config("fairness.window", "must be positive"));
        }
        for g in groups.values() {
            if !targets.contains_key(g) {
                return Err(Error::config(
                    "fairness.targets",
                    format!("no target for group `{g}`"),
                ));
            }
        }
        let total: f64 = targets.values().sum();
        if targets.values().any(|&t| !(0.0..=1.0).contains(&t)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "fairness.targets",
                "shares must lie in [0, 1] and sum to 1",
            ));
        }
        Ok(Self {
            groups,
            targets,
            epsilon,
            window,
        })
    }

    /// Equal targets over the distinct labels.
    pub fn equal(groups: BTreeMap<ActionId, String>, epsilon: f64, window: usize) -> Result<Self> {
        let labels: BTreeSet<&String> = groups.values().collect();
        if labels.is_empty() {
            return Err(Error::Empty("fairness groups"));
        }
        let share = 1.0 / labels.len() as f64;
        let targets = labels.into_iter().map(|g| (g.clone(), share)).collect();
        Self::new(groups, targets, epsilon, window)
    }

    /// Labels taken from the catalog's `group` field.
    pub fn from_catalog(catalog: &ActionCatalog, epsilon: f64, window: usize) -> Result<Self> {
        let groups = catalog.iter().map(|e| (e.id, e.group.clone())).collect();
        Self::equal(groups, epsilon, window)
    }

    pub fn group_of(&self, a: ActionId) -> &str {
        self.groups.get(&a).map_or(UNASSIGNED, String::as_str)
    }
}

/// Groups of the most recent top-1 decisions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExposureHistory {
    window: usize,
    recent: VecDeque<String>,
}

impl ExposureHistory {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            recent: VecDeque::with_capacity(window),
        }
    }

    pub fn record(&mut self, group: impl Into<String>) {
        if self.window == 0 {
            return;
        }
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(group.into());
    }

    pub fn len(&self) -> usize {
        self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recent.is_empty()
    }

    pub fn count(&self, group: &str) -> usize {
        self.recent.iter().filter(|g| *g == group).count()
    }

    /// Shares in the window.
    pub fn shares(&self) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for g in &self.recent {
            *out.entry(g.clone()).or_default() += 1.0;
        }
        let n = self.recent.len().max(1) as f64;
        out.values_mut().for_each(|v| *v /= n);
        out
    }
}

/// One promotion made by [`fair_rerank`].
#[derive(Debug, Clone, PartialEq)]
pub struct Promotion {
    pub action: ActionId,
    pub from_position: usize,
    pub group: String,
    pub displaced: ActionId,
    pub over_exposed: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FairnessAudit {
    pub promotions: Vec<Promotion>,
}

impl FairnessAudit {
    pub fn lines(&self) -> Vec<String> {
        self.promotions
            .iter()
            .map(|p| {
                format!(
                    "fairness: promoted {} ({}) from position {} over {} ({} over-exposed)",
                    p.action,
                    p.group,
                    p.from_position + 1,
                    p.displaced,
                    p.over_exposed
                )
            })
            .collect()
    }
}

/// Window shares with the prospective top-1 counted in.
fn prospective_shares(
    constraint: &FairnessConstraint,
    history: &ExposureHistory,
    top_group: &str,
) -> BTreeMap<String, f64> {
    let n = (history.len() + 1) as f64;
    constraint
        .targets
        .keys()
        .map(|g| {
            let c = history.count(g) + usize::from(g == top_group);
            (g.clone(), c as f64 / n)
        })
        .collect()
}

/// Greedy post-processing of a ranked list. While some group's window share
/// (including this decision's top-1) exceeds its target by more than
/// `epsilon`, the best entry of the most under-exposed group moves to the
/// top. The output is always a permutation of the input.
pub fn fair_rerank(
    ranked: &RankedList,
    constraint: &FairnessConstraint,
    history: &ExposureHistory,
) -> (RankedList, FairnessAudit) {
    let mut entries = ranked.entries.clone();
    let mut audit = FairnessAudit::default();
    let mut promoted: BTreeSet<String> = BTreeSet::new();
    while let Some(&(top, _)) = entries.first() {
        let top_group = constraint.group_of(top).to_string();
        let shares = prospective_shares(constraint, history, &top_group);
        let deficit = |g: &str| {
            shares.get(g).copied().unwrap_or(0.0)
                - constraint.targets.get(g).copied().unwrap_or(0.0)
        };
        let over = constraint
            .targets
            .keys()
            .filter(|g| deficit(g) > constraint.epsilon)
            .max_by(|a, b| deficit(a).total_cmp(&deficit(b)));
        let Some(over) = over.cloned() else { break };

        // most under-exposed group that has an entry below the top
        let mut best: Option<(usize, f64)> = None;
        let mut seen = BTreeSet::new();
        for (i, &(a, _)) in entries.iter().enumerate().skip(1) {
            let g = constraint.group_of(a);
            if g == top_group
                || promoted.contains(g)
                || !constraint.targets.contains_key(g)
                || !seen.insert(g)
            {
                continue;
            }
            let d = deficit(g);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let Some((pos, d)) = best else { break };
        if d >= deficit(&top_group) {
            break;
        }
        let entry = entries.remove(pos);
        let group = constraint.group_of(entry.0).to_string();
        audit.promotions.push(Promotion {
            action: entry.0,
            from_position: pos,
            group: group.clone(),
            displaced: top,
            over_exposed: over,
        });
        entries.insert(0, entry);
        promoted.insert(group);
    }
    (
        RankedList {
            user: ranked.user,
            entries,
            ideal: ranked.ideal.clone(),
        },
        audit,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::UserId;

    fn two_groups() -> FairnessConstraint {
        let groups = (1..=4u32)
            .map(|a| (ActionId(a), if a <= 2 { "a" } else { "b" }.to_string()))
            .collect();
        FairnessConstraint::equal(groups, 0.1, 10).unwrap()
    }

    fn list() -> RankedList {
        RankedList::new(
            UserId(0),
            vec![
                (ActionId(1), 0.9),
                (ActionId(2), 0.8),
                (ActionId(3), 0.5),
                (ActionId(4), 0.1),
            ],
        )
    }

    #[test]
    fn balanced_window_is_identity() {
        let c = two_groups();
        let mut h = ExposureHistory::new(10);
        for i in 0..10 {
            h.record(if i % 2 == 0 { "a" } else { "b" });
        }
        let (out, audit) = fair_rerank(&list(), &c, &h);
        assert_eq!(out, list());
        assert!(audit.promotions.is_empty());
    }

    #[test]
    fn starved_group_is_promoted() {
        let c = two_groups();
        let mut h = ExposureHistory::new(10);
        for _ in 0..10 {
            h.record("a");
        }
        let (out, audit) = fair_rerank(&list(), &c, &h);
        assert_eq!(
            out.actions(),
            vec![ActionId(3), ActionId(1), ActionId(2), ActionId(4)]
        );
        assert_eq!(audit.promotions.len(), 1);
        assert_eq!(audit.promotions[0].from_position, 2);
        assert_eq!(audit.lines().len(), 1);
    }

    #[test]
    fn no_candidate_of_other_group_means_identity() {
        let c = two_groups();
        let mut h = ExposureHistory::new(10);
        for _ in 0..10 {
            h.record("a");
        }
        let only_a = RankedList::new(UserId(0), vec![(ActionId(1), 0.9), (ActionId(2), 0.8)]);
        assert_eq!(fair_rerank(&only_a, &c, &h).0, only_a);
    }

    #[test]
    fn window_slides() {
        let mut h = ExposureHistory::new(3);
        for g in ["a", "a", "b", "b"] {
            h.record(g);
        }
        assert_eq!(h.len(), 3);
        assert_eq!(h.count("a"), 1);
        assert!((h.shares()["b"] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_constraints() {
        let groups = BTreeMap::from([(ActionId(1), "a".to_string())]);
        assert!(FairnessConstraint::equal(groups.clone(), 1.5, 10).is_err());
        assert!(FairnessConstraint::equal(groups.clone(), 0.1, 0).is_err());
        assert!(
            FairnessConstraint::new(groups, BTreeMap::from([("a".to_string(), 0.5)]), 0.1, 5)
                .is_err()
        );
    }
}
