//! Exposure propensities and inverse-propensity weighted training.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::log::InteractionLog;
use crate::profiling::{cf_train, CfConfig, CfModel};
use crate::types::{feedback_level, ActionId, UserId, FEEDBACK_LEVELS};

/// Context tag marking records from the uniformly exposed slice.
pub const CALIBRATION_TAG: &str = "calibration";

pub const DEFAULT_PROPENSITY_FLOOR: f64 = 0.05;

const LEVELS: usize = FEEDBACK_LEVELS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropensityMethod {
    NaiveBayes,
    /// No calibration slice was found: share of users shown each action.
    ActionFrequency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityTable {
    values: BTreeMap<(UserId, ActionId), f64>,
    raw: BTreeMap<(UserId, ActionId), f64>,
    pub floor: f64,
    pub method: PropensityMethod,
    /// Set when the estimate had to fall back.
    pub warning: Option<String>,
    /// `P(shown | level)` per feedback level, naive-Bayes only.
    pub per_level: Option<[f64; LEVELS]>,
}

impl PropensityTable {
    /// Builds a table from raw estimates, clipping each into `[floor, 1]`.
    pub fn from_raw(raw: BTreeMap<(UserId, ActionId), f64>, floor: f64) -> Self {
        let values = raw
            .iter()
            .map(|(&k, &v)| (k, v.clamp(floor, 1.0)))
            .collect();
        Self {
            values,
            raw,
            floor,
            method: PropensityMethod::NaiveBayes,
            warning: None,
            per_level: None,
        }
    }

    /// Every observed cell of `log` with the same propensity.
    pub fn constant(log: &InteractionLog, b: f64) -> Self {
        let raw = log
            .records()
            .iter()
            .map(|r| ((r.user, r.action), b))
            .collect();
        Self::from_raw(raw, DEFAULT_PROPENSITY_FLOOR.min(b))
    }

    pub fn get(&self, user: UserId, action: ActionId) -> Option<f64> {
        self.values.get(&(user, action)).copied()
    }

    /// Estimate before clipping.
    pub fn raw(&self, user: UserId, action: ActionId) -> Option<f64> {
        self.raw.get(&(user, action)).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((UserId, ActionId), f64)> + '_ {
        self.values.iter().map(|(&k, &v)| (k, v))
    }

    /// `1 / b` for every record of `log`, aligned with `log.records()`.
    pub fn weights_for(&self, log: &InteractionLog) -> Result<Vec<f64>> {
        log.records()
            .iter()
            .map(|r| {
                self.get(r.user, r.action)
                    .map(|b| 1.0 / b)
                    .ok_or(Error::MissingPropensity {
                        user: r.user,
                        action: r.action,
                    })
            })
            .collect()
    }
}

/// Naive-Bayes propensities with the default floor.
pub fn estimate_propensities(log: &InteractionLog) -> Result<PropensityTable> {
    estimate_propensities_with(log, DEFAULT_PROPENSITY_FLOOR)
}

/// `b(level) = P(level | shown) · P(shown) / P(level)`.
///
/// `P(level | shown)` and `P(shown)` come from the ordinary (biased) records,
/// `P(level)` from the records tagged [`CALIBRATION_TAG`]. A cell's propensity
/// is `b` at the level of its logged feedback.
pub fn estimate_propensities_with(log: &InteractionLog, floor: f64) -> Result<PropensityTable> {
    if log.is_empty() {
        return Err(Error::Empty("propensity log"));
    }
    let n_users = log.users().len();
    let n_actions = log.actions().len();
    let (calib, biased): (Vec<_>, Vec<_>) = log
        .records()
        .iter()
        .partition(|r| r.context.contains(CALIBRATION_TAG));

    if calib.is_empty() || biased.is_empty() {
        let mut shown_to: BTreeMap<ActionId, BTreeSet<UserId>> = BTreeMap::new();
        for r in log.records() {
            shown_to.entry(r.action).or_default().insert(r.user);
        }
        let raw = log
            .records()
            .iter()
            .map(|r| {
                (
                    (r.user, r.action),
                    shown_to[&r.action].len() as f64 / n_users as f64,
                )
            })
            .collect();
        let mut table = PropensityTable::from_raw(raw, floor);
        table.method = PropensityMethod::ActionFrequency;
        table.warning = Some(if calib.is_empty() {
            format!("no `{CALIBRATION_TAG}` records; using action-frequency propensities")
        } else {
            "log holds only calibration records; using action-frequency propensities".to_string()
        });
        return Ok(table);
    }

    let histogram = |recs: &[&crate::types::InteractionRecord]| {
        let mut h = [0.0; LEVELS];
        for r in recs {
            h[feedback_level(r.value())] += 1.0;
        }
        let n = recs.len() as f64;
        h.map(|c| c / n)
    };
    let given_shown = histogram(&biased);
    let prior = histogram(&calib);
    let cells: BTreeSet<(UserId, ActionId)> = biased.iter().map(|r| (r.user, r.action)).collect();
    let p_shown = cells.len() as f64 / (n_users * n_actions) as f64;

    let mut per_level = [0.0; LEVELS];
    for l in 0..LEVELS {
        per_level[l] = if prior[l] > 0.0 {
            given_shown[l] * p_shown / prior[l]
        } else {
            // level never seen uniformly: no evidence of under-exposure
            1.0
        };
    }
    let raw = log
        .records()
        .iter()
        .map(|r| ((r.user, r.action), per_level[feedback_level(r.value())]))
        .collect();
    let mut table = PropensityTable::from_raw(raw, floor);
    table.per_level = Some(per_level);
    Ok(table)
}

/// Factorization trained with per-record weight `1 / b_{u,a}`.
pub fn cf_train_ips(
    log: &InteractionLog,
    propensities: &PropensityTable,
    config: &CfConfig,
) -> Result<CfModel> {
    let weights = propensities.weights_for(log)?;
    cf_train(log, config, Some(&weights))
}

/// Inverse-propensity estimate of the mean loss over all `n_cells` cells
/// from the observed per-record losses.
pub fn ips_loss_estimate(losses: &[(f64, f64)], n_cells: usize) -> f64 {
    losses.iter().map(|&(loss, b)| loss / b).sum::<f64>() / n_cells as f64
}

/// Plain mean over the observed records.
pub fn naive_loss_estimate(losses: &[(f64, f64)]) -> f64 {
    losses.iter().map(|&(loss, _)| loss).sum::<f64>() / losses.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ContextTags, Feedback, InteractionRecord};

    fn rec(t: u64, u: u32, a: u32, f: f64, calib: bool) -> InteractionRecord {
        let r = InteractionRecord::new(t, UserId(u), ActionId(a), Feedback::explicit(f).unwrap());
        if calib {
            r.with_context(ContextTags::from_iter([CALIBRATION_TAG.to_string()]))
        } else {
            r
        }
    }

    #[test]
    fn uniform_exposure_gives_inverse_catalog_size() {
        // 4 users, 4 actions; each user shown one action, uniformly, and the
        // calibration slice has the same level mix.
        let mut recs = Vec::new();
        for u in 0..4u32 {
            let f = if u % 2 == 0 { 1.0 } else { 0.0 };
            recs.push(rec(1, u, u + 1, f, false));
            recs.push(rec(2, u, ((u + 1) % 4) + 1, f, true));
        }
        let log = InteractionLog::from_records(recs).unwrap();
        let t = estimate_propensities_with(&log, 0.01).unwrap();
        for r in log
            .records()
            .iter()
            .filter(|r| !r.context.contains(CALIBRATION_TAG))
        {
            assert!((t.raw(r.user, r.action).unwrap() - 0.25).abs() < 1e-12);
        }
        assert_eq!(t.method, PropensityMethod::NaiveBayes);
    }

    #[test]
    fn single_action_always_shown() {
        let log = InteractionLog::from_records([
            rec(1, 0, 1, 0.5, false),
            rec(1, 1, 1, 1.0, false),
            rec(2, 0, 1, 0.5, true),
            rec(2, 1, 1, 1.0, true),
        ])
        .unwrap();
        let t = estimate_propensities(&log).unwrap();
        assert_eq!(t.get(UserId(0), ActionId(1)), Some(1.0));
        assert_eq!(t.get(UserId(1), ActionId(1)), Some(1.0));
    }

    #[test]
    fn missing_calibration_falls_back_with_warning() {
        let log =
            InteractionLog::from_records([rec(1, 0, 1, 0.5, false), rec(1, 1, 2, 1.0, false)])
                .unwrap();
        let t = estimate_propensities(&log).unwrap();
        assert_eq!(t.method, PropensityMethod::ActionFrequency);
        assert!(t.warning.is_some());
        assert_eq!(t.get(UserId(0), ActionId(1)), Some(0.5));
    }

    #[test]
    fn clipping_floor() {
        let raw = BTreeMap::from([
            ((UserId(0), ActionId(1)), 0.001),
            ((UserId(0), ActionId(2)), 1.7),
        ]);
        let t = PropensityTable::from_raw(raw, DEFAULT_PROPENSITY_FLOOR);
        assert_eq!(t.get(UserId(0), ActionId(1)), Some(0.05));
        assert_eq!(t.get(UserId(0), ActionId(2)), Some(1.0));
        assert_eq!(t.raw(UserId(0), ActionId(1)), Some(0.001));
    }

    #[test]
    fn missing_propensity_is_an_error() {
        let log = InteractionLog::from_records([rec(1, 0, 1, 0.5, false)]).unwrap();
        let t = PropensityTable::from_raw(BTreeMap::new(), 0.05);
        assert!(matches!(
            cf_train_ips(&log, &t, &CfConfig::default()),
            Err(Error::MissingPropensity { .. })
        ));
    }

    #[test]
    fn unit_propensities_match_plain_training() {
        let log = InteractionLog::from_records([
            rec(1, 0, 1, 0.5, false),
            rec(2, 0, 2, 1.0, false),
            rec(1, 1, 1, 0.25, false),
        ])
        .unwrap();
        let cfg = CfConfig::default();
        let a = cf_train_ips(&log, &PropensityTable::constant(&log, 1.0), &cfg).unwrap();
        let b = cf_train(&log, &cfg, None).unwrap();
        assert_eq!(a.p, b.p);
        assert_eq!(a.q, b.q);
    }

    #[test]
    fn estimators() {
        let obs = [(1.0, 0.5), (2.0, 1.0)];
        assert_eq!(ips_loss_estimate(&obs, 4), 1.0);
        assert_eq!(naive_loss_estimate(&obs), 1.5);
    }
}
