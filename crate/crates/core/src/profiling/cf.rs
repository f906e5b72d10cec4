//! Long-term preferences: matrix factorization trained on squared error.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::log::InteractionLog;
use crate::types::{ActionId, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// One update per record, visiting records in a seeded shuffled order.
    Sgd,
    /// One update per epoch on the record-averaged objective.
    FullBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfConfig {
    pub dim: usize,
    pub epochs: usize,
    pub step: f64,
    /// Multiplicative step decay applied after every epoch.
    pub decay: f64,
    pub l2: f64,
    pub seed: u64,
    pub init_scale: f64,
    pub optimizer: Optimizer,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            epochs: 50,
            step: 0.05,
            decay: 0.99,
            l2: 1e-4,
            seed: 0,
            init_scale: 0.1,
            optimizer: Optimizer::Sgd,
        }
    }
}

/// A training example resolved to model rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfExample {
    pub user: usize,
    pub action: usize,
    pub target: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfGradient {
    pub p: Matrix,
    pub q: Matrix,
}

impl CfGradient {
    pub fn zeros_like(model: &CfModel) -> Self {
        Self {
            p: Matrix::zeros(model.p.rows(), model.p.cols()),
            q: Matrix::zeros(model.q.rows(), model.q.cols()),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.p.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        self.q.as_mut_slice().iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_scaled(&mut self, s: f64, other: &CfGradient) {
        axpy(s, other.p.as_slice(), self.p.as_mut_slice());
        axpy(s, other.q.as_slice(), self.q.as_mut_slice());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfModel {
    users: Vec<UserId>,
    actions: Vec<ActionId>,
    user_index: BTreeMap<UserId, usize>,
    action_index: BTreeMap<ActionId, usize>,
    pub p: Matrix,
    pub q: Matrix,
    pub config: CfConfig,
    /// Objective after each completed epoch.
    pub loss_history: Vec<f64>,
}

impl CfModel {
    /// Fresh model with uniform(−s, s) factors; P is drawn before Q.
    pub fn init(users: &[UserId], actions: &[ActionId], config: &CfConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::init_with_rng(users, actions, config, &mut rng)
    }

    fn init_with_rng(
        users: &[UserId],
        actions: &[ActionId],
        config: &CfConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut users = users.to_vec();
        users.sort_unstable();
        users.dedup();
        let mut actions = actions.to_vec();
        actions.sort_unstable();
        actions.dedup();
        let p = Matrix::uniform(users.len(), config.dim, config.init_scale, rng);
        let q = Matrix::uniform(actions.len(), config.dim, config.init_scale, rng);
        Self::from_parts(users, actions, p, q, config.clone())
    }

    pub fn from_parts(
        users: Vec<UserId>,
        actions: Vec<ActionId>,
        p: Matrix,
        q: Matrix,
        config: CfConfig,
    ) -> Self {
        let user_index = users.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let action_index = actions.iter().enumerate().map(|(i, &a)| (a, i)).collect();
        Self {
            users,
            actions,
            user_index,
            action_index,
            p,
            q,
            config,
            loss_history: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.p.cols()
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    pub fn actions(&self) -> &[ActionId] {
        &self.actions
    }

    pub fn user_row(&self, u: UserId) -> Option<usize> {
        self.user_index.get(&u).copied()
    }

    pub fn action_row(&self, a: ActionId) -> Option<usize> {
        self.action_index.get(&a).copied()
    }

    pub fn user_vector(&self, u: UserId) -> Option<&[f64]> {
        self.user_row(u).map(|i| self.p.row(i))
    }

    pub fn action_vector(&self, a: ActionId) -> Option<&[f64]> {
        self.action_row(a).map(|i| self.q.row(i))
    }

    /// `p_u · q_a`.
    pub fn predict(&self, u: UserId, a: ActionId) -> Result<f64> {
        let i = self.user_row(u).ok_or(Error::UnknownUser(u))?;
        let j = self.action_row(a).ok_or(Error::UnknownAction(a))?;
        Ok(dot(self.p.row(i), self.q.row(j)))
    }

    /// Score of an arbitrary user vector against action `a`.
    pub fn predict_with(&self, p: &[f64], a: ActionId) -> Result<f64> {
        let q = self.action_vector(a).ok_or(Error::UnknownAction(a))?;
        crate::linalg::checked_dot(p, q)
    }

    /// Resolves log records to model rows. `weights` aligns with `log.records()`.
    pub fn examples(
        &self,
        log: &InteractionLog,
        weights: Option<&[f64]>,
    ) -> Result<Vec<CfExample>> {
        if let Some(w) = weights {
            if w.len() != log.len() {
                return Err(Error::DimensionMismatch {
                    expected: log.len(),
                    got: w.len(),
                });
            }
        }
        log.records()
            .iter()
            .enumerate()
            .map(|(i, r)| {
                Ok(CfExample {
                    user: self.user_row(r.user).ok_or(Error::UnknownUser(r.user))?,
                    action: self
                        .action_row(r.action)
                        .ok_or(Error::UnknownAction(r.action))?,
                    target: r.value(),
                    weight: weights.map_or(1.0, |w| w[i]),
                })
            })
            .collect()
    }

    /// `scale · Σ w (f − p·q)² + l2 (‖P‖² + ‖Q‖²)`
    pub fn objective(&self, examples: &[CfExample], scale: f64) -> f64 {
        let data: f64 = examples
            .iter()
            .map(|e| {
                let err = e.target - dot(self.p.row(e.user), self.q.row(e.action));
                e.weight * err * err
            })
            .sum();
        scale * data + self.config.l2 * (self.p.sq_norm() + self.q.sq_norm())
    }

    /// Objective value and its exact gradient.
    pub fn gradient(&self, examples: &[CfExample], scale: f64) -> (f64, CfGradient) {
        let mut g = CfGradient::zeros_like(self);
        let mut data = 0.0;
        for e in examples {
            let p = self.p.row(e.user);
            let q = self.q.row(e.action);
            let err = e.target - dot(p, q);
            data += e.weight * err * err;
            let c = -2.0 * scale * e.weight * err;
            axpy(c, q, g.p.row_mut(e.user));
            axpy(c, p, g.q.row_mut(e.action));
        }
        let l2 = self.config.l2;
        if l2 != 0.0 {
            axpy(2.0 * l2, self.p.as_slice(), g.p.as_mut_slice());
            axpy(2.0 * l2, self.q.as_slice(), g.q.as_mut_slice());
        }
        let loss = scale * data + l2 * (self.p.sq_norm() + self.q.sq_norm());
        (loss, g)
    }

    pub fn apply(&mut self, step: f64, g: &CfGradient) {
        axpy(-step, g.p.as_slice(), self.p.as_mut_slice());
        axpy(-step, g.q.as_slice(), self.q.as_mut_slice());
    }

    /// One SGD update on a single example: loss `w (f − p·q)² + l2 (‖p‖² + ‖q‖²)`.
    pub fn sgd_step(&mut self, e: &CfExample, step: f64) {
        let d = self.dim();
        let l2 = self.config.l2;
        let err = e.target - dot(self.p.row(e.user), self.q.row(e.action));
        let c = 2.0 * e.weight * err;
        let p_old: Vec<f64> = self.p.row(e.user).to_vec();
        {
            let q = self.q.row(e.action).to_vec();
            let p = self.p.row_mut(e.user);
            for k in 0..d {
                p[k] += step * (c * q[k] - 2.0 * l2 * p[k]);
            }
        }
        let q = self.q.row_mut(e.action);
        for k in 0..d {
            q[k] += step * (c * p_old[k] - 2.0 * l2 * q[k]);
        }
    }

    /// SGD steps on a free-standing user vector against frozen action factors.
    pub fn refine_user_vector(
        &self,
        p: &mut [f64],
        a: ActionId,
        target: f64,
        steps: usize,
        step: f64,
    ) -> Result<()> {
        let q = self.action_vector(a).ok_or(Error::UnknownAction(a))?;
        if p.len() != q.len() {
            return Err(Error::DimensionMismatch {
                expected: q.len(),
                got: p.len(),
            });
        }
        let l2 = self.config.l2;
        for _ in 0..steps {
            let err = target - dot(p, q);
            for k in 0..p.len() {
                p[k] += step * (2.0 * err * q[k] - 2.0 * l2 * p[k]);
            }
        }
        Ok(())
    }

    /// Runs `config.epochs` epochs over `examples`, appending to `loss_history`.
    pub fn fit_examples(&mut self, examples: &[CfExample], rng: &mut ChaCha8Rng) -> Result<()> {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mean_scale = 1.0 / examples.len().max(1) as f64;
        let mut step = self.config.step;
        for epoch in 0..self.config.epochs {
            let loss = match self.config.optimizer {
                Optimizer::Sgd => {
                    order.shuffle(rng);
                    for &i in &order {
                        self.sgd_step(&examples[i], step);
                    }
                    self.objective(examples, 1.0)
                }
                Optimizer::FullBatch => {
                    let (_, g) = self.gradient(examples, mean_scale);
                    self.apply(step, &g);
                    self.objective(examples, mean_scale)
                }
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            self.loss_history.push(loss);
            step *= self.config.decay;
        }
        Ok(())
    }

    /// Group centroid helper: mean of the given users' rows.
    pub fn centroid(&self, users: &[UserId]) -> Vec<f64> {
        crate::linalg::mean_of(
            users.iter().filter_map(|&u| self.user_vector(u)),
            self.dim(),
        )
    }
}

/// Trains a factorization model on `log`; optional per-record weights align
/// with `log.records()` (inverse propensities plug in here).
pub fn cf_train(
    log: &InteractionLog,
    config: &CfConfig,
    weights: Option<&[f64]>,
) -> Result<CfModel> {
    cf_train_over(log, &log.actions(), config, weights)
}

/// Like [`cf_train`] but also allocates rows for `extra_actions` (catalog
/// entries that may not appear in the log yet).
pub fn cf_train_over(
    log: &InteractionLog,
    extra_actions: &[ActionId],
    config: &CfConfig,
    weights: Option<&[f64]>,
) -> Result<CfModel> {
    if log.is_empty() {
        return Err(Error::Empty("training log"));
    }
    let mut actions = log.actions();
    actions.extend_from_slice(extra_actions);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = CfModel::init_with_rng(&log.users(), &actions, config, &mut rng);
    let examples = model.examples(log, weights)?;
    model.fit_examples(&examples, &mut rng)?;
    Ok(model)
}

/// Standalone form of [`CfModel::predict`].
pub fn cf_predict(model: &CfModel, u: UserId, a: ActionId) -> Result<f64> {
    model.predict(u, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Feedback, InteractionRecord};

    fn log_of(recs: &[(u64, u32, u32, f64)]) -> InteractionLog {
        InteractionLog::from_records(recs.iter().map(|&(t, u, a, f)| {
            InteractionRecord::new(t, UserId(u), ActionId(a), Feedback::explicit(f).unwrap())
        }))
        .unwrap()
    }

    fn two_by_two(p: [f64; 2], q: [f64; 2]) -> CfModel {
        CfModel::from_parts(
            vec![UserId(0)],
            vec![ActionId(1)],
            Matrix::from_vec(1, 2, p.to_vec()).unwrap(),
            Matrix::from_vec(1, 2, q.to_vec()).unwrap(),
            CfConfig {
                dim: 2,
                ..CfConfig::default()
            },
        )
    }

    #[test]
    fn predict_is_dot_product() {
        assert_eq!(
            two_by_two([1.0, 0.0], [0.5, 2.0])
                .predict(UserId(0), ActionId(1))
                .unwrap(),
            0.5
        );
        assert_eq!(
            two_by_two([0.0, 0.0], [0.5, 2.0])
                .predict(UserId(0), ActionId(1))
                .unwrap(),
            0.0
        );
        let m = CfModel::from_parts(
            vec![UserId(0)],
            vec![ActionId(1)],
            Matrix::from_vec(1, 3, vec![1.0; 3]).unwrap(),
            Matrix::from_vec(1, 3, vec![1.0; 3]).unwrap(),
            CfConfig::default(),
        );
        assert_eq!(m.predict(UserId(0), ActionId(1)).unwrap(), 3.0);
    }

    #[test]
    fn predict_unknown_ids() {
        let m = two_by_two([1.0, 0.0], [0.5, 2.0]);
        assert!(matches!(
            m.predict(UserId(5), ActionId(1)),
            Err(Error::UnknownUser(_))
        ));
        assert!(matches!(
            m.predict(UserId(0), ActionId(5)),
            Err(Error::UnknownAction(_))
        ));
    }

    #[test]
    fn empty_log_is_rejected() {
        assert!(matches!(
            cf_train(&InteractionLog::new(), &CfConfig::default(), None),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn divergence_names_epoch() {
        let log = log_of(&[(1, 0, 1, 1.0), (2, 0, 2, 0.0), (1, 1, 1, 0.5)]);
        let cfg = CfConfig {
            step: 50.0,
            decay: 1.0,
            epochs: 200,
            ..CfConfig::default()
        };
        let err = cf_train(&log, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        assert!(err.is_numerical());
    }

    #[test]
    fn constant_target_is_learned() {
        let mut recs = Vec::new();
        for u in 0..6 {
            for a in 1..=6u32 {
                recs.push((a as u64, u, a, 0.6));
            }
        }
        let log = log_of(&recs);
        let model = cf_train(
            &log,
            &CfConfig {
                dim: 2,
                epochs: 300,
                ..CfConfig::default()
            },
            None,
        )
        .unwrap();
        for u in 0..6 {
            for a in 1..=6 {
                let p = model.predict(UserId(u), ActionId(a)).unwrap();
                assert!((p - 0.6).abs() < 0.05, "({u},{a}) -> {p}");
            }
        }
    }

    #[test]
    fn single_point_fit() {
        let log = log_of(&[(1, 0, 1, 1.0)]);
        let model = cf_train(
            &log,
            &CfConfig {
                dim: 4,
                epochs: 500,
                ..CfConfig::default()
            },
            None,
        )
        .unwrap();
        let p = model.predict(UserId(0), ActionId(1)).unwrap();
        assert!((p - 1.0).abs() < 1e-3, "{p}");
    }

    #[test]
    fn unit_weights_match_unweighted_trajectory() {
        let log = log_of(&[
            (1, 0, 1, 1.0),
            (2, 0, 2, 0.25),
            (1, 1, 2, 0.75),
            (2, 1, 3, 0.0),
        ]);
        let cfg = CfConfig {
            epochs: 40,
            ..CfConfig::default()
        };
        let a = cf_train(&log, &cfg, None).unwrap();
        let b = cf_train(&log, &cfg, Some(&[1.0; 4])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_non_increasing_full_batch() {
        let log = log_of(&[
            (1, 0, 1, 1.0),
            (2, 0, 2, 0.25),
            (1, 1, 2, 0.75),
            (2, 1, 3, 0.0),
        ]);
        let cfg = CfConfig {
            epochs: 100,
            step: 0.5,
            optimizer: Optimizer::FullBatch,
            ..CfConfig::default()
        };
        let m = cf_train(&log, &cfg, None).unwrap();
        for w in m.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{w:?}");
        }
    }

    #[test]
    fn refine_only_touches_user_vector() {
        let m = two_by_two([0.1, 0.1], [1.0, 0.0]);
        let mut p = vec![0.1, 0.1];
        m.refine_user_vector(&mut p, ActionId(1), 1.0, 200, 0.1)
            .unwrap();
        assert!((dot(&p, &[1.0, 0.0]) - 1.0).abs() < 1e-3);
        assert_eq!(m.q.row(0), &[1.0, 0.0]);
    }
}
