//! Pairwise and listwise refinement of factorization embeddings.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};
use crate::log::InteractionLog;
use crate::profiling::{CfGradient, CfModel};
use crate::ranking::loss::{
    listwise_loss_and_gradient, pairwise_loss, pairwise_loss_derivative, PairwiseKind,
};
use crate::ranking::pipeline::PreferencePair;
use crate::types::{ActionId, UserId};

#[derive(Debug, Clone, PartialEq)]
pub struct RankTrainConfig {
    pub kind: PairwiseKind,
    pub epochs: usize,
    pub step: f64,
    pub decay: f64,
    pub seed: u64,
}

impl Default for RankTrainConfig {
    fn default() -> Self {
        Self {
            kind: PairwiseKind::Bpr,
            epochs: 50,
            step: 0.05,
            decay: 0.99,
            seed: 0,
        }
    }
}

/// One user's actions in ideal order (best first).
#[derive(Debug, Clone, PartialEq)]
pub struct IdealList {
    pub user: UserId,
    pub actions: Vec<ActionId>,
}

/// Descending feedback, ties by ascending id.
pub fn ideal_order(feedback: &[(ActionId, f64)]) -> Vec<ActionId> {
    let mut v = feedback.to_vec();
    crate::types::sort_scored(&mut v);
    v.into_iter().map(|e| e.0).collect()
}

fn mean_feedback_by_user(log: &InteractionLog) -> BTreeMap<UserId, Vec<(ActionId, f64)>> {
    let mut sums: BTreeMap<UserId, BTreeMap<ActionId, (f64, usize)>> = BTreeMap::new();
    for r in log.records() {
        let e = sums
            .entry(r.user)
            .or_default()
            .entry(r.action)
            .or_insert((0.0, 0));
        e.0 += r.value();
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(u, m)| {
            (
                u,
                m.into_iter().map(|(a, (s, n))| (a, s / n as f64)).collect(),
            )
        })
        .collect()
}

/// Every strictly ordered pair of a user's actions, by mean observed feedback.
pub fn pairs_from_log(log: &InteractionLog) -> Vec<PreferencePair> {
    let mut out = Vec::new();
    for (user, items) in mean_feedback_by_user(log) {
        for &(a, fa) in &items {
            for &(b, fb) in &items {
                if fa > fb {
                    out.push(PreferencePair {
                        user,
                        preferred: a,
                        dispreferred: b,
                    });
                }
            }
        }
    }
    out
}

/// Per-user ideal orders over observed actions (users with ≥ 2 actions).
pub fn ideal_lists_from_log(log: &InteractionLog) -> Vec<IdealList> {
    mean_feedback_by_user(log)
        .into_iter()
        .filter(|(_, items)| items.len() >= 2)
        .map(|(user, items)| IdealList {
            user,
            actions: ideal_order(&items),
        })
        .collect()
}

struct ResolvedPair {
    u: usize,
    a: usize,
    b: usize,
}

fn resolve_pairs(model: &CfModel, pairs: &[PreferencePair]) -> Result<Vec<ResolvedPair>> {
    pairs
        .iter()
        .map(|p| {
            Ok(ResolvedPair {
                u: model.user_row(p.user).ok_or(Error::UnknownUser(p.user))?,
                a: model
                    .action_row(p.preferred)
                    .ok_or(Error::UnknownAction(p.preferred))?,
                b: model
                    .action_row(p.dispreferred)
                    .ok_or(Error::UnknownAction(p.dispreferred))?,
            })
        })
        .collect()
}

fn resolve_lists(model: &CfModel, lists: &[IdealList]) -> Result<Vec<(usize, Vec<usize>)>> {
    lists
        .iter()
        .map(|l| {
            let u = model.user_row(l.user).ok_or(Error::UnknownUser(l.user))?;
            let a = l
                .actions
                .iter()
                .map(|&a| model.action_row(a).ok_or(Error::UnknownAction(a)))
                .collect::<Result<Vec<_>>>()?;
            Ok((u, a))
        })
        .collect()
}

/// `Σ σ(r̂_ua − r̂_ua') + l2 (‖P‖² + ‖Q‖²)` and its gradient.
pub fn pairwise_objective_gradient(
    model: &CfModel,
    pairs: &[PreferencePair],
    kind: PairwiseKind,
) -> Result<(f64, CfGradient)> {
    let resolved = resolve_pairs(model, pairs)?;
    let mut g = CfGradient::zeros_like(model);
    let mut loss = 0.0;
    for rp in &resolved {
        let p = model.p.row(rp.u);
        let qa = model.q.row(rp.a);
        let qb = model.q.row(rp.b);
        let x = dot(p, qa) - dot(p, qb);
        loss += pairwise_loss(x, kind);
        let s = pairwise_loss_derivative(x, kind);
        axpy(s, qa, g.p.row_mut(rp.u));
        axpy(-s, qb, g.p.row_mut(rp.u));
        axpy(s, p, g.q.row_mut(rp.a));
        axpy(-s, p, g.q.row_mut(rp.b));
    }
    let l2 = model.config.l2;
    axpy(2.0 * l2, model.p.as_slice(), g.p.as_mut_slice());
    axpy(2.0 * l2, model.q.as_slice(), g.q.as_mut_slice());
    loss += l2 * (model.p.sq_norm() + model.q.sq_norm());
    Ok((loss, g))
}

/// `Σ_lists listwise(p_u · q_{A*(i)}) + l2 (‖P‖² + ‖Q‖²)` and its gradient.
pub fn listwise_objective_gradient(
    model: &CfModel,
    lists: &[IdealList],
) -> Result<(f64, CfGradient)> {
    let resolved = resolve_lists(model, lists)?;
    let mut g = CfGradient::zeros_like(model);
    let mut loss = 0.0;
    for (u, items) in &resolved {
        let p = model.p.row(*u);
        let scores: Vec<f64> = items.iter().map(|&j| dot(p, model.q.row(j))).collect();
        let (l, gs) = listwise_loss_and_gradient(&scores)?;
        loss += l;
        for (k, &j) in items.iter().enumerate() {
            axpy(gs[k], model.q.row(j), g.p.row_mut(*u));
            axpy(gs[k], p, g.q.row_mut(j));
        }
    }
    let l2 = model.config.l2;
    axpy(2.0 * l2, model.p.as_slice(), g.p.as_mut_slice());
    axpy(2.0 * l2, model.q.as_slice(), g.q.as_mut_slice());
    loss += l2 * (model.p.sq_norm() + model.q.sq_norm());
    Ok((loss, g))
}

/// Pairwise SGD over `pairs`, one update per pair per epoch.
pub fn train_pairwise(
    mut model: CfModel,
    pairs: &[PreferencePair],
    config: &RankTrainConfig,
) -> Result<CfModel> {
    if pairs.is_empty() {
        return Err(Error::Empty("preference pairs"));
    }
    let resolved = resolve_pairs(&model, pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..resolved.len()).collect();
    let l2 = model.config.l2;
    let mut step = config.step;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let rp = &resolved[i];
            let p = model.p.row(rp.u).to_vec();
            let qa = model.q.row(rp.a).to_vec();
            let qb = model.q.row(rp.b).to_vec();
            let s = pairwise_loss_derivative(dot(&p, &qa) - dot(&p, &qb), config.kind);
            let pr = model.p.row_mut(rp.u);
            for k in 0..p.len() {
                pr[k] -= step * (s * (qa[k] - qb[k]) + 2.0 * l2 * p[k]);
            }
            let qar = model.q.row_mut(rp.a);
            for k in 0..p.len() {
                qar[k] -= step * (s * p[k] + 2.0 * l2 * qa[k]);
            }
            let qbr = model.q.row_mut(rp.b);
            for k in 0..p.len() {
                qbr[k] -= step * (-s * p[k] + 2.0 * l2 * qb[k]);
            }
        }
        let (loss, _) = pairwise_objective_gradient(&model, pairs, config.kind)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        model.loss_history.push(loss);
        step *= config.decay;
    }
    Ok(model)
}

/// Listwise SGD, one update per user list per epoch.
pub fn train_listwise(
    mut model: CfModel,
    lists: &[IdealList],
    config: &RankTrainConfig,
) -> Result<CfModel> {
    if lists.is_empty() {
        return Err(Error::Empty("ideal lists"));
    }
    let resolved = resolve_lists(&model, lists)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..resolved.len()).collect();
    let l2 = model.config.l2;
    let mut step = config.step;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (u, items) = &resolved[i];
            let p = model.p.row(*u).to_vec();
            let scores: Vec<f64> = items.iter().map(|&j| dot(&p, model.q.row(j))).collect();
            let (_, gs) = listwise_loss_and_gradient(&scores)?;
            let mut dp: Vec<f64> = p.iter().map(|v| 2.0 * l2 * v).collect();
            for (k, &j) in items.iter().enumerate() {
                axpy(gs[k], model.q.row(j), &mut dp);
            }
            for (k, &j) in items.iter().enumerate() {
                let q = model.q.row_mut(j);
                for c in 0..p.len() {
                    q[c] -= step * (gs[k] * p[c] + 2.0 * l2 * q[c]);
                }
            }
            axpy(-step, &dp, model.p.row_mut(*u));
        }
        let (loss, _) = listwise_objective_gradient(&model, lists)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        model.loss_history.push(loss);
        step *= config.decay;
    }
    Ok(model)
}

/// Fraction of pairs the model orders correctly (strictly).
pub fn pairwise_accuracy(model: &CfModel, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("preference pairs"));
    }
    let mut hits = 0usize;
    for p in pairs {
        if model.predict(p.user, p.preferred)? > model.predict(p.user, p.dispreferred)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}
