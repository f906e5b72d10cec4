//! Gradient-based unlearning on `−L(forget) + β L(retain)`.

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use crate::error::{Error, Result};
use crate::log::InteractionLog;
use crate::profiling::{CfExample, CfModel, RecurrentModel, RecurrentParams, TrainSequence};
use crate::types::{ActionId, InteractionRecord, UserId};

/// Which of the user's records to forget.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgetRequest {
    pub user: UserId,
    /// Inclusive timestamp range; `None` matches any time.
    pub time_range: Option<RangeInclusive<u64>>,
    /// `None` matches any action.
    pub actions: Option<Vec<ActionId>>,
    pub beta: f64,
}

impl ForgetRequest {
    pub fn new(user: UserId) -> Self {
        Self {
            user,
            time_range: None,
            actions: None,
            beta: 1.0,
        }
    }

    pub fn with_actions(mut self, actions: impl IntoIterator<Item = ActionId>) -> Self {
        self.actions = Some(actions.into_iter().collect());
        self
    }

    pub fn with_time_range(mut self, range: RangeInclusive<u64>) -> Self {
        self.time_range = Some(range);
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn selects(&self, r: &InteractionRecord) -> bool {
        r.user == self.user
            && self.time_range.as_ref().is_none_or(|t| t.contains(&r.t))
            && self.actions.as_ref().is_none_or(|a| a.contains(&r.action))
    }

    /// `(forget, retain)` partition of the user's records.
    pub fn partition<'a>(
        &self,
        log: &'a InteractionLog,
    ) -> (Vec<&'a InteractionRecord>, Vec<&'a InteractionRecord>) {
        log.user_records(self.user)
            .into_iter()
            .partition(|r| self.selects(r))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetainScope {
    /// The requesting user's remaining records.
    User,
    /// Every record outside the forget set.
    Log,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnConfig {
    pub iterations: usize,
    pub step: f64,
    /// Stop once retain loss exceeds `(1 + this) ×` its starting value; the
    /// offending step is rolled back.
    pub max_retain_increase: f64,
    pub retain_scope: RetainScope,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            step: 0.05,
            max_retain_increase: 0.1,
            retain_scope: RetainScope::User,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnAudit {
    pub model: &'static str,
    pub user: UserId,
    pub forget_records: usize,
    pub retain_records: usize,
    pub beta: f64,
    pub iterations: usize,
    pub stopped_early: bool,
    pub forget_loss_before: f64,
    pub forget_loss_after: f64,
    pub retain_loss_before: f64,
    pub retain_loss_after: f64,
}

impl UnlearnAudit {
    /// Plain-text audit block.
    pub fn render(&self) -> String {
        let mut s = String::from("[unlearn-audit]\n");
        let _ = writeln!(s, "model = {}", self.model);
        let _ = writeln!(s, "user = {}", self.user);
        let _ = writeln!(s, "forget_records = {}", self.forget_records);
        let _ = writeln!(s, "retain_records = {}", self.retain_records);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "stopped_early = {}", self.stopped_early);
        let _ = writeln!(s, "forget_loss_before = {:.9}", self.forget_loss_before);
        let _ = writeln!(s, "forget_loss_after = {:.9}", self.forget_loss_after);
        let _ = writeln!(s, "retain_loss_before = {:.9}", self.retain_loss_before);
        let _ = writeln!(s, "retain_loss_after = {:.9}", self.retain_loss_after);
        s
    }
}

fn retain_records<'a>(
    log: &'a InteractionLog,
    request: &ForgetRequest,
    user_retain: Vec<&'a InteractionRecord>,
    scope: RetainScope,
) -> Vec<&'a InteractionRecord> {
    match scope {
        RetainScope::User => user_retain,
        RetainScope::Log => log
            .records()
            .iter()
            .filter(|r| !request.selects(r))
            .collect(),
    }
}

fn cf_examples(
    model: &CfModel,
    recs: &[&InteractionRecord],
    weight: f64,
) -> Result<Vec<CfExample>> {
    recs.iter()
        .map(|r| {
            Ok(CfExample {
                user: model.user_row(r.user).ok_or(Error::UnknownUser(r.user))?,
                action: model
                    .action_row(r.action)
                    .ok_or(Error::UnknownAction(r.action))?,
                target: r.value(),
                weight,
            })
        })
        .collect()
}

/// Sum of squared errors, no regularizer.
fn sse(model: &CfModel, examples: &[CfExample]) -> f64 {
    examples
        .iter()
        .map(|e| {
            let err = e.target - crate::linalg::dot(model.p.row(e.user), model.q.row(e.action));
            err * err
        })
        .sum()
}

/// Unlearning for the factorization model. The loss in both terms is the
/// summed squared error without the regularizer, so identical forget and
/// retain sets with `β = 1` cancel exactly.
pub fn unlearn(
    model: &CfModel,
    log: &InteractionLog,
    request: &ForgetRequest,
    config: &UnlearnConfig,
) -> Result<(CfModel, UnlearnAudit)> {
    let (forget, user_retain) = request.partition(log);
    if forget.is_empty() {
        return Err(Error::Empty("forget set"));
    }
    let retain = retain_records(log, request, user_retain, config.retain_scope);
    let forget_ex = cf_examples(model, &forget, -1.0)?;
    let retain_ex = cf_examples(model, &retain, request.beta)?;
    let mut all = forget_ex.clone();
    all.extend_from_slice(&retain_ex);

    let mut m = model.clone();
    m.config.l2 = 0.0;
    let forget_before = sse(&m, &forget_ex);
    let retain_before = sse(&m, &retain_ex);
    let limit = retain_before * (1.0 + config.max_retain_increase);
    let mut iterations = 0;
    let mut stopped_early = false;
    for _ in 0..config.iterations {
        let (_, g) = m.gradient(&all, 1.0);
        let prev = m.clone();
        m.apply(config.step, &g);
        if !retain_ex.is_empty() && sse(&m, &retain_ex) > limit {
            m = prev;
            stopped_early = true;
            break;
        }
        iterations += 1;
    }
    let audit = UnlearnAudit {
        model: "cf",
        user: request.user,
        forget_records: forget.len(),
        retain_records: retain.len(),
        beta: request.beta,
        iterations,
        stopped_early,
        forget_loss_before: forget_before,
        forget_loss_after: sse(&m, &forget_ex),
        retain_loss_before: retain_before,
        retain_loss_after: sse(&m, &retain_ex),
    };
    m.config.l2 = model.config.l2;
    Ok((m, audit))
}

/// Unlearning for the recurrent models. Sequences are replayed in full so
/// forgotten steps still drive the state; only their loss terms flip sign.
/// Steps use the model's gradient-norm clip.
pub fn unlearn_seq(
    model: &RecurrentModel,
    log: &InteractionLog,
    request: &ForgetRequest,
    config: &UnlearnConfig,
) -> Result<(RecurrentModel, UnlearnAudit)> {
    let (forget, user_retain) = request.partition(log);
    if forget.is_empty() {
        return Err(Error::Empty("forget set"));
    }
    let retain_count = match config.retain_scope {
        RetainScope::User => user_retain.len(),
        RetainScope::Log => log.len() - forget.len(),
    };
    let users: Vec<UserId> = match config.retain_scope {
        RetainScope::User => vec![request.user],
        RetainScope::Log => log.users(),
    };
    // weight per step: −1 forget, β retain; plus separate probes for reporting
    let mut objective = Vec::new();
    let mut forget_probe = Vec::new();
    let mut retain_probe = Vec::new();
    for u in users {
        let recs = log.user_records(u);
        let base = model.resolve(u, &recs)?;
        let sel: Vec<bool> = recs.iter().map(|r| request.selects(r)).collect();
        let with = |f: &dyn Fn(bool) -> f64| TrainSequence {
            user: u,
            steps: base.steps.clone(),
            weights: sel.iter().map(|&s| f(s)).collect(),
            advance: base.advance.clone(),
        };
        objective.push(with(&|s| if s { -1.0 } else { request.beta }));
        forget_probe.push(with(&|s| if s { 1.0 } else { 0.0 }));
        retain_probe.push(with(&|s| if s { 0.0 } else { 1.0 }));
    }

    let mut m = model.clone();
    let forget_before = m.data_objective(&forget_probe);
    let retain_before = m.data_objective(&retain_probe);
    let limit = retain_before * (1.0 + config.max_retain_increase);
    let mut iterations = 0;
    let mut stopped_early = false;
    for _ in 0..config.iterations {
        let (_, g): (f64, RecurrentParams) = m.data_objective_and_gradient(&objective);
        let n = g.sq_norm().sqrt();
        let scale = if m.config.clip > 0.0 && n > m.config.clip {
            m.config.clip / n
        } else {
            1.0
        };
        let prev = m.params.clone();
        m.params.add_scaled(-config.step * scale, &g);
        if retain_count > 0 && m.data_objective(&retain_probe) > limit {
            m.params = prev;
            stopped_early = true;
            break;
        }
        iterations += 1;
    }
    let audit = UnlearnAudit {
        model: if m.is_knowledge_enhanced() {
            "ke"
        } else {
            "seq"
        },
        user: request.user,
        forget_records: forget.len(),
        retain_records: retain_count,
        beta: request.beta,
        iterations,
        stopped_early,
        forget_loss_before: forget_before,
        forget_loss_after: m.data_objective(&forget_probe),
        retain_loss_before: retain_before,
        retain_loss_after: m.data_objective(&retain_probe),
    };
    Ok((m, audit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiling::{cf_train, seq_train, CfConfig, RecurrentConfig};
    use crate::types::Feedback;

    fn log() -> InteractionLog {
        let mut recs = Vec::new();
        for u in 0..3u32 {
            for t in 1..=6u64 {
                let a = (t as u32 + u) % 4 + 1;
                let f = ((u as f64 + t as f64) % 5.0) / 4.0;
                recs.push(InteractionRecord::new(
                    t,
                    UserId(u),
                    ActionId(a),
                    Feedback::explicit(f).unwrap(),
                ));
            }
        }
        InteractionLog::from_records(recs).unwrap()
    }

    #[test]
    fn empty_forget_set() {
        let log = log();
        let m = cf_train(&log, &CfConfig::default(), None).unwrap();
        let req = ForgetRequest::new(UserId(0)).with_actions([ActionId(99)]);
        assert!(matches!(
            unlearn(&m, &log, &req, &UnlearnConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn pure_ascent_raises_forget_loss() {
        let log = log();
        let m = cf_train(&log, &CfConfig::default(), None).unwrap();
        let req = ForgetRequest::new(UserId(1))
            .with_actions([ActionId(2)])
            .with_beta(0.0);
        let cfg = UnlearnConfig {
            iterations: 1,
            ..UnlearnConfig::default()
        };
        let (_, audit) = unlearn(&m, &log, &req, &cfg).unwrap();
        assert!(audit.forget_loss_after > audit.forget_loss_before);
        let (_, audit) = unlearn_seq(
            &seq_train(&log, &RecurrentConfig::default()).unwrap(),
            &log,
            &req,
            &cfg,
        )
        .unwrap();
        assert!(audit.forget_loss_after > audit.forget_loss_before);
    }

    #[test]
    fn audit_block_lists_losses() {
        let log = log();
        let m = cf_train(&log, &CfConfig::default(), None).unwrap();
        let (_, audit) = unlearn(
            &m,
            &log,
            &ForgetRequest::new(UserId(2)).with_time_range(1..=2),
            &UnlearnConfig::default(),
        )
        .unwrap();
        let text = audit.render();
        for key in [
            "forget_loss_before",
            "forget_loss_after",
            "retain_loss_before",
            "retain_loss_after",
            "iterations",
            "beta",
        ] {
            assert!(text.contains(key), "{key}");
        }
        assert_eq!(audit.forget_records, 2);
        assert_eq!(audit.retain_records, 4);
    }
}
