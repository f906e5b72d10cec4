//! Federated averaging for the factorization model.
//!
//! A client keeps its records private and hands the server only the change
//! it made to the shared parameters.

use crate::error::{Error, Result};
use crate::log::InteractionLog;
use crate::profiling::{CfGradient, CfModel};

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedConfig {
    pub local_steps: usize,
    pub step: f64,
    /// Run clients on scoped threads.
    pub parallel: bool,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self {
            local_steps: 1,
            step: 0.05,
            parallel: true,
        }
    }
}

/// Parameter change proposed by one client, with its shard size.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub records: usize,
    pub delta: CfGradient,
}

pub trait FederatedClient: Sync {
    fn record_count(&self) -> usize;
    fn local_update(&self, global: &CfModel, config: &FederatedConfig) -> Result<ClientUpdate>;
}

/// Client over an in-memory shard.
#[derive(Debug, Clone)]
pub struct LocalClient {
    log: InteractionLog,
}

impl LocalClient {
    pub fn new(log: InteractionLog) -> Self {
        Self { log }
    }
}

impl FederatedClient for LocalClient {
    fn record_count(&self) -> usize {
        self.log.len()
    }

    /// Full-batch steps on the record-averaged local objective.
    fn local_update(&self, global: &CfModel, config: &FederatedConfig) -> Result<ClientUpdate> {
        let mut delta = CfGradient::zeros_like(global);
        if self.log.is_empty() {
            return Ok(ClientUpdate { records: 0, delta });
        }
        let examples = global.examples(&self.log, None)?;
        let scale = 1.0 / examples.len() as f64;
        let mut local = global.clone();
        for _ in 0..config.local_steps {
            let (_, g) = local.gradient(&examples, scale);
            local.apply(config.step, &g);
        }
        delta.p = local.p;
        delta.q = local.q;
        delta.add_scaled(
            -1.0,
            &CfGradient {
                p: global.p.clone(),
                q: global.q.clone(),
            },
        );
        Ok(ClientUpdate {
            records: examples.len(),
            delta,
        })
    }
}

/// One round: every client updates from the same global parameters, and the
/// server adds the shard-size weighted mean of the deltas.
pub fn federated_round<C: FederatedClient>(
    global: &CfModel,
    clients: &[C],
    config: &FederatedConfig,
) -> Result<CfModel> {
    let total: usize = clients.iter().map(|c| c.record_count()).sum();
    if total == 0 {
        return Err(Error::Empty("federated clients"));
    }
    let updates: Vec<Result<ClientUpdate>> = if config.parallel && clients.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = clients
                .iter()
                .map(|c| s.spawn(move || c.local_update(global, config)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread panicked"))
                .collect()
        })
    } else {
        clients
            .iter()
            .map(|c| c.local_update(global, config))
            .collect()
    };

    let mut sum = CfGradient::zeros_like(global);
    for u in updates {
        let u = u?;
        if u.records > 0 {
            sum.add_scaled(u.records as f64 / total as f64, &u.delta);
        }
    }
    let mut next = global.clone();
    next.apply(-1.0, &sum);
    Ok(next)
}
