//! Debiasing, unlearning, federated averaging and fairness-constrained reranking.

pub mod fairness;
pub mod federated;
pub mod propensity;
pub mod unlearn;

pub use fairness::{fair_rerank, ExposureHistory, FairnessAudit, FairnessConstraint, Promotion};
pub use federated::{federated_round, ClientUpdate, FederatedClient, FederatedConfig, LocalClient};
pub use propensity::{
    cf_train_ips, estimate_propensities, estimate_propensities_with, ips_loss_estimate,
    naive_loss_estimate, PropensityMethod, PropensityTable, CALIBRATION_TAG,
    DEFAULT_PROPENSITY_FLOOR,
};
pub use unlearn::{unlearn, unlearn_seq, ForgetRequest, RetainScope, UnlearnAudit, UnlearnConfig};
