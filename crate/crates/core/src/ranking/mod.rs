//! Scoring, ranking objectives, DCG and the retrieval-and-rerank pipeline.

pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod train;

pub use loss::{
    listwise_loss, listwise_loss_and_gradient, pairwise_loss, pairwise_loss_derivative,
    PairwiseKind,
};
pub use metrics::{dcg, dcg_at, ndcg, ndcg_at};
pub use pipeline::{
    pairs_from_followup, rerank, retrieve, score, ExactRetriever, FollowupPairs, MixtureReranker,
    MixtureWeights, PreferencePair, RankedList, Reranker, Retriever, RuleRetriever,
};
pub use train::{
    ideal_lists_from_log, ideal_order, listwise_objective_gradient, pairs_from_log,
    pairwise_accuracy, pairwise_objective_gradient, train_listwise, train_pairwise, IdealList,
    RankTrainConfig,
};
