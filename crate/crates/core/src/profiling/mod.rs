//! User profiling: long-term (factorization), short-term (recurrent) and
//! fine-grained (knowledge-enhanced recurrent) preferences.

pub mod cf;
pub mod profile;
pub mod recurrent;

pub use cf::{
    cf_predict, cf_train, cf_train_over, CfConfig, CfExample, CfGradient, CfModel, Optimizer,
};
pub use profile::{
    cold_start_profile, profile_from_models, replay_sequences, update_profile, GroupStats,
    ProfileModels, PERSONA_KEY,
};
pub use recurrent::{
    advance_flags, ke_train, ke_train_with, knowledge_bind, seq_step, seq_train, seq_train_with,
    BindMode, GruCell, InitialState, KeModel, RecurrentConfig, RecurrentModel, RecurrentParams,
    SeqModel, TrainSequence,
};
