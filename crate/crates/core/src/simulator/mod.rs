//! Synthetic users, scenario presets and the interaction loop that supplies
//! ground truth to the tests.

pub mod run;
pub mod scenario;
pub mod user;
pub mod world;

pub use run::{
    run_scenario, Agent, Episode, EpisodeReport, ObservationEvent, PopularityPolicy, RandomPolicy,
};
pub use scenario::{Preset, ScenarioConfig};
pub use user::{affine_feedback, gen_feedback, quantize, SyntheticUser};
pub use world::{response_records, Response, World, WARMUP_TAG};
