//! Policy, training loops, Flow2Tactile training and closed-loop evaluation
//! on the toy environment.

mod config;
mod eval;
mod f2t;
mod gradsuite;
mod policy;
mod protocol;
mod train;

pub use config::{load_config, EvalConfig, F2tConfig, PolicyConfig, PolicyMode, RunConfig, TactileRepr, TrainConfig};
pub use eval::{
    evaluate_policy, measure_latency, summarize_protocol, top_k_mean, EpisodeResult, EvalReport, LatencyReport,
    ProtocolSummary,
};
pub use gradsuite::{gradcheck_suite, GradSuiteEntry, GRADCHECK_EPS};
pub use f2t::{load_flow2tactile, save_flow2tactile, train_flow2tactile_pipeline, F2tMetrics, F2tReport};
pub use policy::{
    postprocess_actions, run_inference, sparse_from_dense, ActionSeries, ActionStats, FbiPolicy, ObsRef, PolicyObs,
    PolicySpec,
};
pub use protocol::{eval_seed, run_protocol, SeedRun};
pub use train::{build_samples, load_policy, save_policy, train_policy, Sample, TrainReport, TrainState};
