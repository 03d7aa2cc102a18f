use super::config::RunConfig;
use super::eval::{evaluate_policy, summarize_protocol, ProtocolSummary};
use super::policy::{FbiPolicy, PolicySpec};
use super::train::{train_policy, TrainReport, TrainState};
use crate::error::Result;
use crate::flow2tactile::Flow2Tactile;
use crate::rng::derive_seed;
use crate::toyenv::TrajectoryDataset;

/// One seed of a protocol run.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub report: TrainReport,
    pub policy: FbiPolicy,
}

/// Seed used for the evaluation episodes of training seed `seed`.
pub fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, &[0xE5E])
}

/// Trains one policy per seed in `cfg.train.seeds`, evaluating every
/// `cfg.train.eval_every` epochs, and summarizes the top-k means.
///
/// A run shorter than `eval_every` epochs is evaluated once at the end.
pub fn run_protocol(cfg: &RunConfig, ds: &TrajectoryDataset, f2t: Option<&Flow2Tactile>) -> Result<(ProtocolSummary, Vec<SeedRun>)> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.train.seeds.len());
    let mut series = Vec::with_capacity(cfg.train.seeds.len());
    for &seed in &cfg.train.seeds {
        let mut policy = FbiPolicy::new(PolicySpec::from_run(cfg), derive_seed(seed, &[0x90]))?;
        if let Some(f) = f2t {
            policy.attach_flow2tactile(f.clone())?;
        }
        let mut state = TrainState::new(&policy);
        let mut report = train_policy(&mut policy, &mut state, ds, &cfg.train, seed, |_, p| {
            Ok(Some(evaluate_policy(p, cfg.task, &cfg.eval, eval_seed(seed))?.success_rate))
        })?;
        if report.evals.is_empty() {
            let sr = evaluate_policy(&policy, cfg.task, &cfg.eval, eval_seed(seed))?.success_rate;
            report.evals.push((state.epoch, sr));
        }
        series.push((seed, report.evals.iter().map(|e| e.1).collect()));
        runs.push(SeedRun { seed, report, policy });
    }
    Ok((summarize_protocol(&series, cfg.train.top_k)?, runs))
}
