use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{EvalConfig, PolicyMode, TactileRepr};
use super::policy::{postprocess_actions, run_inference, FbiPolicy, ObsRef, PolicyObs};
use super::train::tactile_input;
use crate::error::{invalid, Error, Result};
use crate::perception::{RobotState, TactileMode};
use crate::rng::derive_seed;
use crate::toyenv::{Episode, Observation, Task};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub inferences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeResult>,
    pub success_rate: f64,
    /// Velocity-net evaluations per action inference.
    pub nfe: f64,
    pub latency_ms: Option<f64>,
}

/// Mean of the `k` largest values, or of all of them when fewer.
pub fn top_k_mean(values: &[f64], k: usize) -> Result<f64> {
    if values.is_empty() || k == 0 {
        return Err(invalid("top-k mean needs values and k > 0"));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let k = k.min(v.len());
    Ok(v[..k].iter().sum::<f64>() / k as f64)
}

fn episode_seed(base: u64, e: usize) -> u64 {
    derive_seed(base, &[0xE7A1, e as u64])
}

fn tactile_for(policy: &FbiPolicy, o: &Observation) -> Result<Option<Vec<f64>>> {
    match policy.spec.representation {
        TactileRepr::DenseContinuous => tactile_input(policy.spec.representation, &policy.layout, TactileMode::Continuous, &o.forces),
        r => {
            let bits: Vec<f64> = o.r_gt.iter().map(|&c| f64::from(u8::from(c))).collect();
            tactile_input(r, &policy.layout, TactileMode::Binary, &bits)
        }
    }
}

struct Running {
    ep: Episode,
    seed: u64,
    inferences: usize,
    done: bool,
}

/// Runs episodes `range` in lockstep: every still-running episode gets one
/// batched inference per round.
fn run_chunk(policy: &FbiPolicy, task: Task, cfg: &EvalConfig, base: u64, range: std::ops::Range<usize>) -> Result<(Vec<EpisodeResult>, usize)> {
    let env = &policy.spec.env;
    let mut eps = range
        .map(|e| {
            let seed = episode_seed(base, e);
            Ok(Running { ep: Episode::reset(env, task, seed)?, seed, inferences: 0, done: false })
        })
        .collect::<Result<Vec<_>>>()?;
    for r in eps.iter_mut() {
        r.done = r.ep.success();
    }
    let mut rounds = 0;
    loop {
        let active: Vec<usize> = (0..eps.len()).filter(|&i| !eps[i].done).collect();
        if active.is_empty() {
            break;
        }
        let obs: Vec<Observation> = active.iter().map(|&i| eps[i].ep.observe()).collect::<Result<_>>()?;
        let seeds: Vec<u64> = active.iter().map(|&i| derive_seed(eps[i].seed, &[0xAC, eps[i].ep.step as u64])).collect();
        let mut refs: Vec<ObsRef<'_>> = obs
            .iter()
            .map(|o| ObsRef {
                s_prev: &o.s_prev,
                s_cur: &o.s_cur,
                p_prev: &o.p_prev,
                p_cur: &o.p_cur,
                goal: &o.goal_cloud,
                tactile: None,
            })
            .collect();
        let tactile: Vec<Option<Vec<f64>>> = match (policy.spec.mode, policy.spec.representation) {
            (_, TactileRepr::None) => vec![None; obs.len()],
            (PolicyMode::VisionOnly, _) => {
                policy.infer_tactile(&refs, seeds[0], 1)?.into_iter().map(Some).collect()
            }
            (PolicyMode::Visuotactile, _) => obs.iter().map(|o| tactile_for(policy, o)).collect::<Result<_>>()?,
        };
        for (r, t) in refs.iter_mut().zip(&tactile) {
            r.tactile = t.as_deref();
        }
        let actions = policy.act_batch(&refs, cfg.n_steps, &seeds)?;
        rounds += 1;
        for (k, &i) in active.iter().enumerate() {
            let run = &mut eps[i];
            run.inferences += 1;
            let prev = RobotState::new(run.ep.state.q.to_vec())?;
            let rows = postprocess_actions(&actions[k][..cfg.exec_actions], &prev, cfg.ema_alpha, cfg.k_interp)?;
            for a in rows {
                match run.ep.step(&a) {
                    Ok(()) => {}
                    Err(Error::NonFinite(_)) => {
                        run.done = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
                if run.ep.success() || run.ep.step >= env.max_steps || !run.ep.object_in_workspace() {
                    run.done = true;
                    break;
                }
            }
        }
    }
    let results = eps
        .iter()
        .map(|r| EpisodeResult { seed: r.seed, success: r.ep.success(), steps: r.ep.step, inferences: r.inferences })
        .collect();
    Ok((results, rounds))
}

/// Closed-loop success rate over `cfg.episodes` episodes seeded from
/// `base_seed`. Results do not depend on the worker count.
pub fn evaluate_policy(policy: &FbiPolicy, task: Task, cfg: &EvalConfig, base_seed: u64) -> Result<EvalReport> {
    if cfg.episodes == 0 || cfg.chunk == 0 || cfg.exec_actions == 0 || cfg.exec_actions > policy.horizon() {
        return Err(invalid("need episodes, a chunk size and 1..=horizon executed actions"));
    }
    let calls_before = policy.model.net.calls();
    let start = Instant::now();
    let chunks = cfg.episodes.div_ceil(cfg.chunk);
    let parts = crate::par::map_indexed(chunks, |c| {
        run_chunk(policy, task, cfg, base_seed, c * cfg.chunk..((c + 1) * cfg.chunk).min(cfg.episodes))
    });
    let elapsed = start.elapsed().as_secs_f64();
    let mut episodes = Vec::with_capacity(cfg.episodes);
    let mut rounds = 0;
    for p in parts {
        let (e, r) = p?;
        episodes.extend(e);
        rounds += r;
    }
    let successes = episodes.iter().filter(|e| e.success).count();
    let inferences: usize = episodes.iter().map(|e| e.inferences).sum();
    let calls = policy.model.net.calls() - calls_before;
    let nfe = if rounds == 0 { 0.0 } else { calls as f64 / rounds as f64 };
    Ok(EvalReport {
        success_rate: successes as f64 / episodes.len() as f64,
        episodes,
        nfe,
        latency_ms: (cfg.timing && inferences > 0).then(|| 1e3 * elapsed / inferences as f64),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub n_steps: usize,
    /// Velocity-net evaluations per inference.
    pub nfe: usize,
    /// Median wall-clock time of one inference.
    pub median_ms: f64,
}

/// Times `repeats` single-observation inferences after one warm-up call.
pub fn measure_latency(policy: &FbiPolicy, obs: &PolicyObs, n_steps: usize, repeats: usize) -> Result<LatencyReport> {
    if repeats == 0 {
        return Err(invalid("need at least one repeat"));
    }
    run_inference(policy, obs, n_steps, 0)?;
    let mut times = Vec::with_capacity(repeats);
    let mut calls = 0;
    for r in 0..repeats {
        let before = policy.model.net.calls();
        let start = Instant::now();
        run_inference(policy, obs, n_steps, r as u64)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        calls = policy.model.net.calls() - before;
    }
    times.sort_by(f64::total_cmp);
    Ok(LatencyReport { n_steps, nfe: calls, median_ms: times[repeats / 2] })
}

/// Evaluation protocol result: per-seed top-k means and their spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    /// `(seed, top-k mean)` per seed.
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    /// Population standard deviation across seeds.
    pub std: f64,
}

/// Top-`k` mean of each seed's checkpoint success rates, then mean and
/// spread across seeds.
pub fn summarize_protocol(series: &[(u64, Vec<f64>)], top_k: usize) -> Result<ProtocolSummary> {
    if series.is_empty() {
        return Err(invalid("no seeds to summarize"));
    }
    let per_seed = series.iter().map(|(s, v)| Ok((*s, top_k_mean(v, top_k)?))).collect::<Result<Vec<_>>>()?;
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().map(|p| p.1).sum::<f64>() / n;
    let std = (per_seed.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(ProtocolSummary { per_seed, mean, std })
}
