use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{TactileRepr, TrainConfig};
use super::f2t::{f2t_from_checkpoint, f2t_push, f2t_spec_json};
use super::policy::{sparse_from_dense, ActionStats, FbiPolicy, ObsRef, PolicySpec};
use crate::diffnet::{
    chunked_gradients, optimizer_step, AdamConfig, AdamState, Checkpoint, Graph, Tensor,
};
use crate::error::{config, Error, Result};
use crate::geom::KeypointLayout;
use crate::perception::TactileMode;
use crate::rng;
use crate::shortcut::{shortcut_losses, ShortcutDraw};
use crate::toyenv::{Trajectory, TrajectoryDataset, N_JOINTS};

/// One training window: trajectory index and time step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub traj: usize,
    pub t: usize,
}

/// Every `(trajectory, step)` pair in dataset order.
pub fn build_samples(ds: &TrajectoryDataset) -> Vec<Sample> {
    ds.trajectories
        .iter()
        .enumerate()
        .flat_map(|(traj, tr)| (0..tr.len()).map(move |t| Sample { traj, t }))
        .collect()
}

/// Dataset readings converted to the policy's representation.
pub(crate) fn tactile_input(
    repr: TactileRepr,
    layout: &KeypointLayout,
    stored: TactileMode,
    raw: &[f64],
) -> Result<Option<Vec<f64>>> {
    let binary = || raw.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    Ok(match repr {
        TactileRepr::None => None,
        TactileRepr::DenseBinary => Some(binary()),
        TactileRepr::Sparse => Some(sparse_from_dense(layout, &binary())),
        TactileRepr::DenseContinuous => {
            if stored != TactileMode::Continuous {
                return Err(config("dense-continuous training needs a dataset with continuous readings"));
            }
            Some(raw.to_vec())
        }
    })
}

/// Joint targets `a_{t..t+H}`, repeating the last action past the end.
fn action_window(tr: &Trajectory, t: usize, horizon: usize) -> Vec<[f64; N_JOINTS]> {
    (0..horizon).map(|h| tr.actions[(t + h).min(tr.len() - 1)]).collect()
}

fn offsets(tr: &Trajectory, t: usize, horizon: usize) -> Vec<f64> {
    let s = tr.states[t];
    action_window(tr, t, horizon).iter().flat_map(|a| (0..N_JOINTS).map(move |j| a[j] - s[j])).collect()
}

struct Prepared<'a> {
    ds: &'a TrajectoryDataset,
    samples: Vec<Sample>,
    tactile: Vec<Option<Vec<f64>>>,
    targets: Vec<Vec<f64>>,
}

impl<'a> Prepared<'a> {
    fn new(policy: &FbiPolicy, ds: &'a TrajectoryDataset) -> Result<Self> {
        let samples = build_samples(ds);
        if samples.is_empty() {
            return Err(config("dataset has no samples"));
        }
        let m = &ds.manifest;
        let env = &policy.spec.env;
        if m.n_p != env.n_points || m.n_k != env.n_keypoints() || m.n_s != N_JOINTS {
            return Err(config(format!(
                "dataset shapes (n_p={}, n_k={}) do not match the policy (n_p={}, n_k={})",
                m.n_p,
                m.n_k,
                env.n_points,
                env.n_keypoints()
            )));
        }
        let tactile = samples
            .iter()
            .map(|s| {
                let tr = &ds.trajectories[s.traj];
                tactile_input(policy.spec.representation, &policy.layout, m.tactile_mode, &tr.tactile[s.t])
            })
            .collect::<Result<_>>()?;
        let h = policy.horizon();
        let targets = samples
            .iter()
            .map(|s| {
                let tr = &ds.trajectories[s.traj];
                policy.encode_actions(&tr.states[s.t], &action_window(tr, s.t, h))
            })
            .collect();
        Ok(Self { ds, samples, tactile, targets })
    }

    fn obs(&self, i: usize) -> ObsRef<'_> {
        let s = self.samples[i];
        let tr = &self.ds.trajectories[s.traj];
        let tp = s.t.saturating_sub(1);
        ObsRef {
            s_prev: &tr.states[tp],
            s_cur: &tr.states[s.t],
            p_prev: &tr.clouds[tp],
            p_cur: &tr.clouds[s.t],
            goal: &tr.goal_cloud,
            tactile: self.tactile[i].as_deref(),
        }
    }
}

/// Optimizer progress carried across resumed runs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Epochs completed so far.
    pub epoch: usize,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(policy: &FbiPolicy) -> Self {
        Self { epoch: 0, adam: AdamState::new(&policy.params) }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of every epoch run by this call.
    pub losses: Vec<f64>,
    /// `(epoch, success rate)` from the evaluation hook.
    pub evals: Vec<(usize, f64)>,
}

/// Trains `policy` on `ds` from `state.epoch` up to `cfg.epochs`.
///
/// Action statistics are fitted on the first epoch only. After every
/// `cfg.eval_every` epochs `hook(epoch, policy)` may return a success rate
/// for the report. Batches, permutations and noise are derived from `seed`
/// and the epoch, so a resumed run matches an uninterrupted one.
pub fn train_policy<F>(
    policy: &mut FbiPolicy,
    state: &mut TrainState,
    ds: &TrajectoryDataset,
    cfg: &TrainConfig,
    seed: u64,
    mut hook: F,
) -> Result<TrainReport>
where
    F: FnMut(usize, &FbiPolicy) -> Result<Option<f64>>,
{
    if cfg.batch == 0 || cfg.chunk == 0 {
        return Err(config("batch and chunk must be positive"));
    }
    if state.epoch == 0 {
        let h = policy.horizon();
        let rows: Vec<Vec<f64>> = build_samples(ds)
            .iter()
            .map(|s| offsets(&ds.trajectories[s.traj], s.t, h))
            .collect();
        policy.stats = ActionStats::fit(&rows)?;
    }
    let data = Prepared::new(policy, ds)?;
    let mut adam = AdamConfig { lr: cfg.lr, clip_norm: Some(cfg.clip_norm), ..AdamConfig::default() };
    let (rows, cols) = policy.model.data_shape();
    let mut report = TrainReport::default();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch as u64;
        if cfg.cosine {
            adam.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * state.epoch as f64 / cfg.epochs as f64).cos());
        }
        let mut order: Vec<usize> = (0..data.samples.len()).collect();
        order.shuffle(&mut rng::seeded(seed, &[0x7A1, epoch]));
        let mut sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch).enumerate() {
            let p: &FbiPolicy = policy;
            let (grads, loss) = chunked_gradients(&p.params, batch.len(), cfg.chunk, |r| {
                let idx = &batch[r.clone()];
                let mut rr = rng::seeded(seed, &[0x7A2, epoch, b as u64, r.start as u64]);
                let draw = ShortcutDraw::sample(&p.model, idx.len(), &mut rr);
                let obs: Vec<ObsRef<'_>> = idx.iter().map(|&i| data.obs(i)).collect();
                let x1: Vec<f64> = idx.iter().flat_map(|&i| data.targets[i].iter().copied()).collect();
                let x1 = Tensor::from_vec(idx.len() * rows, cols, x1);
                let mut g = Graph::new(&p.params);
                let c = p.condition(&mut g, &obs)?;
                let cp = p.model.net.project_cond(&mut g, c);
                let l = shortcut_losses(&p.model, &mut g, &x1, None, &cp, &draw)?;
                let total = g.add(l.fm, l.sc);
                Ok((g.backward(total), g.value(total).item()))
            })?;
            optimizer_step(&mut policy.params, &grads, &mut state.adam, &adam)?;
            sum += loss * batch.len() as f64;
        }
        report.losses.push(sum / data.samples.len() as f64);
        state.epoch += 1;
        if state.epoch % cfg.eval_every == 0 {
            if let Some(sr) = hook(state.epoch, policy)? {
                report.evals.push((state.epoch, sr));
            }
        }
    }
    Ok(report)
}

const POLICY_KIND: &str = "fbi-policy";

/// Writes the policy, its action statistics, any attached Flow2Tactile and
/// optionally the optimizer state to one checkpoint file.
pub fn save_policy(path: &Path, policy: &FbiPolicy, state: Option<&TrainState>) -> Result<()> {
    let spec = json!({
        "kind": POLICY_KIND,
        "policy": policy.spec,
        "stats": { "mean": policy.stats.mean, "std": policy.stats.std },
        "epoch": state.map(|s| s.epoch),
        "adam_step": state.map(|s| s.adam.step),
        "f2t": policy.f2t.as_ref().map(f2t_spec_json),
    });
    let mut ck = Checkpoint::new(spec, 0);
    ck.push_store("policy.", &policy.params);
    if let Some(s) = state {
        ck.push_tensors("adam.m.", policy.params.names(), &s.adam.m);
        ck.push_tensors("adam.v.", policy.params.names(), &s.adam.v);
    }
    if let Some(f) = &policy.f2t {
        f2t_push(&mut ck, "f2t.", f);
    }
    ck.save(path)
}

/// Inverse of [`save_policy`]; the train state is present when it was saved.
pub fn load_policy(path: &Path) -> Result<(FbiPolicy, Option<TrainState>)> {
    let ck = Checkpoint::load(path)?;
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
    if ck.spec.get("kind").and_then(|k| k.as_str()) != Some(POLICY_KIND) {
        return Err(bad("not a policy checkpoint"));
    }
    let spec: PolicySpec = serde_json::from_value(ck.spec["policy"].clone()).map_err(|e| bad(&e.to_string()))?;
    let mut policy = FbiPolicy::new(spec, 0)?;
    ck.load_store("policy.", &mut policy.params)?;
    let stats = &ck.spec["stats"];
    let vec_of = |v: &serde_json::Value| -> Result<Vec<f64>> {
        serde_json::from_value(v.clone()).map_err(|e| bad(&e.to_string()))
    };
    policy.stats = ActionStats { mean: vec_of(&stats["mean"])?, std: vec_of(&stats["std"])? };
    if policy.stats.mean.len() != policy.horizon() * N_JOINTS || policy.stats.std.len() != policy.stats.mean.len() {
        return Err(bad("action statistics have the wrong length"));
    }
    if !ck.spec["f2t"].is_null() {
        let f = f2t_from_checkpoint(&ck, &ck.spec["f2t"], "f2t.").map_err(|e| bad(&e.to_string()))?;
        policy.attach_flow2tactile(f)?;
    }
    let state = match (ck.spec["epoch"].as_u64(), ck.spec["adam_step"].as_u64()) {
        (Some(epoch), Some(step)) => {
            let names = policy.params.names().to_vec();
            Some(TrainState {
                epoch: epoch as usize,
                adam: AdamState { m: ck.tensors("adam.m.", &names)?, v: ck.tensors("adam.v.", &names)?, step },
            })
        }
        _ => None,
    };
    Ok((policy, state))
}
