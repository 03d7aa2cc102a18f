use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::F2tConfig;
use crate::diffnet::{chunked_gradients, optimizer_step, AdamConfig, AdamState, Checkpoint, Graph, NetSpec, ParamInit, ParamStore};
use crate::error::{config, invalid, Error, Result};
use crate::flow2tactile::{Flow2Tactile, FlowSpec, HeadSpec, SearchInput, SearchMode};
use crate::geom::{keypoint_positions, Point};
use crate::perception::{PointNorm, TactileFrame};
use crate::rng;
use crate::shortcut::ShortcutDraw;
use crate::toyenv::{ToyConfig, TrajectoryDataset};

/// Binary-contact agreement over every keypoint of every frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F2tMetrics {
    pub frames: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F2tMetrics {
    pub fn from_counts(frames: usize, tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { frames, accuracy: ratio(tp + tn, tp + fp + tn + fn_), precision, recall, f1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F2tReport {
    pub flow_losses: Vec<f64>,
    pub head_losses: Vec<f64>,
    pub train: F2tMetrics,
    pub holdout: F2tMetrics,
}

struct Frame<'a> {
    keypoints: Vec<Point>,
    p_prev: &'a [Point],
    p_cur: &'a [Point],
    target: TactileFrame,
}

fn frames<'a>(ds: &'a TrajectoryDataset, env: &ToyConfig, trajs: std::ops::Range<usize>) -> Result<Vec<Frame<'a>>> {
    let chain = env.chain();
    let layout = env.keypoint_layout()?;
    let mut out = Vec::new();
    for tr in &ds.trajectories[trajs] {
        for t in 1..tr.len() {
            let bits: Vec<bool> = tr.tactile[t].iter().map(|&v| v > 0.0).collect();
            out.push(Frame {
                keypoints: keypoint_positions(&chain, &layout, &tr.states[t])?,
                p_prev: &tr.clouds[t - 1],
                p_cur: &tr.clouds[t],
                target: TactileFrame::binary(&bits),
            });
        }
    }
    Ok(out)
}

fn metrics(f2t: &Flow2Tactile, frames: &[Frame<'_>], motions: &[Vec<Point>]) -> Result<F2tMetrics> {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (chunk, mot) in frames.chunks(32).zip(motions.chunks(32)) {
        let inputs: Vec<SearchInput<'_>> = chunk
            .iter()
            .zip(mot)
            .map(|(f, m)| SearchInput { keypoints: &f.keypoints, p_prev: f.p_prev, motion: m })
            .collect();
        for (out, f) in f2t.head.search_batch(&f2t.head_params, &inputs)?.iter().zip(chunk) {
            for (&p, &r) in out.readings.readings().iter().zip(f.target.readings()) {
                match (p > 0.0, r > 0.0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, false) => tn += 1,
                    (false, true) => fn_ += 1,
                }
            }
        }
    }
    Ok(F2tMetrics::from_counts(frames.len(), tp, fp, tn, fn_))
}

/// Head inputs: predicted flow in flow mode, the second cloud in pc mode.
fn motions(f2t: &Flow2Tactile, frames: &[Frame<'_>], n_steps: usize, seed: u64) -> Result<Vec<Vec<Point>>> {
    if f2t.head.spec.mode == SearchMode::Pc {
        return Ok(frames.iter().map(|f| f.p_cur.to_vec()).collect());
    }
    let batches: Vec<&[Frame<'_>]> = frames.chunks(16).collect();
    let parts = crate::par::map_indexed(batches.len(), |b| {
        let pairs: Vec<(&[Point], &[Point])> = batches[b].iter().map(|f| (f.p_prev, f.p_cur)).collect();
        f2t.flow.predict_batch(&f2t.flow_params, &pairs, n_steps, rng::derive_seed(seed, &[0xF10, b as u64]))
    });
    let mut out = Vec::with_capacity(frames.len());
    for p in parts {
        out.extend(p?.into_iter().map(|f| f.displacements().to_vec()));
    }
    Ok(out)
}

pub(crate) fn build_f2t(flow: &FlowSpec, head: &HeadSpec, seed: u64) -> Result<Flow2Tactile> {
    let mut flow_params = ParamStore::new();
    let flow_model = flow.build(&mut ParamInit::new(&mut flow_params, rng::derive_seed(seed, &[0xF1])))?;
    let mut head_params = ParamStore::new();
    let head_model = head.build(&mut ParamInit::new(&mut head_params, rng::derive_seed(seed, &[0xF2])))?;
    Ok(Flow2Tactile { flow: flow_model, flow_params, head: head_model, head_params })
}

/// Two-stage training: the flow generator on cloud pairs, then the search
/// head on frozen one-shot flows.
///
/// The trailing `cfg.holdout` share of trajectories is held out. Head
/// batches draw `cfg.contact_fraction` of their frames from frames with at
/// least one contact.
pub fn train_flow2tactile_pipeline(
    ds: &TrajectoryDataset,
    env: &ToyConfig,
    cfg: &F2tConfig,
    norm: PointNorm,
    seed: u64,
) -> Result<(Flow2Tactile, F2tReport)> {
    let n = ds.trajectories.len();
    let held = ((n as f64 * cfg.holdout).ceil() as usize).min(n.saturating_sub(1));
    let train = frames(ds, env, 0..n - held)?;
    let test = frames(ds, env, n - held..n)?;
    if train.is_empty() {
        return Err(config("no training frames for Flow2Tactile"));
    }
    let mut f2t = build_f2t(&cfg.flow_spec(env, norm), &cfg.head_spec(env, norm), seed)?;
    let adam = AdamConfig { lr: cfg.lr, clip_norm: Some(1.0), ..AdamConfig::default() };
    let mut report = F2tReport::default();
    let chunk = 8;

    if cfg.mode == SearchMode::Flow {
        let mut state = AdamState::new(&f2t.flow_params);
        for epoch in 0..cfg.flow_epochs as u64 {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng::seeded(seed, &[0xF3, epoch]));
            let mut sum = 0.0;
            for (b, batch) in order.chunks(cfg.batch).enumerate() {
                let model = &f2t.flow;
                let (grads, loss) = chunked_gradients(&f2t.flow_params, batch.len(), chunk, |r| {
                    let pairs: Vec<(&[Point], &[Point])> =
                        batch[r.clone()].iter().map(|&i| (train[i].p_prev, train[i].p_cur)).collect();
                    let inp = model.prepare(&pairs)?;
                    let mut rr = rng::seeded(seed, &[0xF4, epoch, b as u64, r.start as u64]);
                    let draw = ShortcutDraw::sample(&model.shortcut, pairs.len(), &mut rr);
                    let mut g = Graph::new(&f2t.flow_params);
                    let l = model.loss_vars(&mut g, &inp, &draw)?;
                    let total = g.add(l.fm, l.sc);
                    Ok((g.backward(total), g.value(total).item()))
                })?;
                optimizer_step(&mut f2t.flow_params, &grads, &mut state, &adam)?;
                sum += loss * batch.len() as f64;
            }
            report.flow_losses.push(sum / train.len() as f64);
        }
    }

    let train_motion = motions(&f2t, &train, cfg.flow_steps, rng::derive_seed(seed, &[0xF5]))?;
    let contact: Vec<usize> = (0..train.len()).filter(|&i| train[i].target.readings().iter().any(|&r| r > 0.0)).collect();
    let n_contact = if contact.is_empty() { 0 } else { (cfg.contact_fraction * cfg.batch as f64).round() as usize };
    let mut state = AdamState::new(&f2t.head_params);
    let batches = train.len().div_ceil(cfg.batch);
    for epoch in 0..cfg.head_epochs as u64 {
        let mut sum = 0.0;
        for b in 0..batches as u64 {
            let mut rr = rng::seeded(seed, &[0xF6, epoch, b]);
            let idx: Vec<usize> = (0..cfg.batch)
                .map(|k| {
                    if k < n_contact {
                        contact[rr.random_range(0..contact.len())]
                    } else {
                        rr.random_range(0..train.len())
                    }
                })
                .collect();
            let head = &f2t.head;
            let (grads, loss) = chunked_gradients(&f2t.head_params, idx.len(), chunk, |r| {
                let ids = &idx[r];
                let inputs: Vec<SearchInput<'_>> = ids
                    .iter()
                    .map(|&i| SearchInput { keypoints: &train[i].keypoints, p_prev: train[i].p_prev, motion: &train_motion[i] })
                    .collect();
                let targets: Vec<&TactileFrame> = ids.iter().map(|&i| &train[i].target).collect();
                let mut g = Graph::new(&f2t.head_params);
                let l = head.loss_var(&mut g, &inputs, &targets)?;
                Ok((g.backward(l), g.value(l).item()))
            })?;
            optimizer_step(&mut f2t.head_params, &grads, &mut state, &adam)?;
            sum += loss;
        }
        report.head_losses.push(sum / batches as f64);
    }

    report.train = metrics(&f2t, &train, &train_motion)?;
    if !test.is_empty() {
        let test_motion = motions(&f2t, &test, cfg.flow_steps, rng::derive_seed(seed, &[0xF7]))?;
        report.holdout = metrics(&f2t, &test, &test_motion)?;
    }
    Ok((f2t, report))
}

pub(crate) fn f2t_spec_json(f: &Flow2Tactile) -> serde_json::Value {
    json!({ "flow": f.flow.spec, "head": f.head.spec })
}

pub(crate) fn f2t_push(ck: &mut Checkpoint, prefix: &str, f: &Flow2Tactile) {
    ck.push_store(&format!("{prefix}flow."), &f.flow_params);
    ck.push_store(&format!("{prefix}head."), &f.head_params);
}

pub(crate) fn f2t_from_checkpoint(ck: &Checkpoint, spec: &serde_json::Value, prefix: &str) -> Result<Flow2Tactile> {
    let flow: FlowSpec = serde_json::from_value(spec["flow"].clone()).map_err(|e| Error::Config(e.to_string()))?;
    let head: HeadSpec = serde_json::from_value(spec["head"].clone()).map_err(|e| Error::Config(e.to_string()))?;
    if flow.n_points != head.n_points {
        return Err(invalid("flow and head point counts differ"));
    }
    let mut f = build_f2t(&flow, &head, 0)?;
    ck.load_store(&format!("{prefix}flow."), &mut f.flow_params)?;
    ck.load_store(&format!("{prefix}head."), &mut f.head_params)?;
    Ok(f)
}

const F2T_KIND: &str = "flow2tactile";

pub fn save_flow2tactile(path: &Path, f: &Flow2Tactile) -> Result<()> {
    let mut spec = f2t_spec_json(f);
    spec["kind"] = json!(F2T_KIND);
    let mut ck = Checkpoint::new(spec, 0);
    f2t_push(&mut ck, "", f);
    ck.save(path)
}

pub fn load_flow2tactile(path: &Path) -> Result<Flow2Tactile> {
    let ck = Checkpoint::load(path)?;
    if ck.spec.get("kind").and_then(|k| k.as_str()) != Some(F2T_KIND) {
        return Err(Error::Format { path: path.to_path_buf(), reason: "not a Flow2Tactile checkpoint".into() });
    }
    f2t_from_checkpoint(&ck, &ck.spec, "")
}
