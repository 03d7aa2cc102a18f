use rand::Rng as _;
use serde::Serialize;

use super::config::{PolicyConfig, PolicyMode, TactileRepr};
use super::policy::{FbiPolicy, ObsRef, PolicySpec};
use crate::diffnet::{grad_check, GradCheckReport, Graph, NetSpec, ParamInit, ParamStore, Tensor, VelocityNetSpec};
use crate::error::Result;
use crate::flow2tactile::{FlowSpec, HeadSpec, SearchInput, SearchMode};
use crate::geom::Point;
use crate::perception::{FusionMethod, PointNorm, TactileFrame};
use crate::rng::{self, Rng};
use crate::shortcut::{draw_sc_target, shortcut_losses_with, ShortcutDraw, ShortcutModel};
use crate::toyenv::{ToyConfig, N_JOINTS};

/// Finite-difference step used by the suite.
pub const GRADCHECK_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradSuiteEntry {
    pub name: String,
    pub params: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
}

impl GradSuiteEntry {
    fn new(name: &str, params: &ParamStore, r: GradCheckReport) -> Self {
        Self { name: name.into(), params: params.numel(), max_rel_error: r.max_rel_error, worst: r.worst }
    }
}

fn jitter(store: &mut ParamStore, r: &mut Rng) {
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.4..0.4));
    }
}

fn cloud(n: usize, r: &mut Rng, center: [f64; 3]) -> Vec<Point> {
    (0..n)
        .map(|_| [0, 1, 2].map(|k| center[k] + r.random_range(-0.03..0.03)))
        .collect()
}

fn shortcut_entries(r: &mut Rng) -> Result<Vec<GradSuiteEntry>> {
    let spec = VelocityNetSpec {
        data_rows: 2,
        data_cols: 2,
        per_row: false,
        row_features: 0,
        cond_dim: 3,
        time_dim: 4,
        down: vec![8],
        mid: 8,
        base_steps: 8,
    };
    let mut params = ParamStore::new();
    let model = ShortcutModel::new(spec.build(&mut ParamInit::new(&mut params, 1))?);
    jitter(&mut params, r);
    let batch = 3;
    let x1 = Tensor::from_vec(batch * 2, 2, (0..batch * 4).map(|_| r.random_range(-1.0..1.0)).collect());
    let cond = Tensor::from_vec(batch, 3, (0..batch * 3).map(|_| r.random_range(-1.0..1.0)).collect());
    let draw = ShortcutDraw::sample(&model, batch, r);
    let target = {
        let mut g = Graph::new(&params);
        let c = g.constant(cond.clone());
        let cache = model.net.project_cond(&mut g, c).detach(&g);
        draw_sc_target(&model, &params, &x1, None, &cache, &draw)?
    };
    let mut out = Vec::new();
    for (name, fm) in [("shortcut flow matching", true), ("shortcut self-consistency", false)] {
        let rep = grad_check(&params, GRADCHECK_EPS, |g| {
            let c = g.constant(cond.clone());
            let cp = model.net.project_cond(g, c);
            let l = shortcut_losses_with(&model, g, &x1, None, &cp, &draw, &target)?;
            Ok(if fm { l.fm } else { l.sc })
        })?;
        out.push(GradSuiteEntry::new(name, &params, rep));
    }
    Ok(out)
}

fn flow_entries(r: &mut Rng) -> Result<Vec<GradSuiteEntry>> {
    let spec = FlowSpec {
        n_points: 6,
        hidden: 4,
        d_v: 4,
        time_dim: 4,
        widths: vec![6],
        mid: 6,
        base_steps: 8,
        norm: PointNorm::default(),
        flow_scale: 0.005,
    };
    let mut params = ParamStore::new();
    let model = spec.build(&mut ParamInit::new(&mut params, 2))?;
    jitter(&mut params, r);
    let clouds: Vec<(Vec<Point>, Vec<Point>)> =
        (0..2).map(|_| (cloud(6, r, [0.0, 0.08, 0.0]), cloud(6, r, [0.0, 0.085, 0.0]))).collect();
    let pairs: Vec<(&[Point], &[Point])> = clouds.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
    let inp = model.prepare(&pairs)?;
    let draw = ShortcutDraw::sample(&model.shortcut, 2, r);
    let targets = model.targets(&params, &inp, &draw)?;
    let mut out = Vec::new();
    for (name, fm) in [("flow chamfer matching", true), ("flow self-consistency", false)] {
        let rep = grad_check(&params, GRADCHECK_EPS, |g| {
            let l = model.loss_vars_with(g, &inp, &draw, &targets)?;
            Ok(if fm { l.fm } else { l.sc })
        })?;
        out.push(GradSuiteEntry::new(name, &params, rep));
    }
    Ok(out)
}

fn tactile_entry(r: &mut Rng) -> Result<GradSuiteEntry> {
    let spec = HeadSpec {
        n_keypoints: 4,
        n_points: 6,
        width: 4,
        heads: 2,
        layers: 1,
        mode: SearchMode::Flow,
        norm: PointNorm::default(),
        flow_scale: 0.005,
    };
    let mut params = ParamStore::new();
    let head = spec.build(&mut ParamInit::new(&mut params, 3))?;
    jitter(&mut params, r);
    let kp = cloud(4, r, [0.0, 0.08, 0.0]);
    let prev = cloud(6, r, [0.0, 0.08, 0.0]);
    let flow = cloud(6, r, [0.0, 0.0, 0.0]).iter().map(|p| p.map(|v| v * 0.1)).collect::<Vec<_>>();
    let target = TactileFrame::binary(&[true, false, false, true]);
    let rep = grad_check(&params, GRADCHECK_EPS, |g| {
        head.loss_var(g, &[SearchInput { keypoints: &kp, p_prev: &prev, motion: &flow }], &[&target])
    })?;
    Ok(GradSuiteEntry::new("tactile search mse", &params, rep))
}

fn policy_entries(r: &mut Rng) -> Result<Vec<GradSuiteEntry>> {
    let env = ToyConfig { n_points: 8, material_points: 16, goal_points: 4, ..ToyConfig::default() };
    let spec = PolicySpec {
        mode: PolicyMode::Visuotactile,
        representation: TactileRepr::DenseBinary,
        fusion: FusionMethod::Transformer,
        policy: PolicyConfig {
            horizon: 2,
            hidden: 4,
            d_s: 4,
            d_v: 8,
            d_tac: 8,
            token_width: 4,
            heads: 2,
            time_dim: 4,
            widths: vec![8],
            mid: 8,
            base_steps: 8,
            norm: PointNorm::default(),
        },
        env,
    };
    let mut policy = FbiPolicy::new(spec, 4)?;
    jitter(&mut policy.params, r);
    let n_k = policy.spec.env.n_keypoints();
    let states: Vec<[f64; N_JOINTS]> = (0..4).map(|_| [0; N_JOINTS].map(|_| r.random_range(-1.0..1.0))).collect();
    let clouds: Vec<Vec<Point>> = (0..4).map(|_| cloud(8, r, [0.0, 0.1, 0.0])).collect();
    let goal = cloud(4, r, [0.0, 0.12, 0.02]);
    let tactile: Vec<Vec<f64>> =
        (0..2).map(|_| (0..n_k).map(|_| f64::from(u8::from(r.random_bool(0.3)))).collect()).collect();
    let obs: Vec<ObsRef<'_>> = (0..2)
        .map(|i| ObsRef {
            s_prev: &states[2 * i],
            s_cur: &states[2 * i + 1],
            p_prev: &clouds[2 * i],
            p_cur: &clouds[2 * i + 1],
            goal: &goal,
            tactile: Some(&tactile[i]),
        })
        .collect();
    let (rows, cols) = policy.model.data_shape();
    let x1 = Tensor::from_vec(2 * rows, cols, (0..2 * rows * cols).map(|_| r.random_range(-1.0..1.0)).collect());
    let draw = ShortcutDraw::sample(&policy.model, 2, r);
    let target = {
        let mut g = Graph::new(&policy.params);
        let c = policy.condition(&mut g, &obs)?;
        let cache = policy.model.net.project_cond(&mut g, c).detach(&g);
        draw_sc_target(&policy.model, &policy.params, &x1, None, &cache, &draw)?
    };
    let mut out = Vec::new();
    for (name, fm) in [("policy flow matching", true), ("policy self-consistency", false)] {
        let rep = grad_check(&policy.params, GRADCHECK_EPS, |g| {
            let c = policy.condition(g, &obs)?;
            let cp = policy.model.net.project_cond(g, c);
            let l = shortcut_losses_with(&policy.model, g, &x1, None, &cp, &draw, &target)?;
            Ok(if fm { l.fm } else { l.sc })
        })?;
        out.push(GradSuiteEntry::new(name, &policy.params, rep));
    }
    Ok(out)
}

/// Reverse-mode against central differences for every training loss, on
/// small nets with random weights.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradSuiteEntry>> {
    let mut r = rng::seeded(seed, &[0x6C]);
    let mut out = shortcut_entries(&mut r)?;
    out.extend(flow_entries(&mut r)?);
    out.push(tactile_entry(&mut r)?);
    out.extend(policy_entries(&mut r)?);
    Ok(out)
}
