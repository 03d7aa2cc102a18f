use serde::{Deserialize, Serialize};

use super::config::{PolicyConfig, PolicyMode, RunConfig, TactileRepr};
use crate::diffnet::{Graph, NetSpec, ParamInit, ParamStore, Tensor, Var, VelocityNetSpec};
use crate::error::{config, invalid, Result};
use crate::flow2tactile::Flow2Tactile;
use crate::geom::{keypoint_positions, KeypointLayout, KinematicChain, Point};
use crate::perception::{Encoders, FusionMethod, PerceptionSpec, RobotState, TactileFrame};
use crate::rng;
use crate::shortcut::{euler_sample_from, standard_normal, ShortcutModel};
use crate::toyenv::{ToyConfig, MAX_FORCE, N_JOINTS};

/// Everything needed to rebuild a policy's networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub mode: PolicyMode,
    pub representation: TactileRepr,
    pub fusion: FusionMethod,
    pub policy: PolicyConfig,
    pub env: ToyConfig,
}

impl PolicySpec {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            mode: cfg.mode,
            representation: cfg.representation,
            fusion: cfg.fusion,
            policy: cfg.policy.clone(),
            env: cfg.env.clone(),
        }
    }

    /// Readings per tactile frame fed to the encoder.
    pub fn n_r(&self) -> usize {
        match self.representation {
            TactileRepr::DenseBinary | TactileRepr::DenseContinuous => self.env.n_keypoints(),
            TactileRepr::Sparse => 4,
            TactileRepr::None => 0,
        }
    }

    pub fn perception(&self) -> PerceptionSpec {
        let p = &self.policy;
        PerceptionSpec {
            n_s: N_JOINTS,
            n_r: self.n_r(),
            points_per_frame: self.env.n_points + self.env.goal_points,
            d_s: p.d_s,
            d_v: p.d_v,
            d_tac: p.d_tac,
            hidden: p.hidden,
            token_width: p.token_width,
            heads: p.heads,
            fusion: self.fusion,
        }
    }

    pub fn velocity(&self) -> VelocityNetSpec {
        let p = &self.policy;
        VelocityNetSpec {
            data_rows: p.horizon,
            data_cols: N_JOINTS,
            per_row: false,
            row_features: 0,
            cond_dim: self.perception().cond_dim(),
            time_dim: p.time_dim,
            down: p.widths.clone(),
            mid: p.mid,
            base_steps: p.base_steps,
        }
    }
}

/// Per-coordinate normalization of action offsets `a_{t+h} - s_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ActionStats {
    pub fn identity(n: usize) -> Self {
        Self { mean: vec![0.0; n], std: vec![1.0; n] }
    }

    /// Mean and standard deviation of each coordinate over `rows`, with the
    /// deviation floored at `1e-4`.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().ok_or_else(|| invalid("no samples to fit action statistics"))?.len();
        let count = rows.len() as f64;
        let mut mean = vec![0.0; n];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / count);
        }
        let mut var = vec![0.0; n];
        for r in rows {
            var.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / count);
        }
        Ok(Self { mean, std: var.into_iter().map(|v| v.sqrt().max(1e-4)).collect() })
    }
}

/// One observation window, borrowed.
#[derive(Clone, Copy, Debug)]
pub struct ObsRef<'a> {
    pub s_prev: &'a [f64],
    pub s_cur: &'a [f64],
    pub p_prev: &'a [Point],
    pub p_cur: &'a [Point],
    pub goal: &'a [Point],
    /// Readings already in the policy's representation.
    pub tactile: Option<&'a [f64]>,
}

/// Owned observation handed to [`run_inference`].
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyObs {
    pub s_prev: RobotState,
    pub s_cur: RobotState,
    pub p_prev: Vec<Point>,
    pub p_cur: Vec<Point>,
    pub goal: Vec<Point>,
    pub tactile: Option<TactileFrame>,
}

impl PolicyObs {
    pub fn as_ref(&self) -> ObsRef<'_> {
        ObsRef {
            s_prev: &self.s_prev.joints,
            s_cur: &self.s_cur.joints,
            p_prev: &self.p_prev,
            p_cur: &self.p_cur,
            goal: &self.goal,
            tactile: self.tactile.as_ref().map(|t| t.readings()),
        }
    }
}

/// `horizon` rows of joint targets.
pub type ActionSeries = Vec<Vec<f64>>;

#[derive(Clone, Debug)]
pub struct FbiPolicy {
    pub spec: PolicySpec,
    pub encoders: Encoders,
    pub model: ShortcutModel,
    pub params: ParamStore,
    pub stats: ActionStats,
    pub chain: KinematicChain,
    pub layout: KeypointLayout,
    pub f2t: Option<Flow2Tactile>,
}

/// Per-link OR of dense binary readings.
pub fn sparse_from_dense(layout: &KeypointLayout, dense: &[f64]) -> Vec<f64> {
    let links = layout.entries.iter().map(|e| e.link).max().map_or(0, |m| m + 1);
    let mut out = vec![0.0; links];
    for (e, &r) in layout.entries.iter().zip(dense) {
        if r > 0.0 {
            out[e.link] = 1.0;
        }
    }
    out
}

impl FbiPolicy {
    pub fn new(spec: PolicySpec, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let (encoders, net) = {
            let mut init = ParamInit::new(&mut params, seed);
            let enc = init.scoped("enc", |i| spec.perception().build(i))?;
            let net = init.scoped("velocity", |i| spec.velocity().build(i))?;
            (enc, net)
        };
        let chain = spec.env.chain();
        let layout = spec.env.keypoint_layout()?;
        let n = spec.policy.horizon * N_JOINTS;
        Ok(Self {
            spec,
            encoders,
            model: ShortcutModel::new(net),
            params,
            stats: ActionStats::identity(n),
            chain,
            layout,
            f2t: None,
        })
    }

    pub fn attach_flow2tactile(&mut self, f2t: Flow2Tactile) -> Result<()> {
        let n_k = self.spec.env.n_keypoints();
        if f2t.head.spec.n_keypoints != n_k || f2t.head.spec.n_points != self.spec.env.n_points {
            return Err(config("Flow2Tactile shapes do not match the policy's environment"));
        }
        self.f2t = Some(f2t);
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.spec.policy.horizon
    }

    fn check_obs(&self, o: &ObsRef<'_>) -> Result<()> {
        let env = &self.spec.env;
        if o.s_prev.len() != N_JOINTS || o.s_cur.len() != N_JOINTS {
            return Err(invalid("robot states must have four joints"));
        }
        if o.p_prev.len() != env.n_points || o.p_cur.len() != env.n_points || o.goal.len() != env.goal_points {
            return Err(invalid(format!(
                "expected {} points per frame and {} goal points",
                env.n_points, env.goal_points
            )));
        }
        match (o.tactile, self.spec.n_r()) {
            (_, 0) => Ok(()),
            (Some(t), n) if t.len() == n => Ok(()),
            (Some(t), n) => Err(invalid(format!("tactile frame has {} readings, expected {n}", t.len()))),
            (None, _) => Err(invalid("policy needs a tactile frame")),
        }
    }

    /// `batch x cond_dim` condition `[F_s; F_fuse]`.
    pub fn condition(&self, g: &mut Graph<'_>, obs: &[ObsRef<'_>]) -> Result<Var> {
        let b = obs.len();
        let norm = &self.spec.policy.norm;
        let mut sp = Vec::with_capacity(b * N_JOINTS);
        let mut sc = Vec::with_capacity(b * N_JOINTS);
        let mut pts = Vec::new();
        let mut tac = Vec::new();
        for o in obs {
            self.check_obs(o)?;
            sp.extend_from_slice(o.s_prev);
            sc.extend_from_slice(o.s_cur);
            let frame = |p: &[Point]| p.iter().chain(o.goal).map(|&q| norm.apply(q)).collect::<Vec<_>>();
            self.encoders.visual.pack(&frame(o.p_prev), &frame(o.p_cur), &mut pts)?;
            if let (Some(t), true) = (o.tactile, self.spec.n_r() > 0) {
                let scale = if self.spec.representation == TactileRepr::DenseContinuous { 1.0 / MAX_FORCE } else { 1.0 };
                tac.extend(t.iter().map(|v| v * scale));
            }
        }
        let sp = g.constant(Tensor::from_vec(b, N_JOINTS, sp));
        let sc = g.constant(Tensor::from_vec(b, N_JOINTS, sc));
        let f_s = self.encoders.state_features(g, sp, sc);
        let n_pts = pts.len() / 4;
        let pts = g.constant(Tensor::from_vec(n_pts, 4, pts));
        let f_v = self.encoders.visual.forward(g, pts);
        let f_tac = if self.spec.n_r() > 0 {
            let t = g.constant(Tensor::from_vec(b, self.spec.n_r(), tac));
            Some(self.encoders.tactile_features(g, t)?)
        } else {
            None
        };
        let f_fuse = self.encoders.fuse(g, f_v, f_tac)?;
        Ok(g.concat_cols(&[f_s, f_fuse]))
    }

    /// Normalized training target for one sample.
    pub fn encode_actions(&self, s_cur: &[f64], actions: &[[f64; N_JOINTS]]) -> Vec<f64> {
        let mut out = Vec::with_capacity(actions.len() * N_JOINTS);
        for a in actions {
            for j in 0..N_JOINTS {
                let k = out.len();
                out.push((a[j] - s_cur[j] - self.stats.mean[k]) / self.stats.std[k]);
            }
        }
        out
    }

    fn decode_actions(&self, s_cur: &[f64], x: &[f64]) -> ActionSeries {
        x.chunks(N_JOINTS)
            .enumerate()
            .map(|(h, row)| {
                (0..N_JOINTS)
                    .map(|j| {
                        let k = h * N_JOINTS + j;
                        s_cur[j] + self.stats.mean[k] + self.stats.std[k] * row[j]
                    })
                    .collect()
            })
            .collect()
    }

    /// Action series for a batch; sample `i` starts from noise seeded by
    /// `seeds[i]`, so results do not depend on the batch composition.
    pub fn act_batch(&self, obs: &[ObsRef<'_>], n_steps: usize, seeds: &[u64]) -> Result<Vec<ActionSeries>> {
        if obs.len() != seeds.len() || obs.is_empty() {
            return Err(invalid("need one seed per observation"));
        }
        let cache = {
            let mut g = Graph::new(&self.params);
            let c = self.condition(&mut g, obs)?;
            let cp = self.model.net.project_cond(&mut g, c);
            cp.detach(&g)
        };
        let (rows, cols) = self.model.data_shape();
        let mut x0 = Vec::with_capacity(obs.len() * rows * cols);
        for &s in seeds {
            x0.extend_from_slice(standard_normal(rows, cols, &mut rng::seeded(s, &[0x5A])).data());
        }
        let x0 = Tensor::from_vec(obs.len() * rows, cols, x0);
        let x = euler_sample_from(&self.model, &self.params, &cache, None, n_steps, x0)?;
        Ok(obs
            .iter()
            .enumerate()
            .map(|(i, o)| self.decode_actions(o.s_cur, &x.data()[i * rows * cols..(i + 1) * rows * cols]))
            .collect())
    }

    /// Keypoint positions at joint state `q`.
    pub fn keypoints(&self, q: &[f64]) -> Result<Vec<Point>> {
        keypoint_positions(&self.chain, &self.layout, q)
    }

    /// Contacts inferred by the attached Flow2Tactile, in the policy's
    /// representation.
    pub fn infer_tactile(&self, obs: &[ObsRef<'_>], seed: u64, flow_steps: usize) -> Result<Vec<Vec<f64>>> {
        let f2t = self.f2t.as_ref().ok_or_else(|| config("vision-only mode needs an attached Flow2Tactile"))?;
        let kps = obs.iter().map(|o| self.keypoints(o.s_cur)).collect::<Result<Vec<_>>>()?;
        let frames: Vec<(&[Point], &[Point], &[Point])> =
            obs.iter().zip(&kps).map(|(o, k)| (k.as_slice(), o.p_prev, o.p_cur)).collect();
        let out = f2t.infer_batch(&frames, flow_steps, seed)?;
        Ok(out
            .into_iter()
            .map(|s| match self.spec.representation {
                TactileRepr::Sparse => sparse_from_dense(&self.layout, s.readings.readings()),
                _ => s.readings.readings().to_vec(),
            })
            .collect())
    }
}

/// One action series. In vision-only mode the tactile frame is replaced by
/// the Flow2Tactile prediction; in visuotactile mode it must be supplied.
pub fn run_inference(policy: &FbiPolicy, obs: &PolicyObs, n_steps: usize, seed: u64) -> Result<ActionSeries> {
    let o = obs.as_ref();
    let inferred;
    let o = match (policy.spec.mode, policy.spec.n_r()) {
        (_, 0) => ObsRef { tactile: None, ..o },
        (PolicyMode::VisionOnly, _) => {
            inferred = policy.infer_tactile(&[o], seed, 1)?.remove(0);
            ObsRef { tactile: Some(&inferred), ..o }
        }
        (PolicyMode::Visuotactile, _) => o,
    };
    Ok(policy.act_batch(&[o], n_steps, &[seed])?.remove(0))
}

/// EMA across rows seeded at `prev_joint`, then `k_interp` linear substeps
/// from each previous target to the next.
pub fn postprocess_actions(raw: &[Vec<f64>], prev_joint: &RobotState, alpha: f64, k_interp: usize) -> Result<ActionSeries> {
    if !(alpha > 0.0 && alpha <= 1.0) || k_interp == 0 {
        return Err(invalid("alpha must be in (0, 1] and k_interp positive"));
    }
    if raw.iter().any(|r| r.len() != prev_joint.len()) {
        return Err(invalid("action rows do not match the joint count"));
    }
    let mut out = Vec::with_capacity(raw.len() * k_interp);
    let mut y = prev_joint.joints.clone();
    for a in raw {
        let from = y.clone();
        for (yj, aj) in y.iter_mut().zip(a) {
            *yj = alpha * aj + (1.0 - alpha) * *yj;
        }
        for s in 1..=k_interp {
            let w = s as f64 / k_interp as f64;
            out.push(from.iter().zip(&y).map(|(f, t)| f + w * (t - f)).collect());
        }
    }
    Ok(out)
}
