use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::flow2tactile::{FlowSpec, HeadSpec, SearchMode};
use crate::perception::{FusionMethod, PointNorm};
use crate::toyenv::{Task, ToyConfig};

/// Where the policy's tactile input comes from at run time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyMode {
    /// Contacts inferred by Flow2Tactile from the two clouds.
    VisionOnly,
    /// Contacts supplied with the observation.
    Visuotactile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TactileRepr {
    DenseBinary,
    DenseContinuous,
    /// One reading per link: the OR of its keypoints.
    Sparse,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Action rows predicted per inference.
    pub horizon: usize,
    pub hidden: usize,
    pub d_s: usize,
    pub d_v: usize,
    pub d_tac: usize,
    pub token_width: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub widths: Vec<usize>,
    pub mid: usize,
    pub base_steps: usize,
    pub norm: PointNorm,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            horizon: 4,
            hidden: 32,
            d_s: 64,
            d_v: 128,
            d_tac: 64,
            token_width: 32,
            heads: 2,
            time_dim: 16,
            widths: vec![256, 512],
            mid: 256,
            base_steps: 128,
            norm: PointNorm::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Cosine decay of the learning rate to zero over `epochs`.
    pub cosine: bool,
    /// Samples per gradient chunk; chunks may run on different workers.
    pub chunk: usize,
    pub eval_every: usize,
    pub top_k: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch: 64,
            lr: 3e-4,
            clip_norm: 1.0,
            cosine: true,
            chunk: 16,
            eval_every: 20,
            top_k: 5,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Euler steps per action sample.
    pub n_steps: usize,
    pub ema_alpha: f64,
    pub k_interp: usize,
    /// Smoothed action rows executed before the next inference.
    pub exec_actions: usize,
    /// Episodes stepped in lockstep by one worker.
    pub chunk: usize,
    /// Record wall-clock latency in reports.
    pub timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 20, n_steps: 1, ema_alpha: 1.0, k_interp: 1, exec_actions: 1, chunk: 16, timing: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct F2tConfig {
    pub mode: SearchMode,
    pub hidden: usize,
    pub d_v: usize,
    pub time_dim: usize,
    pub widths: Vec<usize>,
    pub mid: usize,
    pub base_steps: usize,
    pub flow_scale: f64,
    pub head_width: usize,
    pub head_heads: usize,
    pub head_layers: usize,
    pub flow_epochs: usize,
    pub head_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Share of each head batch drawn from frames with at least one contact.
    pub contact_fraction: f64,
    /// Trailing share of trajectories held out for accuracy.
    pub holdout: f64,
    /// Euler steps of the flow sampler.
    pub flow_steps: usize,
}

impl Default for F2tConfig {
    fn default() -> Self {
        let f = FlowSpec::default();
        let h = HeadSpec::default();
        Self {
            mode: SearchMode::Flow,
            hidden: f.hidden,
            d_v: f.d_v,
            time_dim: f.time_dim,
            widths: f.widths,
            mid: f.mid,
            base_steps: f.base_steps,
            flow_scale: f.flow_scale,
            head_width: h.width,
            head_heads: h.heads,
            head_layers: h.layers,
            flow_epochs: 10,
            head_epochs: 80,
            batch: 32,
            lr: 3e-3,
            contact_fraction: 0.75,
            holdout: 0.2,
            flow_steps: 1,
        }
    }
}

impl F2tConfig {
    pub fn flow_spec(&self, env: &ToyConfig, norm: PointNorm) -> FlowSpec {
        FlowSpec {
            n_points: env.n_points,
            hidden: self.hidden,
            d_v: self.d_v,
            time_dim: self.time_dim,
            widths: self.widths.clone(),
            mid: self.mid,
            base_steps: self.base_steps,
            norm,
            flow_scale: self.flow_scale,
        }
    }

    pub fn head_spec(&self, env: &ToyConfig, norm: PointNorm) -> HeadSpec {
        HeadSpec {
            n_keypoints: env.n_keypoints(),
            n_points: env.n_points,
            width: self.head_width,
            heads: self.head_heads,
            layers: self.head_layers,
            mode: self.mode,
            norm,
            flow_scale: self.flow_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub mode: PolicyMode,
    pub representation: TactileRepr,
    pub fusion: FusionMethod,
    pub seed: u64,
    pub env: ToyConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub f2t: F2tConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Push,
            mode: PolicyMode::Visuotactile,
            representation: TactileRepr::DenseBinary,
            fusion: FusionMethod::Transformer,
            seed: 0,
            env: ToyConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            f2t: F2tConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let t = &self.train;
        if t.batch == 0 || t.chunk == 0 || !(t.lr > 0.0) || t.eval_every == 0 || t.top_k == 0 {
            return Err(config("train batch, chunk, lr, eval_every and top_k must be positive"));
        }
        let e = &self.eval;
        if !(e.ema_alpha > 0.0 && e.ema_alpha <= 1.0) || e.k_interp == 0 || e.exec_actions == 0 || e.chunk == 0 {
            return Err(config("eval needs ema_alpha in (0, 1] and positive k_interp, exec_actions and chunk"));
        }
        if e.exec_actions > self.policy.horizon {
            return Err(config("cannot execute more actions than the horizon"));
        }
        if self.mode == PolicyMode::VisionOnly && self.representation == TactileRepr::DenseContinuous {
            return Err(config("vision-only mode infers binary contacts; dense-continuous needs sensors"));
        }
        let f = &self.f2t;
        if !(0.0..1.0).contains(&f.holdout) || !(0.0..=1.0).contains(&f.contact_fraction) || f.batch == 0 {
            return Err(config("f2t holdout must be in [0, 1), contact_fraction in [0, 1], batch positive"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Reads a JSON run configuration; missing keys take their defaults and
/// unknown keys are rejected by name.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::from_json(&std::fs::read_to_string(path)?)
}
