//! State, point-cloud and tactile encoders plus visuotactile fusion.
//!
//! Everything here works on batches: sample `b` owns row `b` of the state
//! and tactile inputs and a contiguous block of rows in the point input.

use serde::{Deserialize, Serialize};

use crate::diffnet::{
    AttentionSpec, CrossAttention, Graph, Linear, MLPSpec, Mlp, NetSpec, ParamInit, ParamStore, Tensor, Var,
};
use crate::error::{config, invalid, Error, Result};
use crate::geom::Point;

/// Joint positions in radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub joints: Vec<f64>,
}

impl RobotState {
    pub fn new(joints: Vec<f64>) -> Result<Self> {
        if joints.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("robot state".into()));
        }
        Ok(Self { joints })
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TactileMode {
    Binary,
    /// Forces in newtons.
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TactileFrame {
    readings: Vec<f64>,
    mode: TactileMode,
}

impl TactileFrame {
    pub fn new(readings: Vec<f64>, mode: TactileMode) -> Result<Self> {
        let ok = match mode {
            TactileMode::Binary => readings.iter().all(|&r| r == 0.0 || r == 1.0),
            TactileMode::Continuous => readings.iter().all(|&r| r.is_finite() && r >= 0.0),
        };
        if !ok {
            return Err(invalid(format!("readings do not fit {mode:?} mode")));
        }
        Ok(Self { readings, mode })
    }

    pub fn binary(contacts: &[bool]) -> Self {
        Self { readings: contacts.iter().map(|&c| f64::from(u8::from(c))).collect(), mode: TactileMode::Binary }
    }

    pub fn readings(&self) -> &[f64] {
        &self.readings
    }

    pub fn mode(&self) -> TactileMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }
}

/// Affine map from metres to network coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointNorm {
    pub center: Point,
    pub scale: f64,
}

impl Default for PointNorm {
    fn default() -> Self {
        Self { center: [0.0, 0.08, 0.0], scale: 0.05 }
    }
}

impl PointNorm {
    pub fn apply(&self, p: Point) -> Point {
        [
            (p[0] - self.center[0]) / self.scale,
            (p[1] - self.center[1]) / self.scale,
            (p[2] - self.center[2]) / self.scale,
        ]
    }

    pub fn apply_all(&self, pts: &[Point]) -> Vec<Point> {
        pts.iter().map(|&p| self.apply(p)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    Transformer,
    Mlp,
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptionSpec {
    /// Joints per robot state.
    pub n_s: usize,
    /// Tactile readings per frame; zero disables the tactile branch.
    pub n_r: usize,
    /// Points per frame fed to the visual encoder.
    pub points_per_frame: usize,
    pub d_s: usize,
    pub d_v: usize,
    pub d_tac: usize,
    pub hidden: usize,
    pub token_width: usize,
    pub heads: usize,
    pub fusion: FusionMethod,
}

impl PerceptionSpec {
    pub fn validate(&self) -> Result<()> {
        if [self.n_s, self.points_per_frame, self.d_s, self.d_v, self.hidden].contains(&0) {
            return Err(config("perception widths must be positive"));
        }
        if self.n_r > 0 && self.d_tac == 0 {
            return Err(config("tactile width must be positive"));
        }
        if self.fusion == FusionMethod::Transformer && self.n_r > 0 {
            let w = self.token_width;
            if w == 0 || self.d_v % w != 0 || self.d_tac % w != 0 {
                return Err(config(format!(
                    "token width {w} does not split d_v={} and d_tac={}",
                    self.d_v, self.d_tac
                )));
            }
            AttentionSpec::new(w, self.heads)?;
        }
        Ok(())
    }

    pub fn d_fuse(&self) -> usize {
        2 * self.d_v
    }

    /// Width of the policy condition `[F_s; F_fuse]`.
    pub fn cond_dim(&self) -> usize {
        self.d_s + self.d_fuse()
    }
}

/// Per-point MLP with a frame flag, max-pool, output projection.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub points: Mlp,
    pub out: Linear,
    pub points_per_frame: usize,
}

impl VisualEncoder {
    pub fn new(init: &mut ParamInit<'_>, points_per_frame: usize, hidden: usize, d_v: usize) -> Result<Self> {
        let spec = MLPSpec::new(vec![4, hidden, hidden, hidden])?;
        Ok(Self {
            points: init.scoped("points", |i| spec.build(i))?,
            out: Linear::new(init, "out", hidden, d_v)?,
            points_per_frame,
        })
    }

    /// `pts` holds `2 * points_per_frame` rows of `(x, y, z, flag)` per sample.
    pub fn forward(&self, g: &mut Graph<'_>, pts: Var) -> Var {
        let h = self.points.forward(g, pts);
        let pooled = g.group_max(h, 2 * self.points_per_frame);
        self.out.forward(g, pooled)
    }

    /// Packs two frames into the `(x, y, z, flag)` row layout.
    pub fn pack(&self, prev: &[Point], cur: &[Point], out: &mut Vec<f64>) -> Result<()> {
        if prev.len() != self.points_per_frame || cur.len() != self.points_per_frame {
            return Err(invalid(format!(
                "visual encoder expects {} points per frame, got {} and {}",
                self.points_per_frame,
                prev.len(),
                cur.len()
            )));
        }
        for (flag, frame) in [(0.0, prev), (1.0, cur)] {
            for p in frame {
                out.extend_from_slice(&[p[0], p[1], p[2], flag]);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Transformer { attn: CrossAttention, tv: usize, tt: usize },
    Mlp(Mlp),
    Add(Linear),
}

/// The three encoders and the fusion module of one policy.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub spec: PerceptionSpec,
    pub state: Mlp,
    pub visual: VisualEncoder,
    pub tactile: Option<Mlp>,
    pub fusion: Option<Fusion>,
}

impl NetSpec for PerceptionSpec {
    type Net = Encoders;

    fn build(&self, init: &mut ParamInit<'_>) -> Result<Encoders> {
        self.validate()?;
        let h = self.hidden;
        let state = init.scoped("state", |i| MLPSpec::new(vec![2 * self.n_s, h, h, self.d_s])?.build(i))?;
        let visual = init.scoped("visual", |i| VisualEncoder::new(i, self.points_per_frame, h, self.d_v))?;
        let (tactile, fusion) = if self.n_r == 0 {
            (None, None)
        } else {
            let tac = init.scoped("tactile", |i| MLPSpec::new(vec![self.n_r, h, h, h, self.d_tac])?.build(i))?;
            let fusion = init.scoped("fusion", |i| {
                Ok(match self.fusion {
                    FusionMethod::Transformer => Fusion::Transformer {
                        attn: AttentionSpec::new(self.token_width, self.heads)?.build(i)?,
                        tv: self.d_v / self.token_width,
                        tt: self.d_tac / self.token_width,
                    },
                    FusionMethod::Mlp => {
                        Fusion::Mlp(MLPSpec::new(vec![self.d_v + self.d_tac, self.d_fuse(), self.d_fuse()])?.build(i)?)
                    }
                    FusionMethod::Add => Fusion::Add(Linear::new(i, "proj", self.d_tac, self.d_v)?),
                })
            })?;
            (Some(tac), Some(fusion))
        };
        Ok(Encoders { spec: self.clone(), state, visual, tactile, fusion })
    }
}

/// Encoded features of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub f_s: Vec<f64>,
    pub f_v: Vec<f64>,
    pub f_tac: Vec<f64>,
    pub f_fuse: Vec<f64>,
}

impl Encoders {
    /// `s_prev`, `s_cur`: `batch x n_s`.
    pub fn state_features(&self, g: &mut Graph<'_>, s_prev: Var, s_cur: Var) -> Var {
        let x = g.concat_cols(&[s_prev, s_cur]);
        self.state.forward(g, x)
    }

    pub fn tactile_features(&self, g: &mut Graph<'_>, readings: Var) -> Result<Var> {
        let tac = self.tactile.as_ref().ok_or_else(|| config("tactile branch is disabled"))?;
        Ok(tac.forward(g, readings))
    }

    /// `F_fuse` for a batch. `f_tac = None` means no tactile input: the
    /// visual feature is duplicated.
    pub fn fuse(&self, g: &mut Graph<'_>, f_v: Var, f_tac: Option<Var>) -> Result<Var> {
        let Some(f_tac) = f_tac else {
            return Ok(g.concat_cols(&[f_v, f_v]));
        };
        let fusion = self.fusion.as_ref().ok_or_else(|| config("fusion module is disabled"))?;
        let batch = g.shape(f_v).0;
        Ok(match fusion {
            Fusion::Transformer { attn, tv, tt } => {
                let w = self.spec.token_width;
                let q = g.reshape(f_v, batch * tv, w);
                let kv = g.reshape(f_tac, batch * tt, w);
                let a = attn.forward(g, q, kv, *tv, *tt);
                let flat = g.reshape(a, batch, self.spec.d_v);
                g.concat_cols(&[flat, f_v])
            }
            Fusion::Mlp(mlp) => {
                let x = g.concat_cols(&[f_v, f_tac]);
                mlp.forward(g, x)
            }
            Fusion::Add(proj) => {
                let p = proj.forward(g, f_tac);
                let s = g.add(f_v, p);
                g.concat_cols(&[s, s])
            }
        })
    }

    fn check_state(&self, s: &RobotState) -> Result<()> {
        if s.len() != self.spec.n_s {
            return Err(invalid(format!("state has {} joints, expected {}", s.len(), self.spec.n_s)));
        }
        Ok(())
    }

    pub fn encode_state(&self, params: &ParamStore, s_prev: &RobotState, s_cur: &RobotState) -> Result<Vec<f64>> {
        self.check_state(s_prev)?;
        self.check_state(s_cur)?;
        let mut g = Graph::new(params);
        let a = g.constant(Tensor::row_vector(s_prev.joints.clone()));
        let b = g.constant(Tensor::row_vector(s_cur.joints.clone()));
        let y = self.state_features(&mut g, a, b);
        Ok(g.value(y).data().to_vec())
    }

    pub fn encode_visual(&self, params: &ParamStore, p_prev: &[Point], p_cur: &[Point]) -> Result<Vec<f64>> {
        let mut rows = Vec::new();
        self.visual.pack(p_prev, p_cur, &mut rows)?;
        let mut g = Graph::new(params);
        let n = rows.len() / 4;
        let x = g.constant(Tensor::from_vec(n, 4, rows));
        let y = self.visual.forward(&mut g, x);
        Ok(g.value(y).data().to_vec())
    }

    pub fn encode_tactile(&self, params: &ParamStore, r: &TactileFrame) -> Result<Vec<f64>> {
        if r.len() != self.spec.n_r {
            return Err(invalid(format!("tactile frame has {} readings, expected {}", r.len(), self.spec.n_r)));
        }
        let mut g = Graph::new(params);
        let x = g.constant(Tensor::row_vector(r.readings().to_vec()));
        let y = self.tactile_features(&mut g, x)?;
        Ok(g.value(y).data().to_vec())
    }

    pub fn fuse_features(&self, params: &ParamStore, f_v: &[f64], f_tac: Option<&[f64]>) -> Result<Vec<f64>> {
        if f_v.len() != self.spec.d_v || f_tac.is_some_and(|t| t.len() != self.spec.d_tac) {
            return Err(invalid("feature widths do not match the perception spec"));
        }
        let mut g = Graph::new(params);
        let v = g.constant(Tensor::row_vector(f_v.to_vec()));
        let t = f_tac.map(|t| g.constant(Tensor::row_vector(t.to_vec())));
        let y = self.fuse(&mut g, v, t)?;
        Ok(g.value(y).data().to_vec())
    }

    /// All features of one observation.
    pub fn encode(
        &self,
        params: &ParamStore,
        s_prev: &RobotState,
        s_cur: &RobotState,
        p_prev: &[Point],
        p_cur: &[Point],
        tactile: Option<&TactileFrame>,
    ) -> Result<FeatureBundle> {
        let f_s = self.encode_state(params, s_prev, s_cur)?;
        let f_v = self.encode_visual(params, p_prev, p_cur)?;
        let f_tac = match tactile {
            Some(r) => self.encode_tactile(params, r)?,
            None => Vec::new(),
        };
        let f_fuse = self.fuse_features(params, &f_v, tactile.map(|_| f_tac.as_slice()))?;
        Ok(FeatureBundle { f_s, f_v, f_tac, f_fuse })
    }
}
