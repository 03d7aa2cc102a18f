//! Network building blocks expressed on a [`Graph`].
//!
//! Layers hold [`ParamId`]s into a shared [`ParamStore`]; the store itself is
//! owned by whoever trains the model, so several layers (encoders, fusion,
//! velocity net) can live in one store and be optimized together.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{Graph, Init, ParamId, ParamInit, ParamStore, Tensor, Var};
use crate::error::{config, invalid, Error, Result};

/// Anything that can allocate its parameters from a [`ParamInit`].
pub trait NetSpec {
    type Net;
    fn build(&self, init: &mut ParamInit<'_>) -> Result<Self::Net>;
}

/// Builds `spec` into a fresh store seeded by `seed`.
pub fn init_params<S: NetSpec>(spec: &S, seed: u64) -> Result<(S::Net, ParamStore)> {
    let mut store = ParamStore::new();
    let net = spec.build(&mut ParamInit::new(&mut store, seed))?;
    Ok((net, store))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut ParamInit<'_>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(init, name, in_dim, out_dim, Init::FanIn(in_dim))
    }

    /// A layer whose weights start at zero.
    pub fn zeroed(init: &mut ParamInit<'_>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(init, name, in_dim, out_dim, Init::Zeros)
    }

    fn with_init(init: &mut ParamInit<'_>, name: &str, in_dim: usize, out_dim: usize, w: Init) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(config(format!("layer {name} has a zero width")));
        }
        init.scoped(name, |init| {
            Ok(Self {
                w: init.param("w", in_dim, out_dim, w)?,
                b: init.param("b", 1, out_dim, Init::Zeros)?,
                in_dim,
                out_dim,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_broadcast(y, b)
    }
}

/// Layer widths of a fully connected net; tanh between layers, affine output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MLPSpec {
    pub widths: Vec<usize>,
}

impl MLPSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        let spec = Self { widths };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(config(format!("bad MLP widths {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MLPSpec,
    pub layers: Vec<Linear>,
}

impl NetSpec for MLPSpec {
    type Net = Mlp;

    fn build(&self, init: &mut ParamInit<'_>) -> Result<Mlp> {
        self.validate()?;
        let layers = self
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(init, &format!("l{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { spec: self.clone(), layers })
    }
}

impl Mlp {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i + 1 < self.layers.len() {
                h = g.tanh(h);
            }
        }
        h
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("validated")
    }
}

/// Evaluates `mlp` on a single input vector.
pub fn mlp_forward(mlp: &Mlp, params: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != mlp.spec.input() {
        return Err(invalid(format!("MLP expects {} inputs, got {}", mlp.spec.input(), x.len())));
    }
    let mut g = Graph::new(params);
    let xv = g.constant(Tensor::row_vector(x.to_vec()));
    let y = mlp.forward(&mut g, xv);
    Ok(g.value(y).data().to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub width: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionSpec {
    pub fn new(width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(config(format!("{heads} heads do not divide width {width}")));
        }
        Ok(Self { width, heads, head_dim: width / heads })
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads * self.head_dim != self.width {
            return Err(config(format!(
                "heads {} x head width {} != token width {}",
                self.heads, self.head_dim, self.width
            )));
        }
        Ok(())
    }
}

/// Multi-head cross-attention with an output projection and a residual from
/// the queries.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub spec: AttentionSpec,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Linear,
}

impl NetSpec for AttentionSpec {
    type Net = CrossAttention;

    fn build(&self, init: &mut ParamInit<'_>) -> Result<CrossAttention> {
        self.validate()?;
        let w = self.width;
        Ok(CrossAttention {
            spec: self.clone(),
            wq: init.param("wq", w, w, Init::FanIn(w))?,
            wk: init.param("wk", w, w, Init::FanIn(w))?,
            wv: init.param("wv", w, w, Init::FanIn(w))?,
            out: Linear::new(init, "out", w, w)?,
        })
    }
}

impl CrossAttention {
    /// `queries` holds `tq` rows per sample, `kv` holds `tk` rows per sample.
    pub fn forward(&self, g: &mut Graph<'_>, queries: Var, kv: Var, tq: usize, tk: usize) -> Var {
        let (wq, wk, wv) = (g.param(self.wq), g.param(self.wk), g.param(self.wv));
        let q = g.matmul(queries, wq);
        let k = g.matmul(kv, wk);
        let v = g.matmul(kv, wv);
        let a = g.attention(q, k, v, self.spec.heads, tq, tk);
        let o = self.out.forward(g, a);
        g.add(queries, o)
    }
}

/// Evaluates one attention layer on explicit token lists.
pub fn cross_attention_forward(
    attn: &CrossAttention,
    params: &ParamStore,
    queries: &[Vec<f64>],
    keys_values: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let w = attn.spec.width;
    if queries.is_empty() || keys_values.is_empty() {
        return Err(invalid("attention needs at least one query and one key"));
    }
    if queries.iter().chain(keys_values).any(|t| t.len() != w) {
        return Err(invalid(format!("attention tokens must have width {w}")));
    }
    let mut g = Graph::new(params);
    let q = g.constant(Tensor::from_rows(queries));
    let kv = g.constant(Tensor::from_rows(keys_values));
    let y = attn.forward(&mut g, q, kv, queries.len(), keys_values.len());
    let out = g.value(y);
    Ok((0..out.rows()).map(|r| out.row(r).to_vec()).collect())
}

/// Conditional velocity network over a `data_rows x data_cols` sample.
///
/// In flat mode the whole sample is one input vector. In per-row mode every
/// data row is its own token sharing weights, optionally with `row_features`
/// extra inputs per row; condition and time terms are broadcast to all rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityNetSpec {
    pub data_rows: usize,
    pub data_cols: usize,
    #[serde(default)]
    pub per_row: bool,
    #[serde(default)]
    pub row_features: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub down: Vec<usize>,
    pub mid: usize,
    /// Finest step count `M`; `dt` is embedded on the log scale of `1/M..1`.
    pub base_steps: usize,
}

impl VelocityNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.data_rows == 0 || self.data_cols == 0 {
            return Err(config("velocity net data shape has a zero dimension"));
        }
        if self.down.is_empty() || self.down.contains(&0) || self.mid == 0 {
            return Err(config(format!("bad velocity net widths {:?}/{}", self.down, self.mid)));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(config("time embedding width must be even and at least 2"));
        }
        if !self.base_steps.is_power_of_two() || self.base_steps < 2 {
            return Err(config(format!("base step count {} is not a power of two", self.base_steps)));
        }
        if !self.per_row && self.row_features != 0 {
            return Err(config("row features need per-row mode"));
        }
        Ok(())
    }

    fn token_in(&self) -> usize {
        if self.per_row {
            self.data_cols + self.row_features
        } else {
            self.data_rows * self.data_cols
        }
    }

    fn token_out(&self) -> usize {
        if self.per_row {
            self.data_cols
        } else {
            self.data_rows * self.data_cols
        }
    }

    fn tokens(&self) -> usize {
        if self.per_row {
            self.data_rows
        } else {
            1
        }
    }

    /// Sinusoidal features of `t` followed by those of the log-scaled `dt`.
    pub fn time_embedding(&self, t: f64, dt: f64) -> Vec<f64> {
        let s = (dt * self.base_steps as f64).log2() / (self.base_steps as f64).log2();
        let mut out = Vec::with_capacity(2 * self.time_dim);
        sinusoid(t, self.time_dim, &mut out);
        sinusoid(s, self.time_dim, &mut out);
        out
    }
}

fn sinusoid(x: f64, width: usize, out: &mut Vec<f64>) {
    let half = width / 2;
    for k in 0..half {
        let freq = std::f64::consts::PI * 64f64.powf(k as f64 / half.max(2).saturating_sub(1) as f64);
        out.push((freq * x).sin());
    }
    for k in 0..half {
        let freq = std::f64::consts::PI * 64f64.powf(k as f64 / half.max(2).saturating_sub(1) as f64);
        out.push((freq * x).cos());
    }
}

#[derive(Clone, Debug)]
struct Block {
    h: Linear,
    cond: ParamId,
    time: ParamId,
    skip: Option<ParamId>,
}

impl Block {
    fn new(init: &mut ParamInit<'_>, name: &str, in_dim: usize, out_dim: usize, spec: &VelocityNetSpec) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Block {
                h: Linear::new(init, "h", in_dim, out_dim)?,
                cond: init.param("cond", spec.cond_dim.max(1), out_dim, Init::FanIn(spec.cond_dim.max(1)))?,
                time: init.param("time", 2 * spec.time_dim, out_dim, Init::FanIn(2 * spec.time_dim))?,
                skip: if in_dim == out_dim {
                    None
                } else {
                    Some(init.param("skip", in_dim, out_dim, Init::FanIn(in_dim))?)
                },
            })
        })
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, cond: Var, temb: Var, tokens: usize) -> Var {
        let tproj = {
            let w = g.param(self.time);
            g.matmul(temb, w)
        };
        let per_sample = g.add(cond, tproj);
        let hx = self.h.forward(g, x);
        let pre = if tokens == 1 { g.add(hx, per_sample) } else { g.add_broadcast(hx, per_sample) };
        let act = g.tanh(pre);
        let res = match self.skip {
            None => x,
            Some(w) => {
                let w = g.param(w);
                g.matmul(x, w)
            }
        };
        g.add(act, res)
    }
}

#[derive(Debug)]
pub struct VelocityNet {
    pub spec: VelocityNetSpec,
    blocks: Vec<Block>,
    out: Linear,
    calls: AtomicUsize,
}

impl Clone for VelocityNet {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            blocks: self.blocks.clone(),
            out: self.out.clone(),
            calls: AtomicUsize::new(self.calls()),
        }
    }
}

/// Per-block condition projections for one batch, computed once and reused
/// across every velocity evaluation that shares the condition.
#[derive(Clone, Debug)]
pub struct CondProj(Vec<Var>);

/// Detached values of a [`CondProj`], reusable across graphs.
#[derive(Clone, Debug)]
pub struct CondCache(Vec<Tensor>);

impl CondProj {
    /// The same projections repeated for a batch stacked on itself.
    pub fn stacked(&self, g: &mut Graph<'_>) -> CondProj {
        CondProj(self.0.iter().map(|&v| g.concat_rows(&[v, v])).collect())
    }

    pub fn detach(&self, g: &Graph<'_>) -> CondCache {
        CondCache(self.0.iter().map(|&v| g.value(v).clone()).collect())
    }
}

impl CondCache {
    pub fn attach(&self, g: &mut Graph<'_>) -> CondProj {
        CondProj(self.0.iter().map(|t| g.constant(t.clone())).collect())
    }

    pub fn batch(&self) -> usize {
        self.0.first().map_or(0, |t| t.rows())
    }
}

impl NetSpec for VelocityNetSpec {
    type Net = VelocityNet;

    fn build(&self, init: &mut ParamInit<'_>) -> Result<VelocityNet> {
        self.validate()?;
        let mut blocks = Vec::new();
        let mut width = self.token_in();
        for (i, &w) in self.down.iter().enumerate() {
            blocks.push(Block::new(init, &format!("down{i}"), width, w, self)?);
            width = w;
        }
        blocks.push(Block::new(init, "mid", width, self.mid, self)?);
        width = self.mid;
        for (i, &w) in self.down.iter().enumerate().rev() {
            blocks.push(Block::new(init, &format!("up{i}"), width + w, w, self)?);
            width = w;
        }
        let out = Linear::zeroed(init, "out", width, self.token_out())?;
        Ok(VelocityNet { spec: self.clone(), blocks, out, calls: AtomicUsize::new(0) })
    }
}

impl VelocityNet {
    /// Number of forward evaluations since construction or the last reset.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn out_layer(&self) -> &Linear {
        &self.out
    }

    /// Projects a `batch x cond_dim` condition through every block.
    pub fn project_cond(&self, g: &mut Graph<'_>, cond: Var) -> CondProj {
        CondProj(
            self.blocks
                .iter()
                .map(|b| {
                    let w = g.param(b.cond);
                    g.matmul(cond, w)
                })
                .collect(),
        )
    }

    /// Condition projections for an empty condition (`cond_dim == 0`).
    pub fn project_empty(&self, g: &mut Graph<'_>, batch: usize) -> CondProj {
        let zero = g.constant(Tensor::zeros(batch, 1));
        self.project_cond(g, zero)
    }

    /// Velocity for a batch.
    ///
    /// `x` is `batch*data_rows x data_cols`; `row_feats` (per-row mode only)
    /// is `batch*data_rows x row_features`; `t`, `dt` hold one value per
    /// sample. Returns the same shape as `x`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        row_feats: Option<Var>,
        t: &[f64],
        dt: &[f64],
        cond: &CondProj,
    ) -> Result<Var> {
        let spec = &self.spec;
        let batch = t.len();
        if dt.len() != batch || cond.0.first().map(|&v| g.shape(v).0) != Some(batch) {
            return Err(invalid("time, step and condition batch sizes disagree"));
        }
        if g.shape(x) != (batch * spec.data_rows, spec.data_cols) {
            return Err(invalid(format!(
                "velocity input shape {:?}, expected {:?}",
                g.shape(x),
                (batch * spec.data_rows, spec.data_cols)
            )));
        }
        for (&t, &dt) in t.iter().zip(dt) {
            if !(0.0..1.0).contains(&t) || !(dt > 0.0 && dt <= 1.0) {
                return Err(Error::OutOfDomain(format!("t={t}, dt={dt} outside [0,1) x (0,1]")));
            }
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let temb = g.constant(Tensor::from_rows(
            &t.iter().zip(dt).map(|(&t, &dt)| spec.time_embedding(t, dt)).collect::<Vec<_>>(),
        ));
        let tokens = spec.tokens();
        let mut h = if spec.per_row {
            match row_feats {
                Some(f) if spec.row_features > 0 => {
                    if g.shape(f) != (batch * spec.data_rows, spec.row_features) {
                        return Err(invalid("row feature shape mismatch"));
                    }
                    g.concat_cols(&[x, f])
                }
                None if spec.row_features == 0 => x,
                _ => return Err(invalid("row features given/missing against the spec")),
            }
        } else {
            g.reshape(x, batch, spec.data_rows * spec.data_cols)
        };
        let n_down = spec.down.len();
        let mut skips = Vec::with_capacity(n_down);
        for (i, block) in self.blocks.iter().enumerate() {
            if i > n_down {
                let s = skips.pop().expect("one skip per up block");
                h = g.concat_cols(&[h, s]);
            }
            h = block.forward(g, h, cond.0[i], temb, tokens);
            if i < n_down {
                skips.push(h);
            }
        }
        let y = self.out.forward(g, h);
        Ok(if spec.per_row { y } else { g.reshape(y, batch * spec.data_rows, spec.data_cols) })
    }
}

/// Evaluates the velocity net on one sample without recording gradients.
pub fn velocity_net_forward(
    net: &VelocityNet,
    params: &ParamStore,
    x_noisy: &Tensor,
    row_feats: Option<&Tensor>,
    t: f64,
    dt: f64,
    cond: &[f64],
) -> Result<Tensor> {
    if cond.len() != net.spec.cond_dim {
        return Err(invalid(format!("condition width {} != {}", cond.len(), net.spec.cond_dim)));
    }
    let mut g = Graph::new(params);
    let cp = if cond.is_empty() {
        net.project_empty(&mut g, 1)
    } else {
        let c = g.constant(Tensor::row_vector(cond.to_vec()));
        net.project_cond(&mut g, c)
    };
    let x = g.constant(x_noisy.clone());
    let f = row_feats.map(|f| g.constant(f.clone()));
    let y = net.forward(&mut g, x, f, &[t], &[dt], &cp)?;
    Ok(g.value(y).clone())
}
