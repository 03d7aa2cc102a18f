use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffnet::{
    AttentionSpec, CondCache, CondProj, CrossAttention, Graph, Linear, MLPSpec, Mlp, NetSpec, ParamInit, ParamStore, Tensor,
    Var, VelocityNetSpec,
};
use crate::error::{config, invalid, Result};
use crate::geom::{nearest_neighbors, FlowField, Point};
use crate::perception::{PointNorm, TactileFrame, VisualEncoder};
use crate::rng::Rng;
use crate::shortcut::{
    euler_sample, forward_stacked, interpolant_rows, sc_target, velocity, LossVars, ShortcutDraw, ShortcutLosses,
    ShortcutModel,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSpec {
    pub n_points: usize,
    pub hidden: usize,
    pub d_v: usize,
    pub time_dim: usize,
    pub widths: Vec<usize>,
    pub mid: usize,
    pub base_steps: usize,
    pub norm: PointNorm,
    /// Metres per unit of generated flow.
    pub flow_scale: f64,
}

impl Default for FlowSpec {
    fn default() -> Self {
        Self {
            n_points: 256,
            hidden: 32,
            d_v: 32,
            time_dim: 8,
            widths: vec![32],
            mid: 32,
            base_steps: 128,
            norm: PointNorm::default(),
            flow_scale: 0.005,
        }
    }
}

/// Per-point features fed next to the noisy flow: the normalized source
/// point and the offset to its nearest neighbour in the second frame.
pub const FLOW_ROW_FEATURES: usize = 6;

#[derive(Clone, Debug)]
pub struct FlowModel {
    pub spec: FlowSpec,
    pub encoder: VisualEncoder,
    pub shortcut: ShortcutModel,
}

impl NetSpec for FlowSpec {
    type Net = FlowModel;

    fn build(&self, init: &mut ParamInit<'_>) -> Result<FlowModel> {
        if !(self.flow_scale > 0.0) || !(self.norm.scale > 0.0) {
            return Err(config("flow and position scales must be positive"));
        }
        let encoder = init.scoped("encoder", |i| VisualEncoder::new(i, self.n_points, self.hidden, self.d_v))?;
        let vspec = VelocityNetSpec {
            data_rows: self.n_points,
            data_cols: 3,
            per_row: true,
            row_features: FLOW_ROW_FEATURES,
            cond_dim: self.d_v,
            time_dim: self.time_dim,
            down: self.widths.clone(),
            mid: self.mid,
            base_steps: self.base_steps,
        };
        let net = init.scoped("velocity", |i| vspec.build(i))?;
        Ok(FlowModel { spec: self.clone(), encoder, shortcut: ShortcutModel::new(net) })
    }
}

/// Network-ready tensors for a batch of cloud pairs.
#[derive(Clone, Debug)]
pub struct FlowInputs {
    pub batch: usize,
    packed: Tensor,
    feats: Tensor,
    prev_units: Tensor,
    cur_units: Vec<Point>,
}

impl FlowModel {
    pub fn prepare(&self, pairs: &[(&[Point], &[Point])]) -> Result<FlowInputs> {
        let n = self.spec.n_points;
        let s = self.spec.flow_scale;
        let norm = &self.spec.norm;
        let mut packed = Vec::with_capacity(pairs.len() * 8 * n);
        let mut feats = Vec::with_capacity(pairs.len() * FLOW_ROW_FEATURES * n);
        let mut prev_units = Vec::with_capacity(pairs.len() * 3 * n);
        let mut cur_units = Vec::with_capacity(pairs.len() * n);
        for (prev, cur) in pairs {
            if prev.len() != n || cur.len() != n {
                return Err(invalid(format!("flow model expects {n} points per frame, got {} and {}", prev.len(), cur.len())));
            }
            self.encoder.pack(&norm.apply_all(prev), &norm.apply_all(cur), &mut packed)?;
            for (p, (j, _)) in prev.iter().zip(nearest_neighbors(prev, cur)) {
                let q = cur[j];
                feats.extend(norm.apply(*p));
                feats.extend((0..3).map(|k| (q[k] - p[k]) / s));
                prev_units.extend(p.iter().map(|v| v / s));
            }
            cur_units.extend(cur.iter().map(|p| [p[0] / s, p[1] / s, p[2] / s]));
        }
        let b = pairs.len();
        Ok(FlowInputs {
            batch: b,
            packed: Tensor::from_vec(b * 2 * n, 4, packed),
            feats: Tensor::from_vec(b * n, FLOW_ROW_FEATURES, feats),
            prev_units: Tensor::from_vec(b * n, 3, prev_units),
            cur_units,
        })
    }

    fn condition(&self, g: &mut Graph<'_>, inp: &FlowInputs) -> CondProj {
        let x = g.constant(inp.packed.clone());
        let f = self.encoder.forward(g, x);
        self.shortcut.net.project_cond(g, f)
    }

    /// Flow for every pair, in metres, aligned with the first cloud.
    pub fn predict_batch(
        &self,
        params: &ParamStore,
        pairs: &[(&[Point], &[Point])],
        n_steps: usize,
        seed: u64,
    ) -> Result<Vec<FlowField>> {
        let inp = self.prepare(pairs)?;
        let cache = {
            let mut g = Graph::new(params);
            let cp = self.condition(&mut g, &inp);
            cp.detach(&g)
        };
        let out = euler_sample(&self.shortcut, params, &cache, Some(&inp.feats), n_steps, seed)?;
        let n = self.spec.n_points;
        let s = self.spec.flow_scale;
        (0..inp.batch)
            .map(|b| {
                FlowField::new((0..n).map(|i| {
                    let r = out.row(b * n + i);
                    [r[0] * s, r[1] * s, r[2] * s]
                }).collect())
            })
            .collect()
    }

    /// Gradient-free targets for one draw: the one-step endpoint and the
    /// self-consistency velocity.
    pub fn targets(&self, params: &ParamStore, inp: &FlowInputs, draw: &ShortcutDraw) -> Result<FlowTargets> {
        let cache = {
            let mut g = Graph::new(params);
            let cond = self.condition(&mut g, inp);
            cond.detach(&g)
        };
        self.targets_from(params, inp, draw, &cache)
    }

    fn targets_from(&self, params: &ParamStore, inp: &FlowInputs, draw: &ShortcutDraw, cache: &CondCache) -> Result<FlowTargets> {
        let n = self.spec.n_points;
        let b = inp.batch;
        if draw.x0.shape() != (b * n, 3) {
            return Err(invalid("draw does not match the flow batch"));
        }
        let model = &self.shortcut;
        let mut boot = velocity(model, params, &draw.x0, Some(&inp.feats), &vec![0.0; b], &vec![1.0; b], cache)?;
        boot.add_assign(&draw.x0);
        let x_sc = interpolant_rows(&draw.x0, &boot, &draw.t_sc, n);
        let sc = sc_target(model, params, &x_sc, Some(&inp.feats), &draw.t_sc, &draw.dt, cache)?;
        Ok(FlowTargets { boot, sc })
    }

    /// Chamfer flow-matching and self-consistency objectives recorded on `g`.
    ///
    /// The interpolant runs from the noise in `draw` to the model's own
    /// gradient-free one-step endpoint; the chamfer term scores the endpoint
    /// extrapolated from that interpolant with the finest step.
    pub fn loss_vars(&self, g: &mut Graph<'_>, inp: &FlowInputs, draw: &ShortcutDraw) -> Result<LossVars> {
        let cond = self.condition(g, inp);
        let targets = self.targets_from(g.store(), inp, draw, &cond.detach(g))?;
        self.losses_inner(g, inp, draw, &cond, &targets)
    }

    /// [`FlowModel::loss_vars`] with the gradient-free targets held fixed.
    pub fn loss_vars_with(&self, g: &mut Graph<'_>, inp: &FlowInputs, draw: &ShortcutDraw, targets: &FlowTargets) -> Result<LossVars> {
        let cond = self.condition(g, inp);
        self.losses_inner(g, inp, draw, &cond, targets)
    }

    fn losses_inner(
        &self,
        g: &mut Graph<'_>,
        inp: &FlowInputs,
        draw: &ShortcutDraw,
        cond: &CondProj,
        targets: &FlowTargets,
    ) -> Result<LossVars> {
        let n = self.spec.n_points;
        let b = inp.batch;
        if draw.x0.shape() != (b * n, 3) || targets.boot.shape() != draw.x0.shape() {
            return Err(invalid("draw does not match the flow batch"));
        }
        let model = &self.shortcut;
        let x_fm = interpolant_rows(&draw.x0, &targets.boot, &draw.t_fm, n);
        let x_sc = interpolant_rows(&draw.x0, &targets.boot, &draw.t_sc, n);
        let dt_min = vec![model.dt_min(); b];
        let two_dt: Vec<f64> = draw.dt.iter().map(|d| 2.0 * d).collect();
        let feats = g.constant(inp.feats.clone());
        let mut base = x_fm.clone();
        base.add_assign(&inp.prev_units);
        let a = g.constant(x_fm);
        let c = g.constant(x_sc);
        let (v_fm, v_sc) = forward_stacked(model, g, a, &draw.t_fm, &dt_min, c, &draw.t_sc, &two_dt, Some(feats), cond)?;
        let remaining: Vec<f64> = (0..b * n).map(|r| 1.0 - draw.t_fm[r / n]).collect();
        let step = g.scale_rows(v_fm, remaining);
        let base = g.constant(base);
        let moved = g.add(base, step);
        let cd = g.chamfer(moved, inp.cur_units.clone(), n, n);
        let fm = g.mean(cd);
        let st = g.constant(targets.sc.clone());
        let sc = g.mse(v_sc, st);
        Ok(LossVars { fm, sc })
    }
}

/// Gradient-free targets of one flow training draw.
#[derive(Clone, Debug)]
pub struct FlowTargets {
    pub boot: Tensor,
    pub sc: Tensor,
}

pub fn predict_flow(
    model: &FlowModel,
    params: &ParamStore,
    p_prev: &[Point],
    p_cur: &[Point],
    n_steps: usize,
    seed: u64,
) -> Result<FlowField> {
    Ok(model.predict_batch(params, &[(p_prev, p_cur)], n_steps, seed)?.remove(0))
}

pub fn flow_train_losses(
    model: &FlowModel,
    params: &ParamStore,
    p_prev: &[Point],
    p_cur: &[Point],
    rng: &mut Rng,
) -> Result<ShortcutLosses> {
    let inp = model.prepare(&[(p_prev, p_cur)])?;
    let draw = ShortcutDraw::sample(&model.shortcut, 1, rng);
    let mut g = Graph::new(params);
    let l = model.loss_vars(&mut g, &inp, &draw)?;
    Ok(ShortcutLosses { l_fm: g.value(l.fm).item(), l_sc: g.value(l.sc).item() })
}

/// What the search head sees next to each source point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    /// Point coordinate and its flow vector.
    Flow,
    /// Point coordinate and the same-index point of the second frame.
    Pc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSpec {
    pub n_keypoints: usize,
    pub n_points: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub mode: SearchMode,
    pub norm: PointNorm,
    pub flow_scale: f64,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            n_keypoints: 48,
            n_points: 256,
            width: 32,
            heads: 4,
            layers: 2,
            mode: SearchMode::Flow,
            norm: PointNorm::default(),
            flow_scale: 0.005,
        }
    }
}

#[derive(Clone, Debug)]
struct SearchLayer {
    attn: CrossAttention,
    ff: Linear,
}

/// Keypoint tokens attend over point tokens; one logit per keypoint.
#[derive(Clone, Debug)]
pub struct SearchHead {
    pub spec: HeadSpec,
    keypoints: Mlp,
    points: Mlp,
    layers: Vec<SearchLayer>,
    out: Linear,
}

impl NetSpec for HeadSpec {
    type Net = SearchHead;

    fn build(&self, init: &mut ParamInit<'_>) -> Result<SearchHead> {
        if self.n_keypoints == 0 || self.n_points == 0 || self.layers == 0 {
            return Err(config("search head needs keypoints, points and at least one layer"));
        }
        let w = self.width;
        let keypoints = init.scoped("keypoints", |i| MLPSpec::new(vec![3, w, w])?.build(i))?;
        let points = init.scoped("points", |i| MLPSpec::new(vec![6, w, w])?.build(i))?;
        let attn = AttentionSpec::new(w, self.heads)?;
        let layers = (0..self.layers)
            .map(|k| {
                init.scoped(&format!("layer{k}"), |i| {
                    Ok(SearchLayer { attn: attn.build(i)?, ff: Linear::new(i, "ff", w, w)? })
                })
            })
            .collect::<Result<_>>()?;
        let out = Linear::zeroed(init, "out", w, 1)?;
        Ok(SearchHead { spec: self.clone(), keypoints, points, layers, out })
    }
}

/// One frame for the search head. `motion` holds the flow vectors in flow
/// mode and the second cloud in pc mode.
#[derive(Clone, Copy, Debug)]
pub struct SearchInput<'a> {
    pub keypoints: &'a [Point],
    pub p_prev: &'a [Point],
    pub motion: &'a [Point],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutput {
    pub logits: Vec<f64>,
    pub readings: TactileFrame,
}

impl SearchHead {
    fn tensors(&self, inputs: &[SearchInput<'_>]) -> Result<(Tensor, Tensor)> {
        let s = &self.spec;
        let mut kp = Vec::with_capacity(inputs.len() * s.n_keypoints * 3);
        let mut tok = Vec::with_capacity(inputs.len() * s.n_points * 6);
        for inp in inputs {
            if inp.keypoints.len() != s.n_keypoints {
                return Err(invalid(format!("head expects {} keypoints, got {}", s.n_keypoints, inp.keypoints.len())));
            }
            if inp.p_prev.len() != s.n_points || inp.motion.len() != s.n_points {
                return Err(invalid(format!(
                    "head expects {} points, got {} and {}",
                    s.n_points,
                    inp.p_prev.len(),
                    inp.motion.len()
                )));
            }
            kp.extend(inp.keypoints.iter().flat_map(|&p| s.norm.apply(p)));
            for (p, m) in inp.p_prev.iter().zip(inp.motion) {
                tok.extend(s.norm.apply(*p));
                match s.mode {
                    SearchMode::Flow => tok.extend(m.iter().map(|v| v / s.flow_scale)),
                    SearchMode::Pc => tok.extend(s.norm.apply(*m)),
                }
            }
        }
        let b = inputs.len();
        Ok((Tensor::from_vec(b * s.n_keypoints, 3, kp), Tensor::from_vec(b * s.n_points, 6, tok)))
    }

    /// `batch*n_keypoints x 1` logits.
    pub fn forward(&self, g: &mut Graph<'_>, keypoints: Var, tokens: Var) -> Var {
        let mut q = self.keypoints.forward(g, keypoints);
        let kv = self.points.forward(g, tokens);
        for layer in &self.layers {
            q = layer.attn.forward(g, q, kv, self.spec.n_keypoints, self.spec.n_points);
            let f = layer.ff.forward(g, q);
            let f = g.tanh(f);
            q = g.add(q, f);
        }
        self.out.forward(g, q)
    }

    pub fn logits_var(&self, g: &mut Graph<'_>, inputs: &[SearchInput<'_>]) -> Result<Var> {
        let (kp, tok) = self.tensors(inputs)?;
        let kp = g.constant(kp);
        let tok = g.constant(tok);
        Ok(self.forward(g, kp, tok))
    }

    /// Mean squared error between `sigmoid(logit)` and the binary targets.
    pub fn loss_var(&self, g: &mut Graph<'_>, inputs: &[SearchInput<'_>], targets: &[&TactileFrame]) -> Result<Var> {
        if targets.len() != inputs.len() || targets.iter().any(|t| t.len() != self.spec.n_keypoints) {
            return Err(invalid("tactile targets do not match the head inputs"));
        }
        let logits = self.logits_var(g, inputs)?;
        let p = g.sigmoid(logits);
        let r: Vec<f64> = targets.iter().flat_map(|t| t.readings().iter().copied()).collect();
        let r = g.constant(Tensor::from_vec(r.len(), 1, r));
        Ok(g.mse(p, r))
    }

    pub fn search_batch(&self, params: &ParamStore, inputs: &[SearchInput<'_>]) -> Result<Vec<SearchOutput>> {
        let mut g = Graph::new(params);
        let y = self.logits_var(&mut g, inputs)?;
        let k = self.spec.n_keypoints;
        Ok(g.value(y)
            .data()
            .chunks(k)
            .map(|l| SearchOutput {
                logits: l.to_vec(),
                readings: TactileFrame::binary(&l.iter().map(|&v| v > 0.0).collect::<Vec<_>>()),
            })
            .collect())
    }
}

pub fn search_tactile(head: &SearchHead, params: &ParamStore, input: SearchInput<'_>) -> Result<SearchOutput> {
    Ok(head.search_batch(params, &[input])?.remove(0))
}

pub fn tactile_train_loss(
    head: &SearchHead,
    params: &ParamStore,
    input: SearchInput<'_>,
    r_gt: &TactileFrame,
) -> Result<f64> {
    let mut g = Graph::new(params);
    let l = head.loss_var(&mut g, &[input], &[r_gt])?;
    Ok(g.value(l).item())
}

/// Trained flow generator plus search head, each with its own parameters.
#[derive(Clone, Debug)]
pub struct Flow2Tactile {
    pub flow: FlowModel,
    pub flow_params: ParamStore,
    pub head: SearchHead,
    pub head_params: ParamStore,
}

impl Flow2Tactile {
    /// Predicted contacts for a batch of `(keypoints, p_prev, p_cur)` frames.
    /// In pc mode the flow model is skipped.
    pub fn infer_batch(
        &self,
        frames: &[(&[Point], &[Point], &[Point])],
        n_steps: usize,
        seed: u64,
    ) -> Result<Vec<SearchOutput>> {
        match self.head.spec.mode {
            SearchMode::Flow => {
                let pairs: Vec<(&[Point], &[Point])> = frames.iter().map(|f| (f.1, f.2)).collect();
                let flows = self.flow.predict_batch(&self.flow_params, &pairs, n_steps, seed)?;
                let inputs: Vec<SearchInput<'_>> = frames
                    .iter()
                    .zip(&flows)
                    .map(|(f, fl)| SearchInput { keypoints: f.0, p_prev: f.1, motion: fl.displacements() })
                    .collect();
                self.head.search_batch(&self.head_params, &inputs)
            }
            SearchMode::Pc => {
                let inputs: Vec<SearchInput<'_>> =
                    frames.iter().map(|f| SearchInput { keypoints: f.0, p_prev: f.1, motion: f.2 }).collect();
                self.head.search_batch(&self.head_params, &inputs)
            }
        }
    }
}

/// Writes `keypoint,x,y,z,reading` rows.
pub fn write_tactile_csv<W: Write>(out: W, keypoints: &[Point], frame: &TactileFrame) -> Result<()> {
    if keypoints.len() != frame.len() {
        return Err(invalid("keypoint and reading counts differ"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["keypoint", "x", "y", "z", "reading"])?;
    for (i, (p, r)) in keypoints.iter().zip(frame.readings()).enumerate() {
        w.serialize((i, p[0], p[1], p[2], r))?;
    }
    w.flush()?;
    Ok(())
}
