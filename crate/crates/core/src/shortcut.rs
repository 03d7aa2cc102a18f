//! Conditional shortcut models: linear-path flow matching with a step-size
//! input, Euler sampling and the self-consistency objective.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::diffnet::{CondCache, CondProj, Graph, ParamStore, Tensor, Var, VelocityNet};
use crate::error::{config, invalid, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Debug)]
pub struct ShortcutModel {
    pub net: VelocityNet,
}

impl ShortcutModel {
    pub fn new(net: VelocityNet) -> Self {
        Self { net }
    }

    /// Finest step count `M`.
    pub fn base_steps(&self) -> usize {
        self.net.spec.base_steps
    }

    /// `(rows, cols)` of one data sample.
    pub fn data_shape(&self) -> (usize, usize) {
        (self.net.spec.data_rows, self.net.spec.data_cols)
    }

    pub fn dt_min(&self) -> f64 {
        1.0 / self.base_steps() as f64
    }

    /// Checks a sampler step count: `1 <= n_steps <= M`.
    pub fn check_steps(&self, n_steps: usize) -> Result<()> {
        if n_steps == 0 || n_steps > self.base_steps() {
            return Err(config(format!("step count {n_steps} outside 1..={}", self.base_steps())));
        }
        Ok(())
    }
}

/// `(1 - t) x0 + t x1`.
pub fn interpolant(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(invalid(format!("interpolant shapes {:?} and {:?} differ", x0.shape(), x1.shape())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("interpolation time {t} outside [0, 1]")));
    }
    let data = x0.data().iter().zip(x1.data()).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    Ok(Tensor::from_vec(x0.rows(), x0.cols(), data))
}

/// Row-wise interpolant where sample `b` (a block of `rows` rows) uses `t[b]`.
pub fn interpolant_rows(x0: &Tensor, x1: &Tensor, t: &[f64], rows: usize) -> Tensor {
    let cols = x0.cols();
    let mut out = x0.clone();
    for (i, (o, v1)) in out.data_mut().iter_mut().zip(x1.data()).enumerate() {
        let s = t[i / (rows * cols)];
        *o = (1.0 - s) * *o + s * v1;
    }
    out
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

/// Integrates `x' = field(x, t, dt)` from `t = 0` to `1` in `n_steps` equal
/// Euler steps.
pub fn euler_integrate<F>(mut field: F, x0: Tensor, n_steps: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64, f64) -> Result<Tensor>,
{
    if n_steps == 0 {
        return Err(config("Euler integration needs at least one step"));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x0;
    for k in 0..n_steps {
        let v = field(&x, k as f64 * dt, dt)?;
        x.add_scaled(&v, dt);
    }
    Ok(x)
}

/// One batched, gradient-free velocity evaluation.
pub fn velocity(
    model: &ShortcutModel,
    params: &ParamStore,
    x: &Tensor,
    feats: Option<&Tensor>,
    t: &[f64],
    dt: &[f64],
    cond: &CondCache,
) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let cp = cond.attach(&mut g);
    let xv = g.constant(x.clone());
    let fv = feats.map(|f| g.constant(f.clone()));
    let y = model.net.forward(&mut g, xv, fv, t, dt, &cp)?;
    Ok(g.value(y).clone())
}

/// Euler sampling from a given start `x0` for a batch sharing `cond`.
pub fn euler_sample_from(
    model: &ShortcutModel,
    params: &ParamStore,
    cond: &CondCache,
    feats: Option<&Tensor>,
    n_steps: usize,
    x0: Tensor,
) -> Result<Tensor> {
    model.check_steps(n_steps)?;
    let batch = cond.batch();
    euler_integrate(
        |x, t, dt| velocity(model, params, x, feats, &vec![t; batch], &vec![dt; batch], cond),
        x0,
        n_steps,
    )
}

/// Euler sampling from seeded standard-normal noise.
pub fn euler_sample(
    model: &ShortcutModel,
    params: &ParamStore,
    cond: &CondCache,
    feats: Option<&Tensor>,
    n_steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let (rows, cols) = model.data_shape();
    let x0 = standard_normal(cond.batch() * rows, cols, &mut rng::seeded(seed, &[0x5A]));
    euler_sample_from(model, params, cond, feats, n_steps, x0)
}

/// Random draws behind one training step.
#[derive(Clone, Debug)]
pub struct ShortcutDraw {
    pub x0: Tensor,
    /// Flow-matching time per sample, on the grid `{i / M}`.
    pub t_fm: Vec<f64>,
    /// Self-consistency time per sample, on the grid `{k dt}` with `t + 2dt <= 1`.
    pub t_sc: Vec<f64>,
    pub dt: Vec<f64>,
}

impl ShortcutDraw {
    pub fn sample(model: &ShortcutModel, batch: usize, rng: &mut Rng) -> Self {
        let (rows, cols) = model.data_shape();
        let m = model.base_steps();
        let levels = m.trailing_zeros();
        let x0 = standard_normal(batch * rows, cols, rng);
        let mut t_fm = Vec::with_capacity(batch);
        let mut t_sc = Vec::with_capacity(batch);
        let mut dt = Vec::with_capacity(batch);
        for _ in 0..batch {
            t_fm.push(rng.random_range(0..m) as f64 / m as f64);
            // dt = 2^j / M for j in 0..levels, i.e. 1/M ..= 1/2.
            let j = rng.random_range(0..levels);
            let cells = m >> j;
            let k = rng.random_range(0..cells - 1);
            let d = (1usize << j) as f64 / m as f64;
            dt.push(d);
            t_sc.push(k as f64 * d);
        }
        Self { x0, t_fm, t_sc, dt }
    }
}

/// Self-consistency target `[v(x,t,dt) + v(x + v dt, t + dt, dt)] / 2`,
/// computed without gradients.
pub fn sc_target(
    model: &ShortcutModel,
    params: &ParamStore,
    x_t: &Tensor,
    feats: Option<&Tensor>,
    t: &[f64],
    dt: &[f64],
    cond: &CondCache,
) -> Result<Tensor> {
    let v1 = velocity(model, params, x_t, feats, t, dt, cond)?;
    let rows = model.data_shape().0;
    let cols = x_t.cols();
    let mut x2 = x_t.clone();
    for (i, (x, v)) in x2.data_mut().iter_mut().zip(v1.data()).enumerate() {
        *x += v * dt[i / (rows * cols)];
    }
    let t2: Vec<f64> = t.iter().zip(dt).map(|(a, b)| a + b).collect();
    let mut target = velocity(model, params, &x2, feats, &t2, dt, cond)?;
    target.add_assign(&v1);
    target.scale(0.5);
    Ok(target)
}

/// Two batches through the net in one stacked pass.
#[allow(clippy::too_many_arguments)]
pub fn forward_stacked(
    model: &ShortcutModel,
    g: &mut Graph<'_>,
    xa: Var,
    ta: &[f64],
    dta: &[f64],
    xb: Var,
    tb: &[f64],
    dtb: &[f64],
    feats: Option<Var>,
    cond: &CondProj,
) -> Result<(Var, Var)> {
    let x = g.concat_rows(&[xa, xb]);
    let t = [ta, tb].concat();
    let dt = [dta, dtb].concat();
    let f = feats.map(|f| g.concat_rows(&[f, f]));
    let c = cond.stacked(g);
    let y = model.net.forward(g, x, f, &t, &dt, &c)?;
    let n = g.shape(xa).0;
    let ya = g.slice_rows(y, 0, n);
    let yb = g.slice_rows(y, n, n);
    Ok((ya, yb))
}

/// Graph nodes of both objectives for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub fm: Var,
    pub sc: Var,
}

/// Gradient-free self-consistency target of one draw.
pub fn draw_sc_target(
    model: &ShortcutModel,
    params: &ParamStore,
    x1: &Tensor,
    feats: Option<&Tensor>,
    cond: &CondCache,
    draw: &ShortcutDraw,
) -> Result<Tensor> {
    let x_sc = interpolant_rows(&draw.x0, x1, &draw.t_sc, model.data_shape().0);
    sc_target(model, params, &x_sc, feats, &draw.t_sc, &draw.dt, cond)
}

/// Flow-matching and self-consistency losses on a batch of targets `x1`
/// (`batch*rows x cols`), recorded on `g`.
pub fn shortcut_losses(
    model: &ShortcutModel,
    g: &mut Graph<'_>,
    x1: &Tensor,
    feats: Option<Var>,
    cond: &CondProj,
    draw: &ShortcutDraw,
) -> Result<LossVars> {
    if x1.shape() != draw.x0.shape() {
        return Err(invalid(format!("target shape {:?} does not match the model", x1.shape())));
    }
    let feats_val = feats.map(|f| g.value(f).clone());
    let target = draw_sc_target(model, g.store(), x1, feats_val.as_ref(), &cond.detach(g), draw)?;
    shortcut_losses_with(model, g, x1, feats, cond, draw, &target)
}

/// [`shortcut_losses`] with a fixed self-consistency target.
pub fn shortcut_losses_with(
    model: &ShortcutModel,
    g: &mut Graph<'_>,
    x1: &Tensor,
    feats: Option<Var>,
    cond: &CondProj,
    draw: &ShortcutDraw,
    sc_target: &Tensor,
) -> Result<LossVars> {
    if x1.shape() != draw.x0.shape() || sc_target.shape() != x1.shape() {
        return Err(invalid(format!("target shape {:?} does not match the model", x1.shape())));
    }
    let rows = model.data_shape().0;
    let x_fm = interpolant_rows(&draw.x0, x1, &draw.t_fm, rows);
    let x_sc = interpolant_rows(&draw.x0, x1, &draw.t_sc, rows);
    let mut velocity_target = x1.clone();
    velocity_target.add_scaled(&draw.x0, -1.0);
    let batch = draw.dt.len();
    let dt_min = vec![model.dt_min(); batch];
    let two_dt: Vec<f64> = draw.dt.iter().map(|d| 2.0 * d).collect();
    let a = g.constant(x_fm);
    let b = g.constant(x_sc);
    let (v_fm, v_sc) = forward_stacked(model, g, a, &draw.t_fm, &dt_min, b, &draw.t_sc, &two_dt, feats, cond)?;
    let vt = g.constant(velocity_target);
    let st = g.constant(sc_target.clone());
    Ok(LossVars { fm: g.mse(v_fm, vt), sc: g.mse(v_sc, st) })
}

/// Loss values for one batch with explicit condition values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShortcutLosses {
    pub l_fm: f64,
    pub l_sc: f64,
}

pub fn shortcut_train_losses(
    model: &ShortcutModel,
    params: &ParamStore,
    x1: &Tensor,
    cond: &Tensor,
    rng: &mut Rng,
) -> Result<ShortcutLosses> {
    let batch = cond.rows();
    let draw = ShortcutDraw::sample(model, batch, rng);
    let mut g = Graph::new(params);
    let cp = if cond.cols() == 0 {
        model.net.project_empty(&mut g, batch)
    } else {
        let c = g.constant(cond.clone());
        model.net.project_cond(&mut g, c)
    };
    let l = shortcut_losses(model, &mut g, x1, None, &cp, &draw)?;
    Ok(ShortcutLosses { l_fm: g.value(l.fm).item(), l_sc: g.value(l.sc).item() })
}
