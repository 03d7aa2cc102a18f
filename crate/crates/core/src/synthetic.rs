//! Low-dimensional benchmark distributions for the shortcut generator.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::diffnet::{init_params, optimizer_step, AdamConfig, AdamState, Graph, ParamStore, Tensor, VelocityNetSpec};
use crate::error::{invalid, Result};
use crate::rng;
use crate::shortcut::{euler_sample, shortcut_losses, ShortcutDraw, ShortcutModel};

/// Mixture of `modes` isotropic Gaussians with centers evenly spaced on a
/// circle of radius `radius`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RingMixture {
    pub modes: usize,
    pub radius: f64,
    pub std: f64,
}

impl Default for RingMixture {
    fn default() -> Self {
        Self { modes: 8, radius: 2.0, std: 0.15 }
    }
}

impl RingMixture {
    pub fn sample(&self, n: usize, seed: u64) -> Vec<[f64; 2]> {
        let mut r = rng::seeded(seed, &[0x6A]);
        (0..n)
            .map(|_| {
                let k = r.random_range(0..self.modes);
                let a = std::f64::consts::TAU * k as f64 / self.modes as f64;
                let nx: f64 = r.sample(StandardNormal);
                let ny: f64 = r.sample(StandardNormal);
                [self.radius * a.cos() + self.std * nx, self.radius * a.sin() + self.std * ny]
            })
            .collect()
    }
}

fn mean_pair_dist(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let mut s = 0.0;
    for p in a {
        for q in b {
            s += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Sample energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|` (V-statistic).
pub fn energy_distance(x: &[[f64; 2]], y: &[[f64; 2]]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(invalid("energy distance needs non-empty samples"));
    }
    Ok(2.0 * mean_pair_dist(x, y) - mean_pair_dist(x, x) - mean_pair_dist(y, y))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyGenConfig {
    pub width: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub base_steps: usize,
    pub train_points: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ToyGenConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 2,
            time_dim: 16,
            base_steps: 128,
            train_points: 4096,
            steps: 3000,
            batch: 128,
            lr: 2e-3,
        }
    }
}

/// Trains an unconditional 2-D shortcut model on `data`.
pub fn train_unconditional(
    data: &[[f64; 2]],
    cfg: &ToyGenConfig,
    seed: u64,
) -> Result<(ShortcutModel, ParamStore, Vec<f64>)> {
    let spec = VelocityNetSpec {
        data_rows: 1,
        data_cols: 2,
        per_row: false,
        row_features: 0,
        cond_dim: 0,
        time_dim: cfg.time_dim,
        down: vec![cfg.width; cfg.depth],
        mid: cfg.width,
        base_steps: cfg.base_steps,
    };
    let (net, mut store) = init_params(&spec, seed)?;
    let model = ShortcutModel::new(net);
    let mut adam = AdamConfig { lr: cfg.lr, clip_norm: Some(1.0), ..AdamConfig::default() };
    let mut state = AdamState::new(&store);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        adam.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        let mut r = rng::seeded(seed, &[0x7B, step as u64]);
        let rows: Vec<f64> = (0..cfg.batch).flat_map(|_| data[r.random_range(0..data.len())]).collect();
        let x1 = Tensor::from_vec(cfg.batch, 2, rows);
        let draw = ShortcutDraw::sample(&model, cfg.batch, &mut r);
        let grads = {
            let mut g = Graph::new(&store);
            let cp = model.net.project_empty(&mut g, cfg.batch);
            let l = shortcut_losses(&model, &mut g, &x1, None, &cp, &draw)?;
            let total = g.add(l.fm, l.sc);
            curve.push(g.value(total).item());
            g.backward(total)
        };
        optimizer_step(&mut store, &grads, &mut state, &adam)?;
    }
    Ok((model, store, curve))
}

/// Draws `n` samples with an `n_steps` Euler sampler.
pub fn sample_unconditional(
    model: &ShortcutModel,
    store: &ParamStore,
    n: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<[f64; 2]>> {
    let mut g = Graph::new(store);
    let cond = model.net.project_empty(&mut g, n).detach(&g);
    let out = euler_sample(model, store, &cond, None, n_steps, seed)?;
    Ok((0..n).map(|i| [out.get(i, 0), out.get(i, 1)]).collect())
}
