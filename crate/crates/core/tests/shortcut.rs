use fbi_core::diffnet::{init_params, CondCache, Graph, ParamStore, Tensor, VelocityNetSpec};
use fbi_core::rng;
use fbi_core::shortcut::*;
use proptest::prelude::*;

fn model(cond_dim: usize) -> (ShortcutModel, ParamStore) {
    let spec = VelocityNetSpec {
        data_rows: 1,
        data_cols: 3,
        per_row: false,
        row_features: 0,
        cond_dim,
        time_dim: 8,
        down: vec![16],
        mid: 16,
        base_steps: 128,
    };
    let (net, store) = init_params(&spec, 9).unwrap();
    (ShortcutModel::new(net), store)
}

fn empty_cond(m: &ShortcutModel, store: &ParamStore, batch: usize) -> CondCache {
    let mut g = Graph::new(store);
    m.net.project_empty(&mut g, batch).detach(&g)
}

/// Zero output weights plus bias `c` make the field constant.
fn constant_field(store: &mut ParamStore, m: &ShortcutModel, c: [f64; 3]) {
    let out = m.net.out_layer();
    store.get_mut(out.b).data_mut().copy_from_slice(&c);
}

#[test]
fn interpolant_endpoints_midpoint_and_slope() {
    let x0 = Tensor::from_vec(2, 2, vec![0.0, 1.0, -2.0, 0.5]);
    let x1 = Tensor::from_vec(2, 2, vec![2.0, 3.0, 4.0, -0.5]);
    assert_eq!(interpolant(&x0, &x1, 0.0).unwrap(), x0);
    assert_eq!(interpolant(&x0, &x1, 1.0).unwrap(), x1);
    assert_eq!(interpolant(&Tensor::scalar(0.0), &Tensor::scalar(2.0), 0.5).unwrap().item(), 1.0);
    let h = 1e-6;
    for t in [0.1, 0.5, 0.9] {
        let a = interpolant(&x0, &x1, t + h).unwrap();
        let b = interpolant(&x0, &x1, t - h).unwrap();
        for i in 0..4 {
            let slope = (a.data()[i] - b.data()[i]) / (2.0 * h);
            assert!((slope - (x1.data()[i] - x0.data()[i])).abs() < 1e-8);
        }
    }
    assert!(interpolant(&x0, &Tensor::zeros(1, 4), 0.5).is_err());
    assert!(interpolant(&x0, &x1, 1.5).is_err());
}

#[test]
fn untrained_net_returns_the_initial_noise() {
    let (m, store) = model(0);
    let cond = empty_cond(&m, &store, 5);
    let noise = standard_normal(5, 3, &mut rng::seeded(42, &[0x5A]));
    for n in [1, 2, 16, 128] {
        assert_eq!(euler_sample(&m, &store, &cond, None, n, 42).unwrap(), noise);
    }
}

#[test]
fn constant_field_is_step_count_independent() {
    let (m, mut store) = model(0);
    constant_field(&mut store, &m, [0.5, -1.25, 2.0]);
    let cond = empty_cond(&m, &store, 4);
    let x0 = standard_normal(4, 3, &mut rng::seeded(1, &[]));
    let one = euler_sample_from(&m, &store, &cond, None, 1, x0.clone()).unwrap();
    for i in 0..4 {
        assert_eq!(one.row(i), [x0.get(i, 0) + 0.5, x0.get(i, 1) - 1.25, x0.get(i, 2) + 2.0]);
    }
    for n in [2, 4, 8, 64, 128] {
        let x = euler_sample_from(&m, &store, &cond, None, n, x0.clone()).unwrap();
        let y = euler_sample_from(&m, &store, &cond, None, n / 2, x0.clone()).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn step_counts_outside_the_schedule_are_rejected() {
    let (m, store) = model(0);
    let cond = empty_cond(&m, &store, 1);
    assert!(euler_sample(&m, &store, &cond, None, 0, 0).is_err());
    assert!(euler_sample(&m, &store, &cond, None, 129, 0).is_err());
}

#[test]
fn one_step_sampling_calls_the_net_once() {
    let (m, store) = model(0);
    let cond = empty_cond(&m, &store, 3);
    for n in [1, 10] {
        m.net.reset_calls();
        euler_sample(&m, &store, &cond, None, n, 0).unwrap();
        assert_eq!(m.net.calls(), n);
    }
}

#[test]
fn constant_net_losses_match_closed_form() {
    let (m, mut store) = model(0);
    let c = [0.3, -0.2, 0.1];
    constant_field(&mut store, &m, c);
    let x1 = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 0.5]);
    let mut r = rng::seeded(4, &[]);
    let l = shortcut_train_losses(&m, &store, &x1, &Tensor::zeros(2, 0), &mut r).unwrap();
    let draw = ShortcutDraw::sample(&m, 2, &mut rng::seeded(4, &[]));
    let mut want = 0.0;
    for i in 0..6 {
        let target = x1.data()[i] - draw.x0.data()[i];
        want += (c[i % 3] - target).powi(2);
    }
    assert!((l.l_fm - want / 6.0).abs() < 1e-12);
    assert_eq!(l.l_sc, 0.0);
}

#[test]
fn losses_are_deterministic_and_non_negative() {
    let (m, store) = model(2);
    let x1 = standard_normal(6, 3, &mut rng::seeded(2, &[]));
    let cond = standard_normal(6, 2, &mut rng::seeded(3, &[]));
    let a = shortcut_train_losses(&m, &store, &x1, &cond, &mut rng::seeded(5, &[])).unwrap();
    let b = shortcut_train_losses(&m, &store, &x1, &cond, &mut rng::seeded(5, &[])).unwrap();
    assert_eq!(a, b);
    assert!(a.l_fm >= 0.0 && a.l_sc >= 0.0);
}

proptest! {
    #[test]
    fn draws_stay_on_the_dyadic_grid(seed in 0u64..500) {
        let (m, _) = model(0);
        let d = ShortcutDraw::sample(&m, 16, &mut rng::seeded(seed, &[]));
        let big = 128.0;
        for i in 0..16 {
            prop_assert_eq!((d.t_fm[i] * big).fract(), 0.0);
            prop_assert!(d.t_fm[i] < 1.0);
            let steps = d.dt[i] * big;
            prop_assert!(steps.log2().fract() == 0.0 && steps <= 64.0);
            prop_assert_eq!((d.t_sc[i] / d.dt[i]).fract(), 0.0);
            prop_assert!(d.t_sc[i] + 2.0 * d.dt[i] <= 1.0);
        }
    }
}
