use fbi_core::diffnet::{init_params, Linear, ParamStore};
use fbi_core::geom::Point;
use fbi_core::perception::*;
use fbi_core::pipeline::{PolicySpec, RunConfig};
use fbi_core::rng;
use rand::seq::SliceRandom;
use rand::Rng as _;

fn spec(fusion: FusionMethod, points: usize) -> PerceptionSpec {
    PerceptionSpec {
        n_s: 4,
        n_r: 6,
        points_per_frame: points,
        d_s: 8,
        d_v: 8,
        d_tac: 8,
        hidden: 6,
        token_width: 4,
        heads: 2,
        fusion,
    }
}

fn cloud(n: usize, seed: u64) -> Vec<Point> {
    let mut r = rng::seeded(seed, &[]);
    (0..n).map(|_| [0; 3].map(|_| r.random_range(-1.0..1.0))).collect()
}

fn state(v: &[f64]) -> RobotState {
    RobotState::new(v.to_vec()).unwrap()
}

fn affine(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let (w, b) = (store.get(l.w), store.get(l.b));
    (0..l.out_dim).map(|j| b.get(0, j) + (0..l.in_dim).map(|i| x[i] * w.get(i, j)).sum::<f64>()).collect()
}

#[test]
fn default_widths() {
    let p = PolicySpec::from_run(&RunConfig::default()).perception();
    assert_eq!((p.d_s, p.d_v, p.d_tac, p.token_width, p.heads), (64, 128, 64, 32, 2));
    let (enc, store) = init_params(&p, 0).unwrap();
    let s = state(&[0.1, 0.2, 0.3, 0.4]);
    assert_eq!(enc.encode_state(&store, &s, &s).unwrap().len(), 64);
    let r = TactileFrame::new(vec![0.0; p.n_r], TactileMode::Binary).unwrap();
    assert_eq!(enc.encode_tactile(&store, &r).unwrap().len(), 64);
}

#[test]
fn state_encoder_is_order_sensitive_and_zero_with_zero_params() {
    let (enc, mut store) = init_params(&spec(FusionMethod::Mlp, 3), 1).unwrap();
    let (a, b) = (state(&[0.1, -0.3, 0.7, 0.2]), state(&[0.5, 0.1, -0.2, 0.9]));
    assert_ne!(enc.encode_state(&store, &a, &b).unwrap(), enc.encode_state(&store, &b, &a).unwrap());
    store.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
    assert!(enc.encode_state(&store, &a, &b).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn visual_encoder_ignores_order_and_duplicates() {
    let (enc, store) = init_params(&spec(FusionMethod::Mlp, 10), 2).unwrap();
    let (prev, cur) = (cloud(10, 1), cloud(10, 2));
    let base = enc.encode_visual(&store, &prev, &cur).unwrap();
    let mut r = rng::seeded(3, &[]);
    let (mut p2, mut c2) = (prev.clone(), cur.clone());
    p2.shuffle(&mut r);
    c2.shuffle(&mut r);
    assert_eq!(enc.encode_visual(&store, &p2, &c2).unwrap(), base);

    // Parameter shapes do not depend on the point count, so the same seed
    // gives the same weights.
    let (enc2, store2) = init_params(&spec(FusionMethod::Mlp, 20), 2).unwrap();
    let dup = |c: &[Point]| c.iter().chain(c).copied().collect::<Vec<_>>();
    assert_eq!(enc2.encode_visual(&store2, &dup(&prev), &dup(&cur)).unwrap(), base);
}

#[test]
fn visual_encoder_matches_hand_evaluation_on_single_points() {
    let (enc, store) = init_params(&spec(FusionMethod::Mlp, 1), 4).unwrap();
    let (p, q) = ([0.1, -0.2, 0.3], [0.4, 0.0, -0.5]);
    let per_point = |x: [f64; 4]| {
        let layers = &enc.visual.points.layers;
        let mut h = x.to_vec();
        for (i, l) in layers.iter().enumerate() {
            h = affine(&store, l, &h);
            if i + 1 < layers.len() {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        h
    };
    let a = per_point([p[0], p[1], p[2], 0.0]);
    let b = per_point([q[0], q[1], q[2], 1.0]);
    let pooled: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect();
    let want = affine(&store, &enc.visual.out, &pooled);
    let got = enc.encode_visual(&store, &[p], &[q]).unwrap();
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn tactile_mode_is_metadata() {
    let (enc, store) = init_params(&spec(FusionMethod::Mlp, 3), 5).unwrap();
    let v = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    let a = enc.encode_tactile(&store, &TactileFrame::new(v.clone(), TactileMode::Binary).unwrap()).unwrap();
    let b = enc.encode_tactile(&store, &TactileFrame::new(v, TactileMode::Continuous).unwrap()).unwrap();
    assert_eq!(a, b);
    let zero = TactileFrame::new(vec![0.0; 6], TactileMode::Binary).unwrap();
    assert!(enc.encode_tactile(&store, &zero).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn every_fusion_method_emits_twice_d_v() {
    for method in [FusionMethod::Transformer, FusionMethod::Mlp, FusionMethod::Add] {
        let (enc, store) = init_params(&spec(method, 3), 6).unwrap();
        let out = enc.fuse_features(&store, &[0.1; 8], Some(&[0.2; 8])).unwrap();
        assert_eq!(out.len(), 16, "{method:?}");
    }
}

#[test]
fn add_fusion_with_zero_projection_duplicates_visual_features() {
    let (enc, mut store) = init_params(&spec(FusionMethod::Add, 3), 7).unwrap();
    let Some(Fusion::Add(proj)) = &enc.fusion else { panic!("add fusion expected") };
    store.get_mut(proj.w).data_mut().fill(0.0);
    let f_v: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
    let out = enc.fuse_features(&store, &f_v, Some(&[0.7; 8])).unwrap();
    assert_eq!(out, [f_v.clone(), f_v].concat());
}

#[test]
fn indivisible_token_width_is_rejected() {
    let mut s = spec(FusionMethod::Transformer, 3);
    s.token_width = 3;
    assert!(init_params(&s, 0).is_err());
}

#[test]
fn robot_state_rejects_non_finite_joints() {
    assert!(RobotState::new(vec![0.0, f64::NAN]).is_err());
}
