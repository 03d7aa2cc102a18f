use fbi_core::diffnet::init_params;
use fbi_core::flow2tactile::Flow2Tactile;
use fbi_core::perception::{FusionMethod, RobotState, TactileFrame};
use fbi_core::pipeline::*;
use fbi_core::toyenv::{generate_demos, Episode, Task, ToyConfig};
use fbi_core::Error;

fn tiny(repr: TactileRepr, mode: PolicyMode) -> RunConfig {
    let mut cfg = RunConfig {
        representation: repr,
        mode,
        fusion: FusionMethod::Mlp,
        env: ToyConfig { n_points: 32, material_points: 64, goal_points: 8, ..ToyConfig::default() },
        ..RunConfig::default()
    };
    cfg.policy = PolicyConfig {
        hidden: 8,
        d_s: 8,
        d_v: 8,
        d_tac: 8,
        token_width: 4,
        time_dim: 8,
        widths: vec![16],
        mid: 16,
        ..PolicyConfig::default()
    };
    cfg.train = TrainConfig { epochs: 2, batch: 16, chunk: 8, lr: 1e-3, ..TrainConfig::default() };
    cfg.eval = EvalConfig { episodes: 3, chunk: 2, ..EvalConfig::default() };
    cfg.f2t = F2tConfig { hidden: 8, d_v: 8, widths: vec![8], mid: 8, head_width: 8, head_heads: 2, head_layers: 1, ..F2tConfig::default() };
    cfg
}

fn obs(cfg: &RunConfig, seed: u64) -> PolicyObs {
    let o = Episode::reset(&cfg.env, cfg.task, seed).unwrap().observe().unwrap();
    PolicyObs {
        s_prev: RobotState::new(o.s_prev.to_vec()).unwrap(),
        s_cur: RobotState::new(o.s_cur.to_vec()).unwrap(),
        p_prev: o.p_prev,
        p_cur: o.p_cur,
        goal: o.goal_cloud,
        tactile: Some(TactileFrame::binary(&o.r_gt)),
    }
}

fn untrained_f2t(cfg: &RunConfig) -> Flow2Tactile {
    let norm = cfg.policy.norm;
    let (flow, flow_params) = init_params(&cfg.f2t.flow_spec(&cfg.env, norm), 1).unwrap();
    let (head, mut head_params) = init_params(&cfg.f2t.head_spec(&cfg.env, norm), 2).unwrap();
    // A non-zero head so the inferred contacts are not all empty.
    for (i, t) in head_params.tensors_mut().iter_mut().enumerate() {
        t.data_mut().iter_mut().enumerate().for_each(|(j, v)| *v += 0.2 * ((i * 7 + j) as f64).sin());
    }
    Flow2Tactile { flow, flow_params, head, head_params }
}

#[test]
fn top_k_protocol_values() {
    let s = summarize_protocol(&[(0, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6])], 5).unwrap();
    assert!((s.mean - 0.4).abs() < 1e-12);
    assert_eq!(s.std, 0.0);
    assert!((top_k_mean(&[0.5, 0.1], 5).unwrap() - 0.3).abs() < 1e-15);
    let two = summarize_protocol(&[(0, vec![0.2]), (1, vec![0.6])], 5).unwrap();
    assert!((two.mean - 0.4).abs() < 1e-15 && (two.std - 0.2).abs() < 1e-15);
    assert!(top_k_mean(&[], 5).is_err());
    assert!(summarize_protocol(&[], 5).is_err());
}

#[test]
fn ema_and_interpolation() {
    let prev = RobotState::new(vec![0.0]).unwrap();
    let raw = vec![vec![1.0], vec![1.0], vec![1.0]];
    let out = postprocess_actions(&raw, &prev, 0.5, 1).unwrap();
    assert_eq!(out, vec![vec![0.5], vec![0.75], vec![0.875]]);
    let out = postprocess_actions(&raw[..1], &prev, 1.0, 4).unwrap();
    assert_eq!(out, vec![vec![0.25], vec![0.5], vec![0.75], vec![1.0]]);
    assert!(postprocess_actions(&raw, &prev, 0.0, 1).is_err());
    assert!(postprocess_actions(&raw, &prev, 0.5, 0).is_err());
    assert!(postprocess_actions(&[vec![1.0, 2.0]], &prev, 0.5, 1).is_err());
}

#[test]
fn smoothed_targets_stay_between_previous_and_raw() {
    let prev = RobotState::new(vec![0.0, 1.0]).unwrap();
    let raw = vec![vec![2.0, -1.0]];
    for alpha in [0.1, 0.5, 0.9] {
        for row in postprocess_actions(&raw, &prev, alpha, 3).unwrap() {
            assert!((0.0..=2.0).contains(&row[0]) && (-1.0..=1.0).contains(&row[1]));
        }
    }
}

#[test]
fn one_step_inference_uses_one_net_call() {
    let cfg = tiny(TactileRepr::DenseBinary, PolicyMode::Visuotactile);
    let p = FbiPolicy::new(PolicySpec::from_run(&cfg), 0).unwrap();
    let o = obs(&cfg, 0);
    let lat = measure_latency(&p, &o, 1, 3).unwrap();
    assert_eq!(lat.nfe, 1);
    assert_eq!(measure_latency(&p, &o, 4, 3).unwrap().nfe, 4);
    let a = run_inference(&p, &o, 1, 5).unwrap();
    assert_eq!(a.len(), cfg.policy.horizon);
    assert_eq!(run_inference(&p, &o, 1, 5).unwrap(), a);
}

#[test]
fn no_tactile_representation_ignores_readings() {
    let cfg = tiny(TactileRepr::None, PolicyMode::Visuotactile);
    let p = FbiPolicy::new(PolicySpec::from_run(&cfg), 0).unwrap();
    let mut o = obs(&cfg, 1);
    let with = run_inference(&p, &o, 1, 2).unwrap();
    o.tactile = None;
    assert_eq!(run_inference(&p, &o, 1, 2).unwrap(), with);
}

#[test]
fn visuotactile_policy_requires_matching_readings() {
    let cfg = tiny(TactileRepr::DenseBinary, PolicyMode::Visuotactile);
    let p = FbiPolicy::new(PolicySpec::from_run(&cfg), 0).unwrap();
    let mut o = obs(&cfg, 1);
    o.tactile = None;
    assert!(run_inference(&p, &o, 1, 0).is_err());
    o.tactile = Some(TactileFrame::binary(&[true; 3]));
    assert!(run_inference(&p, &o, 1, 0).is_err());
}

#[test]
fn vision_only_matches_visuotactile_fed_inferred_contacts() {
    let cfg = tiny(TactileRepr::DenseBinary, PolicyMode::VisionOnly);
    let mut vision = FbiPolicy::new(PolicySpec::from_run(&cfg), 3).unwrap();
    let o = obs(&cfg, 2);
    assert!(matches!(run_inference(&vision, &o, 1, 4), Err(Error::Config(_))));
    vision.attach_flow2tactile(untrained_f2t(&cfg)).unwrap();

    let inferred = vision.infer_tactile(&[o.as_ref()], 4, 1).unwrap().remove(0);
    let mut touch = vision.clone();
    touch.spec.mode = PolicyMode::Visuotactile;
    let fed = PolicyObs { tactile: Some(TactileFrame::binary(&inferred.iter().map(|&v| v > 0.0).collect::<Vec<_>>())), ..o.clone() };
    assert_eq!(run_inference(&vision, &o, 1, 4).unwrap(), run_inference(&touch, &fed, 1, 4).unwrap());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let cfg = tiny(TactileRepr::DenseBinary, PolicyMode::Visuotactile);
    let ds = generate_demos(&cfg.env, Task::Push, 2, 0).unwrap();
    let spec = PolicySpec::from_run(&cfg);

    let mut straight = FbiPolicy::new(spec.clone(), 1).unwrap();
    let mut st = TrainState::new(&straight);
    let full = train_policy(&mut straight, &mut st, &ds, &cfg.train, 7, |_, _| Ok(None)).unwrap();
    assert_eq!(full.losses.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let mut first = FbiPolicy::new(spec, 1).unwrap();
    let mut s1 = TrainState::new(&first);
    let half = TrainConfig { epochs: 1, ..cfg.train.clone() };
    train_policy(&mut first, &mut s1, &ds, &half, 7, |_, _| Ok(None)).unwrap();
    save_policy(&path, &first, Some(&s1)).unwrap();

    let (mut resumed, state) = load_policy(&path).unwrap();
    let mut state = state.unwrap();
    assert_eq!(state.epoch, 1);
    let rest = train_policy(&mut resumed, &mut state, &ds, &cfg.train, 7, |_, _| Ok(None)).unwrap();
    assert_eq!(rest.losses, full.losses[1..]);
    assert_eq!(resumed.params, straight.params);
    assert_eq!(state, st);
}

#[test]
fn policy_training_leaves_flow2tactile_untouched() {
    let cfg = tiny(TactileRepr::DenseBinary, PolicyMode::VisionOnly);
    let ds = generate_demos(&cfg.env, Task::Push, 2, 0).unwrap();
    let mut p = FbiPolicy::new(PolicySpec::from_run(&cfg), 1).unwrap();
    let f2t = untrained_f2t(&cfg);
    p.attach_flow2tactile(f2t.clone()).unwrap();
    let before = p.params.clone();
    let mut st = TrainState::new(&p);
    train_policy(&mut p, &mut st, &ds, &TrainConfig { epochs: 1, ..cfg.train.clone() }, 0, |_, _| Ok(None)).unwrap();
    assert_ne!(p.params, before);
    let after = p.f2t.as_ref().unwrap();
    assert_eq!(after.flow_params, f2t.flow_params);
    assert_eq!(after.head_params, f2t.head_params);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    save_policy(&path, &p, None).unwrap();
    let (loaded, state) = load_policy(&path).unwrap();
    assert!(state.is_none());
    assert_eq!(loaded.params, p.params);
    assert_eq!(loaded.f2t.unwrap().flow_params, f2t.flow_params);
}

#[test]
fn evaluation_is_seeded() {
    let cfg = tiny(TactileRepr::Sparse, PolicyMode::Visuotactile);
    let p = FbiPolicy::new(PolicySpec::from_run(&cfg), 0).unwrap();
    let a = evaluate_policy(&p, Task::Push, &cfg.eval, 9).unwrap();
    assert_eq!(a.episodes.len(), 3);
    assert_eq!(a.nfe, 1.0);
    assert_eq!(evaluate_policy(&p, Task::Push, &cfg.eval, 9).unwrap(), a);
}

#[test]
fn config_round_trip_and_unknown_keys() {
    let cfg = tiny(TactileRepr::Sparse, PolicyMode::Visuotactile);
    assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    match RunConfig::from_json(r#"{"train": {"epochz": 3}}"#) {
        Err(Error::Config(msg)) => assert!(msg.contains("epochz"), "{msg}"),
        other => panic!("expected a config error, got {other:?}"),
    }
    assert!(RunConfig::from_json(r#"{"mode": "vision-only", "representation": "dense-continuous"}"#).is_err());
    assert!(RunConfig::from_json(r#"{"eval": {"ema_alpha": 0.0}}"#).is_err());
}
