use fbi_core::geom::{apply_flow, chamfer_distance, keypoint_positions, FlowField, PointCloud};
use fbi_core::toyenv::*;
use fbi_core::Error;
use std::f64::consts::PI;

fn small() -> ToyConfig {
    ToyConfig { n_points: 64, material_points: 128, goal_points: 16, ..ToyConfig::default() }
}

fn rest_state(cfg: &ToyConfig) -> ToyState {
    env_reset(cfg, Task::Push, 0).0
}

#[test]
fn exact_flow_maps_one_frame_onto_the_next() {
    let cfg = small();
    let mut ep = Episode::reset(&cfg, Task::Push, 3).unwrap();
    for _ in 0..5 {
        let a = ep.expert().unwrap();
        ep.step(&a).unwrap();
    }
    let o = ep.observe().unwrap();
    assert_eq!((o.p_prev.len(), o.p_cur.len(), o.flow.len()), (64, 64, 64));
    assert!(o.flow.iter().any(|f| f.iter().any(|&v| v != 0.0)));
    let moved = apply_flow(&PointCloud::new(o.p_prev).unwrap(), &FlowField::new(o.flow).unwrap()).unwrap();
    assert!(chamfer_distance(&moved, &PointCloud::new(o.p_cur).unwrap()).unwrap() < 1e-12);
    assert_eq!(o.r_gt.len(), cfg.n_keypoints());
    assert_eq!(o.forces.len(), cfg.n_keypoints());
    assert_eq!(o.goal_cloud.len(), 16);
}

#[test]
fn push_success_within_one_millimetre() {
    let goal = Goal { task: Task::Push, position: [0.0, 0.1], theta: 0.0 };
    let at = |dx: f64| ToyState { q: [0.0; N_JOINTS], disk: [dx, 0.1], theta: 2.0 };
    assert!(check_success(&at(0.0009), &goal));
    assert!(check_success(&at(0.001), &goal));
    assert!(!check_success(&at(0.0011), &goal));
}

#[test]
fn rotate_success_wraps_angles() {
    let goal = Goal { task: Task::Rotate, position: [0.0, 0.1], theta: -3.1 };
    let at = |theta: f64| ToyState { q: [0.0; N_JOINTS], disk: [0.05, 0.0], theta };
    assert!(check_success(&at(3.1), &goal));
    assert!(check_success(&at(-3.1 + 0.099), &goal));
    assert!(!check_success(&at(-3.1 + 0.101), &goal));
    assert!(!check_success(&at(-3.1 + PI), &goal));
}

#[test]
fn resets_are_seeded_and_goals_in_range() {
    let cfg = ToyConfig::default();
    for seed in 0..50 {
        let (s, g) = env_reset(&cfg, Task::Push, seed);
        assert_eq!(env_reset(&cfg, Task::Push, seed), (s.clone(), g.clone()));
        let d = (g.position[0] - s.disk[0]).hypot(g.position[1] - s.disk[1]);
        assert!((0.02 - 1e-12..=0.03 + 1e-12).contains(&d), "{d}");
        assert!(g.position[1] > s.disk[1]);
        assert!((s.disk[0] - cfg.start_center[0]).abs() <= cfg.start_jitter[0]);

        let (s, g) = env_reset(&cfg, Task::Rotate, seed);
        let mut turn = (g.theta - s.theta).abs();
        if turn > PI {
            turn = 2.0 * PI - turn;
        }
        assert!((0.3 - 1e-12..=0.6 + 1e-12).contains(&turn), "{turn}");
        assert_eq!(g.position, s.disk);
    }
    assert_ne!(env_reset(&cfg, Task::Push, 1), env_reset(&cfg, Task::Push, 2));
}

#[test]
fn steps_validate_actions_and_limit_joint_speed() {
    let cfg = ToyConfig::default();
    let chain = cfg.chain();
    let mut s = rest_state(&cfg);
    s.disk = [0.0, 0.5];
    assert!(env_step(&cfg, &chain, &s, &[0.0; 3]).is_err());
    assert!(matches!(env_step(&cfg, &chain, &s, &[f64::NAN, 0.0, 0.0, 0.0]), Err(Error::NonFinite(_))));
    let target = [s.q[0] + 1.0, s.q[1] - 1.0, s.q[2], s.q[3] + 0.01];
    let next = env_step(&cfg, &chain, &s, &target).unwrap();
    let max = cfg.max_joint_speed * cfg.dt;
    assert!((next.q[0] - (s.q[0] + max)).abs() < 1e-15);
    assert!((next.q[1] - (s.q[1] - max)).abs() < 1e-15);
    assert_eq!(next.q[2], s.q[2]);
    assert!((next.q[3] - target[3]).abs() < 1e-15);
    assert_eq!((next.disk, next.theta), (s.disk, s.theta));
}

#[test]
fn contact_oracle_and_forces_follow_rim_distance() {
    let cfg = ToyConfig::default();
    let chain = cfg.chain();
    let layout = cfg.keypoint_layout().unwrap();
    let mut s = rest_state(&cfg);
    s.disk = [1.0, 1.0];
    assert!(contact_oracle(&cfg, &chain, &layout, &s).unwrap().iter().all(|c| !c));
    assert!(contact_forces(&cfg, &chain, &layout, &s).unwrap().iter().all(|&f| f == 0.0));

    let kp = keypoint_positions(&chain, &layout, &s.q).unwrap();
    let k = 7;
    let gap = 0.001;
    s.disk = [kp[k][0] + cfg.disk_radius + gap, kp[k][1]];
    assert!(contact_oracle(&cfg, &chain, &layout, &s).unwrap()[k]);
    let f = contact_forces(&cfg, &chain, &layout, &s).unwrap()[k];
    assert!((f - CONTACT_STIFFNESS * (cfg.contact_eps - gap)).abs() < 1e-9);

    s.disk = [kp[k][0] + cfg.disk_radius + 0.003, kp[k][1]];
    assert!(!contact_oracle(&cfg, &chain, &layout, &s).unwrap()[k]);
}

#[test]
fn expert_solves_push_from_seeded_starts() {
    let cfg = small();
    let ok = (0..8).filter(|&s| expert_rollout(&cfg, Task::Push, s, false).unwrap().success).count();
    assert!(ok >= 6, "{ok} of 8");
}

#[test]
fn dataset_round_trip_and_corruption() {
    let cfg = small();
    let ds = generate_demos(&cfg, Task::Push, 2, 11).unwrap();
    assert_eq!(ds.manifest.n_traj, 2);
    assert_eq!((ds.manifest.n_p, ds.manifest.n_k), (64, cfg.n_keypoints()));
    assert_eq!(generate_demos(&cfg, Task::Push, 2, 11).unwrap(), ds);

    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 3);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("\"N_p\": 64"));
    assert_eq!(read_dataset(dir.path()).unwrap(), ds);

    let traj = dir.path().join("traj_00001.bin");
    let mut bytes = std::fs::read(&traj).unwrap();
    bytes.push(0);
    std::fs::write(&traj, &bytes).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
    bytes[0] = b'X';
    std::fs::write(&traj, &bytes).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));

    std::fs::write(dir.path().join("manifest.json"), manifest.replace("\"version\": 1", "\"version\": 9")).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
    assert!(generate_demos(&cfg, Task::Push, 0, 0).is_err());
}
