use fbi_core::diffnet::{init_params, ParamStore};
use fbi_core::flow2tactile::*;
use fbi_core::geom::{keypoint_positions, Point};
use fbi_core::perception::{TactileFrame, TactileMode};
use fbi_core::rng;
use rand::seq::SliceRandom;
use rand::Rng as _;

fn cloud(n: usize, seed: u64) -> Vec<Point> {
    let mut r = rng::seeded(seed, &[]);
    (0..n).map(|_| [r.random_range(-0.05..0.05), r.random_range(0.03..0.13), r.random_range(-0.05..0.05)]).collect()
}

fn head(mode: SearchMode) -> (SearchHead, ParamStore) {
    let spec = HeadSpec { n_keypoints: 5, n_points: 12, width: 8, heads: 2, layers: 2, mode, ..HeadSpec::default() };
    init_params(&spec, 3).unwrap()
}

fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = rng::seeded(seed, &[]);
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
    }
}

#[test]
fn shadow_layout_counts() {
    let layout = build_layout(&LayoutKind::Shadow).unwrap();
    assert_eq!(layout.len(), 456);
    assert_eq!(palm_count(&layout), SHADOW_PALM_ROWS * SHADOW_PALM_COLS);
    assert_eq!(palm_count(&layout), 288);
    let chain = shadow_chain();
    layout.validate_for(&chain).unwrap();
    let q = vec![0.0; chain.revolute_count()];
    assert_eq!(keypoint_positions(&chain, &layout, &q).unwrap().len(), 456);
}

#[test]
fn toy_layout_counts_and_validation() {
    let l = toy_layout(2, 4, 3, 0.1, 0.01).unwrap();
    assert_eq!(l.len(), 24);
    assert!(toy_layout(0, 4, 3, 0.1, 0.01).is_err());
    assert!(toy_layout(2, 4, 3, -0.1, 0.01).is_err());
    assert!(build_layout(&LayoutKind::Unsupported).is_err());
}

#[test]
fn binarization_is_inclusive_at_the_threshold() {
    let f = binarize_forces(&[0.0, 0.5, 1.0, 2.0], 1.0).unwrap();
    assert_eq!(f.readings(), [0.0, 0.0, 1.0, 1.0]);
    assert_eq!(f.mode(), TactileMode::Binary);
    let cont = TactileFrame::new(vec![0.2, 0.05], TactileMode::Continuous).unwrap();
    assert_eq!(binarize_readings(&cont, 0.1).unwrap().readings(), [1.0, 0.0]);
    assert!(binarize_forces(&[-0.1], 1.0).is_err());
    assert!(binarize_forces(&[0.1], 0.0).is_err());
}

#[test]
fn zero_logits_give_quarter_loss_and_no_contacts() {
    let (h, store) = head(SearchMode::Flow);
    let kp = cloud(5, 1);
    let p = cloud(12, 2);
    let m = vec![[0.001, 0.0, 0.0]; 12];
    let input = SearchInput { keypoints: &kp, p_prev: &p, motion: &m };
    for target in [[true; 5], [false; 5], [true, false, true, false, false]] {
        let loss = tactile_train_loss(&h, &store, input, &TactileFrame::binary(&target)).unwrap();
        assert!((loss - 0.25).abs() < 1e-15);
    }
    let out = search_tactile(&h, &store, input).unwrap();
    assert!(out.logits.iter().all(|&l| l == 0.0));
    assert!(out.readings.readings().iter().all(|&r| r == 0.0));
}

#[test]
fn head_is_invariant_to_point_order_and_equivariant_in_keypoints() {
    for mode in [SearchMode::Flow, SearchMode::Pc] {
        let (h, mut store) = head(mode);
        jitter(&mut store, 4);
        let kp = cloud(5, 5);
        let p = cloud(12, 6);
        let m = cloud(12, 7);
        let base = search_tactile(&h, &store, SearchInput { keypoints: &kp, p_prev: &p, motion: &m }).unwrap();
        assert!(base.logits.iter().any(|&l| l != 0.0));

        let mut order: Vec<usize> = (0..12).collect();
        order.shuffle(&mut rng::seeded(8, &[]));
        let p2: Vec<Point> = order.iter().map(|&i| p[i]).collect();
        let m2: Vec<Point> = order.iter().map(|&i| m[i]).collect();
        let shuffled = search_tactile(&h, &store, SearchInput { keypoints: &kp, p_prev: &p2, motion: &m2 }).unwrap();
        for (a, b) in base.logits.iter().zip(&shuffled.logits) {
            assert!((a - b).abs() < 1e-12);
        }

        let kp2: Vec<Point> = kp.iter().rev().copied().collect();
        let rev = search_tactile(&h, &store, SearchInput { keypoints: &kp2, p_prev: &p, motion: &m }).unwrap();
        for (a, b) in base.logits.iter().zip(rev.logits.iter().rev()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn head_rejects_mismatched_sizes() {
    let (h, store) = head(SearchMode::Pc);
    let (kp, p) = (cloud(4, 1), cloud(12, 2));
    assert!(search_tactile(&h, &store, SearchInput { keypoints: &kp, p_prev: &p, motion: &p }).is_err());
    let kp = cloud(5, 1);
    assert!(tactile_train_loss(&h, &store, SearchInput { keypoints: &kp, p_prev: &p, motion: &p }, &TactileFrame::binary(&[true; 3]))
        .is_err());
}

#[test]
fn flow_prediction_is_seeded_and_one_step_uses_one_call() {
    let spec = FlowSpec { n_points: 16, ..FlowSpec::default() };
    let (model, store) = init_params(&spec, 2).unwrap();
    let (a, b) = (cloud(16, 1), cloud(16, 2));
    model.shortcut.net.reset_calls();
    let f = predict_flow(&model, &store, &a, &b, 1, 7).unwrap();
    assert_eq!(model.shortcut.net.calls(), 1);
    assert_eq!(f.len(), 16);
    assert_eq!(predict_flow(&model, &store, &a, &b, 1, 7).unwrap(), f);
    assert_ne!(predict_flow(&model, &store, &a, &b, 1, 8).unwrap(), f);
    assert!(predict_flow(&model, &store, &a[..8], &b, 1, 7).is_err());

    let l = flow_train_losses(&model, &store, &a, &b, &mut rng::seeded(0, &[])).unwrap();
    assert!(l.l_fm.is_finite() && l.l_fm >= 0.0 && l.l_sc >= 0.0);
}

#[test]
fn tactile_csv_has_one_row_per_keypoint() {
    let kp = vec![[0.0, 0.1, 0.2], [1.0, 1.5, -2.0]];
    let mut buf = Vec::new();
    write_tactile_csv(&mut buf, &kp, &TactileFrame::binary(&[false, true])).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text, "keypoint,x,y,z,reading\n0,0.0,0.1,0.2,0.0\n1,1.0,1.5,-2.0,1.0\n");
    assert!(write_tactile_csv(Vec::new(), &kp, &TactileFrame::binary(&[true])).is_err());
}
