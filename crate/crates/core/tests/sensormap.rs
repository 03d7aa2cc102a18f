use fbi_core::sensormap::*;

fn unit_square(vals: [f64; 4]) -> Vec<([f64; 2], f64)> {
    vec![([0.0, 0.0], vals[0]), ([1.0, 0.0], vals[1]), ([0.0, 1.0], vals[2]), ([1.0, 1.0], vals[3])]
}

#[test]
fn bilinear_center_and_nodes() {
    let s = unit_square([0.0, 1.0, 2.0, 3.0]);
    let c = interpolate_region_bilinear(&s, [0.5, 0.5]).unwrap();
    assert_eq!(c, Interpolated { value: 1.5, path: InterpPath::Bilinear });
    // Along the bottom edge only the two lower corners contribute.
    assert!((interpolate_region_bilinear(&s, [0.25, 0.0]).unwrap().value - 0.25).abs() < 1e-15);
    for (p, v) in &s {
        assert_eq!(interpolate_region_bilinear(&s, *p).unwrap(), Interpolated { value: *v, path: InterpPath::Node });
    }
}

#[test]
fn smallest_enclosing_rectangle_wins() {
    let mut s = Vec::new();
    for j in 0..3 {
        for i in 0..3 {
            let x = i as f64;
            s.push(([x, j as f64], x * x));
        }
    }
    let v = interpolate_region_bilinear(&s, [0.5, 0.5]).unwrap();
    assert_eq!(v.path, InterpPath::Bilinear);
    assert!((v.value - 0.5).abs() < 1e-15);
}

#[test]
fn falls_back_to_nearest_without_a_rectangle() {
    let s = vec![([0.0, 0.0], 1.0), ([1.0, 0.0], 2.0), ([0.0, 1.0], 3.0)];
    assert_eq!(
        interpolate_region_bilinear(&s, [0.9, 0.3]).unwrap(),
        Interpolated { value: 2.0, path: InterpPath::Nearest }
    );
    assert!(interpolate_region_bilinear(&[], [0.0, 0.0]).is_err());
}

#[test]
fn regions_are_half_open() {
    let g = RegionGrid { origin: [0.0, 0.0], side: 1.0, rows: 2, cols: 3 };
    assert_eq!(assign_region(&g, [0.0, 0.0]).unwrap(), 0);
    assert_eq!(assign_region(&g, [1.0, 0.5]).unwrap(), 1);
    assert_eq!(assign_region(&g, [2.5, 1.0]).unwrap(), 5);
    assert_eq!(assign_region(&g, [0.999_999_999_999, 0.0]).unwrap(), 0);
    assert!(assign_region(&g, [3.0, 0.5]).is_err());
    assert!(assign_region(&g, [0.5, -1e-12]).is_err());
    assert!(assign_region(&g, [f64::NAN, 0.5]).is_err());
}

#[test]
fn shadow_layout_shape_and_round_trip() {
    let l = shadow_sensor_layout();
    l.validate().unwrap();
    assert_eq!(l.sensors.len(), SHADOW_SENSORS);
    assert_eq!(l.sensors.iter().filter(|s| s.region < 8).count(), SHADOW_PALM_SENSORS);
    assert_eq!(SensorLayout::from_json(&l.to_json().unwrap()).unwrap(), l);

    let chart = shadow_keypoint_chart();
    assert_eq!(chart.len(), 456);
    assert!(chart.iter().all(|&p| assign_region(&l.grid, p).is_ok()));
}

#[test]
fn malformed_layouts_are_rejected() {
    let mut l = shadow_sensor_layout();
    l.sensors[3].region = 9;
    assert!(l.validate().is_err());

    let l = shadow_sensor_layout();
    let mut v: serde_json::Value = serde_json::from_str(&l.to_json().unwrap()).unwrap();
    v["grid"]["extra"] = 1.into();
    assert!(SensorLayout::from_json(&v.to_string()).is_err());

    let mut l = shadow_sensor_layout();
    l.sensors.retain(|s| s.region != 15);
    assert!(l.validate().is_err());
}

#[test]
fn keypoint_binarization_and_reading_checks() {
    let l = shadow_sensor_layout();
    let chart = shadow_keypoint_chart();
    let all = sensors_to_keypoints(&l, &chart, &vec![MAX_READING; SHADOW_SENSORS], 1.0).unwrap();
    assert!(all.readings().iter().all(|&r| r == 1.0));
    let none = sensors_to_keypoints(&l, &chart, &vec![0.5; SHADOW_SENSORS], 1.0).unwrap();
    assert!(none.readings().iter().all(|&r| r == 0.0));
    assert!(sensors_to_keypoints(&l, &chart, &vec![0.5; 10], 1.0).is_err());
    assert!(sensors_to_keypoints(&l, &chart, &vec![5.5; SHADOW_SENSORS], 1.0).is_err());
    assert!(sensors_to_keypoints(&l, &chart, &vec![-0.1; SHADOW_SENSORS], 1.0).is_err());
}

#[test]
fn sensor_stream_rows() {
    let rows = read_sensor_stream("0.0, 1, 2\n0.5, 3, 4\n".as_bytes(), 2).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1], SensorSample { timestamp: 0.5, readings: vec![3.0, 4.0] });
    assert!(read_sensor_stream("0.0, 1\n".as_bytes(), 2).is_err());
    assert!(read_sensor_stream("0.0, 1, x\n".as_bytes(), 2).is_err());
}
