//! Point-cloud geometry, chamfer distance, downsampling and forward kinematics
//! of articulated chains that carry contact keypoints.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

pub type Point = [f64; 3];

/// `N x 3` positions in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("point cloud must contain at least one point"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn translated(&self, c: Point) -> Self {
        Self {
            points: self.points.iter().map(|p| add3(*p, c)).collect(),
        }
    }

    /// Keeps the points inside `bounds`.
    pub fn crop(&self, bounds: &Aabb) -> Result<Self> {
        Self::new(self.points.iter().copied().filter(|p| bounds.contains(*p)).collect())
    }
}

/// Per-point displacements aligned index-wise with a source cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    displacements: Vec<Point>,
}

impl FlowField {
    pub fn new(displacements: Vec<Point>) -> Result<Self> {
        if displacements.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow displacement".into()));
        }
        Ok(Self { displacements })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            displacements: vec![[0.0; 3]; n],
        }
    }

    pub fn displacements(&self) -> &[Point] {
        &self.displacements
    }

    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }

    pub fn negated(&self) -> Self {
        Self {
            displacements: self.displacements.iter().map(|d| [-d[0], -d[1], -d[2]]).collect(),
        }
    }

    pub fn mean_norm(&self) -> f64 {
        if self.displacements.is_empty() {
            return 0.0;
        }
        self.displacements.iter().map(|d| norm3(*d)).sum::<f64>() / self.displacements.len() as f64
    }
}

/// Axis-aligned box used to crop the workspace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point,
    pub max: Point,
}

impl Aabb {
    pub fn contains(&self, p: Point) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

pub(crate) fn add3(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn sub3(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dist2(a: Point, b: Point) -> f64 {
    let d = sub3(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

pub(crate) fn norm3(a: Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// For each point of `from`, the index of its nearest neighbour in `to` and the
/// squared distance to it. Ties go to the lowest index.
pub fn nearest_neighbors(from: &[Point], to: &[Point]) -> Vec<(usize, f64)> {
    from.iter()
        .map(|a| {
            let mut best = (0, f64::INFINITY);
            for (j, b) in to.iter().enumerate() {
                let d = dist2(*a, *b);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Symmetric chamfer distance with squared point distances and mean
/// aggregation on both sides.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_points(&a.points, &b.points)
}

pub(crate) fn chamfer_points(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("chamfer distance of an empty cloud"));
    }
    let ab: f64 = nearest_neighbors(a, b).iter().map(|x| x.1).sum::<f64>() / a.len() as f64;
    let ba: f64 = nearest_neighbors(b, a).iter().map(|x| x.1).sum::<f64>() / b.len() as f64;
    Ok(ab + ba)
}

/// Farthest-point sampling starting from a given index. Returns the selected
/// indices in selection order. Ties resolve to the lowest index.
pub fn farthest_point_indices(points: &[Point], target_count: usize, first: usize) -> Vec<usize> {
    let n = points.len();
    if n <= target_count {
        return (0..n).collect();
    }
    let mut chosen = Vec::with_capacity(target_count);
    let mut min_d = vec![f64::INFINITY; n];
    let mut next = first;
    while chosen.len() < target_count {
        chosen.push(next);
        let c = points[next];
        let mut best = (0, -1.0);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(*p, c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best.1 {
                best = (i, min_d[i]);
            }
        }
        next = best.0;
    }
    chosen
}

/// Seeded farthest-point downsampling to `min(N, target_count)` points. The
/// first point is a uniform draw; the input is returned unchanged when it
/// already has at most `target_count` points.
pub fn farthest_point_downsample(p: &PointCloud, target_count: usize, seed: u64) -> Result<PointCloud> {
    if target_count == 0 {
        return Err(invalid("target_count must be at least 1"));
    }
    if p.len() <= target_count {
        return Ok(p.clone());
    }
    let first = rng::seeded(seed, &[0xF95]).random_range(0..p.len());
    let idx = farthest_point_indices(&p.points, target_count, first);
    PointCloud::new(idx.into_iter().map(|i| p.points[i]).collect())
}

/// Element-wise `p + f`.
pub fn apply_flow(p: &PointCloud, f: &FlowField) -> Result<PointCloud> {
    if p.len() != f.len() {
        return Err(invalid(format!(
            "flow has {} rows but cloud has {}",
            f.len(),
            p.len()
        )));
    }
    PointCloud::new(
        p.points
            .iter()
            .zip(&f.displacements)
            .map(|(a, d)| add3(*a, *d))
            .collect(),
    )
}

/// Rotation plus translation. Composition `a * b` applies `b` first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn from_rotation_z(angle: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), angle).matrix(),
            translation,
        }
    }

    fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(invalid("rotation must be orthonormal with determinant +1"));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("translation".into()));
        }
        Ok(())
    }

    pub fn compose(&self, child: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * child.rotation,
            translation: self.rotation * child.translation + self.translation,
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let v = self.rotation * Vector3::new(p[0], p[1], p[2]) + self.translation;
        [v.x, v.y, v.z]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Revolute,
    Fixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub parent: Option<usize>,
    pub rest: RigidTransform,
    pub axis: Vector3<f64>,
    pub joint: JointType,
}

/// Links in topological order (every parent precedes its children).
#[derive(Clone, Debug, PartialEq)]
pub struct KinematicChain {
    links: Vec<Link>,
}

impl KinematicChain {
    pub fn new(links: Vec<Link>) -> Result<Self> {
        for (i, l) in links.iter().enumerate() {
            if let Some(p) = l.parent {
                if p >= i {
                    return Err(invalid(format!("link {i} has parent {p}; parents must come first")));
                }
            }
            if (l.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("link {i} joint axis is not unit length")));
            }
            l.rest.validate()?;
        }
        Ok(Self { links })
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn revolute_count(&self) -> usize {
        self.links.iter().filter(|l| l.joint == JointType::Revolute).count()
    }

    /// World transform of every link for the given joint angles (radians),
    /// consumed by revolute links in link order.
    pub fn link_transforms(&self, joint_positions: &[f64]) -> Result<Vec<RigidTransform>> {
        if joint_positions.len() != self.revolute_count() {
            return Err(invalid(format!(
                "expected {} joint positions, got {}",
                self.revolute_count(),
                joint_positions.len()
            )));
        }
        let mut q = joint_positions.iter();
        let mut out: Vec<RigidTransform> = Vec::with_capacity(self.links.len());
        for l in &self.links {
            let local = match l.joint {
                JointType::Revolute => {
                    let angle = *q.next().expect("counted above");
                    let rot = Rotation3::from_axis_angle(&Unit::new_unchecked(l.axis), angle);
                    l.rest.compose(&RigidTransform {
                        rotation: *rot.matrix(),
                        translation: Vector3::zeros(),
                    })
                }
                JointType::Fixed => l.rest,
            };
            let world = match l.parent {
                Some(p) => out[p].compose(&local),
                None => local,
            };
            out.push(world);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointEntry {
    pub link: usize,
    pub offset: Point,
}

/// Contact keypoints rigidly attached to chain links.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointLayout {
    pub entries: Vec<KeypointEntry>,
}

impl KeypointLayout {
    pub fn new(entries: Vec<KeypointEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("keypoint layout is empty"));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate_for(&self, chain: &KinematicChain) -> Result<()> {
        match self.entries.iter().find(|e| e.link >= chain.links().len()) {
            Some(e) => Err(invalid(format!("keypoint references missing link {}", e.link))),
            None => Ok(()),
        }
    }
}

/// World positions (`N_k x 3`) of every keypoint for the given joint angles.
pub fn keypoint_positions(
    chain: &KinematicChain,
    layout: &KeypointLayout,
    joint_positions: &[f64],
) -> Result<Vec<Point>> {
    layout.validate_for(chain)?;
    let tf = chain.link_transforms(joint_positions)?;
    Ok(layout
        .entries
        .iter()
        .map(|e| tf[e.link].apply(e.offset))
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkDoc {
    #[serde(default)]
    parent: Option<usize>,
    rest_rotation: [f64; 9],
    rest_translation: [f64; 3],
    axis: [f64; 3],
    #[serde(rename = "type")]
    joint: JointType,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainDoc {
    links: Vec<LinkDoc>,
    #[serde(default)]
    keypoints: Vec<KeypointEntry>,
}

/// Parses `{links:[...], keypoints:[...]}`. Rotations are row-major.
pub fn chain_from_json(text: &str) -> Result<(KinematicChain, Option<KeypointLayout>)> {
    let doc: ChainDoc = serde_json::from_str(text)?;
    let links = doc
        .links
        .into_iter()
        .map(|l| {
            Ok(Link {
                parent: l.parent,
                rest: RigidTransform::new(
                    Matrix3::from_row_slice(&l.rest_rotation),
                    Vector3::from(l.rest_translation),
                )?,
                axis: Vector3::from(l.axis),
                joint: l.joint,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let chain = KinematicChain::new(links)?;
    let layout = if doc.keypoints.is_empty() {
        None
    } else {
        let layout = KeypointLayout::new(doc.keypoints)?;
        layout.validate_for(&chain)?;
        Some(layout)
    };
    Ok((chain, layout))
}

pub fn chain_to_json(chain: &KinematicChain, layout: Option<&KeypointLayout>) -> Result<String> {
    let links = chain
        .links
        .iter()
        .map(|l| {
            let r = &l.rest.rotation;
            LinkDoc {
                parent: l.parent,
                rest_rotation: [
                    r[(0, 0)], r[(0, 1)], r[(0, 2)],
                    r[(1, 0)], r[(1, 1)], r[(1, 2)],
                    r[(2, 0)], r[(2, 1)], r[(2, 2)],
                ],
                rest_translation: [l.rest.translation.x, l.rest.translation.y, l.rest.translation.z],
                axis: [l.axis.x, l.axis.y, l.axis.z],
                joint: l.joint,
            }
        })
        .collect();
    let doc = ChainDoc {
        links,
        keypoints: layout.map(|l| l.entries.clone()).unwrap_or_default(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn cloud(p: &[Point]) -> PointCloud {
        PointCloud::new(p.to_vec()).unwrap()
    }

    #[test]
    fn chamfer_examples() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[3.0, 4.0, 0.0]]);
        assert_eq!(chamfer_distance(&a, &b).unwrap(), 50.0);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        let a2 = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&a2, &a).unwrap(), 0.5);
    }

    #[test]
    fn chamfer_rejects_empty() {
        assert!(chamfer_points(&[], &[[0.0; 3]]).is_err());
        assert!(PointCloud::new(vec![]).is_err());
    }

    #[test]
    fn fps_collinear_from_origin() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        let idx = farthest_point_indices(&pts, 2, 0);
        let xs: Vec<f64> = idx.iter().map(|&i| pts[i][0]).collect();
        assert_eq!(xs, vec![0.0, 10.0]);
    }

    #[test]
    fn fps_noop_and_single() {
        let c = cloud(&[[0.0; 3], [1.0, 2.0, 3.0], [4.0, 0.0, 1.0], [2.0, 2.0, 2.0], [9.0, 9.0, 9.0]]);
        assert_eq!(farthest_point_downsample(&c, 5, 3).unwrap(), c);
        let one = farthest_point_downsample(&c, 1, 11).unwrap();
        let first = rng::seeded(11, &[0xF95]).random_range(0..5);
        assert_eq!(one.points(), &[c.points()[first]]);
        assert!(farthest_point_downsample(&c, 0, 0).is_err());
    }

    fn single_joint_chain() -> KinematicChain {
        KinematicChain::new(vec![Link {
            parent: None,
            rest: RigidTransform::identity(),
            axis: Vector3::z(),
            joint: JointType::Revolute,
        }])
        .unwrap()
    }

    #[test]
    fn quarter_turn_keypoint() {
        let chain = single_joint_chain();
        let layout = KeypointLayout::new(vec![KeypointEntry { link: 0, offset: [1.0, 0.0, 0.0] }]).unwrap();
        let k = keypoint_positions(&chain, &layout, &[FRAC_PI_2]).unwrap();
        assert!((k[0][0]).abs() < 1e-12 && (k[0][1] - 1.0).abs() < 1e-12);
        assert!(keypoint_positions(&chain, &layout, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn zero_angles_use_rest_transforms_only() {
        let rest = RigidTransform::from_rotation_z(0.3, Vector3::new(1.0, 2.0, 0.5));
        let chain = KinematicChain::new(vec![Link {
            parent: None,
            rest,
            axis: Vector3::x(),
            joint: JointType::Revolute,
        }])
        .unwrap();
        let layout = KeypointLayout::new(vec![KeypointEntry { link: 0, offset: [0.2, -0.1, 0.3] }]).unwrap();
        let k = keypoint_positions(&chain, &layout, &[0.0]).unwrap();
        let expect = rest.apply([0.2, -0.1, 0.3]);
        for i in 0..3 {
            assert!((k[0][i] - expect[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn two_link_composition_matches_hand_matrices() {
        // Link 2 hangs 1 m along link 1's x axis; both joints about z.
        let chain = KinematicChain::new(vec![
            Link { parent: None, rest: RigidTransform::identity(), axis: Vector3::z(), joint: JointType::Revolute },
            Link {
                parent: Some(0),
                rest: RigidTransform::from_rotation_z(0.0, Vector3::new(1.0, 0.0, 0.0)),
                axis: Vector3::z(),
                joint: JointType::Revolute,
            },
        ])
        .unwrap();
        let layout = KeypointLayout::new(vec![KeypointEntry { link: 1, offset: [0.5, 0.25, 0.0] }]).unwrap();
        let k = keypoint_positions(&chain, &layout, &[FRAC_PI_2, FRAC_PI_2]).unwrap();
        // Rz(90) = [[0,-1,0],[1,0,0],[0,0,1]].
        let rz = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let mul = |m: &[[f64; 3]; 3], v: [f64; 3]| {
            [
                m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
                m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
                m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
            ]
        };
        // world = Rz * ([1,0,0] + Rz * offset)
        let inner = mul(&rz, [0.5, 0.25, 0.0]);
        let expect = mul(&rz, [1.0 + inner[0], inner[1], inner[2]]);
        for i in 0..3 {
            assert!((k[0][i] - expect[i]).abs() < 1e-12, "{k:?} vs {expect:?}");
        }
    }

    #[test]
    fn chain_rejects_bad_topology_and_axis() {
        let bad_parent = Link { parent: Some(0), rest: RigidTransform::identity(), axis: Vector3::z(), joint: JointType::Fixed };
        assert!(KinematicChain::new(vec![bad_parent]).is_err());
        let bad_axis = Link { parent: None, rest: RigidTransform::identity(), axis: Vector3::new(1.0, 1.0, 0.0), joint: JointType::Fixed };
        assert!(KinematicChain::new(vec![bad_axis]).is_err());
    }

    #[test]
    fn chain_json_round_trip() {
        let chain = single_joint_chain();
        let layout = KeypointLayout::new(vec![KeypointEntry { link: 0, offset: [0.1, 0.0, 0.0] }]).unwrap();
        let text = chain_to_json(&chain, Some(&layout)).unwrap();
        let (c2, l2) = chain_from_json(&text).unwrap();
        assert_eq!(c2, chain);
        assert_eq!(l2.unwrap(), layout);
        assert!(chain_from_json(r#"{"links":[],"bogus":1}"#).is_err());
    }

    #[test]
    fn apply_flow_contracts() {
        let p = cloud(&[[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]);
        assert_eq!(apply_flow(&p, &FlowField::zeros(2)).unwrap(), p);
        let shifted = apply_flow(&p, &FlowField::new(vec![[1.0, 0.0, 0.0]; 2]).unwrap()).unwrap();
        assert_eq!(shifted.points()[1], [4.0, 4.0, 5.0]);
        assert!(apply_flow(&p, &FlowField::zeros(3)).is_err());
    }

    fn pts(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), n)
    }

    proptest! {
        #[test]
        fn chamfer_symmetric_and_translation_invariant(a in pts(1..12), b in pts(1..12), c in prop::array::uniform3(-3.0f64..3.0)) {
            let (a, b) = (cloud(&a), cloud(&b));
            let ab = chamfer_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, chamfer_distance(&b, &a).unwrap());
            let shifted = chamfer_distance(&a.translated(c), &b.translated(c)).unwrap();
            prop_assert!((ab - shifted).abs() <= 1e-9 * (1.0 + ab));
        }

        #[test]
        fn fps_returns_subset(a in pts(1..30), k in 1usize..10, seed in 0u64..100) {
            let c = cloud(&a);
            let d = farthest_point_downsample(&c, k, seed).unwrap();
            prop_assert_eq!(d.len(), k.min(c.len()));
            for p in d.points() {
                prop_assert!(c.points().contains(p));
            }
        }

        #[test]
        fn flow_inverse_round_trip(a in pts(1..20), f in pts(20..21)) {
            let p = cloud(&a);
            let f = FlowField::new(f[..a.len()].to_vec()).unwrap();
            let back = apply_flow(&apply_flow(&p, &f).unwrap(), &f.negated()).unwrap();
            for (x, y) in back.points().iter().zip(p.points()) {
                for i in 0..3 {
                    prop_assert!((x[i] - y[i]).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn intra_link_distances_are_rigid(q in prop::collection::vec(-3.0f64..3.0, 2), o1 in prop::array::uniform3(-1.0f64..1.0), o2 in prop::array::uniform3(-1.0f64..1.0)) {
            let chain = KinematicChain::new(vec![
                Link { parent: None, rest: RigidTransform::identity(), axis: Vector3::z(), joint: JointType::Revolute },
                Link { parent: Some(0), rest: RigidTransform::from_rotation_z(0.4, Vector3::new(0.5, 0.1, 0.0)), axis: Vector3::y(), joint: JointType::Revolute },
            ]).unwrap();
            let layout = KeypointLayout::new(vec![
                KeypointEntry { link: 1, offset: o1 },
                KeypointEntry { link: 1, offset: o2 },
            ]).unwrap();
            let rest = keypoint_positions(&chain, &layout, &[0.0, 0.0]).unwrap();
            let moved = keypoint_positions(&chain, &layout, &q).unwrap();
            let d0 = dist2(rest[0], rest[1]).sqrt();
            let d1 = dist2(moved[0], moved[1]).sqrt();
            prop_assert!((d0 - d1).abs() <= 1e-9);
        }
    }
}
