//! Planar two-finger hand and a disk: kinematic penetration-projection
//! dynamics, a scripted expert, a geometric contact oracle and demo
//! generation.

mod dataset;

pub use dataset::{
    generate_demos, generate_demos_with_mode, read_dataset, read_trajectory, write_dataset, DatasetManifest, Trajectory, TrajectoryDataset,
    DATASET_VERSION,
};

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow2tactile::toy_layout;
use crate::geom::{
    farthest_point_indices, Aabb, JointType, KeypointLayout, KinematicChain, Link, Point, RigidTransform,
};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Push,
    Rotate,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Push => "push",
            Task::Rotate => "rotate",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "push" => Ok(Task::Push),
            "rotate" => Ok(Task::Rotate),
            other => Err(invalid(format!("unknown task {other}"))),
        }
    }
}

/// Geometry, dynamics and observation constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub link_length: f64,
    pub link_radius: f64,
    pub disk_radius: f64,
    /// Finger bases sit at `(-base_offset, 0)` and `(base_offset, 0)`.
    pub base_offset: f64,
    /// Disk starts uniformly within `start_center +- start_jitter`.
    pub start_center: [f64; 2],
    pub start_jitter: [f64; 2],
    pub joint_limit: f64,
    pub max_joint_speed: f64,
    pub dt: f64,
    pub contact_eps: f64,
    pub push_step: f64,
    pub grip_squeeze: f64,
    pub max_rotate_step: f64,
    pub max_steps: usize,
    /// Points per observed frame.
    pub n_points: usize,
    /// Candidate material points sampled before downsampling.
    pub material_points: usize,
    pub goal_points: usize,
    pub goal_z: f64,
    pub keypoints_around: usize,
    pub keypoints_along: usize,
    pub workspace: Aabb,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            link_length: 0.06,
            link_radius: 0.008,
            disk_radius: 0.03,
            base_offset: 0.02,
            start_center: [0.0, 0.1],
            start_jitter: [0.01, 0.005],
            joint_limit: 2.5,
            max_joint_speed: 2.0,
            dt: 0.04,
            contact_eps: 0.002,
            push_step: 0.002,
            grip_squeeze: 0.002,
            max_rotate_step: 0.05,
            max_steps: 80,
            n_points: 256,
            material_points: 512,
            goal_points: 32,
            goal_z: 0.02,
            keypoints_around: 4,
            keypoints_along: 3,
            workspace: Aabb { min: [-0.15, -0.05, -0.05], max: [0.15, 0.22, 0.05] },
        }
    }
}

pub const N_JOINTS: usize = 4;
const REST: [f64; N_JOINTS] = [1.2, -2.4, -1.2, 2.4];
const LEFT: usize = 0;
const PUSH_STANDOFF: f64 = 0.005;
const PUSH_ALIGN_COS: f64 = 0.94;
const APPROACH_STEP: f64 = 0.005;
const RIGHT: usize = 1;

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.link_length,
            self.link_radius,
            self.disk_radius,
            self.max_joint_speed,
            self.dt,
            self.contact_eps,
            self.push_step,
        ];
        if pos.iter().any(|v| !(*v > 0.0)) || self.n_points < 8 || self.max_steps == 0 {
            return Err(invalid("toy config has a non-positive constant or fewer than 8 points"));
        }
        if self.material_points < self.n_points {
            return Err(invalid("need at least as many material candidates as observed points"));
        }
        Ok(())
    }

    /// Chain with links `[left proximal, left distal, right proximal, right distal]`.
    pub fn chain(&self) -> KinematicChain {
        let mut links = Vec::new();
        for side in [-1.0, 1.0] {
            let parent = links.len();
            links.push(Link {
                parent: None,
                rest: RigidTransform::from_rotation_z(FRAC_PI_2, Vector3::new(side * self.base_offset, 0.0, 0.0)),
                axis: Vector3::z(),
                joint: JointType::Revolute,
            });
            links.push(Link {
                parent: Some(parent),
                rest: RigidTransform::from_rotation_z(0.0, Vector3::new(self.link_length, 0.0, 0.0)),
                axis: Vector3::z(),
                joint: JointType::Revolute,
            });
        }
        KinematicChain::new(links).expect("static chain is valid")
    }

    pub fn keypoint_layout(&self) -> Result<KeypointLayout> {
        toy_layout(4, self.keypoints_around, self.keypoints_along, self.link_length, self.link_radius)
    }

    pub fn n_keypoints(&self) -> usize {
        4 * self.keypoints_around * self.keypoints_along
    }

    fn base(&self, finger: usize) -> [f64; 2] {
        [if finger == LEFT { -self.base_offset } else { self.base_offset }, 0.0]
    }
}

/// Joint angles plus the disk pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyState {
    pub q: [f64; N_JOINTS],
    pub disk: [f64; 2],
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub task: Task,
    pub position: [f64; 2],
    pub theta: f64,
}

fn wrap(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

fn len2(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

/// Seeded start state and goal.
pub fn env_reset(cfg: &ToyConfig, task: Task, seed: u64) -> (ToyState, Goal) {
    let mut r = rng::seeded(seed, &[0xE5]);
    let (c, j) = (cfg.start_center, cfg.start_jitter);
    let disk = [c[0] + r.random_range(-j[0]..=j[0]), c[1] + r.random_range(-j[1]..=j[1])];
    let theta = r.random_range(-PI..PI);
    let state = ToyState { q: REST, disk, theta };
    let goal = match task {
        Task::Push => {
            let d = r.random_range(0.02..=0.03);
            let a = FRAC_PI_2 + r.random_range(-PI / 6.0..=PI / 6.0);
            Goal { task, position: [disk[0] + d * a.cos(), disk[1] + d * a.sin()], theta }
        }
        Task::Rotate => {
            let mag = r.random_range(0.3..=0.6);
            let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
            Goal { task, position: disk, theta: wrap(theta + sign * mag) }
        }
    };
    (state, goal)
}

/// `|p - p_goal| <= 1 mm` for push, `|wrap(theta - theta_goal)| <= 0.1` for rotate.
pub fn check_success(state: &ToyState, goal: &Goal) -> bool {
    match goal.task {
        Task::Push => len2([state.disk[0] - goal.position[0], state.disk[1] - goal.position[1]]) <= 0.001,
        Task::Rotate => wrap(state.theta - goal.theta).abs() <= 0.1,
    }
}

/// Closest point on segment `a..b` to `p`, as `(point, parameter)`.
fn closest_on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> ([f64; 2], f64) {
    let d = [b[0] - a[0], b[1] - a[1]];
    let l2 = d[0] * d[0] + d[1] * d[1];
    let s = if l2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / l2).clamp(0.0, 1.0) };
    ([a[0] + s * d[0], a[1] + s * d[1]], s)
}

/// A link-disk overlap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contact {
    pub link: usize,
    pub depth: f64,
    /// Unit normal pointing from the link into the disk centre.
    pub normal: [f64; 2],
    /// Contact point in link-local coordinates.
    pub local: Point,
}

fn link_segments(cfg: &ToyConfig, tf: &[RigidTransform]) -> Vec<([f64; 2], [f64; 2])> {
    tf.iter()
        .map(|t| {
            let a = t.apply([0.0, 0.0, 0.0]);
            let b = t.apply([cfg.link_length, 0.0, 0.0]);
            ([a[0], a[1]], [b[0], b[1]])
        })
        .collect()
}

pub fn contacts(cfg: &ToyConfig, chain: &KinematicChain, q: &[f64; N_JOINTS], disk: [f64; 2]) -> Vec<Contact> {
    let tf = chain.link_transforms(q).expect("four joints");
    let reach = cfg.disk_radius + cfg.link_radius;
    let mut out = Vec::new();
    for (link, (a, b)) in link_segments(cfg, &tf).into_iter().enumerate() {
        let (p, s) = closest_on_segment(a, b, disk);
        let d = [disk[0] - p[0], disk[1] - p[1]];
        let dist = len2(d);
        if dist < reach && dist > 0.0 {
            out.push(Contact {
                link,
                depth: reach - dist,
                normal: [d[0] / dist, d[1] / dist],
                local: [s * cfg.link_length, 0.0, 0.0],
            });
        }
    }
    out
}

/// Advances the scene by one control period towards the joint targets.
pub fn env_step(cfg: &ToyConfig, chain: &KinematicChain, state: &ToyState, action: &[f64]) -> Result<ToyState> {
    if action.len() != N_JOINTS {
        return Err(invalid(format!("action has {} entries, expected {N_JOINTS}", action.len())));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("action".into()));
    }
    let max = cfg.max_joint_speed * cfg.dt;
    let mut q = state.q;
    for (qi, &a) in q.iter_mut().zip(action) {
        *qi = (*qi + (a - *qi).clamp(-max, max)).clamp(-cfg.joint_limit, cfg.joint_limit);
    }
    let mut next = ToyState { q, disk: state.disk, theta: state.theta };
    let found = contacts(cfg, chain, &q, state.disk);
    if found.is_empty() {
        return Ok(next);
    }
    let opposing = found
        .iter()
        .enumerate()
        .any(|(i, a)| found[i + 1..].iter().any(|b| a.normal[0] * b.normal[0] + a.normal[1] * b.normal[1] < -0.5));
    if found.len() >= 2 && opposing {
        let before = chain.link_transforms(&state.q)?;
        let after = chain.link_transforms(&q)?;
        let mut sum = 0.0;
        for c in &found {
            let p0 = before[c.link].apply(c.local);
            let p1 = after[c.link].apply(c.local);
            // Tangent (counter-clockwise about the disk) at the contact.
            let e = [-c.normal[0], -c.normal[1]];
            sum += (p1[0] - p0[0]) * -e[1] + (p1[1] - p0[1]) * e[0];
        }
        next.theta = wrap(next.theta + sum / found.len() as f64 / cfg.disk_radius);
    }
    for c in &found {
        next.disk[0] += c.depth * c.normal[0];
        next.disk[1] += c.depth * c.normal[1];
    }
    Ok(next)
}

/// Planar inverse kinematics for one finger's distal tip. Left fingers
/// bend with `q2 <= 0`, right fingers with `q2 >= 0`.
pub fn finger_ik(cfg: &ToyConfig, finger: usize, tip: [f64; 2]) -> Result<[f64; 2]> {
    let base = cfg.base(finger);
    let d = [tip[0] - base[0], tip[1] - base[1]];
    let l = cfg.link_length;
    let dist2 = d[0] * d[0] + d[1] * d[1];
    let c2 = (dist2 - 2.0 * l * l) / (2.0 * l * l);
    if !(-1.0..=1.0).contains(&c2) {
        return Err(Error::OutOfDomain(format!("tip target {tip:?} out of reach")));
    }
    let q2 = if finger == LEFT { -c2.acos() } else { c2.acos() };
    let phi1 = d[1].atan2(d[0]) - (l * q2.sin()).atan2(l + l * q2.cos());
    let q1 = wrap(phi1 - FRAC_PI_2);
    if q1.abs() > cfg.joint_limit || q2.abs() > cfg.joint_limit {
        return Err(Error::OutOfDomain(format!("tip target {tip:?} violates joint limits")));
    }
    Ok([q1, q2])
}

fn fingertips_of(cfg: &ToyConfig, state: &ToyState) -> [[f64; 2]; 2] {
    let l = cfg.link_length;
    let tip = |finger: usize| {
        let (q1, q2) = (state.q[2 * finger], state.q[2 * finger + 1]);
        let a1 = FRAC_PI_2 + q1;
        let a2 = a1 + q2;
        let b = cfg.base(finger);
        [b[0] + l * a1.cos() + l * a2.cos(), b[1] + l * a1.sin() + l * a2.sin()]
    };
    [tip(LEFT), tip(RIGHT)]
}

/// Distal tip centre of each finger.
pub fn fingertips(cfg: &ToyConfig, chain: &KinematicChain, q: &[f64; N_JOINTS]) -> [[f64; 2]; 2] {
    let tf = chain.link_transforms(q).expect("four joints");
    let tip = |i: usize| {
        let p = tf[i].apply([cfg.link_length, 0.0, 0.0]);
        [p[0], p[1]]
    };
    [tip(1), tip(3)]
}

fn set_finger(q: &mut [f64; N_JOINTS], finger: usize, v: [f64; 2]) {
    q[2 * finger] = v[0];
    q[2 * finger + 1] = v[1];
}

/// Scripted joint-position targets.
pub fn expert_action(cfg: &ToyConfig, chain: &KinematicChain, state: &ToyState, goal: &Goal) -> Result<[f64; N_JOINTS]> {
    if check_success(state, goal) {
        return Ok(state.q);
    }
    let target = match goal.task {
        Task::Push => expert_push(cfg, state, goal)?,
        Task::Rotate => expert_rotate(cfg, chain, state, goal)?,
    };
    // Scale the joint step uniformly so the speed limit never bends the path.
    let max = cfg.max_joint_speed * cfg.dt;
    let biggest = target.iter().zip(&state.q).map(|(a, q)| (a - q).abs()).fold(0.0, f64::max);
    let k = if biggest > max { max / biggest } else { 1.0 };
    let mut out = state.q;
    for (o, a) in out.iter_mut().zip(&target) {
        *o += k * (a - *o);
    }
    Ok(out)
}

/// Moves `from` towards `to` by at most `max`, in a straight line.
fn toward(from: [f64; 2], to: [f64; 2], max: f64) -> [f64; 2] {
    let d = [to[0] - from[0], to[1] - from[1]];
    let n = len2(d);
    if n <= max {
        to
    } else {
        [from[0] + d[0] * max / n, from[1] + d[1] * max / n]
    }
}

fn expert_push(cfg: &ToyConfig, state: &ToyState, goal: &Goal) -> Result<[f64; N_JOINTS]> {
    let c = state.disk;
    let to_goal = [goal.position[0] - c[0], goal.position[1] - c[1]];
    let dist = len2(to_goal);
    let u = [to_goal[0] / dist, to_goal[1] / dist];
    let back = cfg.disk_radius + cfg.link_radius;
    let off = back + PUSH_STANDOFF;
    let pre = [c[0] - off * u[0], c[1] - off * u[1]];
    let tips = fingertips_of(cfg, state);
    let near = |f: usize| len2([c[0] - tips[f][0], c[1] - tips[f][1]]) <= off + 1e-4;
    let finger = match (near(LEFT), near(RIGHT)) {
        (true, false) => LEFT,
        (false, true) => RIGHT,
        _ if pre[0] < 0.0 => LEFT,
        _ => RIGHT,
    };
    let tip = tips[finger];
    let rel = [c[0] - tip[0], c[1] - tip[1]];
    let aligned = (rel[0] * u[0] + rel[1] * u[1]) / len2(rel) > PUSH_ALIGN_COS;
    let target = if aligned && near(finger) {
        let adv = cfg.push_step.min(dist);
        [c[0] + (adv - back) * u[0], c[1] + (adv - back) * u[1]]
    } else {
        toward(tip, pre, APPROACH_STEP)
    };
    let mut q = REST;
    set_finger(&mut q, finger, finger_ik(cfg, finger, target)?);
    Ok(q)
}

fn expert_rotate(cfg: &ToyConfig, chain: &KinematicChain, state: &ToyState, goal: &Goal) -> Result<[f64; N_JOINTS]> {
    let c = state.disk;
    let tips = fingertips(cfg, chain, &state.q);
    let reach = cfg.disk_radius + cfg.link_radius;
    let radial = |p: [f64; 2]| len2([p[0] - c[0], p[1] - c[1]]);
    let gripping = tips.iter().all(|&p| radial(p) <= reach + 1e-4);
    let mut q = state.q;
    if gripping {
        let err = wrap(goal.theta - state.theta);
        let delta = err.signum() * (cfg.max_rotate_step * cfg.disk_radius).min(err.abs() * cfg.disk_radius);
        let angle = |p: [f64; 2]| (p[1] - c[1]).atan2(p[0] - c[0]);
        // Keep the grip antipodal so the squeeze forces cancel.
        let (a, b) = (angle(tips[RIGHT]), angle(tips[LEFT]) - PI);
        let mid = a + 0.5 * wrap(b - a);
        let rr = reach - cfg.grip_squeeze;
        for (finger, phi) in [(RIGHT, mid), (LEFT, mid + PI)] {
            let tip = [
                c[0] + rr * phi.cos() - delta * phi.sin(),
                c[1] + rr * phi.sin() + delta * phi.cos(),
            ];
            set_finger(&mut q, finger, finger_ik(cfg, finger, tip)?);
        }
        return Ok(q);
    }
    // Tilt the grip axis against the turn so the fingers end up level.
    let tilt = (-0.5 * wrap(goal.theta - state.theta)).clamp(-0.4, 0.4);
    let axis = [tilt.cos(), tilt.sin()];
    let at = |finger: usize, r: f64| {
        let side = if finger == LEFT { -1.0 } else { 1.0 };
        [c[0] + side * r * axis[0], c[1] + side * r * axis[1]]
    };
    let clearance = reach + 0.004;
    // Once both tips hug the disk near the axis, keep squeezing.
    let staged = (0..2).all(|f| {
        let side = if f == LEFT { -1.0 } else { 1.0 };
        let d = [tips[f][0] - c[0], tips[f][1] - c[1]];
        let along = side * (d[0] * axis[0] + d[1] * axis[1]);
        let across = side * (d[1] * axis[0] - d[0] * axis[1]);
        along <= clearance + 0.002 && along > 0.0 && across.abs() <= 0.002
    });
    for (finger, p) in tips.iter().enumerate() {
        let pre = at(finger, clearance);
        let tip = if staged {
            at(finger, reach - cfg.grip_squeeze)
        } else if (p[0] - pre[0]).abs() > 0.002 && p[1] < c[1] - 0.5 * cfg.disk_radius {
            // Swing out below the disk before rising beside it.
            toward(*p, [pre[0], p[1]], APPROACH_STEP)
        } else {
            toward(*p, pre, APPROACH_STEP)
        };
        set_finger(&mut q, finger, finger_ik(cfg, finger, tip)?);
    }
    Ok(q)
}

/// Where a material point lives.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Material {
    Link(usize, Point),
    Disk([f64; 2]),
}

fn material_world(m: &Material, tf: &[RigidTransform], state: &ToyState) -> Point {
    match *m {
        Material::Link(i, p) => tf[i].apply(p),
        Material::Disk(p) => {
            let (s, c) = state.theta.sin_cos();
            [state.disk[0] + c * p[0] - s * p[1], state.disk[1] + s * p[0] + c * p[1], 0.0]
        }
    }
}

/// Samples candidates uniformly on link capsule sides, tip caps, the disk
/// rim and an orientation spoke.
fn sample_materials(cfg: &ToyConfig, seed: u64) -> Vec<Material> {
    let mut r = rng::seeded(seed, &[0x3A7]);
    let n = cfg.material_points;
    let n_disk = n * 3 / 8;
    let n_spoke = n_disk / 6;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n - n_disk {
        let link = r.random_range(0..4);
        let u: f64 = r.random_range(0.0..1.0);
        let (l, rho) = (cfg.link_length, cfg.link_radius);
        let cap = PI * rho;
        let total = 2.0 * l + cap;
        let s = u * total;
        let p = if s < l {
            [s, rho, 0.0]
        } else if s < 2.0 * l {
            [s - l, -rho, 0.0]
        } else {
            let a = -FRAC_PI_2 + (s - 2.0 * l) / rho;
            [l + rho * a.cos(), rho * a.sin(), 0.0]
        };
        out.push(Material::Link(link, p));
    }
    for _ in 0..n_disk - n_spoke {
        let a = r.random_range(0.0..TAU);
        out.push(Material::Disk([cfg.disk_radius * a.cos(), cfg.disk_radius * a.sin()]));
    }
    for _ in 0..n_spoke {
        out.push(Material::Disk([r.random_range(0.0..cfg.disk_radius), 0.0]));
    }
    out
}

/// One observation window.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub s_prev: [f64; N_JOINTS],
    pub s_cur: [f64; N_JOINTS],
    pub p_prev: Vec<Point>,
    pub p_cur: Vec<Point>,
    pub goal_cloud: Vec<Point>,
    /// Oracle contacts on the keypoint layout.
    pub r_gt: Vec<bool>,
    /// Pseudo-forces on the keypoint layout, newtons.
    pub forces: Vec<f64>,
    /// Exact per-point displacement, aligned with `p_prev`.
    pub flow: Vec<Point>,
}

/// Rolling episode with fixed material points and per-step point order.
#[derive(Clone, Debug)]
pub struct Episode {
    pub cfg: ToyConfig,
    pub chain: KinematicChain,
    pub layout: KeypointLayout,
    pub goal: Goal,
    pub state: ToyState,
    pub prev: ToyState,
    pub step: usize,
    seed: u64,
    materials: Vec<Material>,
    order_prev: Vec<usize>,
    order_cur: Vec<usize>,
}

impl Episode {
    pub fn reset(cfg: &ToyConfig, task: Task, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let chain = cfg.chain();
        let layout = cfg.keypoint_layout()?;
        let (state, goal) = env_reset(cfg, task, seed);
        let candidates = sample_materials(cfg, seed);
        let tf = chain.link_transforms(&state.q)?;
        let world: Vec<Point> = candidates.iter().map(|m| material_world(m, &tf, &state)).collect();
        let first = rng::seeded(seed, &[0xF95]).random_range(0..world.len());
        let materials: Vec<Material> =
            farthest_point_indices(&world, cfg.n_points, first).into_iter().map(|i| candidates[i]).collect();
        let order = Self::order(seed, 0, materials.len());
        Ok(Self {
            cfg: cfg.clone(),
            chain,
            layout,
            goal,
            prev: state.clone(),
            state,
            step: 0,
            seed,
            materials,
            order_prev: order.clone(),
            order_cur: order,
        })
    }

    fn order(seed: u64, step: usize, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::seeded(seed, &[0x0DE, step as u64]));
        idx
    }

    pub fn step(&mut self, action: &[f64]) -> Result<()> {
        let next = env_step(&self.cfg, &self.chain, &self.state, action)?;
        self.prev = std::mem::replace(&mut self.state, next);
        self.step += 1;
        self.order_prev = std::mem::replace(&mut self.order_cur, Self::order(self.seed, self.step, self.materials.len()));
        Ok(())
    }

    pub fn success(&self) -> bool {
        check_success(&self.state, &self.goal)
    }

    pub fn expert(&self) -> Result<[f64; N_JOINTS]> {
        expert_action(&self.cfg, &self.chain, &self.state, &self.goal)
    }

    pub fn object_in_workspace(&self) -> bool {
        self.cfg.workspace.contains([self.state.disk[0], self.state.disk[1], 0.0])
    }

    fn cloud(&self, state: &ToyState, order: &[usize]) -> Result<Vec<Point>> {
        let tf = self.chain.link_transforms(&state.q)?;
        Ok(order.iter().map(|&i| material_world(&self.materials[i], &tf, state)).collect())
    }

    pub fn contacts_oracle(&self) -> Result<Vec<bool>> {
        contact_oracle(&self.cfg, &self.chain, &self.layout, &self.state)
    }

    pub fn observe(&self) -> Result<Observation> {
        let p_prev = self.cloud(&self.prev, &self.order_prev)?;
        let p_cur = self.cloud(&self.state, &self.order_cur)?;
        let tf_prev = self.chain.link_transforms(&self.prev.q)?;
        let tf_cur = self.chain.link_transforms(&self.state.q)?;
        let flow = self
            .order_prev
            .iter()
            .map(|&i| {
                let a = material_world(&self.materials[i], &tf_prev, &self.prev);
                let b = material_world(&self.materials[i], &tf_cur, &self.state);
                [b[0] - a[0], b[1] - a[1], b[2] - a[2]]
            })
            .collect();
        Ok(Observation {
            s_prev: self.prev.q,
            s_cur: self.state.q,
            p_prev,
            p_cur,
            goal_cloud: goal_cloud(&self.cfg, &self.goal),
            r_gt: self.contacts_oracle()?,
            forces: contact_forces(&self.cfg, &self.chain, &self.layout, &self.state)?,
            flow,
        })
    }
}

/// `r[k]` iff keypoint `k` lies within `contact_eps` of the disk rim or
/// inside the disk.
pub fn contact_oracle(cfg: &ToyConfig, chain: &KinematicChain, layout: &KeypointLayout, state: &ToyState) -> Result<Vec<bool>> {
    let kp = crate::geom::keypoint_positions(chain, layout, &state.q)?;
    Ok(kp
        .iter()
        .map(|p| len2([p[0] - state.disk[0], p[1] - state.disk[1]]) - cfg.disk_radius <= cfg.contact_eps)
        .collect())
}

/// Newtons per metre of penetration into the contact band.
pub const CONTACT_STIFFNESS: f64 = 1000.0;
/// Upper end of the pseudo-force range, newtons.
pub const MAX_FORCE: f64 = 5.0;

/// Continuous counterpart of [`contact_oracle`]: `CONTACT_STIFFNESS` times
/// the depth of the keypoint inside the `contact_eps` band, capped at
/// `MAX_FORCE`.
pub fn contact_forces(cfg: &ToyConfig, chain: &KinematicChain, layout: &KeypointLayout, state: &ToyState) -> Result<Vec<f64>> {
    let kp = crate::geom::keypoint_positions(chain, layout, &state.q)?;
    Ok(kp
        .iter()
        .map(|p| {
            let gap = len2([p[0] - state.disk[0], p[1] - state.disk[1]]) - cfg.disk_radius;
            (CONTACT_STIFFNESS * (cfg.contact_eps - gap)).clamp(0.0, MAX_FORCE)
        })
        .collect())
}

/// Disk rim and spoke at the goal pose, lifted to `goal_z`.
pub fn goal_cloud(cfg: &ToyConfig, goal: &Goal) -> Vec<Point> {
    let n = cfg.goal_points;
    let n_spoke = if goal.task == Task::Rotate { n / 4 } else { 0 };
    let n_rim = n - n_spoke;
    let (s, c) = goal.theta.sin_cos();
    let mut out = Vec::with_capacity(n);
    for k in 0..n_rim {
        let a = TAU * k as f64 / n_rim as f64;
        let local = [cfg.disk_radius * a.cos(), cfg.disk_radius * a.sin()];
        out.push([goal.position[0] + c * local[0] - s * local[1], goal.position[1] + s * local[0] + c * local[1], cfg.goal_z]);
    }
    for k in 0..n_spoke {
        let x = cfg.disk_radius * (k as f64 + 0.5) / n_spoke as f64;
        out.push([goal.position[0] + c * x, goal.position[1] + s * x, cfg.goal_z]);
    }
    out
}

/// Result of one scripted rollout.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub success: bool,
    pub steps: usize,
    pub records: Vec<(Observation, [f64; N_JOINTS])>,
}

/// Runs the expert from `seed`, recording every step including the
/// terminal hold action on success.
pub fn expert_rollout(cfg: &ToyConfig, task: Task, seed: u64, record: bool) -> Result<Rollout> {
    let mut ep = Episode::reset(cfg, task, seed)?;
    let mut records = Vec::new();
    for t in 0..=cfg.max_steps {
        let action = match ep.expert() {
            Ok(a) => a,
            Err(Error::OutOfDomain(_)) => return Ok(Rollout { success: false, steps: t, records }),
            Err(e) => return Err(e),
        };
        if record {
            records.push((ep.observe()?, action));
        }
        if ep.success() {
            return Ok(Rollout { success: true, steps: t, records });
        }
        if t == cfg.max_steps {
            break;
        }
        ep.step(&action)?;
        if !ep.object_in_workspace() {
            break;
        }
    }
    Ok(Rollout { success: false, steps: ep.step, records })
}
