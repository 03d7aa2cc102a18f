//! Contact keypoint layouts and reading binarization.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Result};
use crate::geom::{JointType, KeypointEntry, KeypointLayout, KinematicChain, Link, RigidTransform};
use crate::perception::{TactileFrame, TactileMode};

/// Which hand a layout is generated for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayoutKind {
    /// Simplified five-finger hand: 14 finger links and a palm.
    Shadow,
    /// One `around x along` grid per link of a planar capsule hand.
    Toy { links: usize, around: usize, along: usize, length: f64, radius: f64 },
    /// Any other name is rejected.
    #[serde(other)]
    Unsupported,
}

pub const SHADOW_AROUND: usize = 3;
pub const SHADOW_ALONG: usize = 4;
pub const SHADOW_PALM_ROWS: usize = 12;
pub const SHADOW_PALM_COLS: usize = 24;
const SHADOW_PALM: [f64; 2] = [0.085, 0.1];

/// Finger link lengths (proximal to distal); the thumb has two links.
const SHADOW_FINGERS: [(f64, &[f64]); 5] = [
    (-0.033, &[0.045, 0.025, 0.026]),
    (-0.011, &[0.045, 0.025, 0.026]),
    (0.011, &[0.045, 0.025, 0.026]),
    (0.033, &[0.045, 0.025, 0.026]),
    (-0.045, &[0.038, 0.032]),
];
const SHADOW_LINK_RADIUS: f64 = 0.01;

/// Kinematic skeleton the shadow layout is attached to. Link 0 is the palm;
/// every finger link has one revolute joint about the local y axis.
pub fn shadow_chain() -> KinematicChain {
    let mut links = vec![Link {
        parent: None,
        rest: RigidTransform::identity(),
        axis: Vector3::z(),
        joint: JointType::Fixed,
    }];
    for (x, lengths) in SHADOW_FINGERS {
        let mut parent = 0;
        let mut offset = Vector3::new(x, SHADOW_PALM[1], 0.0);
        for &len in lengths {
            links.push(Link {
                parent: Some(parent),
                rest: RigidTransform::from_rotation_z(0.0, offset),
                axis: Vector3::x(),
                joint: JointType::Revolute,
            });
            parent = links.len() - 1;
            offset = Vector3::new(0.0, len, 0.0);
        }
    }
    KinematicChain::new(links).expect("static chain is valid")
}

fn shadow_layout() -> KeypointLayout {
    let mut entries = Vec::new();
    let mut link = 1;
    for (_, lengths) in SHADOW_FINGERS {
        for &len in lengths {
            for a in 0..SHADOW_ALONG {
                let y = len * (a as f64 + 0.5) / SHADOW_ALONG as f64;
                for k in 0..SHADOW_AROUND {
                    // Palmar half-ring, facing -z.
                    let phi = std::f64::consts::PI * (k as f64 + 0.5) / SHADOW_AROUND as f64;
                    let r = SHADOW_LINK_RADIUS;
                    entries.push(KeypointEntry { link, offset: [r * phi.cos(), y, -r * phi.sin()] });
                }
            }
            link += 1;
        }
    }
    for i in 0..SHADOW_PALM_ROWS {
        for j in 0..SHADOW_PALM_COLS {
            let x = SHADOW_PALM[0] * ((j as f64 + 0.5) / SHADOW_PALM_COLS as f64 - 0.5);
            let y = SHADOW_PALM[1] * (i as f64 + 0.5) / SHADOW_PALM_ROWS as f64;
            entries.push(KeypointEntry { link: 0, offset: [x, y, -SHADOW_LINK_RADIUS] });
        }
    }
    KeypointLayout::new(entries).expect("non-empty")
}

/// In-plane rings of `around` points at `along` stations per link. Station
/// `a` sits at `length * (a + 1) / along` along the link's x axis.
pub fn toy_layout(links: usize, around: usize, along: usize, length: f64, radius: f64) -> Result<KeypointLayout> {
    if links == 0 || around == 0 || along == 0 || !(length > 0.0) || !(radius >= 0.0) {
        return Err(config("toy layout needs positive counts and sizes"));
    }
    let mut entries = Vec::with_capacity(links * around * along);
    for link in 0..links {
        for a in 0..along {
            let s = length * (a + 1) as f64 / along as f64;
            for k in 0..around {
                let phi = std::f64::consts::TAU * k as f64 / around as f64;
                entries.push(KeypointEntry { link, offset: [s + radius * phi.cos(), radius * phi.sin(), 0.0] });
            }
        }
    }
    KeypointLayout::new(entries)
}

pub fn build_layout(kind: &LayoutKind) -> Result<KeypointLayout> {
    match *kind {
        LayoutKind::Shadow => Ok(shadow_layout()),
        LayoutKind::Toy { links, around, along, length, radius } => toy_layout(links, around, along, length, radius),
        LayoutKind::Unsupported => Err(config("unsupported layout kind")),
    }
}

/// Number of shadow keypoints on the palm link.
pub fn palm_count(layout: &KeypointLayout) -> usize {
    layout.entries.iter().filter(|e| e.link == 0).count()
}

/// `reading_i = 1` iff `force_i >= tau`.
pub fn binarize_readings(forces: &TactileFrame, tau: f64) -> Result<TactileFrame> {
    binarize_forces(forces.readings(), tau)
}

/// Raw-force variant of [`binarize_readings`].
pub fn binarize_forces(forces: &[f64], tau: f64) -> Result<TactileFrame> {
    if !(tau > 0.0) {
        return Err(invalid(format!("threshold {tau} must be positive")));
    }
    if let Some(f) = forces.iter().find(|f| **f < 0.0 || !f.is_finite()) {
        return Err(invalid(format!("force reading {f} is negative or not finite")));
    }
    let out: Vec<f64> = forces.iter().map(|&f| if f >= tau { 1.0 } else { 0.0 }).collect();
    TactileFrame::new(out, TactileMode::Binary)
}
