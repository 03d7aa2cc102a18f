//! Visuotactile imitation learning with one-step shortcut flow models.
//!
//! The crate is organised bottom-up: [`geom`] holds point-cloud and
//! kinematics primitives, [`diffnet`] a small reverse-mode network toolkit,
//! and the remaining modules build the encoders, the shortcut generator,
//! contact inference from flow, the toy environment and the training and
//! evaluation pipeline on top of them.

pub mod diffnet;
pub mod error;
pub mod flow2tactile;
pub mod geom;
pub mod par;
pub mod pipeline;
pub mod perception;
pub mod rng;
pub mod sensormap;
pub mod shortcut;
pub mod synthetic;
pub mod toyenv;

pub use error::{Error, Result};
