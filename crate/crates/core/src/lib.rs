//! Language-planned block construction with a simulated drone.
//!
//! [`gridworld`] holds the pad model and scene text, [`planner`] talks to the
//! language planner, [`framesync`] maps pad cells to world points, [`vision`]
//! verifies placements from camera frames, [`dronesim`] runs the closed build
//! loop and [`evalharness`] scores batches of runs.

pub mod framesync;
pub mod gridworld;
pub mod planner;
pub mod vision;
pub mod dronesim;
pub mod evalharness;
