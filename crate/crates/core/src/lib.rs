//! Click-to-grasp: ground a click on a source image into a 3D area of interaction
//! on a target object seen by calibrated RGB-D cameras, then solve for a
//! collision-free gripper pose over a differentiable descriptor field.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotator;
pub mod bundle;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod grounding;
pub mod optimizer;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;
