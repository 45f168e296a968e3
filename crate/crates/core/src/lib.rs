//! Modelling, control and stability analysis of a supernumerary robotic
//! limb that braces a human worker against an overhead surface.
// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod emg_pipeline;
pub mod kinematics;
pub mod numerics;
pub mod stability;
pub mod stiffness_control;
pub mod sim_harness;
