//! Planar human-assisting grasping laboratory.

pub mod eval;
pub mod geom;
pub mod graspdata;
pub mod graspgf;
pub mod hand;
pub mod io_util;
pub mod nn;
pub mod rl;
pub mod scalar;
pub mod trajgen;

pub use scalar::Real;

/// Double-precision instantiations of the generic types.
pub type Vec2F64 = geom::Vec2<f64>;
pub type Pose2F64 = geom::Pose2<f64>;
pub type HandModelF64 = hand::HandModel<f64>;
pub type JointVectorF64 = hand::JointVector<f64>;
pub type ObjectShapeF64 = hand::ObjectShape<f64>;
pub type ContactF64 = hand::Contact<f64>;
pub type TensorF64 = nn::TensorBuf<f64>;
pub type MlpF64 = nn::Mlp<f64>;
pub type SetEncoderF64 = nn::SetEncoder<f64>;
pub type ScoreModelF64 = graspgf::ScoreModel<f64>;
pub type ResidualPolicyF64 = rl::ResidualPolicy<f64>;
