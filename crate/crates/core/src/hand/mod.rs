//! Planar three-finger hand, rigid objects on a table, and the grasping
//! episode simulator.

pub mod closure;
pub mod contact;
pub mod env;
pub mod model;
pub mod object;

pub use closure::{closure_margin, edge_wrenches, force_closure, hull_margin};
pub use contact::{detect_contacts, Contact, CONTACT_TOL};
pub use env::{Env, EnvConfig, EnvState, LiftOutcome, LiveWrist, Phase, StepInfo, WristSource};
pub use model::{
    FingerSpec, HandGeometry, HandModel, JointVector, LinkId, WristPose, NUM_FINGERS, NUM_JOINTS,
};
pub use object::{read_library, write_library, ObjectShape, ShapeKind, CLOUD_SIZE};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("joint {index} = {value} is outside its limits")]
    JointLimit { index: usize, value: f64 },
    #[error("action has {got} components, expected {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("action contains a non-finite value")]
    NonFiniteAction,
    #[error("scripted trajectory has {got} poses, expected {expected}")]
    TrajectoryLength { expected: usize, got: usize },
    #[error("invalid initialization: {0}")]
    InvalidInit(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EnvError>;
