//! Shared domain layer for bimanual hand-object interaction generation:
//! rotation utilities, per-frame state types, the skeletal hand and
//! articulated object models, evaluation metrics and synthetic data.

pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod rotation;
pub mod types;

pub use error::{CoreError, Result};
pub use rotation::{matrix_to_rot6d, rot6d_to_matrix, Rotation6D};
pub use types::{
    HandPose, HandSide, HandState, HandType, HandTypeFlag, MotionSequence, ObjectState, FRAME_DIM,
    MAX_FRAMES, NUM_JOINTS, POSE_DIM,
};
