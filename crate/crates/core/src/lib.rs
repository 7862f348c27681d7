//! Cascade CNN face detector with joint calibration and landmark alignment.
//!
//! The toolkit trains and runs a three-stage cascade: a shallow
//! fully-convolutional net scans an image pyramid for candidate windows,
//! and two progressively deeper nets re-score, re-localize, and finally
//! place five facial landmarks on the survivors. Every stage is trained
//! with a shared multi-task objective (classification, bounding-box
//! regression, landmark regression) over proposal sets mined from the
//! previous stage's mistakes, with online selection of the hardest
//! examples inside each minibatch.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors generic over element precision.
//! - [`layers`]: convolution, pooling, activations, and their gradients.
//! - [`net`]: network topologies, parameter init, forward/backward tape.
//! - [`losses`]: per-task losses and the weighted multi-task objective.
//! - [`sampler`]: proposal generation, labeling, and hard-example selection.
//! - [`cascade`]: image pyramid, dense scan, NMS, and staged inference.
//! - [`trainer`]: minibatch assembly, stage training, joint fine-tuning.
//! - [`eval`]: detection matching, precision/recall, landmark error.
//! - [`dataset`]: synthetic scene generation and annotation I/O.
//! - [`model`]: on-disk container for trained cascades.

pub mod cascade;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod layers;
pub mod losses;
pub mod net;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
