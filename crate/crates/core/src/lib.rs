//! Asymmetric student-teacher anomaly detection.
//!
//! A conditional normalizing flow (the teacher, [`flow`]) is trained by
//! maximum likelihood on normal feature maps. A conventional convolutional
//! network (the student, [`student`]) is then trained to regress the
//! teacher's latent output on the same data. At test time the per-pixel
//! distance between the two is the anomaly map. The image score is its
//! maximum over the foreground mask, or its mean when there is no mask.
//!
//! Everything runs on the CPU in `f32` (or `f64` for checks) with a small
//! tape-based autodiff in [`tensor`]. [`data`] covers depth preprocessing,
//! positional encoding and synthetic corpora, [`train`] the two training
//! loops and scoring, [`eval`] metrics, exports and the 1-D toy study, and
//! [`verify`] the gradient checks and self-tests behind the CLI.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod layers;
pub mod masking;
pub mod student;
pub mod tensor;
pub mod verify;
pub mod train;
pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
