//! Sub-trajectory filtered behavior cloning on a pendulum swing-up testbed.
//!
//! The pipeline runs generate → annotate → filter → train → evaluate:
//!
//! - [`env`]: pendulum dynamics, rollouts and frame rendering
//! - [`datagen`]: scripted expert/failure controllers and the mixed dataset
//! - [`annotator`]: success probabilities per sub-trajectory (scripted oracle or remote endpoint)
//! - [`sfo`]: sub-trajectory decomposition, retrospective filtering and weighted samples
//! - [`learner`]: weighted behavior cloning of an MLP policy
//! - [`harness`]: evaluation, multi-seed reproduction and reports

pub mod annotator;
pub mod datagen;
pub mod env;
pub mod error;
pub mod harness;
pub mod io;
pub mod learner;
pub mod rng;
pub mod sfo;

pub use annotator::{Annotation, AnnotatorBackend, PromptKind, PromptPair};
pub use datagen::{Dataset, DatasetConfig, DatasetManifest, SegmentOrder, Trajectory};
pub use env::{Action, Frame, Policy, State};
pub use error::{Result, SfbcError};
pub use learner::{Method, PolicyParams, TrainConfig};
pub use sfo::{FilterConfig, SubTrajectory, WeightedSample};
