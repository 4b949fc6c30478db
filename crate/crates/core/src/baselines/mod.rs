pub mod bocpd;
pub mod control;
pub mod gru;

pub use bocpd::{BocpdConfig, BocpdDetector, RunLengthPosterior};
pub use control::{ControlCondition, ControlKind};
pub use gru::{Gru, GruConfig, GruDetector};
