//! Prototype-based few-shot and open-set detection head.
//!
//! Raw proposal features are embedded by a small MLP, compared against
//! class prototypes (mean support embeddings) by squared Euclidean energy,
//! and trained with a matching loss followed by distillation and alignment
//! terms. A synthetic proposal world replaces the detector backbone, and a
//! COCO-style evaluator scores the resulting detections.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN. Index
// loops read more plainly than iterator chains in the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use serde::{Deserialize, Serialize};

pub mod commands;
pub mod config;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod numeric;
pub mod optim;
pub mod prototype;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};

/// Class identifier. `0` is background; [`ClassId::UNKNOWN`] is reserved for
/// the composed open-set prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);
    pub const UNKNOWN: ClassId = ClassId(u32::MAX);

    pub fn is_background(self) -> bool {
        self == Self::BACKGROUND
    }
}

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Self::UNKNOWN => f.write_str("unknown"),
            ClassId(c) => write!(f, "{c}"),
        }
    }
}
