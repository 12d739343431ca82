//! Multi-granularity self-contrastive preference training on a synthetic
//! constraint language.

pub mod confidence;
pub mod constraint_lang;
pub mod datagen;
pub mod eval;
pub mod lm;
pub mod losses;
pub mod trainer;
