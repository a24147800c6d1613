//! Novel class discovery on precomputed region-proposal features.
//!
//! The pipeline bootstraps a known-class linear head on labeled proposals,
//! then trains it jointly with a novel-class cosine head whose targets come
//! from Sinkhorn-Knopp pseudo-labels under a long-tail class prior. Discovered
//! slots are mapped to ground-truth names with the Hungarian algorithm and
//! scored with COCO-style mAP.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod heads;
pub mod inference;
pub mod memory;
pub mod priors;
pub mod pseudolabel;
pub mod synth;
pub mod trainer;

pub use error::{NcdlError, Result};
