//! Anatomical analysis of prompt text encoders: tokenizer audits, embedding
//! spectra, intrinsic dimensionality and softmax error attenuation.

pub mod error;
pub mod par;
pub mod tokenizer;

pub use error::{AnatomyError, Result};
pub use par::Exec;
pub use tokenizer::{normalize_text, MergeTable, TokenSequence, PAD_ID};
pub mod audit;
pub mod ltxt;
pub mod svd;
pub mod spectral;
pub mod intrinsic;
pub mod synthetic;
pub mod probe;
