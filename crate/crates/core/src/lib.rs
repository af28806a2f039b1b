//! Training-free adapters between the input-embedding spaces of language
//! models that use different tokenizers.
//!
//! The pieces, bottom up:
//!
//! - [`tproduct`]: order-3 tensors, the t-product and its pseudoinverse.
//! - [`tokenization`]: whitespace-respecting char and BPE tokenizers.
//! - [`vocab`]: vocabulary matrices, bucketed word tensors, adapter fitting.
//! - [`adapter`]: split/merge, the exact forward map and both backward maps.
//! - [`models`]: synthetic models with analytic loss heads.
//! - [`optimizer`]: beam-search discrete prompt optimizer.
//! - [`toy`]: small deterministic corpora, tokenizers and demo models.

pub mod adapter;
pub mod error;
pub mod models;
pub mod optimizer;
pub mod tokenization;
pub mod toy;
pub mod tproduct;
pub mod vocab;

pub use error::{FuseError, Result};
pub use tproduct::Tensor3;
