//! Generalized contextual similarity aggregation.
//!
//! Re-ranks the top-K results of a descriptor-based image retrieval with a
//! single self-attention graph layer operating on *affinity vectors*: the
//! similarities between every node (query + candidates) and a fixed anchor
//! set, computed for visual descriptors and for non-visual side information
//! (camera field-of-view overlap, compass heading, radio signal strength).
//!
//! The crate is `no_std` (with `alloc`). File formats, configuration and the
//! command line live in the `gcsa` companion crate.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`tensor`], [`tape`], [`gradcheck`] | dense kernels, reverse-mode tape, finite-difference checks |
//! | [`geometry`], [`radio`], [`affinity`] | side-information similarities and affinity assembly |
//! | [`model`] | projection `W`, input projection, attention layer, re-ranking |
//! | [`loss`] | quantized AP, exact AP, contrastive |
//! | [`optim`], [`train`] | Adam and the two-stage trainer |
//! | [`retrieval`], [`metrics`], [`baselines`], [`rerank`] | top-K search, mAP@k / Recall@k, query expansion and filters |
//! | [`dataset`] | records, descriptors, labels and context assembly |
//! | [`synth`] | aliased multi-modal synthetic worlds |

#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod affinity;
pub mod baselines;
pub mod dataset;
mod error;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod radio;
mod real;
pub mod rerank;
pub mod retrieval;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use crate::error::{Error, Result};
pub use crate::real::Real;
