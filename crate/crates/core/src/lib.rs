//! Label-smoothing defenses for adversarially robust classifiers.
//!
//! The crate bundles a small reverse-mode engine for dense feed-forward
//! classifiers ([`nn`]), the four label-smoothing constructions and their
//! logit-penalty form ([`smoothing`]), white-box l-inf attacks ([`attacks`]),
//! the closed-form fading-Gaussian study ([`fading_gaussian`]), training and
//! evaluation loops ([`training`]), dataset loaders ([`data`]) and the
//! experiment/report runner ([`experiment`]).

// `!(x >= 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fading_gaussian;
pub mod nn;
pub mod smoothing;
pub mod training;

pub use error::{Error, Result};
