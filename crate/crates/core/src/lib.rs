//! Masked graph autoencoder clustering with automatic estimation of the
//! number of clusters.
//!
//! The pipeline encodes a randomly masked graph with graph attention, fuses
//! the result with a feed-forward autoencoder embedding, trains the fused
//! embedding against structural and feature targets, and clusters it with
//! density peaks, which also decides k.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decoder;
pub mod dpeaks;
pub mod encoder;
pub mod error;
pub mod graph_io;
pub mod metrics;
pub mod numeric;
pub mod selfopt;
pub mod trainer;

pub use error::{Error, Result};
