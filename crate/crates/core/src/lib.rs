//! Weakly supervised soft SDG labeling for patents.
//!
//! Patents and SDG-tagged scientific documents are described by extracted
//! *function*, *solution* and *application* concepts. The labeling function
//! ([`alignment`]) ranks SDG documents by concept similarity per category,
//! fuses the rankings with reciprocal rank fusion and turns the top-N
//! documents into a soft 17-dimensional SDG vector. Its thresholds are tuned
//! against citation anchors with a positive-only loss ([`calibration`]), and
//! the resulting silver labels are checked by recall ([`evaluation`]),
//! network homophily ([`homophily`]) and learnability ([`regressor`]).
//! [`query`] splits oversized Boolean search queries into equivalent parts.

pub mod alignment;
pub mod calibration;
pub mod error;
pub mod evaluation;
pub mod extraction;
pub mod homophily;
pub mod model;
pub mod pipeline;
pub mod query;
pub mod regressor;
pub mod synthetic;

pub use error::{Error, Result};
