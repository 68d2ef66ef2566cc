//! Trajectory optimization for multi-agent data harvesting.
//!
//! Agents fly closed elliptical paths over a field of static targets whose
//! data buffers fill at a constant rate and drain while an agent is within
//! sensing range. Parameter gradients of the mean weighted backlog are
//! obtained from a single sample path by infinitesimal perturbation analysis,
//! and an event-excitation potential field supplies gradient information
//! when no agent visits any target.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod excitation;
pub mod geometry;
pub mod harness;
pub mod ipa;
pub mod optimizer;
pub mod plant;
pub mod trajectory;

pub use error::{Error, Result};
