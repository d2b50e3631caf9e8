//! Spiking neural networks with learnable leaky-integrate-and-fire dynamics
//! for event-based optical flow.
//!
//! The crate covers the whole pipeline: event streams and their voxelized
//! input ([`events`]), a small dense tensor kernel with explicit backward
//! passes ([`tensor`]), LIF neurons with surrogate gradients ([`snn`]),
//! spiking and analog U-Net / FireNet models ([`model`]), losses and metrics
//! ([`objectives`]), the BPTT trainer ([`train`]) and the operation/energy
//! profiler ([`profile`]).

pub mod error;
pub mod events;
pub mod flow;
pub mod formats;
pub mod model;
pub mod objectives;
pub mod profile;
pub mod snn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use flow::FlowField;
