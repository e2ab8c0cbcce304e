//! Packet-level simulator and fluid-model toolkit for link-layer congestion
//! control in data-center Ethernet.

pub mod asm;
pub mod config;
pub mod cp;
pub mod error;
pub mod event;
pub mod experiments;
pub mod fluid;
pub mod net;
pub mod qcn;
pub mod trace;

pub use error::{Error, Result};
