//! Discrete-event model of a mission-critical cellular RAN driven by TOML
//! scenarios. Each module covers one subsystem; `scenario` wires them onto a
//! single engine and derives the metrics report.

// Range checks are written `!(x >= 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod access;
pub mod admission;
pub mod iab;
pub mod multicast;
pub mod positioning;
pub mod qos;
pub mod radio;
pub mod scenario;
pub mod sidelink;
pub mod sim;
pub mod ue;
