//! Deterministic, exact-arithmetic models of three transport-layer
//! mechanisms and the analyses connecting them:
//!
//! * [`execution`] and [`karn`] — abstract sender/channel/receiver event
//!   sequences, a round-trip-time oracle over them, and the ambiguity-aware
//!   RTT sampling monitor with its correctness checks.
//! * [`rto`] — the RFC 6298 retransmission-timeout chain over exact
//!   rationals, steady-state envelopes for its smoothed values, timeout
//!   detection, and scenario sample generators.
//! * [`gbn`], [`tbf`], and [`system`] — Go-Back-N endpoints, a generalized
//!   token bucket filter with a composition law, and the composed system
//!   with scripted replay and closed-form efficiency scenarios.
//!
//! Everything is pure and deterministic: replays and generators are
//! functions of their inputs and seeds, and all comparisons are exact.

pub mod checks;
pub mod error;
pub mod execution;
pub mod gbn;
pub mod karn;
pub mod numerics;
pub mod rto;
pub mod system;
pub mod tbf;

pub use error::{Error, Result};
pub use numerics::{ExtNat, Rational};
