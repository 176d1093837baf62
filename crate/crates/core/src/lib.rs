//! Trace-driven surrogate routing.
//!
//! Every call to an expensive teacher classifier leaves a labeled trace.
//! This crate trains cheap surrogates on those traces, gates their
//! deployment on held-out teacher agreement, routes live traffic between
//! surrogate and teacher, and reports where the routing boundary lies.

pub mod acceptor;
pub mod artifacts;
pub mod bench;
pub mod gatekeeper;
pub mod math;
pub mod router;
pub mod surrogate;
pub mod trace_store;
