//! Front ends for the planning engine: batch studies from the command line
//! and a session service for interactive warm-started re-planning.

pub mod service;
pub mod session;
pub mod study;
