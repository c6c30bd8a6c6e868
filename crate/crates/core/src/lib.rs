//! A task-centric kernel for crowdsourcing platforms.
//!
//! Tasks move through a seven-phase lifecycle driven by one coordinator:
//! creation, resolution into a feature vector, strategy-based assignment,
//! execution by participants, processing, quality feedback with automatic
//! corrections, and termination. Platform resources are modelled as five
//! agent kinds (task, user, device, environment, process).

pub mod agents;
pub mod assignment;
pub mod config;
pub mod data;
pub mod kernel;
pub mod protocol;
pub mod quality;
pub mod resolution;
pub mod scheduler;
pub mod sim;
pub mod task;
