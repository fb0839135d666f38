//! Command line and HTTP front end for the click-to-grasp engine.

pub mod cli;
pub mod jobs;
pub mod server;
pub mod store;
