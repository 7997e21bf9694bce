//! Command line front end and HTTP service for the simulator.

pub mod cli;
pub mod service;
