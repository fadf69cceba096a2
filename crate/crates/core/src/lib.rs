//! Simulation and analysis engine for three-node measurement-device-independent
//! QKD with weak coherent pulses, decoy states and classical-channel coexistence.

pub mod model;
pub mod forward;
pub mod simplex;
pub mod decoy;
pub mod table_io;
pub mod fixtures;
pub mod pulse_sim;
pub mod coexistence;
pub mod pipeline;
pub mod fit;
pub mod session;
