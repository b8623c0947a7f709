//! Learned-navigation workbench: procedural worlds, simulated sensors,
//! steering networks, training and the closed-loop policy.

pub mod collect;
pub mod dataset;
pub mod nets;
pub mod policy;
pub mod sensors;
pub mod train;
pub mod world;
