//! Advantage shaping for PPO from a memory graph of trajectory segments.

pub mod gridworld;
pub mod memgraph;
pub mod utility;
pub mod ppo;
pub mod shaping;
pub mod guidance;
pub mod plot;
pub mod trainer;
