//! Multi-agent pathfinding laboratory built around the shared recurrent
//! memory transformer policy.

pub mod config;
pub mod evalkit;
pub mod gridenv;
pub mod maps;
pub mod numkit;
pub mod pathing;
pub mod policy;
pub mod rewards;
pub mod trainer;
