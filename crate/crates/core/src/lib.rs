pub mod cli;
pub mod em_engine;
pub mod error;
pub mod initialization;
pub mod measure_change;
pub mod model;
pub mod recursive_filters;
pub mod robust_core;
pub mod simulator;
pub mod so_optimal;
