//! Gradient tape, message-passing GNN, training loops and hyperparameter search.

pub mod ar;
pub mod checkpoint;
pub mod data;
pub mod doe;
pub mod graph;
pub mod model;
pub mod params;
pub mod tape;
pub mod train;
