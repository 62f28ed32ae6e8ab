pub mod densities;
pub mod diffcore;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graphs;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod vicinal;
