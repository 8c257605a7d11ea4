//! Learn Gaussian-process dynamics models from logged transitions and train
//! goal-conditioned neural-network policies by differentiating batched Monte
//! Carlo rollouts through the GP posterior.

pub mod array;
pub mod bench;
pub mod cli;
pub mod config;
pub mod env;
pub mod exec;
pub mod kernel;
pub mod linalg;
pub mod policy;
pub mod rng;
pub mod container;
pub mod data;
pub mod gp;
pub mod optim;
pub mod tape;
pub mod trainer;
