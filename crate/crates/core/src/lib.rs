pub mod annotation;
pub mod cli;
pub mod dataset;
pub mod exec;
pub mod model;
pub mod model_file;
pub mod numerics;
pub mod server;
pub mod session;
pub mod trainer;
pub mod wire;
