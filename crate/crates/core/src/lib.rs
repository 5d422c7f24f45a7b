pub mod agent;
pub mod api;
pub mod backend;
pub mod environment;
pub mod folding;
pub mod harness;
pub mod transcript;
