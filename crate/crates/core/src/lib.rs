pub mod config;
pub mod credit;
pub mod curriculum;
pub mod grammar;
pub mod harness;
pub mod pool;
pub mod reward;
pub mod scheduler;
pub mod verify;
pub mod workers;
