pub mod fake_score;
pub mod generator;
pub mod nn;
pub mod optim;
pub mod prior;
pub mod reward;
pub mod schedule;
pub mod objectives;
pub mod engine;
pub mod plot;
pub mod config;
pub mod verify;
