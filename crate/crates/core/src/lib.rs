pub mod correspondence;
pub mod io_formats;
pub mod label_model;
pub mod strength_inference;
pub mod risk_eval;
pub mod trial_engine;
pub mod validation_sim;
pub mod service;
pub mod cli;
