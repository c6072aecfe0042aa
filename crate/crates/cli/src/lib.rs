//! Command-line front end: tagging, agent runs, scoring, dataset upkeep,
//! and the human-evaluation service.

pub mod commands;
pub mod config;
pub mod serve;
