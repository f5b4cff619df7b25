//! Glimpse-based online video classification trained against a full-frame teacher.
//!
//! A student sees one small glimpse per frame, predicts the class after
//! every glimpse and chooses where to look next. It is trained to match a
//! full-frame teacher's features and per-step predictions.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod glimpse;
pub mod losses;
pub mod network;
pub mod optim;
pub mod params;
pub mod report;
pub mod strategies;
pub mod student;
pub mod teacher;
pub mod train;

pub use error::{GlitrError, Result};
