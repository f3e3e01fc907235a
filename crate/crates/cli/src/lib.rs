//! Command line front end: configuration, run artifacts and figures.

pub mod commands;
pub mod config;
pub mod plots;
pub mod svg;
