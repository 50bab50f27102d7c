//! Instructor API and command-line front end for the course bot.

pub mod cli;
pub mod config;
pub mod http;
pub mod service;
