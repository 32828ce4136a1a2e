pub mod config;
pub mod idx;
pub mod report;
pub mod synthetic;
pub mod trace;
