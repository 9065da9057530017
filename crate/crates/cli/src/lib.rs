pub mod commands;
pub mod config;
pub mod experiments;
pub mod kitti;
pub mod run;
