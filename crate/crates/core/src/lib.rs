//! Map-aware single-stage LiDAR detection in bird's-eye view.

pub mod bevgrid;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod geom;
pub mod mapdata;
pub mod mapnet;
pub mod synthworld;
pub mod tensor;

pub use error::{Error, Result};
