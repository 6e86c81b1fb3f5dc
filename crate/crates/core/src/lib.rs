pub mod camera;
pub mod error;
pub mod filter;
pub mod geometry;
pub mod icp;
pub mod lidar;
pub mod planar;
pub mod propagation;
pub mod scan;
pub mod simulator;
pub mod dataset;
pub mod config;
pub mod report;
pub mod calibrate;
pub mod overlay;
