//! Attention blocks and the deformable attention transformer backbone:
//! dense/window/shift-window/SRA attention, deformable multi-head attention
//! with query-conditioned offsets and continuous relative position bias, the
//! four-stage pyramid model, checkpoints, and a gradient-check battery.

pub mod attention;
pub mod check;
pub mod checkpoint;
pub mod deform;
mod error;
pub mod init;
pub mod layers;
pub mod model;

pub use error::{Error, Result};
pub use layers::{DeformCapture, ForwardCtx, GroupCapture};
