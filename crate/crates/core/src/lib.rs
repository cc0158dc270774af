//! Landmark-guided dynamic spline gating for a small convolutional forgery
//! detector, built on a self-contained reverse-mode tape.

pub mod data;
pub mod encoder;
pub mod error;
pub mod lakan;
pub mod ndiff;
pub mod params;
pub mod spline_kan;
pub mod train;

pub use error::{Error, Result};
