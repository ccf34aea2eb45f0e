// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod attribution;
pub mod aggregation;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod generation;
pub mod html;
pub mod io;
pub mod model;
pub mod rng;
pub mod step_scores;
pub mod studies;

pub use error::{Error, Result};
