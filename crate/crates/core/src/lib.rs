//! Open-vocabulary temporal action localization.

pub mod c2f;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod supervision;
pub mod synthdata;
pub mod triage;

pub use error::{Error, Result};
