// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod backend;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod language;
pub mod lens;
pub mod manifest;
pub mod par;
pub mod pipeline;
pub mod prompting;
pub mod synth;
pub mod task;
pub mod tuning;

pub use error::{Error, ErrorClass, Result};
