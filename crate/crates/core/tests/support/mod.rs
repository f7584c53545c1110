//! Checks shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod decoding;
pub mod gradcheck;
pub mod masks;
