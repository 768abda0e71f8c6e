//! Learning conversion models from attribution sets.
//!
//! A stream of labeled impressions is hidden from the learner; each conversion is reported
//! only through a window of `k` consecutive impressions, placed by an adversary according to
//! a prior over window positions. [`estimator`] turns those windows into an unbiased estimate
//! of the population loss, [`train`] minimizes it, and [`oracle`] checks the unbiasedness by
//! exhaustive enumeration on small instances.
//!
//! Conventions: conversion ordinals `j` are 1-based, window positions and stream indices are
//! 0-based, and position `k - 1` is the one closest to the conversion.

pub mod cli;
pub mod data;
pub mod error;
pub mod estimator;
pub mod loss;
pub mod math;
pub mod model;
pub mod oracle;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
