//! Counterfactual behavioral interventions for postprandial hyperglycemia.
//!
//! The crate turns raw CGM and pump streams into labeled pre-meal contexts,
//! trains the outcome predictors, and searches for small, bounded,
//! preference-weighted changes to the behavioral levers (carbohydrates,
//! bolus size, bolus timing, pre-meal glucose) that move a hyperglycemic
//! prediction to normoglycemia.

pub mod domain;
pub mod pipeline;
pub mod synthgen;
pub mod models;
pub mod engine;
pub mod metrics;
pub mod harness;
