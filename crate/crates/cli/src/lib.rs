//! Command line and HTTP front end for the metric-lens explainer.

pub mod cli;
pub mod dataset;
pub mod demo;
pub mod http;
pub mod pipeline;
pub mod service;
pub mod workspace;
