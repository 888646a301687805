//! Discrete-event simulator of multi-region LLM serving fleets with
//! forecast-driven autoscaling.

pub mod autoscaler;
pub mod config;
pub mod experiment;
pub mod forecast;
pub mod metrics;
pub mod niw;
pub mod optimizer;
pub mod perf;
pub mod routing;
pub mod sim;
pub mod types;
pub mod workload;
