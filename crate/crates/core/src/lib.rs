//! Deterministic discrete-event simulation of a Lambda-architecture task
//! dispatcher running batch jobs and micro-batched streams over a hybrid
//! cloud / desktop-grid environment with node churn.

pub mod dispatcher;
pub mod environment;
pub mod kernel;
pub mod scenarios;
pub mod views;
pub mod workload;
