//! Copula joint discrete-choice models and partially-linear double machine
//! learning with cross-fitted regression forests.

pub mod choice;
pub mod cli;
pub mod copula;
pub mod dml;
pub mod dataset;
pub mod forest;
pub mod joint;
pub mod normal;
pub mod optim;
pub mod synth;
