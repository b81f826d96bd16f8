pub mod node;
pub mod sensors;
pub mod motion;
pub mod arm;
pub mod tradeoff;
pub mod careplan;
pub mod simworld;
pub mod command;
pub mod telemetry;
pub mod controller;
pub mod report;
pub mod cli;
