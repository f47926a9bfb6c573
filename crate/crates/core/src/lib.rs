//! Weight-space interpolation of pretrained and fine-tuned point-cloud
//! classifiers, linear probing on interpolated backbones, and the robustness
//! probes used to compare them.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod net;
pub mod optim;
pub mod report;
pub mod rng;
pub mod robust;
pub mod shapes;
pub mod tensorstore;
pub mod wise;
