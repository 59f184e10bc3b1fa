//! Censorship measurement: probes, a mechanism classifier, a censor
//! emulator for offline testing, circumvention transforms and reporting.

pub mod circumvent;
pub mod classifier;
pub mod dataset;
pub mod dns;
pub mod emulator;
pub mod http;
pub mod model;
pub mod probe;
pub mod report;
