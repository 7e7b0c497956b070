//! Harness around the verifier: property generation by radius bisection,
//! dataset generation, training, single verifications and benchmark sweeps.
//! Every artifact is a JSON or CSV file; given fixed seeds, all of them are
//! byte-reproducible except for wall-clock fields.

pub mod bench;
pub mod genprops;
pub mod pipeline;
pub mod props;
pub mod runner;
