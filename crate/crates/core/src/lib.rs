//! Deterministic BB84 quantum-link simulator with physics-level attack
//! injection, an indicator-of-compromise detection engine, and a
//! machine-readable attack-technique knowledge base for forensic reporting.
//!
//! The crate is organized along the pipeline of one scenario run:
//!
//! - [`optics`]: weak-coherent source, lossy channel, and gated
//!   single-photon receiver physics.
//! - [`protocol`]: the BB84 session engine, sifting, and windowed
//!   error-rate estimation.
//! - [`attacks`]: attacker strategies as pulse-stream transformers with
//!   ground-truth audit logs.
//! - [`ioc`]: monitors that turn session observables into findings across
//!   the three indicator classes (error rate, real-time detector
//!   characterization, received power).
//! - [`taxonomy`]: the technique knowledge base and finding-to-technique
//!   candidate ranking.
//! - [`harness`]: scenario files, calibration baselines, orchestration,
//!   and forensic reports.
//!
//! Every run is a pure function of its scenario file: one master seed feeds
//! independently keyed substreams per stochastic consumer, and reports
//! carry simulated time only.

pub mod attacks;
pub mod harness;
pub mod ioc;
pub mod optics;
pub mod protocol;
pub mod rng;
pub mod stats;
pub mod taxonomy;
