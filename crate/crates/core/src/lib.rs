//! Deterministic watermarking for prediction APIs.
//!
//! The gateway in front of a classifier picks a keyed pseudo-random subset of
//! incoming queries and answers them with a keyed permutation of the honest
//! prediction. Every client that later trains a surrogate model on those
//! responses unavoidably bakes the wrong answers in; the accumulated
//! (input, wrong class) pairs form a per-client watermark whose presence in a
//! suspect model can be demonstrated to a judge with quantifiable confidence.
//!
//! Modules follow the pipeline: [`hashcore`] decides, [`mapping`] smooths the
//! decision against small input perturbations, [`permute`] rewrites the
//! response, [`triggerstore`] accumulates per-client evidence, [`bulletin`]
//! time-stamps commitments, [`verify`] runs the judge protocol, [`stats`]
//! sizes watermarks exactly, [`gateway`] composes it all into a service, and
//! [`simattack`] replays parameterized extraction attacks against it.

pub mod bulletin;
pub mod digest;
pub mod gateway;
pub mod hashcore;
pub mod mapping;
pub mod model;
pub mod par;
pub mod permute;
pub mod simattack;
pub mod stats;
pub mod triggerstore;
pub mod verify;
