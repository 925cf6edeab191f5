//! HTTP surface and judge-side plumbing for the `markgate` binary.

pub mod http;
pub mod suspect;
