//! Device integrity monitoring through secure-element attestation applets.
//!
//! Components:
//!
//! - [`measure`]: SHA-256 measurement of monitored artifacts.
//! - [`wire`]: dispute packets, transport frames and APDU codecs.
//! - [`applet`]: the attestation applet state machine.
//! - [`immustore`]: tamper-evident append-only record store.
//! - [`pdl`]: permissioned ledger of benchmark and update agreements.
//! - [`verifier`]: the remote verifier that adjudicates disputes.

pub mod applet;
pub mod config;
pub mod immustore;
pub mod measure;
pub mod pdl;
pub mod verifier;
pub mod wire;

pub use measure::{hash_bytes, Digest};
pub use wire::ActionCode;
