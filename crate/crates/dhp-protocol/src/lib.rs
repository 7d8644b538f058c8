//! Protocol layer of the distributed digital health passport.
//!
//! Four parties, each with its own module: issuing servers
//! ([`issuer::ServerNode`]) that jointly hold every key and every health
//! record in shares, the user's [`wallet::Wallet`], the offline
//! [`reader::Reader`] at the venue door, and the
//! [`authority::HealthAuthority`] that feeds records in. They talk
//! through [`transport`] endpoints carrying [`message`] envelopes, either
//! in-process or over TCP, and everything an endpoint carries lands in a
//! shared [`transcript`] so tests measure the wire instead of trusting
//! the code.
//!
//! [`deployment::Deployment`] stands a whole installation up, runs the
//! key ceremony, wires the parties together and reopens them from disk.
//! [`attacks`] plays the adversaries the design claims to resist.

pub mod attacks;
pub mod authority;
pub mod codec;
pub mod deployment;
pub mod entropy;
pub mod health;
pub mod issuer;
pub mod message;
pub mod metering;
pub mod policy;
pub mod reader;
pub mod secure_element;
pub mod store;
pub mod time;
pub mod transcript;
pub mod transport;
pub mod wallet;
