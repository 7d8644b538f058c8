//! Cryptographic core for a distributed digital health passport.
//!
//! Four building blocks, all over BLS12-381:
//!
//! * [`blindsig`]: short pairing-based signatures whose secret key is split
//!   additively across servers, with message blinding so no server can link
//!   a signing session to the signature it produced.
//! * [`sharing`]: (n,n) XOR secret sharing with digest-guarded
//!   reconstruction for health records at rest.
//! * [`passauth`]: a distributed oblivious PRF turning `(uid, password)`
//!   into a stable 32-byte seed and a client signing keypair, without any
//!   server ever seeing the password or the seed.
//! * [`canonical`]: the injective tuple encoding under which everything is
//!   signed and hashed.
//!
//! No networking, no storage, no clocks: this crate is pure algebra and
//! encoding, driven entirely by its callers.

pub mod blindsig;
pub mod canonical;
pub mod group;
pub mod passauth;
pub mod sharing;
