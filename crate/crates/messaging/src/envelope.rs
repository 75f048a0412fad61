//! Mailbox slots and fixed-length envelopes.
//!
//! Every envelope encrypts exactly [`MESSAGE_LEN`] bytes of plaintext:
//! a kind byte, a 2-byte big-endian payload length, the payload, then zero
//! padding. The kind byte is only visible after decryption.

use datashare_core::crypto::{ae_decrypt, ae_encrypt, dh, hash_bytes, AeKey, Domain, GroupElement, Scalar, AE_OVERHEAD};
use datashare_pigeonhole::Address;
use rand::{CryptoRng, RngCore};

use crate::MessagingError;

pub const MESSAGE_LEN: usize = 1024;
const HEADER_LEN: usize = 3;
pub const MAX_PAYLOAD: usize = MESSAGE_LEN - HEADER_LEN;
/// Length of every ciphertext stored on the server.
pub const ENVELOPE_LEN: usize = MESSAGE_LEN + AE_OVERHEAD;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Kind {
    Dummy = 0,
    Real = 1,
}

/// Where the `counter`-th message of one direction goes, and its key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub addr: Address,
    pub key: AeKey,
}

/// Derives the slot for message `counter` from `sender_pk` under the
/// shared secret `shared`. Both ends compute the same value.
pub fn derive(shared: &[u8; 32], sender_pk: &GroupElement, counter: u64) -> Slot {
    let pk = sender_pk.to_bytes();
    let n = counter.to_be_bytes();
    let parts: [&[u8]; 3] = [shared, &pk, &n];
    Slot {
        addr: hash_bytes(Domain::Addr, &parts),
        key: AeKey(hash_bytes(Domain::Key, &parts)),
    }
}

/// The shared secret between `my_sk` and `their_pk`.
pub fn shared_secret(my_sk: &Scalar, their_pk: &GroupElement) -> Result<[u8; 32], MessagingError> {
    Ok(dh(my_sk, their_pk)?)
}

pub fn seal<R: RngCore + CryptoRng>(
    key: &AeKey,
    kind: Kind,
    payload: &[u8],
    rng: &mut R,
) -> Result<Vec<u8>, MessagingError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(MessagingError::Oversize(payload.len()));
    }
    let mut padded = vec![0u8; MESSAGE_LEN];
    padded[0] = kind as u8;
    padded[1..3].copy_from_slice(&(payload.len() as u16).to_be_bytes());
    padded[HEADER_LEN..HEADER_LEN + payload.len()].copy_from_slice(payload);
    Ok(ae_encrypt(key, &padded, rng))
}

pub fn open(key: &AeKey, ciphertext: &[u8]) -> Result<(Kind, Vec<u8>), MessagingError> {
    if ciphertext.len() != ENVELOPE_LEN {
        return Err(MessagingError::MalformedEnvelope);
    }
    let padded = ae_decrypt(key, ciphertext)?;
    let kind = match padded[0] {
        0 => Kind::Dummy,
        1 => Kind::Real,
        _ => return Err(MessagingError::MalformedEnvelope),
    };
    let len = u16::from_be_bytes([padded[1], padded[2]]) as usize;
    if len > MAX_PAYLOAD || padded[HEADER_LEN + len..].iter().any(|&b| b != 0) {
        return Err(MessagingError::MalformedEnvelope);
    }
    Ok((kind, padded[HEADER_LEN..HEADER_LEN + len].to_vec()))
}
