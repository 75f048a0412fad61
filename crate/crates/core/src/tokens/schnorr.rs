//! Schnorr signatures over the protocol group, used for the ephemeral
//! token key `(sk_T, pk_T)`.

use rand_core::{CryptoRng, RngCore};

use crate::crypto::{Domain, GroupElement, KeyPair, Scalar, ELEMENT_SIZE, SCALAR_SIZE};
use crate::error::CryptoError;

pub const SIGNATURE_SIZE: usize = ELEMENT_SIZE + SCALAR_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Signature {
    commitment: GroupElement,
    response: Scalar,
}

fn challenge(commitment: &GroupElement, pk: &GroupElement, message: &[u8]) -> Scalar {
    Scalar::from_hash(
        Domain::Schnorr,
        &[&commitment.to_bytes(), &pk.to_bytes(), message],
    )
}

pub fn sign<R: RngCore + CryptoRng>(key: &KeyPair, message: &[u8], rng: &mut R) -> Signature {
    let k = Scalar::random_nonzero(rng);
    let commitment = GroupElement::base_mul(&k);
    let e = challenge(&commitment, key.public(), message);
    Signature {
        commitment,
        response: k + e * *key.secret(),
    }
}

pub fn verify(pk: &GroupElement, message: &[u8], sig: &Signature) -> bool {
    if pk.is_identity() {
        return false;
    }
    let e = challenge(&sig.commitment, pk, message);
    GroupElement::base_mul(&sig.response) == sig.commitment.mul(&pk.pow(&e))
}

impl Signature {
    pub fn to_bytes(&self) -> [u8; SIGNATURE_SIZE] {
        let mut out = [0u8; SIGNATURE_SIZE];
        out[..ELEMENT_SIZE].copy_from_slice(&self.commitment.to_bytes());
        out[ELEMENT_SIZE..].copy_from_slice(&self.response.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != SIGNATURE_SIZE {
            return Err(CryptoError::BadLength {
                expected: SIGNATURE_SIZE,
                got: bytes.len(),
            });
        }
        Ok(Signature {
            commitment: GroupElement::from_bytes(&bytes[..ELEMENT_SIZE])?,
            response: Scalar::from_bytes(&bytes[ELEMENT_SIZE..])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn sign_verify() {
        let mut r = ChaCha20Rng::seed_from_u64(1);
        let k = KeyPair::generate(&mut r);
        let other = KeyPair::generate(&mut r);
        let sig = sign(&k, b"hello", &mut r);
        assert!(verify(k.public(), b"hello", &sig));
        assert!(!verify(k.public(), b"hellp", &sig));
        assert!(!verify(other.public(), b"hello", &sig));
        let back = Signature::from_bytes(&sig.to_bytes()).unwrap();
        assert_eq!(back, sig);
    }
}
