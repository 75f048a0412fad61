//! Prime-order group arithmetic, hashing, Diffie-Hellman and authenticated
//! encryption shared by every protocol in the stack.
//!
//! The group is Ristretto255: prime order, 32-byte canonical encodings for
//! both elements and scalars, and a constant-time hash-to-group.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar as DalekScalar;
use curve25519_dalek::traits::Identity;
use rand_core::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256, Sha512};

use crate::error::CryptoError;

/// Bytes per serialized group element.
pub const ELEMENT_SIZE: usize = 32;
/// Bytes per serialized scalar.
pub const SCALAR_SIZE: usize = 32;
/// Output length of [`hash_bytes`] in bytes (ℓ = 256 bits).
pub const DIGEST_SIZE: usize = 32;
/// Symmetric key length for [`ae_encrypt`].
pub const AE_KEY_SIZE: usize = 32;
/// Nonce prepended to every AE ciphertext.
pub const AE_NONCE_SIZE: usize = 12;
/// Poly1305 tag length.
pub const AE_TAG_SIZE: usize = 16;
/// Ciphertext expansion of [`ae_encrypt`].
pub const AE_OVERHEAD: usize = AE_NONCE_SIZE + AE_TAG_SIZE;

/// Description of the group every party agrees on at system setup.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupParams {
    pub group_id: String,
    pub element_size: usize,
    pub scalar_size: usize,
    /// Bits of output of the tag hash H.
    pub security_param: usize,
}

impl Default for GroupParams {
    fn default() -> Self {
        GroupParams {
            group_id: "ristretto255".to_owned(),
            element_size: ELEMENT_SIZE,
            scalar_size: SCALAR_SIZE,
            security_param: DIGEST_SIZE * 8,
        }
    }
}

/// Domain-separation tags for [`hash_bytes`]. Each is a single byte on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Domain {
    /// Per-document MS-PSI tags, H(i ‖ pretag).
    Tag = 0x01,
    /// Mailbox addresses.
    Addr = 0x02,
    /// Mailbox symmetric keys.
    Key = 0x03,
    /// Cuckoo filter bucket index and fingerprint derivation.
    Cuckoo = 0x04,
    /// Fiat-Shamir challenges of Schnorr signatures.
    Schnorr = 0x05,
    /// Blind signature challenges.
    BlindSig = 0x06,
    /// Blind signature auxiliary generators and tags.
    BlindSigGen = 0x07,
    /// Vanilla / client-server PSI tags H(y^s).
    PlainTag = 0x08,
    /// Keyword to group element.
    HashToGroup = 0x09,
    /// Digest of simulation traces.
    Trace = 0x0a,
}

/// H: hashes an ordered list of byte strings under a one-byte domain tag.
///
/// Every part is prefixed with its 4-byte big-endian length so that
/// `["ab", "c"]` and `["a", "bc"]` hash differently.
pub fn hash_bytes<P: AsRef<[u8]>>(domain: Domain, parts: &[P]) -> [u8; DIGEST_SIZE] {
    let mut h = Sha256::new();
    h.update([domain as u8]);
    for part in parts {
        let part = part.as_ref();
        h.update((part.len() as u32).to_be_bytes());
        h.update(part);
    }
    h.finalize().into()
}

/// A scalar modulo the group order.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Scalar(pub(crate) DalekScalar);

impl Scalar {
    pub const ZERO: Scalar = Scalar(DalekScalar::ZERO);
    pub const ONE: Scalar = Scalar(DalekScalar::ONE);

    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Scalar(DalekScalar::random(rng))
    }

    /// Uniform non-zero scalar.
    pub fn random_nonzero<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        loop {
            let s = Self::random(rng);
            if !s.is_zero() {
                return s;
            }
        }
    }

    pub fn from_u64(v: u64) -> Self {
        Scalar(DalekScalar::from(v))
    }

    /// Reduces a 64-byte wide digest modulo the group order.
    pub fn from_hash(domain: Domain, parts: &[&[u8]]) -> Self {
        let mut h = Sha512::new();
        h.update([domain as u8]);
        for part in parts {
            h.update((part.len() as u32).to_be_bytes());
            h.update(part);
        }
        Scalar(DalekScalar::from_hash(h))
    }

    pub fn is_zero(&self) -> bool {
        self.0 == DalekScalar::ZERO
    }

    pub fn invert(&self) -> Result<Scalar, CryptoError> {
        if self.is_zero() {
            return Err(CryptoError::ZeroScalar);
        }
        Ok(Scalar(self.0.invert()))
    }

    pub fn to_bytes(&self) -> [u8; SCALAR_SIZE] {
        self.0.to_bytes()
    }

    /// Decodes a canonical scalar encoding.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; SCALAR_SIZE] = bytes.try_into().map_err(|_| CryptoError::BadLength {
            expected: SCALAR_SIZE,
            got: bytes.len(),
        })?;
        Option::<DalekScalar>::from(DalekScalar::from_canonical_bytes(arr))
            .map(Scalar)
            .ok_or(CryptoError::NonCanonicalScalar)
    }
}

impl std::ops::Add for Scalar {
    type Output = Scalar;
    fn add(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 + rhs.0)
    }
}

impl std::ops::Sub for Scalar {
    type Output = Scalar;
    fn sub(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 - rhs.0)
    }
}

impl std::ops::Mul for Scalar {
    type Output = Scalar;
    fn mul(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 * rhs.0)
    }
}

impl std::ops::Neg for Scalar {
    type Output = Scalar;
    fn neg(self) -> Scalar {
        Scalar(-self.0)
    }
}

impl fmt::Debug for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Scalar(..)")
    }
}

/// An element of the prime-order group.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct GroupElement(pub(crate) RistrettoPoint);

impl GroupElement {
    pub fn identity() -> Self {
        GroupElement(RistrettoPoint::identity())
    }

    pub fn generator() -> Self {
        GroupElement(RISTRETTO_BASEPOINT_POINT)
    }

    pub fn is_identity(&self) -> bool {
        self.0 == RistrettoPoint::identity()
    }

    /// g^k for the fixed generator.
    pub fn base_mul(k: &Scalar) -> Self {
        GroupElement(RISTRETTO_BASEPOINT_POINT * k.0)
    }

    /// Exponentiation, written multiplicatively: `self^k`.
    pub fn pow(&self, k: &Scalar) -> Self {
        GroupElement(self.0 * k.0)
    }

    /// Group operation, written multiplicatively: `self · other`.
    pub fn mul(&self, other: &GroupElement) -> Self {
        GroupElement(self.0 + other.0)
    }

    /// `self / other`.
    pub fn div(&self, other: &GroupElement) -> Self {
        GroupElement(self.0 - other.0)
    }

    pub fn to_bytes(&self) -> [u8; ELEMENT_SIZE] {
        self.0.compress().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let compressed =
            CompressedRistretto::from_slice(bytes).map_err(|_| CryptoError::BadLength {
                expected: ELEMENT_SIZE,
                got: bytes.len(),
            })?;
        compressed
            .decompress()
            .map(GroupElement)
            .ok_or(CryptoError::InvalidElement)
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupElement({})", hex::encode(&self.to_bytes()[..8]))
    }
}

impl std::hash::Hash for GroupElement {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.to_bytes().hash(state)
    }
}

/// Ĥ: maps an arbitrary byte string to a uniformly distributed group element.
pub fn hash_to_group(keyword: &[u8]) -> GroupElement {
    let mut h = Sha512::new();
    h.update([Domain::HashToGroup as u8]);
    h.update(keyword);
    GroupElement(RistrettoPoint::from_hash(h))
}

/// A Diffie-Hellman keypair with `pk = g^sk`.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    sk: Scalar,
    pk: GroupElement,
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self::from_secret(Scalar::random_nonzero(rng)).expect("non-zero scalar")
    }

    pub fn from_secret(sk: Scalar) -> Result<Self, CryptoError> {
        if sk.is_zero() {
            return Err(CryptoError::ZeroScalar);
        }
        Ok(KeyPair {
            sk,
            pk: GroupElement::base_mul(&sk),
        })
    }

    pub fn secret(&self) -> &Scalar {
        &self.sk
    }

    pub fn public(&self) -> &GroupElement {
        &self.pk
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("pk", &self.pk).finish_non_exhaustive()
    }
}

/// Computes the Diffie-Hellman shared secret `pk^sk`.
///
/// Rejects a zero secret, an identity public key, and an identity result.
pub fn dh(sk: &Scalar, pk: &GroupElement) -> Result<[u8; ELEMENT_SIZE], CryptoError> {
    if sk.is_zero() {
        return Err(CryptoError::ZeroScalar);
    }
    if pk.is_identity() {
        return Err(CryptoError::IdentityElement);
    }
    let shared = pk.pow(sk);
    if shared.is_identity() {
        return Err(CryptoError::IdentityElement);
    }
    Ok(shared.to_bytes())
}

/// A 32-byte authenticated-encryption key.
#[derive(Clone, PartialEq, Eq)]
pub struct AeKey(pub [u8; AE_KEY_SIZE]);

impl fmt::Debug for AeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AeKey(..)")
    }
}

/// ChaCha20-Poly1305 with a random nonce prepended to the ciphertext.
pub fn ae_encrypt<R: RngCore + CryptoRng>(key: &AeKey, plaintext: &[u8], rng: &mut R) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let mut nonce = [0u8; AE_NONCE_SIZE];
    rng.fill_bytes(&mut nonce);
    let body = cipher
        .encrypt(Nonce::from_slice(&nonce), plaintext)
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut out = Vec::with_capacity(AE_NONCE_SIZE + body.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&body);
    out
}

/// Inverse of [`ae_encrypt`]. A ciphertext too short to hold nonce and tag
/// is [`CryptoError::MalformedCiphertext`]; any other failure is
/// [`CryptoError::AuthenticationFailed`].
pub fn ae_decrypt(key: &AeKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.len() < AE_OVERHEAD {
        return Err(CryptoError::MalformedCiphertext(ciphertext.len()));
    }
    let (nonce, body) = ciphertext.split_at(AE_NONCE_SIZE);
    ChaCha20Poly1305::new(Key::from_slice(&key.0))
        .decrypt(Nonce::from_slice(nonce), body)
        .map_err(|_| CryptoError::AuthenticationFailed)
}

macro_rules! hex_serde {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(self.to_bytes()))
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
                <$ty>::from_bytes(&bytes).map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_serde!(Scalar);
hex_serde!(GroupElement);

impl Serialize for KeyPair {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.sk.serialize(s)
    }
}

impl<'de> Deserialize<'de> for KeyPair {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let sk = Scalar::deserialize(d)?;
        KeyPair::from_secret(sk).map_err(serde::de::Error::custom)
    }
}
