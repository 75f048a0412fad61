//! Abe's three-move partially blind signature.
//!
//! The common information bound into every signature is the issuance epoch;
//! the blinded message is the user's ephemeral public key. The signer sees
//! only its own commitment, a uniformly distributed challenge, and its own
//! response.
//!
//! Keys: `x`, `y = g^x`. Public generators `h` and `z = F(y, info)` have
//! unknown discrete logs. A signature on `m` is
//! `(ζ, ζ1, ρ, ω, σ1, σ2, δ)` with `ζ2 = ζ/ζ1` and
//! `ω + δ = H(ζ, ζ1, g^ρ y^ω, g^σ1 ζ1^δ, h^σ2 ζ2^δ, m)`.

use rand_core::{CryptoRng, RngCore};

use crate::crypto::{hash_to_group, Domain, GroupElement, Scalar, ELEMENT_SIZE, SCALAR_SIZE};
use crate::error::{CryptoError, TokenError};

/// Encoded size: epoch plus two elements and five scalars.
pub const SIGNATURE_SIZE: usize = 8 + 2 * ELEMENT_SIZE + 5 * SCALAR_SIZE;

fn generator_h() -> GroupElement {
    hash_to_group(b"datashare/abe/h")
}

fn info_generator(mpk: &GroupElement, epoch: u64) -> GroupElement {
    let mut input = b"datashare/abe/z".to_vec();
    input.extend_from_slice(&mpk.to_bytes());
    input.extend_from_slice(&epoch.to_be_bytes());
    hash_to_group(&input)
}

fn split_generator(rnd: &[u8; 32]) -> GroupElement {
    let mut input = b"datashare/abe/z1".to_vec();
    input.extend_from_slice(rnd);
    hash_to_group(&input)
}

#[allow(clippy::too_many_arguments)]
fn challenge(
    mpk: &GroupElement,
    zeta: &GroupElement,
    zeta1: &GroupElement,
    alpha: &GroupElement,
    beta1: &GroupElement,
    beta2: &GroupElement,
    epoch: u64,
    message: &[u8],
) -> Scalar {
    Scalar::from_hash(
        Domain::BlindSig,
        &[
            &mpk.to_bytes(),
            &zeta.to_bytes(),
            &zeta1.to_bytes(),
            &alpha.to_bytes(),
            &beta1.to_bytes(),
            &beta2.to_bytes(),
            &epoch.to_be_bytes(),
            message,
        ],
    )
}

/// Issuer signing key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SigningKey {
    x: Scalar,
    y: GroupElement,
}

impl SigningKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let x = Scalar::random_nonzero(rng);
        SigningKey {
            x,
            y: GroupElement::base_mul(&x),
        }
    }

    pub fn public(&self) -> &GroupElement {
        &self.y
    }

    pub fn secret(&self) -> &Scalar {
        &self.x
    }

    pub fn from_secret(x: Scalar) -> Result<Self, CryptoError> {
        if x.is_zero() {
            return Err(CryptoError::ZeroScalar);
        }
        Ok(SigningKey {
            x,
            y: GroupElement::base_mul(&x),
        })
    }
}

/// First signer message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Commitment {
    pub rnd: [u8; 32],
    pub a: GroupElement,
    pub b1: GroupElement,
    pub b2: GroupElement,
}

impl Commitment {
    pub fn to_bytes(&self) -> Vec<u8> {
        [&self.rnd[..], &self.a.to_bytes(), &self.b1.to_bytes(), &self.b2.to_bytes()].concat()
    }
}

/// User's blinded challenge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Challenge(pub Scalar);

/// Final signer message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub c: Scalar,
    pub d: Scalar,
    pub r: Scalar,
    pub s1: Scalar,
    pub s2: Scalar,
}

impl Response {
    pub fn to_bytes(&self) -> Vec<u8> {
        [self.c, self.d, self.r, self.s1, self.s2]
            .iter()
            .flat_map(|s| s.to_bytes())
            .collect()
    }
}

/// Signer state between the commitment and the response.
pub struct SignerSession {
    epoch: u64,
    u: Scalar,
    s1: Scalar,
    s2: Scalar,
    d: Scalar,
}

impl SignerSession {
    pub fn start<R: RngCore + CryptoRng>(key: &SigningKey, epoch: u64, rng: &mut R) -> (Self, Commitment) {
        let mut rnd = [0u8; 32];
        rng.fill_bytes(&mut rnd);
        let z = info_generator(&key.y, epoch);
        let z1 = split_generator(&rnd);
        let z2 = z.div(&z1);
        let u = Scalar::random(rng);
        let s1 = Scalar::random(rng);
        let s2 = Scalar::random(rng);
        let d = Scalar::random(rng);
        let commitment = Commitment {
            rnd,
            a: GroupElement::base_mul(&u),
            b1: GroupElement::base_mul(&s1).mul(&z1.pow(&d)),
            b2: generator_h().pow(&s2).mul(&z2.pow(&d)),
        };
        (SignerSession { epoch, u, s1, s2, d }, commitment)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn respond(self, key: &SigningKey, challenge: &Challenge) -> Response {
        let c = challenge.0 - self.d;
        Response {
            c,
            d: self.d,
            r: self.u - c * key.x,
            s1: self.s1,
            s2: self.s2,
        }
    }
}

/// User state between sending the challenge and receiving the response.
pub struct UserSession {
    mpk: GroupElement,
    epoch: u64,
    message: Vec<u8>,
    gamma: Scalar,
    zeta: GroupElement,
    zeta1: GroupElement,
    t: [Scalar; 5],
}

impl UserSession {
    pub fn start<R: RngCore + CryptoRng>(
        mpk: &GroupElement,
        epoch: u64,
        commitment: &Commitment,
        message: &[u8],
        rng: &mut R,
    ) -> (Self, Challenge) {
        let z = info_generator(mpk, epoch);
        let z1 = split_generator(&commitment.rnd);
        let gamma = Scalar::random_nonzero(rng);
        let zeta = z.pow(&gamma);
        let zeta1 = z1.pow(&gamma);
        let zeta2 = zeta.div(&zeta1);
        let t = [
            Scalar::random(rng),
            Scalar::random(rng),
            Scalar::random(rng),
            Scalar::random(rng),
            Scalar::random(rng),
        ];
        let g = GroupElement::generator();
        let alpha = commitment.a.mul(&g.pow(&t[0])).mul(&mpk.pow(&t[1]));
        let beta1 = commitment.b1.pow(&gamma).mul(&g.pow(&t[2])).mul(&zeta1.pow(&t[3]));
        let beta2 = commitment
            .b2
            .pow(&gamma)
            .mul(&generator_h().pow(&t[4]))
            .mul(&zeta2.pow(&t[3]));
        let epsilon = challenge(mpk, &zeta, &zeta1, &alpha, &beta1, &beta2, epoch, message);
        let e = epsilon - t[1] - t[3];
        (
            UserSession {
                mpk: *mpk,
                epoch,
                message: message.to_vec(),
                gamma,
                zeta,
                zeta1,
                t,
            },
            Challenge(e),
        )
    }

    /// Unblinds the response and checks the resulting signature.
    pub fn finish(self, response: &Response) -> Result<BlindSignature, TokenError> {
        let sig = BlindSignature {
            epoch: self.epoch,
            zeta: self.zeta,
            zeta1: self.zeta1,
            rho: response.r + self.t[0],
            omega: response.c + self.t[1],
            sigma1: self.gamma * response.s1 + self.t[2],
            sigma2: self.gamma * response.s2 + self.t[4],
            delta: response.d + self.t[3],
        };
        if sig.verify(&self.mpk, &self.message) {
            Ok(sig)
        } else {
            Err(TokenError::BadIssuerResponse)
        }
    }
}

/// A signature `C` on the user's message under the issuer key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlindSignature {
    pub epoch: u64,
    zeta: GroupElement,
    zeta1: GroupElement,
    rho: Scalar,
    omega: Scalar,
    sigma1: Scalar,
    sigma2: Scalar,
    delta: Scalar,
}

impl BlindSignature {
    pub fn verify(&self, mpk: &GroupElement, message: &[u8]) -> bool {
        if self.zeta.is_identity() || mpk.is_identity() {
            return false;
        }
        let g = GroupElement::generator();
        let zeta2 = self.zeta.div(&self.zeta1);
        let alpha = g.pow(&self.rho).mul(&mpk.pow(&self.omega));
        let beta1 = g.pow(&self.sigma1).mul(&self.zeta1.pow(&self.delta));
        let beta2 = generator_h().pow(&self.sigma2).mul(&zeta2.pow(&self.delta));
        let expect = challenge(mpk, &self.zeta, &self.zeta1, &alpha, &beta1, &beta2, self.epoch, message);
        self.omega + self.delta == expect
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SIGNATURE_SIZE);
        out.extend_from_slice(&self.epoch.to_be_bytes());
        out.extend_from_slice(&self.zeta.to_bytes());
        out.extend_from_slice(&self.zeta1.to_bytes());
        for s in [self.rho, self.omega, self.sigma1, self.sigma2, self.delta] {
            out.extend_from_slice(&s.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TokenError> {
        if bytes.len() != SIGNATURE_SIZE {
            return Err(TokenError::Malformed("blind signature length"));
        }
        let el = |i: usize| GroupElement::from_bytes(&bytes[8 + i * 32..8 + (i + 1) * 32]);
        let sc = |i: usize| Scalar::from_bytes(&bytes[72 + i * 32..72 + (i + 1) * 32]);
        Ok(BlindSignature {
            epoch: u64::from_be_bytes(bytes[..8].try_into().unwrap()),
            zeta: el(0)?,
            zeta1: el(1)?,
            rho: sc(0)?,
            omega: sc(1)?,
            sigma1: sc(2)?,
            sigma2: sc(3)?,
            delta: sc(4)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn run(key: &SigningKey, epoch: u64, msg: &[u8], r: &mut ChaCha20Rng) -> BlindSignature {
        let (signer, commitment) = SignerSession::start(key, epoch, r);
        let (user, ch) = UserSession::start(key.public(), epoch, &commitment, msg, r);
        let resp = signer.respond(key, &ch);
        user.finish(&resp).unwrap()
    }

    #[test]
    fn signature_verifies_and_binds_message_epoch_and_key() {
        let mut r = ChaCha20Rng::seed_from_u64(21);
        let key = SigningKey::generate(&mut r);
        let other = SigningKey::generate(&mut r);
        let sig = run(&key, 4, b"pk_T", &mut r);
        assert!(sig.verify(key.public(), b"pk_T"));
        assert!(!sig.verify(key.public(), b"pk_U"));
        assert!(!sig.verify(other.public(), b"pk_T"));
        let mut wrong_epoch = sig;
        wrong_epoch.epoch = 5;
        assert!(!wrong_epoch.verify(key.public(), b"pk_T"));
        assert_eq!(BlindSignature::from_bytes(&sig.to_bytes()).unwrap(), sig);
        assert_eq!(sig.to_bytes().len(), SIGNATURE_SIZE);
    }

    #[test]
    fn tampered_response_detected_by_user() {
        let mut r = ChaCha20Rng::seed_from_u64(22);
        let key = SigningKey::generate(&mut r);
        let (signer, commitment) = SignerSession::start(&key, 0, &mut r);
        let (user, ch) = UserSession::start(key.public(), 0, &commitment, b"m", &mut r);
        let mut resp = signer.respond(&key, &ch);
        resp.r = resp.r + Scalar::ONE;
        assert_eq!(user.finish(&resp).unwrap_err(), TokenError::BadIssuerResponse);
    }

    #[test]
    fn epoch_mismatch_between_parties_fails() {
        let mut r = ChaCha20Rng::seed_from_u64(23);
        let key = SigningKey::generate(&mut r);
        let (signer, commitment) = SignerSession::start(&key, 1, &mut r);
        let (user, ch) = UserSession::start(key.public(), 2, &commitment, b"m", &mut r);
        assert!(user.finish(&signer.respond(&key, &ch)).is_err());
    }
}
