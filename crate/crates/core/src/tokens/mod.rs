//! Anonymous one-time authorization tokens.
//!
//! A token is an ephemeral Schnorr keypair `(sk_T, pk_T)` together with a
//! partially blind signature `C` from the organization on `pk_T`, bound to
//! the issuance epoch. Spending a token signs a message with `sk_T` and
//! ships `(message, σ, pk_T, C)`; receivers check both signatures and that
//! `pk_T` was never seen before.

pub mod abe;
mod registry;
pub mod schnorr;

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand_core::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::crypto::{GroupElement, KeyPair, Scalar, ELEMENT_SIZE};
use crate::error::TokenError;

pub use abe::BlindSignature;
pub use registry::SpendRegistry;

const DAY_SECS: u64 = 24 * 3600;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateLimitPolicy {
    pub tokens_per_epoch: u32,
    pub epoch_length_secs: u64,
}

impl Default for RateLimitPolicy {
    fn default() -> Self {
        RateLimitPolicy {
            tokens_per_epoch: 50,
            epoch_length_secs: 30 * DAY_SECS,
        }
    }
}

impl RateLimitPolicy {
    pub fn epoch_at(&self, now_secs: u64) -> u64 {
        now_secs / self.epoch_length_secs
    }

    pub fn seconds_left_in_epoch(&self, now_secs: u64) -> u64 {
        self.epoch_length_secs - now_secs % self.epoch_length_secs
    }
}

/// The organization's token keys `(msk, mpk)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IssuerKeys {
    signing: abe::SigningKey,
}

impl IssuerKeys {
    /// Fresh issuer keys.
    pub fn setup<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        IssuerKeys {
            signing: abe::SigningKey::generate(rng),
        }
    }

    pub fn from_secret(msk: Scalar) -> Result<Self, TokenError> {
        Ok(IssuerKeys {
            signing: abe::SigningKey::from_secret(msk)?,
        })
    }

    pub fn msk(&self) -> &Scalar {
        self.signing.secret()
    }

    pub fn mpk(&self) -> &GroupElement {
        self.signing.public()
    }
}

#[derive(Clone, Debug, Default)]
struct Account {
    epoch: u64,
    issued: u32,
}

/// One registered journalist's issuance count, for persisting an issuer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountUsage {
    pub journalist: String,
    pub epoch: u64,
    pub issued: u32,
}

/// The organization's issuance service: registration, quota enforcement and
/// the signer half of the blind signing protocol.
pub struct Issuer {
    keys: IssuerKeys,
    policy: RateLimitPolicy,
    accounts: HashMap<String, Account>,
    sessions: HashMap<u64, abe::SignerSession>,
    next_session: u64,
    transcript: Vec<Vec<u8>>,
}

impl Issuer {
    pub fn new(keys: IssuerKeys, policy: RateLimitPolicy) -> Self {
        Issuer {
            keys,
            policy,
            accounts: HashMap::new(),
            sessions: HashMap::new(),
            next_session: 0,
            transcript: Vec::new(),
        }
    }

    pub fn mpk(&self) -> &GroupElement {
        self.keys.mpk()
    }

    pub fn keys(&self) -> &IssuerKeys {
        &self.keys
    }

    pub fn policy(&self) -> &RateLimitPolicy {
        &self.policy
    }

    pub fn register(&mut self, journalist: &str) -> Result<(), TokenError> {
        if self.accounts.contains_key(journalist) {
            return Err(TokenError::AlreadyRegistered(journalist.to_owned()));
        }
        self.accounts.insert(journalist.to_owned(), Account::default());
        Ok(())
    }

    pub fn is_registered(&self, journalist: &str) -> bool {
        self.accounts.contains_key(journalist)
    }

    /// Registered journalists and what they were issued, sorted by name.
    pub fn accounts(&self) -> Vec<AccountUsage> {
        let mut out: Vec<AccountUsage> = self
            .accounts
            .iter()
            .map(|(name, a)| AccountUsage {
                journalist: name.clone(),
                epoch: a.epoch,
                issued: a.issued,
            })
            .collect();
        out.sort_by(|a, b| a.journalist.cmp(&b.journalist));
        out
    }

    /// Reinstates accounts saved with [`accounts`](Self::accounts).
    pub fn restore_accounts(&mut self, accounts: impl IntoIterator<Item = AccountUsage>) {
        for a in accounts {
            self.accounts.insert(
                a.journalist,
                Account {
                    epoch: a.epoch,
                    issued: a.issued,
                },
            );
        }
    }

    /// Tokens `journalist` may still obtain in the epoch containing `now_secs`.
    pub fn remaining(&self, journalist: &str, now_secs: u64) -> Option<u32> {
        let epoch = self.policy.epoch_at(now_secs);
        self.accounts.get(journalist).map(|a| {
            let used = if a.epoch == epoch { a.issued } else { 0 };
            self.policy.tokens_per_epoch.saturating_sub(used)
        })
    }

    /// First move. The caller has authenticated `journalist` out of band.
    pub fn begin_issue<R: RngCore + CryptoRng>(
        &mut self,
        journalist: &str,
        now_secs: u64,
        rng: &mut R,
    ) -> Result<(u64, u64, abe::Commitment), TokenError> {
        let epoch = self.policy.epoch_at(now_secs);
        let limit = self.policy.tokens_per_epoch;
        let left = self.policy.seconds_left_in_epoch(now_secs);
        let account = self
            .accounts
            .get_mut(journalist)
            .ok_or_else(|| TokenError::UnknownJournalist(journalist.to_owned()))?;
        if account.epoch != epoch {
            *account = Account { epoch, issued: 0 };
        }
        if account.issued >= limit {
            return Err(TokenError::QuotaExhausted { remaining_secs: left });
        }
        account.issued += 1;
        let (session, commitment) = abe::SignerSession::start(&self.keys.signing, epoch, rng);
        let id = self.next_session;
        self.next_session += 1;
        self.sessions.insert(id, session);
        self.transcript.push(commitment.to_bytes());
        Ok((id, epoch, commitment))
    }

    /// Final move.
    pub fn complete_issue(&mut self, session: u64, challenge: &abe::Challenge) -> Result<abe::Response, TokenError> {
        let state = self.sessions.remove(&session).ok_or(TokenError::UnknownSession)?;
        self.transcript.push(challenge.0.to_bytes().to_vec());
        let response = state.respond(&self.keys.signing, challenge);
        self.transcript.push(response.to_bytes());
        Ok(response)
    }

    /// Every message the issuer sent or received, in order.
    pub fn transcript(&self) -> &[Vec<u8>] {
        &self.transcript
    }
}

/// A spendable token `(sk_T, pk_T, C)`.
#[derive(Clone)]
pub struct Token {
    key: KeyPair,
    credential: BlindSignature,
}

impl fmt::Debug for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Token")
            .field("pk", self.key.public())
            .field("epoch", &self.credential.epoch)
            .finish_non_exhaustive()
    }
}

impl Token {
    pub fn public(&self) -> &GroupElement {
        self.key.public()
    }

    pub fn epoch(&self) -> u64 {
        self.credential.epoch
    }

    pub fn credential(&self) -> &BlindSignature {
        &self.credential
    }

    pub fn verify(&self, mpk: &GroupElement) -> bool {
        self.credential.verify(mpk, &self.key.public().to_bytes())
    }

    /// Signs `message` with `sk_T` and attaches `pk_T` and `C`.
    pub fn authorize<R: RngCore + CryptoRng>(&self, message: &[u8], rng: &mut R) -> AuthorizedMessage {
        AuthorizedMessage {
            message: message.to_vec(),
            signature: schnorr::sign(&self.key, message, rng),
            token_pk: *self.key.public(),
            credential: self.credential,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        [&self.key.secret().to_bytes()[..], &self.credential.to_bytes()].concat()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TokenError> {
        if bytes.len() != 32 + abe::SIGNATURE_SIZE {
            return Err(TokenError::Malformed("token length"));
        }
        Ok(Token {
            key: KeyPair::from_secret(Scalar::from_bytes(&bytes[..32])?)?,
            credential: BlindSignature::from_bytes(&bytes[32..])?,
        })
    }
}

/// Bytes exchanged during one issuance, from the journalist's side.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IssuanceTraffic {
    pub sent: usize,
    pub received: usize,
}

/// Journalist side of token issuance: generates `(sk_T, pk_T)` and runs the
/// blind signing protocol with `issuer`. The issuer never sees `pk_T`.
pub fn issue<R: RngCore + CryptoRng>(
    issuer: &mut Issuer,
    journalist: &str,
    now_secs: u64,
    rng: &mut R,
) -> Result<(Token, IssuanceTraffic), TokenError> {
    let key = KeyPair::generate(rng);
    let mpk = *issuer.mpk();
    let (session, epoch, commitment) = issuer.begin_issue(journalist, now_secs, rng)?;
    let (user, challenge) = abe::UserSession::start(&mpk, epoch, &commitment, &key.public().to_bytes(), rng);
    let response = issuer.complete_issue(session, &challenge)?;
    let traffic = IssuanceTraffic {
        sent: 32,
        received: commitment.to_bytes().len() + response.to_bytes().len(),
    };
    let credential = user.finish(&response)?;
    Ok((Token { key, credential }, traffic))
}

/// A journalist's unspent tokens plus the keys of tokens already spent.
#[derive(Default)]
pub struct Wallet {
    tokens: Vec<Token>,
    spent: HashSet<[u8; ELEMENT_SIZE]>,
}

impl Wallet {
    pub fn new() -> Self {
        Wallet::default()
    }

    pub fn deposit(&mut self, token: Token) {
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn spent_keys(&self) -> impl Iterator<Item = &[u8; ELEMENT_SIZE]> {
        self.spent.iter()
    }

    pub fn mark_spent(&mut self, pk: [u8; ELEMENT_SIZE]) {
        self.tokens.retain(|t| t.public().to_bytes() != pk);
        self.spent.insert(pk);
    }

    /// Spends the oldest token on `message`.
    pub fn authorize<R: RngCore + CryptoRng>(&mut self, message: &[u8], rng: &mut R) -> Result<AuthorizedMessage, TokenError> {
        if self.tokens.is_empty() {
            return Err(TokenError::QuotaExhausted { remaining_secs: 0 });
        }
        let token = self.tokens.remove(0);
        self.spent.insert(token.public().to_bytes());
        Ok(token.authorize(message, rng))
    }

    /// Spends a specific token, refusing one this wallet already spent.
    pub fn authorize_with<R: RngCore + CryptoRng>(
        &mut self,
        token: &Token,
        message: &[u8],
        rng: &mut R,
    ) -> Result<AuthorizedMessage, TokenError> {
        let pk = token.public().to_bytes();
        if !self.spent.insert(pk) {
            return Err(TokenError::AlreadySpent);
        }
        self.tokens.retain(|t| t.public().to_bytes() != pk);
        Ok(token.authorize(message, rng))
    }
}

/// `message ‖ σ ‖ pk_T ‖ C`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthorizedMessage {
    pub message: Vec<u8>,
    pub signature: schnorr::Signature,
    pub token_pk: GroupElement,
    pub credential: BlindSignature,
}

fn put_field(out: &mut Vec<u8>, field: &[u8]) {
    out.extend_from_slice(&(field.len() as u32).to_be_bytes());
    out.extend_from_slice(field);
}

fn take_field<'a>(input: &mut &'a [u8]) -> Result<&'a [u8], TokenError> {
    if input.len() < 4 {
        return Err(TokenError::Malformed("truncated length prefix"));
    }
    let len = u32::from_be_bytes(input[..4].try_into().unwrap()) as usize;
    if input.len() < 4 + len {
        return Err(TokenError::Malformed("truncated field"));
    }
    let field = &input[4..4 + len];
    *input = &input[4 + len..];
    Ok(field)
}

impl AuthorizedMessage {
    /// Each of the four fields is prefixed with its u32 big-endian length.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.message.len() + 16 + 64 + 32 + abe::SIGNATURE_SIZE);
        put_field(&mut out, &self.message);
        put_field(&mut out, &self.signature.to_bytes());
        put_field(&mut out, &self.token_pk.to_bytes());
        put_field(&mut out, &self.credential.to_bytes());
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, TokenError> {
        let input = &mut bytes;
        let message = take_field(input)?.to_vec();
        let signature = schnorr::Signature::from_bytes(take_field(input)?)?;
        let token_pk = GroupElement::from_bytes(take_field(input)?)?;
        let credential = BlindSignature::from_bytes(take_field(input)?)?;
        if !input.is_empty() {
            return Err(TokenError::Malformed("trailing bytes"));
        }
        Ok(AuthorizedMessage {
            message,
            signature,
            token_pk,
            credential,
        })
    }
}

/// Why a bundle was rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum Rejection {
    #[error("signature does not verify under the token key")]
    BadSignature,
    #[error("token credential does not verify under the issuer key")]
    BadToken,
    #[error("token epoch is outside the accepted window")]
    Expired,
    #[error("token key already seen")]
    Replay,
}

/// Checks `σ` under `pk_T`, `C` under `mpk` on `pk_T`, the token's epoch,
/// and that `pk_T` is new; records `pk_T` on acceptance.
///
/// Tokens are accepted during their own epoch and the one after it, so the
/// registry only needs to retain the current and previous epochs.
pub fn verify_authorized(
    bundle: &AuthorizedMessage,
    mpk: &GroupElement,
    registry: &mut SpendRegistry,
    policy: &RateLimitPolicy,
    now_secs: u64,
) -> Result<(), Rejection> {
    if !schnorr::verify(&bundle.token_pk, &bundle.message, &bundle.signature) {
        return Err(Rejection::BadSignature);
    }
    let pk = bundle.token_pk.to_bytes();
    if !bundle.credential.verify(mpk, &pk) {
        return Err(Rejection::BadToken);
    }
    let current = policy.epoch_at(now_secs);
    let epoch = bundle.credential.epoch;
    if epoch > current || epoch + 1 < current {
        return Err(Rejection::Expired);
    }
    match registry.insert(epoch, pk, now_secs) {
        Ok(true) => Ok(()),
        // An unwritable registry must not turn into an acceptance.
        Ok(false) | Err(_) => Err(Rejection::Replay),
    }
}

/// Drops registry epochs that can no longer hold acceptable tokens.
pub fn prune_registry(registry: &mut SpendRegistry, policy: &RateLimitPolicy, now_secs: u64) -> std::io::Result<()> {
    let current = policy.epoch_at(now_secs);
    registry.prune_before(current.saturating_sub(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const DAY: u64 = 24 * 3600;

    fn setup(quota: u32) -> (Issuer, ChaCha20Rng) {
        let mut r = ChaCha20Rng::seed_from_u64(31);
        let keys = IssuerKeys::setup(&mut r);
        let mut issuer = Issuer::new(
            keys,
            RateLimitPolicy {
                tokens_per_epoch: quota,
                ..RateLimitPolicy::default()
            },
        );
        issuer.register("alice").unwrap();
        (issuer, r)
    }

    #[test]
    fn setups_are_independent() {
        let mut r = ChaCha20Rng::seed_from_u64(1);
        assert_ne!(IssuerKeys::setup(&mut r).mpk(), IssuerKeys::setup(&mut r).mpk());
    }

    #[test]
    fn quota_enforced_per_epoch() {
        let (mut issuer, mut r) = setup(3);
        for _ in 0..3 {
            issue(&mut issuer, "alice", 10, &mut r).unwrap();
        }
        let err = issue(&mut issuer, "alice", 10, &mut r).unwrap_err();
        assert_eq!(err, TokenError::QuotaExhausted { remaining_secs: 30 * DAY - 10 });
        // next epoch resets
        issue(&mut issuer, "alice", 30 * DAY + 1, &mut r).unwrap();
        assert_eq!(issuer.remaining("alice", 30 * DAY + 1), Some(2));
    }

    #[test]
    fn accounts_survive_restore() {
        let (mut issuer, mut r) = setup(3);
        issue(&mut issuer, "alice", 10, &mut r).unwrap();
        issue(&mut issuer, "alice", 10, &mut r).unwrap();
        let saved = issuer.accounts();
        let keys = IssuerKeys::from_secret(*issuer.keys.msk()).unwrap();
        let mut restored = Issuer::new(keys, *issuer.policy());
        restored.restore_accounts(saved);
        assert_eq!(restored.remaining("alice", 10), Some(1));
        assert!(restored.register("alice").is_err());
    }

    #[test]
    fn unknown_and_duplicate_registration() {
        let (mut issuer, mut r) = setup(3);
        assert!(matches!(issue(&mut issuer, "bob", 0, &mut r), Err(TokenError::UnknownJournalist(_))));
        assert!(matches!(issuer.register("alice"), Err(TokenError::AlreadyRegistered(_))));
    }

    #[test]
    fn issued_token_verifies_and_issuer_never_sees_pk() {
        let (mut issuer, mut r) = setup(10);
        let (t1, _) = issue(&mut issuer, "alice", 0, &mut r).unwrap();
        let (t2, _) = issue(&mut issuer, "alice", 0, &mut r).unwrap();
        assert!(t1.verify(issuer.mpk()));
        assert_ne!(t1.public(), t2.public());
        for pk in [t1.public().to_bytes(), t2.public().to_bytes()] {
            for msg in issuer.transcript() {
                assert!(!msg.windows(32).any(|w| w == pk));
            }
        }
    }

    #[test]
    fn authorize_verify_and_replay() {
        let (mut issuer, mut r) = setup(10);
        let (token, _) = issue(&mut issuer, "alice", 0, &mut r).unwrap();
        let bundle = token.authorize(b"query", &mut r);
        let mut reg = SpendRegistry::in_memory();
        let policy = *issuer.policy();
        assert_eq!(verify_authorized(&bundle, issuer.mpk(), &mut reg, &policy, 5), Ok(()));
        assert_eq!(
            verify_authorized(&bundle, issuer.mpk(), &mut reg, &policy, 6),
            Err(Rejection::Replay)
        );
    }

    #[test]
    fn tampering_and_swaps_rejected() {
        let (mut issuer, mut r) = setup(10);
        let (t1, _) = issue(&mut issuer, "alice", 0, &mut r).unwrap();
        let (t2, _) = issue(&mut issuer, "alice", 0, &mut r).unwrap();
        let policy = *issuer.policy();
        let mut reg = SpendRegistry::in_memory();

        let mut tampered = t1.authorize(b"query", &mut r);
        tampered.message[0] ^= 1;
        assert_eq!(
            verify_authorized(&tampered, issuer.mpk(), &mut reg, &policy, 0),
            Err(Rejection::BadSignature)
        );

        let mut swapped = t1.authorize(b"query", &mut r);
        swapped.credential = *t2.credential();
        assert_eq!(
            verify_authorized(&swapped, issuer.mpk(), &mut reg, &policy, 0),
            Err(Rejection::BadToken)
        );

        let mut r2 = ChaCha20Rng::seed_from_u64(99);
        let other = IssuerKeys::setup(&mut r2);
        let good = t1.authorize(b"query", &mut r);
        assert_eq!(
            verify_authorized(&good, other.mpk(), &mut reg, &policy, 0),
            Err(Rejection::BadToken)
        );
        assert!(reg.is_empty());
    }

    #[test]
    fn wallet_refuses_local_reuse() {
        let (mut issuer, mut r) = setup(10);
        let (token, _) = issue(&mut issuer, "alice", 0, &mut r).unwrap();
        let mut wallet = Wallet::new();
        wallet.deposit(token.clone());
        wallet.authorize_with(&token, b"one", &mut r).unwrap();
        assert_eq!(wallet.authorize_with(&token, b"two", &mut r).unwrap_err(), TokenError::AlreadySpent);
        assert!(wallet.is_empty());
        assert!(wallet.authorize(b"three", &mut r).is_err());
    }

    #[test]
    fn pruning_keeps_replay_detection_within_epochs() {
        let (mut issuer, mut r) = setup(10);
        let policy = *issuer.policy();
        let e = policy.epoch_length_secs;
        let (a, _) = issue(&mut issuer, "alice", 0, &mut r).unwrap();
        let (b, _) = issue(&mut issuer, "alice", e + 5, &mut r).unwrap();
        let mut reg = SpendRegistry::in_memory();
        let ba = a.authorize(b"x", &mut r);
        let bb = b.authorize(b"y", &mut r);
        assert!(verify_authorized(&ba, issuer.mpk(), &mut reg, &policy, 1).is_ok());
        assert!(verify_authorized(&bb, issuer.mpk(), &mut reg, &policy, e + 6).is_ok());
        // epoch 0 is still in the grace window during epoch 1
        prune_registry(&mut reg, &policy, e + 7).unwrap();
        assert_eq!(verify_authorized(&ba, issuer.mpk(), &mut reg, &policy, e + 8), Err(Rejection::Replay));
        assert_eq!(verify_authorized(&bb, issuer.mpk(), &mut reg, &policy, e + 8), Err(Rejection::Replay));
        // in epoch 2, epoch-0 tokens are expired, so purging their keys is safe
        prune_registry(&mut reg, &policy, 2 * e + 1).unwrap();
        assert_eq!(reg.epochs().collect::<Vec<_>>(), vec![1]);
        assert_eq!(verify_authorized(&ba, issuer.mpk(), &mut reg, &policy, 2 * e + 1), Err(Rejection::Expired));
        assert_eq!(verify_authorized(&bb, issuer.mpk(), &mut reg, &policy, 2 * e + 1), Err(Rejection::Replay));
    }

    #[test]
    fn persistent_registry_survives_reopen() {
        let dir = std::env::temp_dir().join(format!("ds-reg-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        {
            let mut reg = SpendRegistry::open(&dir).unwrap();
            assert!(reg.insert(3, [1u8; 32], 100).unwrap());
            assert!(reg.insert(4, [2u8; 32], 200).unwrap());
        }
        let mut reg = SpendRegistry::open(&dir).unwrap();
        assert!(reg.contains(3, &[1u8; 32]));
        assert!(!reg.insert(4, [2u8; 32], 300).unwrap());
        reg.prune_before(4).unwrap();
        let reg = SpendRegistry::open(&dir).unwrap();
        assert!(!reg.contains(3, &[1u8; 32]));
        assert!(reg.contains(4, &[2u8; 32]));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn bundle_encoding_roundtrips() {
        let (mut issuer, mut r) = setup(10);
        let (token, _) = issue(&mut issuer, "alice", 0, &mut r).unwrap();
        let bundle = token.authorize(b"payload", &mut r);
        let bytes = bundle.to_bytes();
        assert_eq!(AuthorizedMessage::from_bytes(&bytes).unwrap(), bundle);
        assert!(AuthorizedMessage::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let t2 = Token::from_bytes(&token.to_bytes()).unwrap();
        assert_eq!(t2.public(), token.public());
    }
}
