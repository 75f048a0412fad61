//! A journalist's long-lived secrets.

use datashare_core::crypto::{GroupElement, KeyPair};
use datashare_core::mspsi::ServerKey;
use datashare_core::tokens::{issue, Issuer, Token, Wallet};
use datashare_core::TokenError;
use datashare_messaging::Nym;
use datashare_pigeonhole::clock::Millis;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::NodeError;

pub struct JournalistIdentity {
    account: String,
    nym: Nym,
    medium: KeyPair,
    rotated_at: Millis,
    server_key: ServerKey,
    wallet: Wallet,
}

/// Registers `account` with the issuer and draws fresh identity secrets.
pub fn journalist_setup<R: RngCore + CryptoRng>(
    issuer: &mut Issuer,
    account: &str,
    now: Millis,
    rng: &mut R,
) -> Result<JournalistIdentity, NodeError> {
    issuer.register(account)?;
    let mut nym = [0u8; 16];
    rng.fill_bytes(&mut nym);
    Ok(JournalistIdentity {
        account: account.to_owned(),
        nym,
        medium: KeyPair::generate(rng),
        rotated_at: now,
        server_key: ServerKey::generate(rng),
        wallet: Wallet::new(),
    })
}

impl JournalistIdentity {
    pub fn account(&self) -> &str {
        &self.account
    }

    pub fn nym(&self) -> &Nym {
        &self.nym
    }

    /// Current medium-term contact key.
    pub fn medium(&self) -> &KeyPair {
        &self.medium
    }

    pub fn rotated_at(&self) -> Millis {
        self.rotated_at
    }

    pub fn server_key(&self) -> &ServerKey {
        &self.server_key
    }

    pub fn wallet(&self) -> &Wallet {
        &self.wallet
    }

    pub fn wallet_mut(&mut self) -> &mut Wallet {
        &mut self.wallet
    }

    /// Replaces the contact key and returns the old one. The MS-PSI key
    /// stays, so published tags remain valid.
    pub fn rotate<R: RngCore + CryptoRng>(&mut self, now: Millis, rng: &mut R) -> KeyPair {
        self.rotated_at = now;
        std::mem::replace(&mut self.medium, KeyPair::generate(rng))
    }

    /// Obtains up to `count` tokens, stopping early when the quota runs out.
    /// Returns how many were obtained.
    pub fn fetch_tokens<R: RngCore + CryptoRng>(
        &mut self,
        issuer: &mut Issuer,
        count: usize,
        now: Millis,
        rng: &mut R,
    ) -> Result<usize, NodeError> {
        let mut got = 0;
        while got < count {
            match issue(issuer, &self.account, now / 1000, rng) {
                Ok((token, _)) => {
                    self.wallet.deposit(token);
                    got += 1;
                }
                Err(TokenError::QuotaExhausted { .. }) if got > 0 => break,
                Err(e) => return Err(e.into()),
            }
        }
        Ok(got)
    }
}

/// Serializable form of an identity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SavedIdentity {
    pub account: String,
    #[serde(with = "hex::serde")]
    pub nym: Nym,
    pub medium: KeyPair,
    pub rotated_at: Millis,
    pub server_key: ServerKey,
    /// Unspent tokens, hex-encoded.
    pub tokens: Vec<String>,
    pub spent: Vec<GroupElement>,
}

impl JournalistIdentity {
    pub fn save(&self) -> SavedIdentity {
        let mut spent: Vec<GroupElement> = self
            .wallet
            .spent_keys()
            .filter_map(|pk| GroupElement::from_bytes(pk).ok())
            .collect();
        spent.sort_by_key(|pk| pk.to_bytes());
        SavedIdentity {
            account: self.account.clone(),
            nym: self.nym,
            medium: self.medium.clone(),
            rotated_at: self.rotated_at,
            server_key: self.server_key.clone(),
            tokens: self.wallet.tokens().iter().map(|t| hex::encode(t.to_bytes())).collect(),
            spent,
        }
    }

    pub fn load(saved: SavedIdentity) -> Result<Self, NodeError> {
        let mut wallet = Wallet::new();
        for t in &saved.tokens {
            let bytes = hex::decode(t).map_err(|_| NodeError::Malformed("token hex"))?;
            wallet.deposit(Token::from_bytes(&bytes)?);
        }
        for pk in &saved.spent {
            wallet.mark_spent(pk.to_bytes());
        }
        Ok(JournalistIdentity {
            account: saved.account,
            nym: saved.nym,
            medium: saved.medium,
            rotated_at: saved.rotated_at,
            server_key: saved.server_key,
            wallet,
        })
    }
}
