//! Encodings of what nodes put on the bulletin board and in mailboxes.
//!
//! Bulletin payloads start with a four-byte magic:
//!
//! | magic  | body                                              |
//! |--------|---------------------------------------------------|
//! | `DSAM` | a token-authorized bundle whose message is a record or a query |
//! | `DSCK` | a cover-key announcement                          |
//! | `DSSP` | system parameters                                 |
//!
//! Inside an authorized bundle the message is either
//! `DSRC ‖ nym(16) ‖ pk(32) ‖ N (u64 BE) ‖ filter` or
//! `DSQY ‖ pk_q(32) ‖ lim blinded elements`.
//!
//! Mailbox payloads start with a type byte: `0x01` followed by the reply
//! elements, or `0x02 ‖ more` followed by a chunk of conversation text.

use datashare_core::crypto::{GroupElement, ELEMENT_SIZE};
use datashare_core::cuckoo::CuckooFilter;
use datashare_core::mspsi::{BlindedQuery, ReplyElements};
use datashare_core::tokens::AuthorizedMessage;
use datashare_messaging::{CoverAnnouncement, Nym, MAX_PAYLOAD, NYM_SIZE};

use crate::config::SystemConfig;
use crate::NodeError;

const BUNDLE_MAGIC: &[u8; 4] = b"DSAM";
const RECORD_MAGIC: &[u8; 4] = b"DSRC";
const QUERY_MAGIC: &[u8; 4] = b"DSQY";

const REPLY_TYPE: u8 = 0x01;
const CHAT_TYPE: u8 = 0x02;
/// Text bytes per conversation envelope.
pub const CHAT_CHUNK: usize = MAX_PAYLOAD - 2;

/// A journalist's searchable record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub nym: Nym,
    /// Medium-term contact key.
    pub pk: GroupElement,
    pub filter: CuckooFilter,
    pub doc_count: u64,
}

impl Record {
    pub fn to_bytes(&self) -> Vec<u8> {
        let filter = self.filter.to_bytes();
        let mut out = Vec::with_capacity(4 + NYM_SIZE + ELEMENT_SIZE + 8 + filter.len());
        out.extend_from_slice(RECORD_MAGIC);
        out.extend_from_slice(&self.nym);
        out.extend_from_slice(&self.pk.to_bytes());
        out.extend_from_slice(&self.doc_count.to_be_bytes());
        out.extend(filter);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, NodeError> {
        let b = b.strip_prefix(RECORD_MAGIC).ok_or(NodeError::Malformed("record magic"))?;
        if b.len() < NYM_SIZE + ELEMENT_SIZE + 8 {
            return Err(NodeError::Malformed("record too short"));
        }
        let (nym, rest) = b.split_at(NYM_SIZE);
        let (pk, rest) = rest.split_at(ELEMENT_SIZE);
        let (n, filter) = rest.split_at(8);
        Ok(Record {
            nym: nym.try_into().unwrap(),
            pk: GroupElement::from_bytes(pk)?,
            doc_count: u64::from_be_bytes(n.try_into().unwrap()),
            filter: CuckooFilter::from_bytes(filter)?,
        })
    }
}

/// The public part of a query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublishedQuery {
    pub query: BlindedQuery,
    /// Fresh key the owners reply to.
    pub pk_q: GroupElement,
}

impl PublishedQuery {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = QUERY_MAGIC.to_vec();
        out.extend_from_slice(&self.pk_q.to_bytes());
        out.extend(self.query.to_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, NodeError> {
        let b = b.strip_prefix(QUERY_MAGIC).ok_or(NodeError::Malformed("query magic"))?;
        if b.len() < ELEMENT_SIZE {
            return Err(NodeError::Malformed("query too short"));
        }
        let (pk, elements) = b.split_at(ELEMENT_SIZE);
        Ok(PublishedQuery {
            pk_q: GroupElement::from_bytes(pk)?,
            query: BlindedQuery::from_bytes(elements)?,
        })
    }
}

/// What an authorized bundle carries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Announcement {
    Record(Record),
    Query(PublishedQuery),
}

impl Announcement {
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Announcement::Record(r) => r.to_bytes(),
            Announcement::Query(q) => q.to_bytes(),
        }
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, NodeError> {
        if b.starts_with(RECORD_MAGIC) {
            Record::from_bytes(b).map(Announcement::Record)
        } else if b.starts_with(QUERY_MAGIC) {
            PublishedQuery::from_bytes(b).map(Announcement::Query)
        } else {
            Err(NodeError::Malformed("unknown announcement"))
        }
    }
}

/// A parsed bulletin entry.
#[derive(Debug)]
pub enum BulletinItem {
    Authorized(AuthorizedMessage),
    CoverKey(CoverAnnouncement),
    Parameters(Box<SystemConfig>),
}

pub fn bundle_to_bulletin(bundle: &AuthorizedMessage) -> Vec<u8> {
    let mut out = BUNDLE_MAGIC.to_vec();
    out.extend(bundle.to_bytes());
    out
}

pub fn parse_bulletin(payload: &[u8]) -> Option<BulletinItem> {
    if let Some(body) = payload.strip_prefix(BUNDLE_MAGIC) {
        return AuthorizedMessage::from_bytes(body).ok().map(BulletinItem::Authorized);
    }
    if let Some(ann) = CoverAnnouncement::from_bytes(payload) {
        return Some(BulletinItem::CoverKey(ann));
    }
    SystemConfig::from_bulletin(payload).map(|c| BulletinItem::Parameters(Box::new(c)))
}

/// A mailbox payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    Reply(ReplyElements),
    Chat { more: bool, text: Vec<u8> },
}

impl Payload {
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Payload::Reply(r) => [&[REPLY_TYPE][..], &r.to_bytes()].concat(),
            Payload::Chat { more, text } => [&[CHAT_TYPE, u8::from(*more)][..], text].concat(),
        }
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, NodeError> {
        match b {
            [REPLY_TYPE, rest @ ..] => Ok(Payload::Reply(ReplyElements::from_bytes(rest)?)),
            [CHAT_TYPE, more @ (0 | 1), text @ ..] => Ok(Payload::Chat {
                more: *more == 1,
                text: text.to_vec(),
            }),
            _ => Err(NodeError::Malformed("mailbox payload")),
        }
    }
}

/// Splits `text` into envelope-sized chat payloads. Empty text still
/// produces one payload.
pub fn chat_payloads(text: &[u8]) -> Vec<Vec<u8>> {
    if text.is_empty() {
        return vec![Payload::Chat { more: false, text: Vec::new() }.to_bytes()];
    }
    let chunks: Vec<&[u8]> = text.chunks(CHAT_CHUNK).collect();
    let last = chunks.len() - 1;
    chunks
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            Payload::Chat {
                more: i < last,
                text: c.to_vec(),
            }
            .to_bytes()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use datashare_core::crypto::KeyPair;
    use datashare_core::cuckoo::CuckooParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn record_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let filter = CuckooFilter::compress([b"x", b"y"], CuckooParams::for_elements(2)).unwrap();
        let rec = Record {
            nym: [9; 16],
            pk: *KeyPair::generate(&mut rng).public(),
            filter,
            doc_count: 3,
        };
        let bytes = Announcement::Record(rec.clone()).to_bytes();
        assert_eq!(Announcement::from_bytes(&bytes).unwrap(), Announcement::Record(rec));
        assert!(Record::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn query_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let q = PublishedQuery {
            pk_q: *KeyPair::generate(&mut rng).public(),
            query: BlindedQuery {
                elements: (0..10).map(|_| *KeyPair::generate(&mut rng).public()).collect(),
            },
        };
        let bytes = q.to_bytes();
        assert_eq!(bytes.len(), 4 + 32 * 11);
        assert_eq!(PublishedQuery::from_bytes(&bytes).unwrap(), q);
        assert!(PublishedQuery::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn chat_splits_long_text() {
        let text = vec![b'a'; 2 * CHAT_CHUNK + 5];
        let parts = chat_payloads(&text);
        assert_eq!(parts.len(), 3);
        assert!(parts.iter().all(|p| p.len() <= MAX_PAYLOAD));
        let mut joined = Vec::new();
        for (i, p) in parts.iter().enumerate() {
            let Payload::Chat { more, text } = Payload::from_bytes(p).unwrap() else { panic!() };
            assert_eq!(more, i < 2);
            joined.extend(text);
        }
        assert_eq!(joined, text);
    }

    #[test]
    fn junk_payloads_rejected() {
        assert!(Payload::from_bytes(&[]).is_err());
        assert!(Payload::from_bytes(&[0x02, 7]).is_err());
        assert!(Payload::from_bytes(&[0x01, 1, 2, 3]).is_err());
        assert!(parse_bulletin(b"DSAMjunk").is_none());
    }
}
