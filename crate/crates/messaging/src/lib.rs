//! Client side of the mailbox system: deriving slots from Diffie-Hellman
//! secrets, sealing fixed-length envelopes, waiting for messages, and
//! hiding conversations inside Poisson cover traffic.

pub mod channel;
pub mod cover;
pub mod envelope;
pub mod messenger;

use datashare_core::CryptoError;
use datashare_pigeonhole::CommError;
use thiserror::Error;

pub use channel::ChannelState;
pub use cover::{CoverAction, CoverRates, CoverScheduler, QueuedMessage, SendQueues};
pub use envelope::{Kind, Slot, ENVELOPE_LEN, MAX_PAYLOAD, MESSAGE_LEN};
pub use messenger::{
    CoverAnnouncement, Delivery, Event, Messenger, MessengerConfig, MessengerSnapshot, MessengerStats, Nym, SentRecord,
    NYM_SIZE,
};

#[derive(Debug, Error)]
pub enum MessagingError {
    #[error("payload of {0} bytes does not fit in one envelope")]
    Oversize(usize),
    #[error("envelope is malformed")]
    MalformedEnvelope,
    #[error("slot already taken")]
    SlotTaken,
    #[error("slot taken twice in a row")]
    Collision,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Comm(CommError),
}
