//! The communication server: a bulletin board for broadcasts and a store of
//! one-time mailboxes with new-message notifications and expiry.

pub mod api;
pub mod client;
pub mod clock;
pub mod server;
pub mod store;
pub mod wire;

pub use api::{CommError, CommServer, Monitor};
pub use client::TcpClient;
pub use clock::{Clock, ManualClock, Millis, SystemClock};
pub use store::{Address, BulletinEntry, Prefix, Store, StoreConfig, StoreError, StoreStats};
