//! Frame codec shared by the server and the TCP client.
//!
//! A frame is a 4-byte big-endian length (covering everything after it), a
//! 1-byte opcode, then zero or more fields, each a 4-byte big-endian length
//! followed by that many raw bytes. Integers inside fields are big-endian.

use std::io::{self, Read, Write};

use crate::clock::Millis;
use crate::store::{Address, BulletinEntry, Prefix, StoreError, ADDRESS_SIZE, PREFIX_SIZE};

pub const OP_BROADCAST: u8 = 0x01;
pub const OP_READ: u8 = 0x02;
pub const OP_PUT: u8 = 0x03;
pub const OP_GET: u8 = 0x04;
pub const OP_MONITOR: u8 = 0x05;
pub const RESPONSE_BIT: u8 = 0x80;
pub const OP_ERROR: u8 = 0xff;

/// First field of a monitor response.
pub const MONITOR_BULK: u8 = 0x00;
pub const MONITOR_FEED: u8 = 0x01;

/// Upper bound on a single frame; larger lengths are treated as corruption.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub op: u8,
    pub fields: Vec<Vec<u8>>,
}

impl Frame {
    pub fn new(op: u8, fields: Vec<Vec<u8>>) -> Self {
        Frame { op, fields }
    }

    pub fn encode(&self) -> Vec<u8> {
        let body: usize = 1 + self.fields.iter().map(|f| 4 + f.len()).sum::<usize>();
        let mut out = Vec::with_capacity(4 + body);
        out.extend_from_slice(&(body as u32).to_be_bytes());
        out.push(self.op);
        for f in &self.fields {
            out.extend_from_slice(&(f.len() as u32).to_be_bytes());
            out.extend_from_slice(f);
        }
        out
    }

    /// Parses the bytes after the length prefix.
    pub fn decode_body(body: &[u8]) -> io::Result<Self> {
        let (&op, mut rest) = body.split_first().ok_or_else(|| invalid("empty frame"))?;
        let mut fields = Vec::new();
        while !rest.is_empty() {
            if rest.len() < 4 {
                return Err(invalid("truncated field length"));
            }
            let len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
            rest = &rest[4..];
            if rest.len() < len {
                return Err(invalid("truncated field"));
            }
            fields.push(rest[..len].to_vec());
            rest = &rest[len..];
        }
        Ok(Frame { op, fields })
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }

    pub fn read_from(r: &mut impl Read) -> io::Result<Self> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let len = check_len(u32::from_be_bytes(len))?;
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        Frame::decode_body(&body)
    }

    pub fn field(&self, i: usize) -> io::Result<&[u8]> {
        self.fields
            .get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| invalid("missing field"))
    }

    pub fn error(e: &StoreError) -> Self {
        let code = match e {
            StoreError::Oversize(_) => 1u8,
            StoreError::WrongLength { .. } => 2,
            StoreError::AddressInUse => 3,
            StoreError::Io(_) => 4,
        };
        Frame::new(OP_ERROR, vec![vec![code], e.to_string().into_bytes()])
    }

    /// Reconstructs the store error carried by an error frame.
    pub fn to_store_error(&self) -> StoreError {
        let text = self
            .fields
            .get(1)
            .map(|b| String::from_utf8_lossy(b).into_owned())
            .unwrap_or_default();
        match self.fields.first().and_then(|f| f.first()) {
            Some(1) => StoreError::Oversize(0),
            Some(2) => StoreError::WrongLength { expected: 0, got: 0 },
            Some(3) => StoreError::AddressInUse,
            _ => StoreError::Io(text),
        }
    }
}

pub fn check_len(len: u32) -> io::Result<usize> {
    let len = len as usize;
    if len == 0 || len > MAX_FRAME {
        return Err(invalid("bad frame length"));
    }
    Ok(len)
}

pub fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

pub fn u64_field(b: &[u8]) -> io::Result<u64> {
    Ok(u64::from_be_bytes(b.try_into().map_err(|_| invalid("expected 8-byte integer"))?))
}

pub fn address_field(b: &[u8]) -> io::Result<Address> {
    <[u8; ADDRESS_SIZE]>::try_from(b).map_err(|_| invalid("expected 32-byte address"))
}

/// Three fields per entry: seq, posted_at, payload.
pub fn encode_entries(entries: &[BulletinEntry]) -> Vec<Vec<u8>> {
    entries
        .iter()
        .flat_map(|e| {
            [
                e.seq.to_be_bytes().to_vec(),
                e.posted_at.to_be_bytes().to_vec(),
                e.payload.clone(),
            ]
        })
        .collect()
}

pub fn decode_entries(fields: &[Vec<u8>]) -> io::Result<Vec<BulletinEntry>> {
    if fields.len() % 3 != 0 {
        return Err(invalid("bulletin entries come in triples"));
    }
    fields
        .chunks(3)
        .map(|c| {
            Ok(BulletinEntry {
                seq: u64_field(&c[0])?,
                posted_at: u64_field(&c[1])?,
                payload: c[2].clone(),
            })
        })
        .collect()
}

pub fn bulk_frame(filter: &[u8], as_of: Millis) -> Frame {
    Frame::new(
        RESPONSE_BIT | OP_MONITOR,
        vec![vec![MONITOR_BULK], filter.to_vec(), as_of.to_be_bytes().to_vec()],
    )
}

pub fn feed_frame(prefixes: &[Prefix]) -> Frame {
    Frame::new(
        RESPONSE_BIT | OP_MONITOR,
        vec![vec![MONITOR_FEED], prefixes.concat()],
    )
}

pub fn decode_prefixes(b: &[u8]) -> io::Result<Vec<Prefix>> {
    if b.len() % PREFIX_SIZE != 0 {
        return Err(invalid("ragged prefix batch"));
    }
    Ok(b.chunks(PREFIX_SIZE).map(|c| [c[0], c[1]]).collect())
}
