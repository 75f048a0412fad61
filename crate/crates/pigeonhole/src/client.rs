//! Blocking TCP client for the pigeonhole server.

use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread;

use datashare_core::cuckoo::CuckooFilter;
use parking_lot::Mutex;

use crate::api::{CommError, CommServer, Monitor};
use crate::clock::Millis;
use crate::store::{Address, BulletinEntry};
use crate::wire::*;

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Conn {
    fn open(addr: SocketAddr) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Conn {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }
}

pub struct TcpClient {
    addr: SocketAddr,
    conn: Mutex<Option<Conn>>,
}

impl TcpClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "no address"))?;
        let conn = Conn::open(addr)?;
        Ok(TcpClient {
            addr,
            conn: Mutex::new(Some(conn)),
        })
    }

    /// Sends one request and waits for its response. A broken connection is
    /// dropped and reopened on the next call.
    fn call(&self, request: Frame) -> Result<Frame, CommError> {
        let mut guard = self.conn.lock();
        if guard.is_none() {
            *guard = Some(Conn::open(self.addr)?);
        }
        let conn = guard.as_mut().unwrap();
        let result = request
            .write_to(&mut conn.writer)
            .and_then(|_| Frame::read_from(&mut conn.reader));
        let response = match result {
            Ok(f) => f,
            Err(e) => {
                *guard = None;
                return Err(e.into());
            }
        };
        if response.op == OP_ERROR {
            return Err(CommError::Rejected(response.to_store_error()));
        }
        if response.op != RESPONSE_BIT | request.op {
            *guard = None;
            return Err(CommError::Transport("response opcode mismatch".into()));
        }
        Ok(response)
    }
}

impl CommServer for TcpClient {
    fn broadcast(&self, payload: &[u8]) -> Result<u64, CommError> {
        let r = self.call(Frame::new(OP_BROADCAST, vec![payload.to_vec()]))?;
        Ok(u64_field(r.field(0)?)?)
    }

    fn read(&self, after_seq: u64) -> Result<Vec<BulletinEntry>, CommError> {
        let r = self.call(Frame::new(OP_READ, vec![after_seq.to_be_bytes().to_vec()]))?;
        Ok(decode_entries(&r.fields)?)
    }

    fn put(&self, addr: &Address, ciphertext: &[u8]) -> Result<(), CommError> {
        self.call(Frame::new(OP_PUT, vec![addr.to_vec(), ciphertext.to_vec()]))?;
        Ok(())
    }

    fn get(&self, addr: &Address) -> Result<Option<Vec<u8>>, CommError> {
        let r = self.call(Frame::new(OP_GET, vec![addr.to_vec()]))?;
        Ok(r.fields.into_iter().next())
    }

    /// Opens a dedicated connection for the subscription.
    fn monitor(&self, since: Millis) -> Result<Monitor, CommError> {
        let mut conn = Conn::open(self.addr)?;
        Frame::new(OP_MONITOR, vec![since.to_be_bytes().to_vec()]).write_to(&mut conn.writer)?;
        let first = Frame::read_from(&mut conn.reader)?;
        if first.op == OP_ERROR {
            return Err(CommError::Rejected(first.to_store_error()));
        }
        if first.op != RESPONSE_BIT | OP_MONITOR || first.field(0)? != [MONITOR_BULK] {
            return Err(CommError::Transport("expected bulk notification".into()));
        }
        let bulk = CuckooFilter::from_bytes(first.field(1)?)
            .map_err(|e| CommError::Transport(e.to_string()))?;
        let as_of = u64_field(first.field(2)?)?;

        let (tx, rx) = mpsc::channel();
        let shutdown = conn.writer.get_ref().try_clone()?;
        let mut reader = conn.reader;
        thread::spawn(move || {
            while let Ok(frame) = Frame::read_from(&mut reader) {
                if frame.fields.first().map(Vec::as_slice) != Some(&[MONITOR_FEED]) {
                    continue;
                }
                let Ok(prefixes) = frame.field(1).and_then(decode_prefixes) else { break };
                if prefixes.into_iter().any(|p| tx.send(p).is_err()) {
                    break;
                }
            }
        });
        Ok(Monitor::new(bulk, as_of, rx, Closer(shutdown)))
    }
}

struct Closer(TcpStream);

impl Drop for Closer {
    fn drop(&mut self) {
        let _ = self.0.shutdown(Shutdown::Both);
    }
}
