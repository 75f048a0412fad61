//! Async TCP front end for a [`Store`].

use std::io;
use std::sync::Arc;

use log::{debug, warn};
use tokio::io::{AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;

use crate::store::{prefix_of, Prefix, Store};
use crate::wire::*;

/// Most prefixes packed into one feed frame.
const FEED_BATCH: usize = 4096;

/// Accepts connections until the listener fails.
pub async fn serve(listener: TcpListener, store: Arc<Store>) -> io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        debug!("connection from {peer}");
        let store = store.clone();
        tokio::spawn(async move {
            if let Err(e) = handle(stream, store).await {
                if e.kind() != io::ErrorKind::UnexpectedEof {
                    warn!("connection ended: {e}");
                }
            }
        });
    }
}

async fn read_frame(r: &mut (impl AsyncReadExt + Unpin)) -> io::Result<Frame> {
    let len = check_len(r.read_u32().await?)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).await?;
    Frame::decode_body(&body)
}

async fn handle(stream: TcpStream, store: Arc<Store>) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let (read_half, mut writer) = stream.into_split();
    let mut reader = BufReader::new(read_half);
    loop {
        let request = read_frame(&mut reader).await?;
        if request.op == OP_MONITOR {
            let since = u64_field(request.field(0)?)?;
            return stream_notifications(writer, store, since).await;
        }
        let store = store.clone();
        let response = tokio::task::spawn_blocking(move || dispatch(&store, &request))
            .await
            .map_err(io::Error::other)?;
        writer.write_all(&response.encode()).await?;
    }
}

fn dispatch(store: &Store, request: &Frame) -> Frame {
    let reply = |fields| Frame::new(RESPONSE_BIT | request.op, fields);
    let result: io::Result<Frame> = (|| match request.op {
        OP_BROADCAST => Ok(match store.bb_broadcast(request.field(0)?) {
            Ok(seq) => reply(vec![seq.to_be_bytes().to_vec()]),
            Err(e) => Frame::error(&e),
        }),
        OP_READ => {
            let after = u64_field(request.field(0)?)?;
            Ok(reply(encode_entries(&store.bb_read(after))))
        }
        OP_PUT => {
            let addr = address_field(request.field(0)?)?;
            Ok(match store.ph_put(&addr, request.field(1)?) {
                Ok(()) => reply(vec![]),
                Err(e) => Frame::error(&e),
            })
        }
        OP_GET => {
            let addr = address_field(request.field(0)?)?;
            Ok(reply(store.ph_get(&addr).into_iter().collect()))
        }
        _ => Err(invalid("unknown opcode")),
    })();
    result.unwrap_or_else(|e| {
        Frame::new(OP_ERROR, vec![vec![0], e.to_string().into_bytes()])
    })
}

async fn stream_notifications(
    mut writer: tokio::net::tcp::OwnedWriteHalf,
    store: Arc<Store>,
    since: u64,
) -> io::Result<()> {
    let (tx, mut rx) = mpsc::unbounded_channel::<Prefix>();
    let id = store.subscribe(move |addr| {
        let _ = tx.send(prefix_of(addr));
    });
    let result = async {
        let s = store.clone();
        let (bulk, as_of) = tokio::task::spawn_blocking(move || s.monitor_bulk(since))
            .await
            .map_err(io::Error::other)?;
        writer.write_all(&bulk_frame(&bulk.to_bytes(), as_of).encode()).await?;
        let mut batch = Vec::new();
        while let Some(p) = rx.recv().await {
            batch.push(p);
            while batch.len() < FEED_BATCH {
                match rx.try_recv() {
                    Ok(p) => batch.push(p),
                    Err(_) => break,
                }
            }
            writer.write_all(&feed_frame(&batch).encode()).await?;
            batch.clear();
        }
        Ok(())
    }
    .await;
    store.unsubscribe(id);
    result
}
