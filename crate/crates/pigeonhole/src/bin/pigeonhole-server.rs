use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use datashare_pigeonhole::clock::DAY;
use datashare_pigeonhole::{server, Store, StoreConfig, SystemClock};
use tokio::net::TcpListener;

/// Serve the bulletin board and mailboxes over TCP.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7400")]
    listen: String,
    /// Keep state here across restarts; in-memory when absent.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    retention_days: u64,
    #[arg(long, default_value_t = 30)]
    bulletin_retention_days: u64,
    /// Exact size of every mailbox ciphertext.
    #[arg(long, default_value_t = StoreConfig::default().envelope_len)]
    max_envelope_bytes: usize,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let config = StoreConfig {
        retention: args.retention_days * DAY,
        bulletin_retention: args.bulletin_retention_days * DAY,
        envelope_len: args.max_envelope_bytes,
        ..StoreConfig::default()
    };
    let clock = Arc::new(SystemClock);
    let store = match &args.data_dir {
        Some(dir) => Store::open(config, clock, dir).with_context(|| format!("opening {}", dir.display()))?,
        None => Store::new(config, clock),
    };
    let listener = TcpListener::bind(&args.listen)
        .await
        .with_context(|| format!("binding {}", args.listen))?;
    log::info!("listening on {}", listener.local_addr()?);
    tokio::select! {
        r = server::serve(listener, Arc::new(store)) => r?,
        _ = tokio::signal::ctrl_c() => log::info!("shutting down"),
    }
    Ok(())
}
