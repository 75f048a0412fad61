use std::path::{Path, PathBuf};
use std::sync::mpsc::RecvTimeoutError;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use datashare_core::crypto::GroupElement;
use datashare_core::tokens::RateLimitPolicy;
use datashare_messaging::NYM_SIZE;
use datashare_node::corpus::{load_dir, parse_query};
use datashare_node::persist::{OrgDir, QueuedCommand, Settings, StateDir};
use datashare_node::{journalist_setup, system_setup, Node, Notice};
use datashare_pigeonhole::clock::{Millis, DAY, SECOND};
use datashare_pigeonhole::{Clock, CommServer, SystemClock, TcpClient};
use rand::rngs::OsRng;

/// A journalist's node: publish a searchable record of your documents,
/// search other journalists' records, and talk to matching owners.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    /// Node state directory.
    #[arg(long, env = "DATASHARE_STATE", default_value = ".datashare", global = true)]
    state: PathBuf,
    /// Mailbox server address; overrides the organization's default.
    #[arg(long, global = true)]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Organization administration.
    Org {
        #[command(subcommand)]
        command: OrgCommand,
    },
    /// Register with the organization and create this node's identity.
    Init {
        #[arg(long)]
        org: PathBuf,
        /// Account name known to the organization.
        #[arg(long)]
        name: String,
    },
    Token {
        #[command(subcommand)]
        command: TokenCommand,
    },
    /// Publish a record for the documents in a directory (one file per
    /// document, one keyword per line).
    Publish {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Search with a comma-separated keyword list.
    Query { keywords: String },
    /// Show search results and conversations.
    Results,
    /// Show or continue a conversation. PEER is an owner's nym from the
    /// results, or a querier key from an incoming conversation.
    Chat {
        peer: String,
        #[arg(long)]
        message: Option<String>,
    },
    /// Stay online: answer queries, send cover traffic and deliver messages.
    Daemon {
        /// Bulletin polling interval in seconds.
        #[arg(long, default_value_t = 5)]
        poll: u64,
    },
}

#[derive(Subcommand, Debug)]
enum OrgCommand {
    /// Create the organization's keys and system parameters.
    Setup {
        #[arg(long)]
        org: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7400")]
        server: String,
        #[arg(long, default_value_t = RateLimitPolicy::default().tokens_per_epoch)]
        tokens_per_epoch: u32,
    },
}

#[derive(Subcommand, Debug)]
enum TokenCommand {
    /// Obtain tokens from the organization, up to the monthly quota.
    Fetch {
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let state = StateDir::new(&args.state);
    let now = SystemClock.now();
    match args.command {
        Command::Org {
            command: OrgCommand::Setup { org, server, tokens_per_epoch },
        } => {
            let dir = OrgDir::new(&org);
            if org.join("issuer.json").exists() {
                bail!("{} already holds an organization", org.display());
            }
            let policy = RateLimitPolicy {
                tokens_per_epoch,
                ..RateLimitPolicy::default()
            };
            dir.save(&system_setup(&server, policy, &mut OsRng))?;
            println!("organization created in {}", org.display());
        }
        Command::Init { org, name } => init(&state, &org, &name, now)?,
        Command::Results => print_results(&state.load_node(rand::random())?),
        Command::Chat { peer, message: None } => print_chat(&state.load_node(rand::random())?, &peer)?,
        Command::Chat { peer, message: Some(text) } => run(&state, args.server, QueuedCommand::Chat { peer, text }, now)?,
        Command::Token {
            command: TokenCommand::Fetch { count },
        } => run(&state, args.server, QueuedCommand::FetchTokens { count }, now)?,
        Command::Publish { corpus } => {
            let corpus = std::path::absolute(&corpus)?;
            run(&state, args.server, QueuedCommand::Publish { corpus }, now)?
        }
        Command::Query { keywords } => {
            let keywords = parse_query(&keywords)
                .into_iter()
                .map(|k| String::from_utf8_lossy(&k).into_owned())
                .collect();
            run(&state, args.server, QueuedCommand::Query { keywords }, now)?
        }
        Command::Daemon { poll } => daemon(&state, args.server, Duration::from_secs(poll.max(1)))?,
    }
    Ok(())
}

fn init(state: &StateDir, org: &Path, name: &str, now: Millis) -> anyhow::Result<()> {
    if state.is_initialized() {
        bail!("{} is already initialized", state.root().display());
    }
    let _lock = state.try_lock()?.context("state directory is in use")?;
    let org_dir = OrgDir::new(org);
    let _org_lock = org_dir.lock()?;
    let mut organization = org_dir.load().context("loading organization")?;
    let identity = journalist_setup(&mut organization.issuer, name, now, &mut OsRng)?;
    org_dir.save_issuer(&organization.issuer)?;
    let node = Node::new(organization.config.clone(), identity, state.registry()?, rand::random());
    state.save_config(&organization.config)?;
    state.save_settings(&Settings {
        org: Some(std::path::absolute(org)?),
    })?;
    state.save_node(&node)?;
    println!("nym {}", hex::encode(node.identity().nym()));
    Ok(())
}

fn connect(node: &Node, server: Option<&str>) -> anyhow::Result<TcpClient> {
    let addr = server.unwrap_or(&node.config().server);
    TcpClient::connect(addr).with_context(|| format!("connecting to {addr}"))
}

/// Runs `cmd` now when no daemon owns the state, and otherwise leaves it in
/// the daemon's inbox.
fn run(state: &StateDir, server: Option<String>, cmd: QueuedCommand, now: Millis) -> anyhow::Result<()> {
    let Some(_lock) = state.try_lock()? else {
        state.push_command(&cmd, now)?;
        println!("queued for the running daemon");
        return Ok(());
    };
    let mut node = state.load_node(rand::random())?;
    let settings = state.load_settings()?;
    let needs_server = !matches!(cmd, QueuedCommand::FetchTokens { .. });
    let client = if needs_server { Some(connect(&node, server.as_deref())?) } else { None };
    if let Some(c) = &client {
        for notice in node.start(c, now)? {
            print_notice(&notice);
        }
    }
    let result = apply(&mut node, &settings, client.as_ref().map(|c| c as &dyn CommServer), cmd, now);
    node.stop();
    state.save_node(&node)?;
    result
}

fn apply(node: &mut Node, settings: &Settings, server: Option<&dyn CommServer>, cmd: QueuedCommand, now: Millis) -> anyhow::Result<()> {
    match cmd {
        QueuedCommand::FetchTokens { count } => {
            let org = settings.org.as_ref().context("no organization configured")?;
            let org_dir = OrgDir::new(org);
            let _lock = org_dir.lock()?;
            let mut organization = org_dir.load()?;
            let got = node
                .identity_mut()
                .fetch_tokens(&mut organization.issuer, count, now, &mut OsRng)?;
            org_dir.save_issuer(&organization.issuer)?;
            println!("obtained {got} tokens, {} unspent", node.identity().wallet().len());
        }
        QueuedCommand::Publish { corpus } => {
            let server = server.context("no server")?;
            let (names, corpus) = load_dir(&corpus)?;
            node.sync(server, now)?;
            let record = node.publish(&corpus, server, now)?;
            println!(
                "published {} documents ({} filter bytes)",
                names.len(),
                record.filter.to_bytes().len()
            );
        }
        QueuedCommand::Query { keywords } => {
            let server = server.context("no server")?;
            let kws: Vec<Vec<u8>> = keywords.iter().map(|k| k.as_bytes().to_vec()).collect();
            node.sync(server, now)?;
            let id = node.query(&kws, server, now)?;
            println!("query {id} posted; replies arrive while the daemon runs");
        }
        QueuedCommand::Chat { peer, text } => {
            let (me, peer) = resolve_peer(node, &peer)?;
            node.send_message(&me, &peer, &text, now)?;
            println!("queued; it leaves with the next cover message");
        }
    }
    Ok(())
}

/// Maps an owner nym or a querier key to a conversation's key pair.
fn resolve_peer(node: &Node, peer: &str) -> anyhow::Result<(GroupElement, GroupElement)> {
    let bytes = hex::decode(peer.trim()).context("peer must be hex")?;
    if bytes.len() == NYM_SIZE {
        let nym: [u8; NYM_SIZE] = bytes.try_into().unwrap();
        let conv = node
            .conversation_with_owner(&nym)
            .context("no reply from that owner yet")?;
        return Ok((*conv.me.public(), conv.peer));
    }
    let pk = GroupElement::from_bytes(&bytes)?;
    let conv = node
        .conversations()
        .iter()
        .rev()
        .find(|c| c.peer == pk)
        .context("no conversation with that key")?;
    Ok((*conv.me.public(), conv.peer))
}

fn print_notice(notice: &Notice) {
    match notice {
        Notice::Report { query, report } => println!(
            "query {query}: owner {} has {} matching documents",
            hex::encode(report.owner),
            report.matches
        ),
        Notice::BadReply { query, owner } => {
            println!("query {query}: owner {} sent an invalid reply", hex::encode(owner))
        }
        Notice::Answered { pk_q } => println!("answered query from {}", hex::encode(pk_q.to_bytes())),
        Notice::Message { peer, text, .. } => println!("message from {}: {text}", hex::encode(peer.to_bytes())),
        Notice::ReplyTimedOut { query, owner } => {
            println!("query {query}: no reply from {}", hex::encode(owner))
        }
    }
}

fn print_results(node: &Node) {
    println!("nym {}", hex::encode(node.identity().nym()));
    println!("tokens {}", node.identity().wallet().len());
    println!("published {}", node.is_published());
    for q in node.queries() {
        println!("query {} [{}]", q.id, q.keywords.join(", "));
        for r in &q.reports {
            println!("  owner {}  matches {}  sizes {:?}", hex::encode(r.owner), r.matches, r.sizes);
        }
        for owner in &q.flagged {
            println!("  owner {}  invalid reply", hex::encode(owner));
        }
    }
    for c in node.conversations().iter().filter(|c| c.query.is_none()) {
        println!("querier {}  {} messages", hex::encode(c.peer.to_bytes()), c.lines.len());
    }
}

fn print_chat(node: &Node, peer: &str) -> anyhow::Result<()> {
    let (me, peer) = resolve_peer(node, peer)?;
    let conv = node
        .conversations()
        .iter()
        .find(|c| c.me.public() == &me && c.peer == peer)
        .expect("resolved conversation exists");
    for line in &conv.lines {
        let who = if line.outgoing { "me" } else { "them" };
        println!("[{}] {who}: {}", line.at / SECOND, line.text);
    }
    Ok(())
}

/// Runs until killed. State is saved after every step that changed it, so
/// stopping the process at any point loses at most the step in progress.
fn daemon(state: &StateDir, server: Option<String>, poll: Duration) -> anyhow::Result<()> {
    let _lock = state.try_lock()?.context("another daemon owns this state")?;
    let clock = SystemClock;
    let settings = state.load_settings()?;
    let mut node = state.load_node(rand::random())?;
    let client = connect(&node, server.as_deref())?;
    let start = clock.now();
    for notice in node.start(&client, start)? {
        print_notice(&notice);
    }
    let monitor = client.monitor(start.saturating_sub(7 * DAY))?;
    for notice in node.on_bulk(&monitor.bulk, &client, start)? {
        print_notice(&notice);
    }
    state.save_node(&node)?;
    log::info!("online as {}", hex::encode(node.identity().nym()));
    let mut next_poll = start;
    loop {
        let now = clock.now();
        let mut dirty = false;
        for cmd in state.take_commands()? {
            if let Err(e) = apply(&mut node, &settings, Some(&client), cmd, now) {
                log::warn!("command failed: {e:#}");
            }
            dirty = true;
        }
        if now >= next_poll || node.next_deadline().is_some_and(|d| d <= now) {
            match node.tick(&client, now) {
                Ok(notices) => notices.iter().for_each(print_notice),
                Err(e) => log::warn!("tick failed: {e}"),
            }
            next_poll = now + poll.as_millis() as Millis;
            dirty = true;
        }
        let wake = node.next_deadline().unwrap_or(next_poll).min(next_poll);
        let wait = Duration::from_millis(wake.saturating_sub(clock.now()).clamp(10, 1000));
        match monitor.feed.recv_timeout(wait) {
            Ok(prefix) => {
                let now = clock.now();
                for notice in node.on_prefix(prefix, &client, now)? {
                    print_notice(&notice);
                }
                while let Ok(prefix) = monitor.feed.try_recv() {
                    for notice in node.on_prefix(prefix, &client, now)? {
                        print_notice(&notice);
                    }
                }
                dirty = true;
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => bail!("lost the notification stream"),
        }
        if dirty {
            state.save_node(&node)?;
        }
    }
}
