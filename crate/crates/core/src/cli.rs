//! Command-line interface. Operates directly on a node's data directory,
//! except `serve`, which runs the HTTP daemon over it.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::aggregator::{AuthorityStream, Feed, ForumConfig, PayloadView};
use crate::canonical;
use crate::daemon::{self, ServeOptions};
use crate::identity::{KeyFile, Keypair, Principal, PrincipalId};
use crate::migration::Selector;
use crate::moderation::{ModAction, Target};
use crate::node::{Node, NodeConfig, NodeError, LOCAL_STORE_ID};
use crate::sim::{self, SimScenario};
use crate::storage::{Attribution, Backend, BlobStoreConfig, RefusalTarget};
use crate::stream::{now_unix, parse_csl, verify_stream, EntryRef, PayloadKind, StreamError, StreamId, StreamKind};
use crate::sync::PeerAddress;

#[derive(Debug, Parser)]
#[command(name = "plurinet", version, about = "Signed content streams, moderation streams and feeds")]
pub struct Cli {
    /// Node data directory (overrides the config file's data_dir).
    #[arg(long, global = true, env = "PLURINET_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Node config file (canonical JSON).
    #[arg(long, global = true, env = "PLURINET_CONFIG")]
    pub config: Option<PathBuf>,
    /// Print canonical JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a signing key; a given seed always yields the same key.
    Keygen {
        /// 32-byte seed as 64 hex characters.
        #[arg(long)]
        seed: Option<String>,
        /// Write the key file here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    /// Signed streams.
    Stream(StreamCmd),
    #[command(subcommand)]
    /// Publish moderation actions.
    Mod(ModCmd),
    #[command(subcommand)]
    /// Assemble feeds.
    Feed(FeedCmd),
    #[command(subcommand)]
    /// Forums this node serves.
    Forum(ForumCmd),
    #[command(subcommand)]
    /// Blob stores.
    Store(StoreCmd),
    #[command(subcommand)]
    /// Pull from peers.
    Sync(SyncCmd),
    /// Write a migration bundle.
    Export {
        #[arg(long)]
        out: PathBuf,
        /// Streams to include (default: all).
        #[arg(long = "stream")]
        streams: Vec<StreamId>,
        /// Key files to include in the bundle.
        #[arg(long = "include-key")]
        include_keys: Vec<PathBuf>,
        #[arg(long)]
        created_at: Option<u64>,
    },
    /// Import a migration bundle directory.
    Import { dir: PathBuf },
    /// Copy a stream's payloads to another store and publish storage hints.
    SwitchProvider {
        #[arg(long)]
        stream: StreamId,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        /// Hint issuer key (default: the node key).
        #[arg(long)]
        key: Option<PathBuf>,
    },
    /// Run the HTTP daemon.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        /// Sync with configured peers every N seconds.
        #[arg(long)]
        gossip_every: Option<u64>,
    },
    /// Run a sync scenario file in the network simulator.
    Simulate {
        scenario: PathBuf,
        /// Write the trace (one event per line) here instead of stdout.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Content,
    Moderation,
}

#[derive(Debug, Subcommand)]
pub enum StreamCmd {
    /// Start a stream signed by the key's owner.
    Create {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long, value_enum, default_value = "content")]
        kind: KindArg,
        /// Additional writer public keys (hex).
        #[arg(long = "writer")]
        writers: Vec<Principal>,
        /// Content stream a moderation stream annotates.
        #[arg(long)]
        scope: Option<StreamId>,
        #[arg(long)]
        timestamp: Option<u64>,
    },
    /// Append a signed entry.
    Append {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        stream: StreamId,
        /// POST, REPLY, EDIT, TOMBSTONE or WRITER_UPDATE.
        #[arg(long, default_value = "POST")]
        kind: PayloadKind,
        #[arg(long, conflicts_with = "file")]
        text: Option<String>,
        #[arg(long)]
        file: Option<PathBuf>,
        /// `<stream>:<seq>` of the replied-to, edited or tombstoned entry.
        #[arg(long)]
        reply_to: Option<EntryRef>,
        /// New writer set for WRITER_UPDATE (public key hex).
        #[arg(long = "writer")]
        writers: Vec<Principal>,
        #[arg(long)]
        timestamp: Option<u64>,
    },
    /// Print a stream as `.csl` lines.
    Cat {
        stream: StreamId,
        #[arg(long)]
        from: Option<u64>,
        #[arg(long)]
        to: Option<u64>,
    },
    /// Verify a `.csl` file or a stored stream.
    Verify { target: String },
}

#[derive(Debug, Args)]
pub struct ModCommon {
    #[arg(long)]
    pub key: PathBuf,
    /// The moderation stream to publish in.
    #[arg(long)]
    pub stream: StreamId,
    #[arg(long)]
    pub reason: Option<String>,
    #[arg(long)]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum ModCmd {
    /// Show a target.
    Allow {
        #[command(flatten)]
        common: ModCommon,
        target: Target,
    },
    /// Hide a target.
    Deny {
        #[command(flatten)]
        common: ModCommon,
        target: Target,
    },
    /// Attach a label to a target.
    Label {
        #[command(flatten)]
        common: ModCommon,
        target: Target,
        #[arg(long)]
        label: String,
    },
    /// Attach a score to a target.
    Score {
        #[command(flatten)]
        common: ModCommon,
        target: Target,
        #[arg(long, allow_negative_numbers = true)]
        score: i64,
    },
    /// Pull another moderation stream's actions in.
    Include {
        #[command(flatten)]
        common: ModCommon,
        included: StreamId,
    },
    /// Cut a stream out of this one's includes.
    Exclude {
        #[command(flatten)]
        common: ModCommon,
        excluded: StreamId,
    },
    /// Where two moderation streams agree and disagree.
    Compare {
        #[arg(long)]
        a: StreamId,
        #[arg(long)]
        b: StreamId,
        #[arg(long)]
        forum: Option<String>,
    },
    /// Rank moderation streams for a reader.
    Rank {
        #[arg(long = "candidate")]
        candidates: Vec<StreamId>,
        #[arg(long = "as")]
        reader: Option<PrincipalId>,
        #[arg(long)]
        at: Option<u64>,
    },
}

#[derive(Debug, Args, Default)]
pub struct FeedKnobs {
    #[arg(long = "as")]
    pub reader: Option<PrincipalId>,
    /// Subscription file (SubscriptionSet JSON).
    #[arg(long)]
    pub subs: Option<PathBuf>,
    #[arg(long = "follow")]
    pub follows: Vec<StreamId>,
    #[arg(long = "mute")]
    pub muted: Vec<StreamId>,
    /// Opt out of an unlocked default moderation stream.
    #[arg(long = "disable")]
    pub disabled: Vec<StreamId>,
    /// Leave out one of the forum's own moderation streams.
    #[arg(long = "skip")]
    pub skip: Vec<StreamId>,
    /// `chronological` or `score`.
    #[arg(long)]
    pub sort: Option<String>,
    /// Feed generation time (default: now).
    #[arg(long)]
    pub at: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum FeedCmd {
    /// A forum's moderated feed.
    Forum {
        forum: String,
        #[command(flatten)]
        knobs: FeedKnobs,
    },
    /// Timeline built from followed allow lists.
    Follow {
        #[command(flatten)]
        knobs: FeedKnobs,
    },
    /// What moderation removed from a forum, and why.
    Diff {
        #[arg(long)]
        forum: String,
        #[command(flatten)]
        knobs: FeedKnobs,
    },
}

#[derive(Debug, Subcommand)]
pub enum ForumCmd {
    /// Register a forum.
    Add {
        #[arg(long)]
        id: String,
        #[arg(long = "content", required = true)]
        content: Vec<StreamId>,
        #[arg(long = "moderator")]
        moderators: Vec<StreamId>,
        /// Default moderation stream; append `:locked` to lock it.
        #[arg(long = "default")]
        defaults: Vec<String>,
    },
    /// Forums this node serves.
    List,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Memory,
    Filesystem,
    Remote,
}

#[derive(Debug, Subcommand)]
pub enum StoreCmd {
    /// Register a blob store.
    Add {
        #[arg(long)]
        id: String,
        #[arg(long, value_enum)]
        backend: BackendArg,
        #[arg(long)]
        location: String,
    },
    /// Refuse `hash:<hex>`, `stream:<hex>` or `principal:ed25519:<hex>`.
    Refuse {
        target: RefusalTarget,
        #[arg(long, default_value = LOCAL_STORE_ID)]
        store: String,
    },
    /// Store a file's bytes in the local store and print their hash.
    Put {
        file: PathBuf,
        /// Stream the bytes belong to (checked against refusals).
        #[arg(long)]
        stream: Option<StreamId>,
        #[arg(long)]
        author: Option<PrincipalId>,
    },
    /// Delete blobs no known stream references.
    Gc {
        #[arg(long, default_value = LOCAL_STORE_ID)]
        store: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum SyncCmd {
    /// Pull once from the given peers.
    Once {
        /// Peer base URL (default: configured peers).
        #[arg(long = "peer")]
        peers: Vec<String>,
        #[arg(long = "stream")]
        streams: Vec<StreamId>,
    },
    /// Sync repeatedly.
    Gossip {
        #[arg(long = "peer")]
        peers: Vec<String>,
        #[arg(long, default_value_t = 10)]
        interval: u64,
        /// Stop after this many rounds (default: run forever).
        #[arg(long)]
        rounds: Option<u64>,
    },
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub message: String,
    pub exit: i32,
}

impl CliError {
    fn domain(code: &str, message: impl Into<String>) -> CliError {
        CliError { code: code.to_string(), message: message.into(), exit: 1 }
    }
}

impl From<NodeError> for CliError {
    fn from(e: NodeError) -> Self {
        CliError::domain(e.code(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::domain("IO_ERROR", e.to_string())
    }
}

type CliResult = Result<(), CliError>;

struct Ctx<'a> {
    json: bool,
    data_dir: Option<PathBuf>,
    config: Option<PathBuf>,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn node_config(&self) -> Result<NodeConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => NodeConfig::load(path)?,
            None => NodeConfig::default(),
        };
        if let Some(dir) = &self.data_dir {
            config.data_dir = dir.clone();
        }
        Ok(config)
    }

    fn node(&self) -> Result<Node, CliError> {
        Ok(Node::open(self.node_config()?)?)
    }

    /// Canonical JSON with `--json`, otherwise the human rendering.
    fn emit<T: Serialize>(&mut self, value: &T, human: impl FnOnce(&T) -> String) -> CliResult {
        let text = if self.json {
            String::from_utf8(canonical::to_canonical_bytes(value).map_err(|e| CliError::domain("INTERNAL", e.to_string()))?)
                .expect("utf-8")
        } else {
            human(value)
        };
        writeln!(self.out, "{}", text.trim_end())?;
        Ok(())
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializes")
}

fn read_key(path: &Path) -> Result<Keypair, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::domain("BAD_KEY", format!("{}: {e}", path.display())))?;
    let kf: KeyFile =
        serde_json::from_slice(&bytes).map_err(|e| CliError::domain("BAD_KEY", format!("{}: {e}", path.display())))?;
    kf.to_keypair().map_err(|e| CliError::domain("BAD_KEY", e.to_string()))
}

fn write_key(path: &Path, key: &Keypair) -> CliResult {
    let bytes = canonical::to_canonical_bytes(&KeyFile::from_keypair(key)).expect("key");
    let mut opts = std::fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    std::os::unix::fs::OpenOptionsExt::mode(&mut opts, 0o600);
    opts.open(path)?.write_all(&bytes)?;
    Ok(())
}

fn entry_summary(e: &crate::stream::ContentEntry) -> serde_json::Value {
    serde_json::json!({
        "content_hash": e.content_hash,
        "entry_hash": e.hash(),
        "payload_kind": e.payload_kind,
        "seq": e.seq,
        "stream_id": e.stream_id,
    })
}

fn keygen(ctx: &mut Ctx, seed: Option<String>, out: Option<PathBuf>) -> CliResult {
    let seed = seed
        .map(|s| hex::decode(s.trim()).map_err(|e| CliError { code: "USAGE".into(), message: format!("--seed: {e}"), exit: 2 }))
        .transpose()?;
    let key = Keypair::generate(seed.as_deref()).map_err(|e| CliError { code: "USAGE".into(), message: e.to_string(), exit: 2 })?;
    if let Some(path) = &out {
        write_key(path, &key)?;
    }
    let p = key.principal();
    let v = serde_json::json!({ "principal": p.id(), "public_key": p.public_key_hex() });
    ctx.emit(&v, |_| format!("principal {}\npublic_key {}", p.id(), p.public_key_hex()))
}

fn verify_target(ctx: &mut Ctx, target: &str) -> CliResult {
    let path = Path::new(target);
    let report = if path.exists() {
        let bytes = std::fs::read(path)?;
        match parse_csl(&bytes) {
            Ok(records) => {
                let mut report = verify_stream(&records.genesis, &records.entries);
                if report.ok && records.torn_tail {
                    let seq = records.entries.len() as u64 + 1;
                    report = serde_json::from_value(serde_json::json!({
                        "first_bad_seq": seq, "ok": false, "reasons": ["BAD_SEQ"]
                    }))
                    .expect("report");
                }
                report
            }
            Err(StreamError::Parse { line, message }) => {
                let v = serde_json::json!({
                    "error": message, "first_bad_seq": (line as u64).saturating_sub(1), "ok": false, "reasons": []
                });
                ctx.emit(&v, |_| format!("first_bad_seq={} unparseable line {line}: {message}", line.saturating_sub(1)))?;
                return Err(CliError::domain("VALIDATION_REJECTED", "stream file does not parse"));
            }
            Err(e) => return Err(CliError::domain("VALIDATION_REJECTED", e.to_string())),
        }
    } else {
        let id: StreamId = target
            .parse()
            .map_err(|e| CliError { code: "USAGE".into(), message: format!("`{target}` is neither a file nor a stream id: {e}"), exit: 2 })?;
        ctx.node()?.stream(&id)?.verify()
    };
    ctx.emit(&report, |r| r.to_string())?;
    if report.ok {
        Ok(())
    } else {
        Err(CliError::domain("VALIDATION_REJECTED", format!("verification failed: {report}")))
    }
}

fn stream_cmd(ctx: &mut Ctx, cmd: StreamCmd) -> CliResult {
    match cmd {
        StreamCmd::Create { key, name, kind, writers, scope, timestamp } => {
            let key = read_key(&key)?;
            let kind = match kind {
                KindArg::Content => StreamKind::Content,
                KindArg::Moderation => StreamKind::Moderation,
            };
            let mut node = ctx.node()?;
            let id = node.create_stream_at(&key, &name, kind, &writers, scope, timestamp.unwrap_or_else(now_unix))?;
            ctx.emit(&serde_json::json!({ "stream_id": id }), |_| id.to_string())
        }
        StreamCmd::Append { key, stream, kind, text, file, reply_to, writers, timestamp } => {
            let key = read_key(&key)?;
            let payload = if kind == PayloadKind::WriterUpdate {
                canonical::to_canonical_bytes(&writers).expect("writers")
            } else if let Some(t) = text {
                t.into_bytes()
            } else if let Some(f) = file {
                std::fs::read(f)?
            } else {
                return Err(CliError { code: "USAGE".into(), message: "give --text or --file".into(), exit: 2 });
            };
            let mut node = ctx.node()?;
            let entry = node.append_at(&key, &stream, kind, &payload, reply_to, timestamp.unwrap_or_else(now_unix))?;
            ctx.emit(&entry_summary(&entry), |v| format!("{}:{} {}", entry.stream_id, entry.seq, v["entry_hash"].as_str().unwrap_or("")))
        }
        StreamCmd::Cat { stream, from, to } => {
            let node = ctx.node()?;
            let s = node.stream(&stream)?;
            let entries = s.range(from.unwrap_or(1).max(1), to.unwrap_or(s.head_seq()));
            if ctx.json {
                let v = serde_json::json!({ "entries": entries, "genesis": s.genesis() });
                return ctx.emit(&v, |_| String::new());
            }
            if from.is_none() {
                ctx.out.write_all(&s.genesis().canonical_bytes())?;
                ctx.out.write_all(b"\n")?;
            }
            for e in entries {
                ctx.out.write_all(&e.canonical_bytes())?;
                ctx.out.write_all(b"\n")?;
            }
            Ok(())
        }
        StreamCmd::Verify { target } => verify_target(ctx, &target),
    }
}

fn mod_cmd(ctx: &mut Ctx, cmd: ModCmd) -> CliResult {
    let (common, action) = match cmd {
        ModCmd::Allow { common, target } => (common, ModAction::allow(target)),
        ModCmd::Deny { common, target } => (common, ModAction::deny(target)),
        ModCmd::Label { common, target, label } => (common, ModAction::label(target, &label)),
        ModCmd::Score { common, target, score } => (common, ModAction::score(target, score)),
        ModCmd::Include { common, included } => (common, ModAction::include(included)),
        ModCmd::Exclude { common, excluded } => (common, ModAction::exclude(excluded)),
        ModCmd::Compare { a, b, forum } => {
            let report = ctx.node()?.compare(&a, &b, forum.as_deref())?;
            return ctx.emit(&report, pretty);
        }
        ModCmd::Rank { candidates, reader, at } => {
            let ranking = ctx.node()?.rank_moderators(&candidates, reader.as_ref(), at.unwrap_or_else(now_unix));
            return ctx.emit(&ranking, pretty);
        }
    };
    let action = match common.reason {
        Some(r) => action.with_reason(&r),
        None => action,
    };
    let key = read_key(&common.key)?;
    let mut node = ctx.node()?;
    let entry = node.publish_mod_at(&key, &common.stream, &action, common.timestamp.unwrap_or_else(now_unix))?;
    let mut v = entry_summary(&entry);
    v["action"] = serde_json::to_value(&action).expect("action");
    ctx.emit(&v, |_| format!("{}:{} {:?} {}", entry.stream_id, entry.seq, action.verb, action.target))
}

fn params_of(knobs: &FeedKnobs) -> Result<BTreeMap<String, String>, CliError> {
    let join = |ids: &[StreamId]| ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    let mut p = BTreeMap::new();
    if let Some(path) = &knobs.subs {
        let text = std::fs::read_to_string(path)?;
        p.insert("subs".into(), text);
    }
    p.insert("follows".into(), join(&knobs.follows));
    p.insert("mute".into(), join(&knobs.muted));
    p.insert("disable".into(), join(&knobs.disabled));
    p.insert("skip".into(), join(&knobs.skip));
    if let Some(r) = &knobs.reader {
        p.insert("as".into(), r.to_string());
    }
    if let Some(s) = &knobs.sort {
        p.insert("sort".into(), s.clone());
    }
    if let Some(at) = knobs.at {
        p.insert("at".into(), at.to_string());
    }
    Ok(p)
}

fn api(e: daemon::ApiError) -> CliError {
    CliError::domain(&e.code, e.message)
}

fn render_feed(feed: &Feed) -> String {
    let mut out = String::new();
    for item in &feed.items {
        let text = match &item.payload {
            PayloadView::Resolved { text: Some(t), .. } => t.clone(),
            PayloadView::Resolved { base64, .. } => format!("<{} bytes base64>", base64.len()),
            PayloadView::Unresolved => "<unresolved>".into(),
        };
        let labels: BTreeSet<&str> = item.labels.iter().map(|l| l.label.as_str()).collect();
        let labels = if labels.is_empty() { String::new() } else { format!(" [{}]", labels.into_iter().collect::<Vec<_>>().join(",")) };
        out.push_str(&format!("{}:{} {}{labels}\n", item.entry.stream_id, item.entry.seq, text));
    }
    out.push_str(&format!("{} visible, {} hidden, mode {:?}\n", feed.items.len(), feed.hidden.len(), feed.mode));
    out
}

fn feed_cmd(ctx: &mut Ctx, cmd: FeedCmd) -> CliResult {
    let node = ctx.node()?;
    match cmd {
        FeedCmd::Forum { forum, knobs } => {
            let params = params_of(&knobs)?;
            let subs = daemon::subscriptions_from(&params).map_err(api)?;
            let opts = daemon::feed_options_from(&params).map_err(api)?;
            let skip = knobs.skip.iter().copied().collect();
            let feed = node.forum_feed(&forum, &subs, &skip, opts)?;
            ctx.emit(&feed, render_feed)
        }
        FeedCmd::Follow { knobs } => {
            let params = params_of(&knobs)?;
            let subs = daemon::subscriptions_from(&params).map_err(api)?;
            let opts = daemon::feed_options_from(&params).map_err(api)?;
            ctx.emit(&node.follow_feed(&subs, opts), render_feed)
        }
        FeedCmd::Diff { forum, knobs } => {
            let params = params_of(&knobs)?;
            let subs = daemon::subscriptions_from(&params).map_err(api)?;
            let opts = daemon::feed_options_from(&params).map_err(api)?;
            let skip = knobs.skip.iter().copied().collect();
            let diff = node.forum_diff(&forum, &subs, &skip, opts)?;
            ctx.emit(&diff, |d| {
                let mut s = String::new();
                for h in &d.hidden {
                    s.push_str(&format!("{} {:?}\n", h.entry, h.reason));
                }
                s.push_str(&format!("{} hidden", d.hidden.len()));
                s
            })
        }
    }
}

fn forum_cmd(ctx: &mut Ctx, cmd: ForumCmd) -> CliResult {
    let mut node = ctx.node()?;
    match cmd {
        ForumCmd::Add { id, content, moderators, defaults } => {
            let default_streams = defaults
                .iter()
                .map(|d| {
                    let (raw, locked) = match d.strip_suffix(":locked") {
                        Some(r) => (r, true),
                        None => (d.as_str(), false),
                    };
                    raw.parse()
                        .map(|stream_id| AuthorityStream { locked, stream_id })
                        .map_err(|e| CliError { code: "USAGE".into(), message: format!("--default {d}: {e}"), exit: 2 })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let forum = ForumConfig { content_streams: content, default_streams, forum_id: id.clone(), moderator_streams: moderators };
            node.add_forum(forum)?;
            ctx.emit(&serde_json::json!({ "forum_id": id }), |_| id.clone())
        }
        ForumCmd::List => {
            let forums = node.forums().iter().map(|f| node.forum(&f.forum_id)).collect::<Result<Vec<_>, _>>()?;
            ctx.emit(&serde_json::json!({ "forums": forums }), |v| pretty(v))
        }
    }
}

fn store_cmd(ctx: &mut Ctx, cmd: StoreCmd) -> CliResult {
    let mut node = ctx.node()?;
    match cmd {
        StoreCmd::Add { id, backend, location } => {
            let backend = match backend {
                BackendArg::Memory => Backend::Memory,
                BackendArg::Filesystem => Backend::Filesystem,
                BackendArg::Remote => Backend::Remote,
            };
            node.add_store(BlobStoreConfig { backend, location, refusal: vec![], store_id: id.clone() })?;
            ctx.emit(&serde_json::json!({ "store_id": id }), |_| id.clone())
        }
        StoreCmd::Refuse { target, store } => {
            node.refuse(&store, target.clone())?;
            ctx.emit(&serde_json::json!({ "refused": target }), |_| format!("{store} refuses {target}"))
        }
        StoreCmd::Put { file, stream, author } => {
            let bytes = std::fs::read(&file)?;
            let hash = node.put_blob(&bytes, &Attribution { stream_id: stream, author })?;
            ctx.emit(&serde_json::json!({ "content_hash": hash }), |_| hash.to_string())
        }
        StoreCmd::Gc { store } => {
            let removed = node.gc(&store)?;
            ctx.emit(&serde_json::json!({ "removed": removed }), |_| format!("removed {} blob(s)", removed.len()))
        }
    }
}

fn peers_of(urls: &[String]) -> Vec<PeerAddress> {
    urls.iter().map(|u| PeerAddress { endpoint: u.clone(), node_id: None }).collect()
}

fn sync_cmd(ctx: &mut Ctx, cmd: SyncCmd) -> CliResult {
    let mut node = ctx.node()?;
    match cmd {
        SyncCmd::Once { peers, streams } => {
            let only = (!streams.is_empty()).then(|| streams.into_iter().collect());
            let summary = node.sync_once(&peers_of(&peers), only)?;
            ctx.emit(&summary, pretty)
        }
        SyncCmd::Gossip { peers, interval, rounds } => {
            let peers = peers_of(&peers);
            let mut round = 0;
            loop {
                let summary = node.sync_once(&peers, None)?;
                ctx.emit(&summary, |s| {
                    format!("round {round}: {} entries, {} streams changed", s.report.entries_transferred, s.streams_changed.len())
                })?;
                round += 1;
                if rounds.is_some_and(|r| round >= r) {
                    return Ok(());
                }
                std::thread::sleep(Duration::from_secs(interval));
            }
        }
    }
}

fn simulate(ctx: &mut Ctx, scenario: &Path, trace: Option<PathBuf>) -> CliResult {
    let bytes = std::fs::read(scenario)?;
    let scenario: SimScenario =
        serde_json::from_slice(&bytes).map_err(|e| CliError::domain("BAD_CONFIG", format!("{}: {e}", scenario.display())))?;
    let result = sim::run_simulation(&scenario.config, &scenario.script)
        .map_err(|e| CliError::domain("BAD_CONFIG", e.to_string()))?;
    let trace_bytes = result.trace_bytes();
    let summary: BTreeMap<String, serde_json::Value> = result
        .final_heads
        .first()
        .into_iter()
        .flat_map(|h| h.keys())
        .map(|id| {
            let v = serde_json::json!({
                "converged_at": result.converged_at.get(id).copied().flatten(),
                "rounds": result.rounds_to_converge(id),
            });
            (id.to_string(), v)
        })
        .collect();
    let v = serde_json::json!({
        "all_converged": result.all_converged(),
        "gossip_interval": result.gossip_interval,
        "streams": summary,
        "trace_events": result.trace.len(),
    });
    match trace {
        Some(path) => std::fs::write(path, &trace_bytes)?,
        None if !ctx.json => ctx.out.write_all(&trace_bytes)?,
        None => {}
    }
    ctx.emit(&v, |v| pretty(v))
}

fn dispatch(ctx: &mut Ctx, command: Command) -> CliResult {
    match command {
        Command::Keygen { seed, out } => keygen(ctx, seed, out),
        Command::Stream(cmd) => stream_cmd(ctx, cmd),
        Command::Mod(cmd) => mod_cmd(ctx, cmd),
        Command::Feed(cmd) => feed_cmd(ctx, cmd),
        Command::Forum(cmd) => forum_cmd(ctx, cmd),
        Command::Store(cmd) => store_cmd(ctx, cmd),
        Command::Sync(cmd) => sync_cmd(ctx, cmd),
        Command::Export { out, streams, include_keys, created_at } => {
            let keys = include_keys.iter().map(|p| read_key(p)).collect::<Result<Vec<_>, _>>()?;
            let selector = if streams.is_empty() { Selector::All } else { Selector::Streams(streams) };
            let manifest = ctx.node()?.export(&selector, &out, &keys, created_at.unwrap_or_else(now_unix))?;
            ctx.emit(&manifest, |m| format!("exported {} stream(s), {} blob(s); digest {}", m.streams.len(), m.blobs.len(), m.bundle_digest))
        }
        Command::Import { dir } => {
            let report = ctx.node()?.import(&dir)?;
            ctx.emit(&report, pretty)
        }
        Command::SwitchProvider { stream, from, to, key } => {
            let issuer = key.map(|k| read_key(&k)).transpose()?;
            let report = ctx.node()?.switch_provider(&stream, &from, &to, issuer.as_ref())?;
            ctx.emit(&report, pretty)
        }
        Command::Serve { listen, gossip_every } => {
            let mut config = ctx.node_config()?;
            if let Some(l) = listen {
                config.listen_addr = l;
            }
            daemon::serve(config, ServeOptions { gossip_every: gossip_every.map(Duration::from_secs) })?;
            Ok(())
        }
        Command::Simulate { scenario, trace } => simulate(ctx, &scenario, trace),
    }
}

/// Runs the CLI on `args` (including the program name); returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            let _ = if code == 0 { out.write_all(rendered.as_bytes()) } else { err.write_all(rendered.as_bytes()) };
            return code;
        }
    };
    let json = cli.json;
    let mut ctx = Ctx { json, data_dir: cli.data_dir, config: cli.config, out };
    match dispatch(&mut ctx, cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let _ = if json {
                let v = serde_json::json!({ "code": e.code, "message": e.message });
                writeln!(err, "{}", String::from_utf8(canonical::to_canonical_bytes(&v).expect("error")).expect("utf-8"))
            } else {
                writeln!(err, "error [{}]: {}", e.code, e.message)
            };
            e.exit
        }
    }
}

/// Entry point for the `plurinet` binary.
pub fn main() -> ! {
    let code = run(std::env::args_os(), &mut std::io::stdout().lock(), &mut std::io::stderr().lock());
    std::process::exit(code)
}
