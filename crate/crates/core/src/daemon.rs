//! The node's HTTP API. Every body is canonical JSON except blob payloads.
//!
//! Reads take a snapshot of the index under a short read lock. Writes are
//! serialized by the node's write lock. Sync talks to peers with no lock
//! held and merges the result afterwards.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::aggregator::{FeedOptions, ForumConfig, SortMode, SubscriptionSet};
use crate::canonical;
use crate::hash::Hash;
use crate::identity::{Principal, PrincipalId};
use crate::migration::{self, Selector};
use crate::node::{Node, NodeConfig, NodeError, LOCAL_STORE_ID};
use crate::storage::{Attribution, BlobStoreConfig, RefusalTarget};
use crate::stream::{now_unix, ContentEntry, ForkEvidence, GenesisRecord, StreamId, StreamState};
use crate::sync::{HeadInfo, PeerAddress, SyncKind, SyncMessage};

type Params = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub http_status: u16,
    pub message: String,
}

impl ApiError {
    pub fn new(code: &str, http_status: u16, message: impl Into<String>) -> ApiError {
        ApiError { code: code.to_string(), http_status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> ApiError {
        ApiError::new("VALIDATION_REJECTED", 400, message)
    }
}

impl From<NodeError> for ApiError {
    fn from(e: NodeError) -> Self {
        ApiError::new(e.code(), e.http_status(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, [(header::CONTENT_TYPE, "application/json")], canonical::to_canonical_bytes(&self).expect("error"))
            .into_response()
    }
}

fn json<T: Serialize>(value: &T) -> Response {
    match canonical::to_canonical_bytes(value) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => ApiError::new("INTERNAL", 500, e.to_string()).into_response(),
    }
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("body: {e}")))
}

fn parse_param<T: std::str::FromStr>(params: &Params, key: &str) -> Result<Option<T>, ApiError>
where
    T::Err: std::fmt::Display,
{
    params
        .get(key)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse().map_err(|e| ApiError::bad_request(format!("`{key}`: {e}"))))
        .transpose()
}

fn parse_list<T: std::str::FromStr + Ord>(params: &Params, key: &str) -> Result<BTreeSet<T>, ApiError>
where
    T::Err: std::fmt::Display,
{
    let Some(raw) = params.get(key) else { return Ok(BTreeSet::new()) };
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| ApiError::bad_request(format!("`{key}`: {e}"))))
        .collect()
}

/// The state kept for one running daemon.
pub struct AppState {
    node: RwLock<Node>,
}

type Shared = Arc<AppState>;

impl AppState {
    pub fn new(node: Node) -> Shared {
        Arc::new(AppState { node: RwLock::new(node) })
    }

    fn read<T>(&self, f: impl FnOnce(&Node) -> Result<T, NodeError>) -> Result<T, ApiError> {
        let node = self.node.read().unwrap_or_else(|p| p.into_inner());
        Ok(f(&node)?)
    }

    fn write<T>(&self, f: impl FnOnce(&mut Node) -> Result<T, NodeError>) -> Result<T, ApiError> {
        let mut node = self.node.write().unwrap_or_else(|p| p.into_inner());
        Ok(f(&mut node)?)
    }
}

async fn blocking<T: Send + 'static>(
    state: Shared,
    f: impl FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError::new("INTERNAL", 500, e.to_string()))?
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub principal: PrincipalId,
    pub public_key: String,
    pub status: String,
    pub streams: usize,
}

/// `GET /streams/{id}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fork_evidence: Option<ForkEvidence>,
    pub forked: bool,
    pub genesis: GenesisRecord,
    pub head_hash: Hash,
    pub head_seq: u64,
    pub stream_id: StreamId,
    pub writers: Vec<Principal>,
}

impl StreamInfo {
    pub fn of(s: &StreamState) -> StreamInfo {
        StreamInfo {
            fork_evidence: s.fork_evidence().cloned(),
            forked: s.is_forked(),
            genesis: s.genesis().clone(),
            head_hash: s.head_hash(),
            head_seq: s.head_seq(),
            stream_id: s.stream_id(),
            writers: s.writers().iter().cloned().collect(),
        }
    }
}

/// Body of `POST /streams/{id}/entries`: a bare signed entry, or the entry
/// with its payload so the node stores both.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EntrySubmission {
    WithPayload {
        entry: ContentEntry,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        payload_base64: Option<String>,
    },
    Bare(ContentEntry),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefuseRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_id: Option<String>,
    pub target: RefusalTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchRequest {
    pub from: String,
    pub stream_id: StreamId,
    pub to: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncRequest {
    #[serde(default)]
    pub peers: Vec<PeerAddress>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub streams: Option<BTreeSet<StreamId>>,
}

/// A migration bundle in one JSON document: relative path → base64 bytes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleArchive {
    pub files: BTreeMap<String, String>,
}

impl BundleArchive {
    pub fn pack(root: &Path) -> Result<BundleArchive, NodeError> {
        let mut files = BTreeMap::new();
        for rel in migration::bundle_files(root)? {
            let bytes = std::fs::read(root.join(&rel))?;
            files.insert(rel.to_string_lossy().replace('\\', "/"), base64::engine::general_purpose::STANDARD.encode(bytes));
        }
        Ok(BundleArchive { files })
    }

    pub fn unpack(&self, root: &Path) -> Result<(), NodeError> {
        for (rel, b64) in &self.files {
            let safe = Path::new(rel)
                .components()
                .all(|c| matches!(c, std::path::Component::Normal(_)));
            if !safe {
                return Err(NodeError::Validation(format!("bundle path `{rel}` escapes the bundle")));
            }
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| NodeError::Validation(format!("{rel}: {e}")))?;
            let path = root.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, bytes)?;
        }
        Ok(())
    }
}

/// Feed knobs shared by the feed endpoints and the CLI.
pub fn subscriptions_from(params: &Params) -> Result<SubscriptionSet, ApiError> {
    let mut subs = match params.get("subs").map(|s| s.trim()) {
        Some(s) if s.starts_with('{') => parse_body::<SubscriptionSet>(s.as_bytes())?,
        _ => SubscriptionSet { follows: parse_list(params, "subs")?, ..SubscriptionSet::default() },
    };
    subs.follows.extend(parse_list::<StreamId>(params, "follows")?);
    subs.follows.extend(parse_list::<StreamId>(params, "follow")?);
    subs.muted.extend(parse_list::<StreamId>(params, "mute")?);
    subs.disabled_defaults.extend(parse_list::<StreamId>(params, "disable")?);
    if let Some(user) = parse_param::<PrincipalId>(params, "as")? {
        subs.user = Some(user);
    }
    subs.validate().map_err(ApiError::bad_request)?;
    Ok(subs)
}

pub fn feed_options_from(params: &Params) -> Result<FeedOptions, ApiError> {
    let mut opts = FeedOptions::at(parse_param(params, "at")?.unwrap_or_else(now_unix));
    match params.get("sort").map(String::as_str) {
        None | Some("") | Some("chronological") | Some("CHRONOLOGICAL") => {}
        Some("score") | Some("SCORE_WEIGHTED") => opts.sort = SortMode::ScoreWeighted,
        Some(other) => return Err(ApiError::bad_request(format!("unknown sort `{other}`"))),
    }
    if let Some(d) = parse_param(params, "depth")? {
        opts.depth_limit = d;
    }
    Ok(opts)
}

fn stream_id(raw: &str) -> Result<StreamId, ApiError> {
    raw.parse().map_err(|e| ApiError::bad_request(format!("stream id: {e}")))
}

async fn health(State(st): State<Shared>) -> Result<Response, ApiError> {
    let h = st.read(|n| {
        Ok(Health {
            principal: n.principal().id(),
            public_key: n.principal().public_key_hex(),
            status: "ok".into(),
            streams: n.streams().len(),
        })
    })?;
    Ok(json(&h))
}

async fn list_streams(State(st): State<Shared>) -> Result<Response, ApiError> {
    let infos = st.read(|n| Ok(n.streams().values().map(StreamInfo::of).collect::<Vec<_>>()))?;
    Ok(json(&serde_json::json!({ "streams": infos })))
}

async fn create_stream(State(st): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let genesis: GenesisRecord = parse_body(&body)?;
    let id = blocking(st, move |st| st.write(|n| n.submit_genesis(genesis))).await?;
    Ok((StatusCode::CREATED, json(&serde_json::json!({ "stream_id": id }))).into_response())
}

async fn get_stream(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let id = stream_id(&id)?;
    Ok(json(&st.read(|n| n.stream(&id).map(StreamInfo::of))?))
}

async fn get_entries(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(params): Query<Params>,
) -> Result<Response, ApiError> {
    let id = stream_id(&id)?;
    let from: u64 = parse_param(&params, "from")?.unwrap_or(1);
    let to: Option<u64> = parse_param(&params, "to")?;
    let entries = st.read(|n| {
        let s = n.stream(&id)?;
        Ok(s.range(from.max(1), to.unwrap_or(s.head_seq())).to_vec())
    })?;
    Ok(json(&serde_json::json!({ "entries": entries, "stream_id": id })))
}

async fn post_entry(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let id = stream_id(&id)?;
    let (entry, payload) = match parse_body::<EntrySubmission>(&body)? {
        EntrySubmission::Bare(e) => (e, None),
        EntrySubmission::WithPayload { entry, payload_base64 } => {
            let payload = payload_base64
                .map(|b| base64::engine::general_purpose::STANDARD.decode(b))
                .transpose()
                .map_err(|e| ApiError::bad_request(format!("payload_base64: {e}")))?;
            (entry, payload)
        }
    };
    if entry.stream_id != id {
        return Err(ApiError::bad_request("entry belongs to a different stream"));
    }
    let accepted = blocking(st, move |st| st.write(|n| n.submit_entry(entry, payload.as_deref()))).await?;
    Ok((StatusCode::CREATED, json(&serde_json::json!({ "entry_hash": accepted.hash(), "seq": accepted.seq })))
        .into_response())
}

async fn get_blob(State(st): State<Shared>, UrlPath(hash): UrlPath<String>) -> Result<Response, ApiError> {
    let hash: Hash = hash.parse().map_err(|e| ApiError::bad_request(format!("hash: {e}")))?;
    match st.read(|n| n.held_blob(&hash))? {
        Some(bytes) => Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response()),
        None => Err(ApiError::new("NOT_FOUND", 404, format!("blob {hash}"))),
    }
}

async fn post_blob(State(st): State<Shared>, Query(params): Query<Params>, body: Bytes) -> Result<Response, ApiError> {
    let attribution = Attribution { stream_id: parse_param(&params, "stream")?, author: parse_param(&params, "author")? };
    let hash = blocking(st, move |st| st.write(|n| n.put_blob(&body, &attribution))).await?;
    Ok((StatusCode::CREATED, json(&serde_json::json!({ "content_hash": hash }))).into_response())
}

fn signed_reply(n: &Node, msg: SyncMessage) -> Vec<u8> {
    msg.signed(n.key()).to_bytes()
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn sync_head(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let id = stream_id(&id)?;
    let bytes = st.read(|n| {
        let s = n.stream(&id)?;
        let msg = SyncMessage { head: Some(HeadInfo::of(s)), stream_id: Some(id), ..SyncMessage::new(SyncKind::HeadResponse) };
        Ok(signed_reply(n, msg))
    })?;
    Ok(json_bytes(bytes))
}

async fn sync_heads(State(st): State<Shared>) -> Result<Response, ApiError> {
    let bytes = st.read(|n| {
        let heads = n.streams().values().map(HeadInfo::of).collect();
        Ok(signed_reply(n, SyncMessage { heads: Some(heads), ..SyncMessage::new(SyncKind::HeadResponse) }))
    })?;
    Ok(json_bytes(bytes))
}

async fn sync_entries(State(st): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: SyncMessage = parse_body(&body)?;
    if req.kind != SyncKind::EntriesRequest || !req.signature_ok() {
        return Err(ApiError::bad_request("expected a validly signed ENTRIES_REQUEST"));
    }
    let id = req.stream_id.ok_or_else(|| ApiError::bad_request("stream_id missing"))?;
    let bytes = st.read(|n| {
        let s = n.stream(&id)?;
        let from = req.from_seq.unwrap_or(1).max(1);
        let to = req.to_seq.unwrap_or(s.head_seq());
        let msg = SyncMessage {
            entries: Some(s.range(from, to).to_vec()),
            from_seq: Some(from),
            stream_id: Some(id),
            to_seq: Some(to),
            ..SyncMessage::new(SyncKind::EntriesResponse)
        };
        Ok(signed_reply(n, msg))
    })?;
    Ok(json_bytes(bytes))
}

/// Runs one sync round without holding the node lock while peers answer.
pub fn sync_round(st: &AppState, req: SyncRequest) -> Result<crate::node::SyncSummary, ApiError> {
    let job = st.read(|n| n.pull_job(&req.peers, req.streams.clone()))?;
    let pull = job.run();
    let mut summary = pull.summary();
    summary.streams_changed = st.write(|n| n.absorb_pull(pull))?;
    Ok(summary)
}

async fn sync_once(State(st): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: SyncRequest = if body.is_empty() { SyncRequest::default() } else { parse_body(&body)? };
    Ok(json(&blocking(st, move |st| sync_round(st, req)).await?))
}

async fn forum_feed(
    State(st): State<Shared>,
    UrlPath(forum): UrlPath<String>,
    Query(params): Query<Params>,
) -> Result<Response, ApiError> {
    let subs = subscriptions_from(&params)?;
    let skip = parse_list(&params, "skip")?;
    let opts = feed_options_from(&params)?;
    let feed = blocking(st, move |st| st.read(|n| n.forum_feed(&forum, &subs, &skip, opts))).await?;
    Ok(json(&feed))
}

async fn follow_feed(State(st): State<Shared>, Query(params): Query<Params>) -> Result<Response, ApiError> {
    let subs = subscriptions_from(&params)?;
    let opts = feed_options_from(&params)?;
    let feed = blocking(st, move |st| st.read(|n| Ok(n.follow_feed(&subs, opts)))).await?;
    Ok(json(&feed))
}

async fn feed_diff(State(st): State<Shared>, Query(params): Query<Params>) -> Result<Response, ApiError> {
    let forum = params.get("forum").cloned().ok_or_else(|| ApiError::bad_request("`forum` is required"))?;
    match params.get("against").map(String::as_str) {
        None | Some("raw") => {}
        Some(other) => return Err(ApiError::bad_request(format!("cannot diff against `{other}`; only `raw`"))),
    }
    let subs = subscriptions_from(&params)?;
    let skip = parse_list(&params, "skip")?;
    let opts = feed_options_from(&params)?;
    let diff = blocking(st, move |st| st.read(|n| n.forum_diff(&forum, &subs, &skip, opts))).await?;
    Ok(json(&diff))
}

async fn list_forums(State(st): State<Shared>) -> Result<Response, ApiError> {
    let forums = st.read(|n| {
        n.forums().iter().map(|f| n.forum(&f.forum_id)).collect::<Result<Vec<_>, _>>()
    })?;
    Ok(json(&serde_json::json!({ "forums": forums })))
}

async fn add_forum(State(st): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let forum: ForumConfig = parse_body(&body)?;
    let id = forum.forum_id.clone();
    blocking(st, move |st| st.write(|n| n.add_forum(forum))).await?;
    Ok((StatusCode::CREATED, json(&serde_json::json!({ "forum_id": id }))).into_response())
}

async fn rank(State(st): State<Shared>, Query(params): Query<Params>) -> Result<Response, ApiError> {
    let candidates: Vec<StreamId> = parse_list(&params, "candidates")?.into_iter().collect();
    let who: Option<PrincipalId> = parse_param(&params, "as")?;
    let now = parse_param(&params, "at")?.unwrap_or_else(now_unix);
    let ranking = blocking(st, move |st| st.read(|n| Ok(n.rank_moderators(&candidates, who.as_ref(), now)))).await?;
    Ok(json(&ranking))
}

async fn compare(State(st): State<Shared>, Query(params): Query<Params>) -> Result<Response, ApiError> {
    let a: StreamId = parse_param(&params, "a")?.ok_or_else(|| ApiError::bad_request("`a` is required"))?;
    let b: StreamId = parse_param(&params, "b")?.ok_or_else(|| ApiError::bad_request("`b` is required"))?;
    let forum = params.get("forum").filter(|f| !f.is_empty()).cloned();
    let report = blocking(st, move |st| st.read(|n| n.compare(&a, &b, forum.as_deref()))).await?;
    Ok(json(&report))
}

async fn refuse(State(st): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: RefuseRequest = parse_body(&body)?;
    let store = req.store_id.unwrap_or_else(|| LOCAL_STORE_ID.into());
    let target = req.target.clone();
    blocking(st, move |st| st.write(|n| n.refuse(&store, req.target))).await?;
    Ok(json(&serde_json::json!({ "refused": target })))
}

async fn add_store(State(st): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let config: BlobStoreConfig = parse_body(&body)?;
    let id = config.store_id.clone();
    blocking(st, move |st| st.write(|n| n.add_store(config))).await?;
    Ok((StatusCode::CREATED, json(&serde_json::json!({ "store_id": id }))).into_response())
}

async fn gc(State(st): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: GcRequest = if body.is_empty() { GcRequest { store_id: None } } else { parse_body(&body)? };
    let store = req.store_id.unwrap_or_else(|| LOCAL_STORE_ID.into());
    let removed = blocking(st, move |st| st.write(|n| n.gc(&store))).await?;
    Ok(json(&serde_json::json!({ "removed": removed })))
}

async fn switch_provider(State(st): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: SwitchRequest = parse_body(&body)?;
    let report =
        blocking(st, move |st| st.write(|n| n.switch_provider(&req.stream_id, &req.from, &req.to, None))).await?;
    Ok(json(&report))
}

async fn export(State(st): State<Shared>, Query(params): Query<Params>) -> Result<Response, ApiError> {
    let streams: BTreeSet<StreamId> = parse_list(&params, "streams")?;
    let selector = if streams.is_empty() { Selector::All } else { Selector::Streams(streams.into_iter().collect()) };
    let created_at = parse_param(&params, "created_at")?.unwrap_or_else(now_unix);
    let archive = blocking(st, move |st| {
        let dir = tempfile::tempdir().map_err(NodeError::from)?;
        let out = dir.path().join("bundle");
        st.read(|n| n.export(&selector, &out, &[], created_at))?;
        Ok(BundleArchive::pack(&out)?)
    })
    .await?;
    Ok(json(&archive))
}

async fn import(State(st): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let archive: BundleArchive = parse_body(&body)?;
    let report = blocking(st, move |st| {
        let dir = tempfile::tempdir().map_err(NodeError::from)?;
        archive.unpack(dir.path())?;
        st.write(|n| n.import(dir.path()))
    })
    .await?;
    Ok(json(&report))
}

async fn not_found() -> ApiError {
    ApiError::new("NOT_FOUND", 404, "no such endpoint")
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/streams", get(list_streams).post(create_stream))
        .route("/streams/{id}", get(get_stream))
        .route("/streams/{id}/entries", get(get_entries).post(post_entry))
        .route("/blobs", post(post_blob))
        .route("/blobs/{hash}", get(get_blob))
        .route("/sync/head/{id}", get(sync_head))
        .route("/sync/heads", get(sync_heads))
        .route("/sync/entries", post(sync_entries))
        .route("/sync/once", post(sync_once))
        .route("/feeds/forum/{forum_id}", get(forum_feed))
        .route("/feeds/follow", get(follow_feed))
        .route("/feeds/diff", get(feed_diff))
        .route("/forums", get(list_forums).post(add_forum))
        .route("/moderators/rank", get(rank))
        .route("/mod/compare", get(compare))
        .route("/admin/refuse", post(refuse))
        .route("/admin/stores", post(add_store))
        .route("/admin/gc", post(gc))
        .route("/admin/switch-provider", post(switch_provider))
        .route("/export", get(export))
        .route("/import", post(import))
        .fallback(not_found)
        .with_state(state)
}

#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    /// Run a sync round against the configured peers this often.
    pub gossip_every: Option<Duration>,
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

fn spawn_gossip(state: Shared, every: Duration) {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        tick.tick().await;
        loop {
            tick.tick().await;
            let st = state.clone();
            let _ = tokio::task::spawn_blocking(move || sync_round(&st, SyncRequest::default())).await;
        }
    });
}

/// Opens the node and serves until SIGTERM or Ctrl-C. Entry writes are
/// already durable when acknowledged, so shutdown only drains requests.
pub fn serve(config: NodeConfig, opts: ServeOptions) -> Result<(), NodeError> {
    let listen = config.listen_addr.clone();
    let node = Node::open(config)?;
    for note in node.recovery_notes() {
        eprintln!("recovery: {note}");
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&listen)
            .await
            .map_err(|e| NodeError::Config(format!("cannot listen on {listen}: {e}")))?;
        let state = AppState::new(node);
        if let Some(every) = opts.gossip_every {
            spawn_gossip(state.clone(), every);
        }
        eprintln!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state)).with_graceful_shutdown(shutdown_signal()).await?;
        Ok(())
    })
}

/// A daemon running on a background thread, stopped on drop.
pub struct DaemonHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl DaemonHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for DaemonHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Serves `node` on `addr` (port 0 picks a free port) from a background thread.
pub fn spawn(node: Node, addr: &str) -> Result<DaemonHandle, NodeError> {
    let listener = std::net::TcpListener::bind(addr).map_err(|e| NodeError::Config(format!("cannot listen on {addr}: {e}")))?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let state = AppState::new(node);
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().expect("runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            let _ = axum::serve(listener, router(state))
                .with_graceful_shutdown(async move {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(DaemonHandle { addr: local, shutdown: Some(tx), thread: Some(thread) })
}
