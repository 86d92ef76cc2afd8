//! Durable per-trajectory persistence for snippets, vocabularies, scope state
//! and embeddings. Every mutation goes through here.
//!
//! Layout under `<root>/<trajectory_id>/`:
//!
//! - `manifest.json`: counts, vocabulary versions, current file names and a
//!   CRC32 plus byte length for each live file. Replaced atomically.
//! - `snippets.g<N>.jsonl`: one snippet record per line; a new generation is
//!   written whenever stored intents are rewritten, older ones are kept.
//! - `embeddings.jsonl`: append-only embedding records.
//! - `state.<N>.json`: vocabularies, scope state and session counters.
//! - `vocab_<kind>.g<N>.jsonl`: archived vocabulary generations.
//! - `LOCK`: held exclusively by the single writer.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingIndex, EmbeddingRecord};
use crate::model::{
    ContextualIntent, Inventories, InvariantViolation, LabelKind, LabelVocabulary, MemorySnippet,
    ScopeState, DEFAULT_MAX_SUMMARY_CHARS,
};
use crate::records::{from_line, to_line, Record, RecordError};
use crate::text::normalize_label;

const MANIFEST: &str = "manifest.json";
const EMBEDDINGS: &str = "embeddings.jsonl";
const LOCK: &str = "LOCK";
const VIEW_RETRIES: usize = 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("trajectory `{0}` not found")]
    NotFound(String),
    #[error("invalid trajectory id `{0}`")]
    InvalidId(String),
    #[error("out-of-order snippet: expected step {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("trajectory `{0}` is locked by another writer")]
    Locked(String),
    #[error("corruption detected in {file}: {detail}")]
    CorruptionDetected { file: String, detail: String },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("invalid snippet: {0}")]
    InvalidSnippet(#[from] InvariantViolation),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("injected failure at {0:?}")]
    Injected(FailPoint),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabVersions {
    pub event: u64,
    pub entity: u64,
}

impl VocabVersions {
    fn get(&self, kind: LabelKind) -> u64 {
        match kind {
            LabelKind::Event => self.event,
            LabelKind::EntityType => self.entity,
        }
    }

    fn bump(&mut self, kind: LabelKind) {
        match kind {
            LabelKind::Event => self.event += 1,
            LabelKind::EntityType => self.entity += 1,
        }
    }
}

/// Vocabularies, scope state and counters of one ingestion session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub event_vocab: LabelVocabulary,
    pub entity_vocab: LabelVocabulary,
    pub scope: ScopeState,
    pub seeded: bool,
    pub consolidations: u64,
    pub last_consolidated_at: u64,
    pub vocab_versions: VocabVersions,
}

impl Default for SessionState {
    fn default() -> Self {
        Self {
            event_vocab: LabelVocabulary::new(LabelKind::Event),
            entity_vocab: LabelVocabulary::new(LabelKind::EntityType),
            scope: ScopeState::default(),
            seeded: false,
            consolidations: 0,
            last_consolidated_at: 0,
            vocab_versions: VocabVersions::default(),
        }
    }
}

impl SessionState {
    pub fn vocab(&self, kind: LabelKind) -> &LabelVocabulary {
        match kind {
            LabelKind::Event => &self.event_vocab,
            LabelKind::EntityType => &self.entity_vocab,
        }
    }

    pub fn vocab_mut(&mut self, kind: LabelKind) -> &mut LabelVocabulary {
        match kind {
            LabelKind::Event => &mut self.event_vocab,
            LabelKind::EntityType => &mut self.entity_vocab,
        }
    }

    pub fn inventories(&self) -> Inventories {
        Inventories {
            scopes: self.scope.scope_inventory.clone(),
            event_types: self.event_vocab.label_list(),
            entity_types: self.entity_vocab.label_list(),
        }
    }
}

impl Record for SessionState {
    const KIND: &'static str = "session_state";
}

/// Stable id shared by a snippet and its summary embedding.
pub fn snippet_id(step_index: u64) -> String {
    format!("snippet:{step_index}")
}

/// Embedding id of a vocabulary label.
pub fn label_embedding_id(kind: LabelKind, label: &str) -> String {
    format!("{}:{}", kind.as_str(), normalize_label(label))
}

/// In-memory contents of one trajectory plus the validation and mutation
/// rules shared by every backend.
#[derive(Debug, Clone, Default)]
pub struct MemoryState {
    pub snippets: Vec<MemorySnippet>,
    pub session: SessionState,
    pub index: EmbeddingIndex,
    pub max_summary_chars: usize,
}

impl MemoryState {
    pub fn new(max_summary_chars: usize) -> Self {
        Self {
            max_summary_chars,
            ..Self::default()
        }
    }

    fn check_intent(&self, intent: &ContextualIntent, session: &SessionState) -> Result<(), StoreError> {
        intent
            .validate_against(&session.event_vocab, &session.entity_vocab)
            .map_err(StoreError::from)
    }

    fn check_embeddings(&self, embeddings: &[EmbeddingRecord]) -> Result<(), StoreError> {
        let mut scratch: Option<EmbeddingIndex> = None;
        for e in embeddings {
            let idx = scratch.as_ref().unwrap_or(&self.index);
            if let Err(err) = idx.check(e) {
                return Err(err.into());
            }
            if embeddings.len() > 1 {
                let s = scratch.get_or_insert_with(|| self.index.clone());
                s.insert(e.clone())?;
            }
        }
        Ok(())
    }

    pub fn check_append(
        &self,
        snippet: &MemorySnippet,
        embeddings: &[EmbeddingRecord],
        session: &SessionState,
    ) -> Result<(), StoreError> {
        let expected = self.snippets.len() as u64;
        if snippet.step_index() != expected {
            return Err(StoreError::OutOfOrder {
                expected,
                got: snippet.step_index(),
            });
        }
        snippet.validate(self.max_summary_chars)?;
        self.check_intent(&snippet.intent, session)?;
        self.check_embeddings(embeddings)?;
        let has_embedding = self.index.contains(&snippet.summary_embedding_id)
            || embeddings.iter().any(|e| e.id == snippet.summary_embedding_id);
        if !has_embedding {
            return Err(InvariantViolation {
                rule: "missing-embedding",
                detail: snippet.summary_embedding_id.clone(),
            }
            .into());
        }
        Ok(())
    }

    fn insert_embeddings(&mut self, embeddings: Vec<EmbeddingRecord>) -> Vec<EmbeddingRecord> {
        embeddings
            .into_iter()
            .filter(|e| matches!(self.index.insert(e.clone()), Ok(true)))
            .collect()
    }

    pub fn apply_append(&mut self, snippet: MemorySnippet, embeddings: Vec<EmbeddingRecord>, session: SessionState) -> Vec<EmbeddingRecord> {
        let added = self.insert_embeddings(embeddings);
        self.snippets.push(snippet);
        self.session = session;
        added
    }

    /// Validates a remap (absorbed -> survivor) against the current vocabulary.
    pub fn check_remap(&self, kind: LabelKind, remap: &BTreeMap<String, String>) -> Result<(), StoreError> {
        let vocab = self.session.vocab(kind);
        let absorbed: BTreeSet<String> = remap.keys().map(|k| normalize_label(k)).collect();
        for (from, to) in remap {
            if !vocab.contains(from) {
                return Err(StoreError::UnknownLabel(from.clone()));
            }
            if !vocab.contains(to) {
                return Err(StoreError::UnknownLabel(to.clone()));
            }
            if normalize_label(from) == normalize_label(to) || absorbed.contains(&normalize_label(to)) {
                return Err(StoreError::UnknownLabel(format!("{from} -> {to}")));
            }
        }
        Ok(())
    }

    /// Merges vocabulary entries and rewrites every stored intent. Returns
    /// the number of snippets whose intent changed.
    pub fn apply_remap(&mut self, kind: LabelKind, remap: &BTreeMap<String, String>, at_step: u64) -> usize {
        let vocab = self.session.vocab_mut(kind);
        let mut resolved: BTreeMap<String, String> = BTreeMap::new();
        for (from, to) in remap {
            let to_stored = vocab.find(to).unwrap_or(to).to_string();
            resolved.insert(normalize_label(from), to_stored.clone());
            let _ = vocab.merge(from, &to_stored, at_step);
        }
        self.session.vocab_versions.bump(kind);
        let mut changed = 0;
        for s in &mut self.snippets {
            let before = s.intent.clone();
            remap_intent(&mut s.intent, kind, &resolved);
            if s.intent != before {
                changed += 1;
            }
        }
        changed
    }

    pub fn check_relabel(&self, updates: &[(u64, ContextualIntent)], embeddings: &[EmbeddingRecord], session: &SessionState) -> Result<(), StoreError> {
        for (step, intent) in updates {
            if *step >= self.snippets.len() as u64 {
                return Err(StoreError::OutOfOrder {
                    expected: self.snippets.len() as u64,
                    got: *step,
                });
            }
            intent.validate()?;
            self.check_intent(intent, session)?;
        }
        self.check_embeddings(embeddings)
    }

    pub fn apply_relabel(&mut self, updates: &[(u64, ContextualIntent)], embeddings: Vec<EmbeddingRecord>, session: SessionState) -> Vec<EmbeddingRecord> {
        for (step, intent) in updates {
            self.snippets[*step as usize].intent = intent.clone();
        }
        self.session = session;
        self.insert_embeddings(embeddings)
    }

    pub fn view(&self, trajectory_id: &str) -> StoreView {
        StoreView {
            trajectory_id: trajectory_id.to_string(),
            snippets: Arc::new(self.snippets.clone()),
            session: Arc::new(self.session.clone()),
            index: Arc::new(self.index.clone()),
        }
    }
}

fn remap_intent(intent: &mut ContextualIntent, kind: LabelKind, resolved: &BTreeMap<String, String>) {
    match kind {
        LabelKind::Event => {
            if let Some(to) = resolved.get(&normalize_label(&intent.event_type)) {
                intent.event_type = to.clone();
            }
        }
        LabelKind::EntityType => {
            intent.entity_types = intent
                .entity_types
                .iter()
                .map(|e| resolved.get(&normalize_label(e)).cloned().unwrap_or_else(|| e.clone()))
                .collect();
        }
    }
}

/// Mutation funnel used by ingestion; implemented in memory and on disk.
pub trait Backend: Send {
    fn state(&self) -> &MemoryState;
    /// Appends one snippet with its new embeddings and the session state
    /// after the step. Returns the stored snippet id.
    fn append(&mut self, snippet: MemorySnippet, embeddings: Vec<EmbeddingRecord>, session: SessionState) -> Result<String, StoreError>;
    fn apply_remap(&mut self, kind: LabelKind, remap: &BTreeMap<String, String>, at_step: u64) -> Result<usize, StoreError>;
    fn relabel(&mut self, updates: &[(u64, ContextualIntent)], embeddings: Vec<EmbeddingRecord>, session: SessionState) -> Result<(), StoreError>;
    /// Persists session state changes that carry no snippet (e.g. counters).
    fn save_session(&mut self, session: SessionState) -> Result<(), StoreError>;
    fn trajectory_id(&self) -> &str;

    fn view(&self) -> StoreView {
        self.state().view(self.trajectory_id())
    }
}

/// Non-durable backend for tests and one-shot evaluation.
#[derive(Debug, Clone, Default)]
pub struct InMemoryBackend {
    id: String,
    state: MemoryState,
}

impl InMemoryBackend {
    pub fn new(id: &str) -> Self {
        Self {
            id: id.to_string(),
            state: MemoryState::new(DEFAULT_MAX_SUMMARY_CHARS),
        }
    }
}

impl Backend for InMemoryBackend {
    fn state(&self) -> &MemoryState {
        &self.state
    }

    fn trajectory_id(&self) -> &str {
        &self.id
    }

    fn append(&mut self, snippet: MemorySnippet, embeddings: Vec<EmbeddingRecord>, session: SessionState) -> Result<String, StoreError> {
        self.state.check_append(&snippet, &embeddings, &session)?;
        let id = snippet.summary_embedding_id.clone();
        self.state.apply_append(snippet, embeddings, session);
        Ok(id)
    }

    fn apply_remap(&mut self, kind: LabelKind, remap: &BTreeMap<String, String>, at_step: u64) -> Result<usize, StoreError> {
        self.state.check_remap(kind, remap)?;
        Ok(self.state.apply_remap(kind, remap, at_step))
    }

    fn relabel(&mut self, updates: &[(u64, ContextualIntent)], embeddings: Vec<EmbeddingRecord>, session: SessionState) -> Result<(), StoreError> {
        self.state.check_relabel(updates, &embeddings, &session)?;
        self.state.apply_relabel(updates, embeddings, session);
        Ok(())
    }

    fn save_session(&mut self, session: SessionState) -> Result<(), StoreError> {
        self.state.session = session;
        Ok(())
    }
}

/// Immutable snapshot of one trajectory.
#[derive(Debug, Clone)]
pub struct StoreView {
    pub trajectory_id: String,
    pub snippets: Arc<Vec<MemorySnippet>>,
    pub session: Arc<SessionState>,
    pub index: Arc<EmbeddingIndex>,
}

impl StoreView {
    pub fn empty(trajectory_id: &str) -> Self {
        MemoryState::new(DEFAULT_MAX_SUMMARY_CHARS).view(trajectory_id)
    }

    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    pub fn snippet(&self, step_index: u64) -> Option<&MemorySnippet> {
        self.snippets.get(step_index as usize)
    }

    pub fn event_vocab(&self) -> &LabelVocabulary {
        &self.session.event_vocab
    }

    pub fn entity_vocab(&self) -> &LabelVocabulary {
        &self.session.entity_vocab
    }

    pub fn scope_state(&self) -> &ScopeState {
        &self.session.scope
    }

    pub fn inventories(&self) -> Inventories {
        self.session.inventories()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChecksum {
    pub bytes: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub trajectory_id: String,
    pub snippet_count: u64,
    pub embedding_count: u64,
    pub vocab_versions: VocabVersions,
    pub snippet_generation: u64,
    pub state_seq: u64,
    pub files: BTreeMap<String, FileChecksum>,
    pub created_at: String,
    pub updated_at: String,
}

impl StoreManifest {
    fn snippets_file(&self) -> String {
        snippets_file(self.snippet_generation)
    }

    fn state_file(&self) -> String {
        state_file(self.state_seq)
    }
}

fn snippets_file(generation: u64) -> String {
    format!("snippets.g{generation}.jsonl")
}

fn state_file(seq: u64) -> String {
    format!("state.{seq}.json")
}

fn vocab_file(kind: LabelKind, generation: u64) -> String {
    format!("vocab_{}.g{generation}.jsonl", kind.as_str())
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn crc_of(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

fn extend_crc(prev: FileChecksum, bytes: &[u8]) -> FileChecksum {
    let mut h = crc32fast::Hasher::new_with_initial_len(prev.crc32, prev.bytes);
    h.update(bytes);
    FileChecksum {
        bytes: prev.bytes + bytes.len() as u64,
        crc32: h.finalize(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreConfig {
    pub max_summary_chars: usize,
    /// fsync data and directory entries before returning.
    pub durable: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            max_summary_chars: DEFAULT_MAX_SUMMARY_CHARS,
            durable: true,
        }
    }
}

/// Root directory holding one subdirectory per trajectory.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
    config: StoreConfig,
}

pub fn validate_trajectory_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        Self::open_with(root, StoreConfig::default())
    }

    pub fn open_with(root: impl Into<PathBuf>, config: StoreConfig) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root, config })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn trajectory_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn exists(&self, id: &str) -> bool {
        validate_trajectory_id(id).is_ok() && self.trajectory_dir(id).join(MANIFEST).is_file()
    }

    /// Trajectory ids with a manifest, sorted.
    pub fn list(&self) -> Vec<String> {
        let mut out: Vec<String> = fs::read_dir(&self.root)
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|id| self.exists(id))
            .collect();
        out.sort();
        out
    }

    /// Opens (creating if needed) the single writer for a trajectory.
    pub fn writer(&self, id: &str) -> Result<StoreWriter, StoreError> {
        validate_trajectory_id(id)?;
        StoreWriter::open(self.trajectory_dir(id), id, self.config)
    }

    /// Consistent snapshot of a trajectory; safe while a writer is active.
    pub fn load_view(&self, id: &str) -> Result<StoreView, StoreError> {
        validate_trajectory_id(id)?;
        let dir = self.trajectory_dir(id);
        if !dir.join(MANIFEST).is_file() {
            return Err(StoreError::NotFound(id.to_string()));
        }
        let mut last_err = None;
        for _ in 0..VIEW_RETRIES {
            let manifest = read_manifest(&dir)?;
            match read_snapshot(&dir, &manifest, self.config.max_summary_chars) {
                Ok(state) => return Ok(state.view(id)),
                Err(e) => {
                    let again = read_manifest(&dir)?;
                    if again == manifest {
                        return Err(e);
                    }
                    last_err = Some(e);
                }
            }
        }
        Err(last_err.unwrap_or_else(|| StoreError::NotFound(id.to_string())))
    }

    pub fn manifest(&self, id: &str) -> Result<StoreManifest, StoreError> {
        validate_trajectory_id(id)?;
        let dir = self.trajectory_dir(id);
        if !dir.join(MANIFEST).is_file() {
            return Err(StoreError::NotFound(id.to_string()));
        }
        read_manifest(&dir)
    }
}

fn read_manifest(dir: &Path) -> Result<StoreManifest, StoreError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::CorruptionDetected {
        file: MANIFEST.into(),
        detail: e.to_string(),
    })
}

/// Reads the checksummed prefix of a file recorded in the manifest.
fn read_checked(dir: &Path, manifest: &StoreManifest, name: &str) -> Result<Vec<u8>, StoreError> {
    let expected = manifest.files.get(name).copied().unwrap_or(FileChecksum { bytes: 0, crc32: 0 });
    let path = dir.join(name);
    let mut bytes = Vec::new();
    match File::open(&path) {
        Ok(mut f) => {
            f.read_to_end(&mut bytes).map_err(io_err(&path))?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && expected.bytes == 0 => return Ok(bytes),
        Err(e) => return Err(io_err(&path)(e)),
    }
    if (bytes.len() as u64) < expected.bytes {
        return Err(StoreError::CorruptionDetected {
            file: name.into(),
            detail: format!("{} bytes on disk, manifest records {}", bytes.len(), expected.bytes),
        });
    }
    bytes.truncate(expected.bytes as usize);
    if crc_of(&bytes) != expected.crc32 {
        return Err(StoreError::CorruptionDetected {
            file: name.into(),
            detail: "checksum mismatch".into(),
        });
    }
    Ok(bytes)
}

fn parse_records<T: Record>(bytes: &[u8], name: &str) -> Result<Vec<T>, StoreError> {
    let text = std::str::from_utf8(bytes).map_err(|e| StoreError::CorruptionDetected {
        file: name.into(),
        detail: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if !line.trim().is_empty() {
            out.push(from_line(line, i + 1)?);
        }
    }
    Ok(out)
}

fn read_snapshot(dir: &Path, manifest: &StoreManifest, max_summary_chars: usize) -> Result<MemoryState, StoreError> {
    let snippets_name = manifest.snippets_file();
    let snippets: Vec<MemorySnippet> = parse_records(&read_checked(dir, manifest, &snippets_name)?, &snippets_name)?;
    if snippets.len() as u64 != manifest.snippet_count {
        return Err(StoreError::CorruptionDetected {
            file: snippets_name,
            detail: format!("{} records, manifest records {}", snippets.len(), manifest.snippet_count),
        });
    }
    for (i, s) in snippets.iter().enumerate() {
        if s.step_index() != i as u64 {
            return Err(StoreError::CorruptionDetected {
                file: snippets_name,
                detail: format!("record {i} has step_index {}", s.step_index()),
            });
        }
    }
    let embeddings: Vec<EmbeddingRecord> = parse_records(&read_checked(dir, manifest, EMBEDDINGS)?, EMBEDDINGS)?;
    let mut index = EmbeddingIndex::new();
    for e in embeddings {
        index.insert(e).map_err(|e| StoreError::CorruptionDetected {
            file: EMBEDDINGS.into(),
            detail: e.to_string(),
        })?;
    }
    let state_name = manifest.state_file();
    let session = if manifest.files.contains_key(&state_name) {
        let bytes = read_checked(dir, manifest, &state_name)?;
        let mut records: Vec<SessionState> = parse_records(&bytes, &state_name)?;
        records.pop().ok_or_else(|| StoreError::CorruptionDetected {
            file: state_name.clone(),
            detail: "empty state file".into(),
        })?
    } else {
        SessionState::default()
    };
    Ok(MemoryState {
        snippets,
        session,
        index,
        max_summary_chars,
    })
}

/// Points at which a write can be made to fail, for crash testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailPoint {
    /// After data files are written, before the manifest is replaced.
    BeforeManifest,
}

/// Exclusive writer for one trajectory directory.
#[derive(Debug)]
pub struct StoreWriter {
    dir: PathBuf,
    id: String,
    config: StoreConfig,
    manifest: StoreManifest,
    state: MemoryState,
    _lock: File,
    fail_point: Option<FailPoint>,
}

impl StoreWriter {
    fn open(dir: PathBuf, id: &str, config: StoreConfig) -> Result<Self, StoreError> {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let lock_path = dir.join(LOCK);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(&lock_path))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(StoreError::Locked(id.to_string())),
            Err(fs::TryLockError::Error(e)) => return Err(io_err(&lock_path)(e)),
        }
        let manifest_path = dir.join(MANIFEST);
        let mut writer = if manifest_path.is_file() {
            let manifest = read_manifest(&dir)?;
            if manifest.trajectory_id != id {
                return Err(StoreError::CorruptionDetected {
                    file: MANIFEST.into(),
                    detail: format!("manifest belongs to `{}`", manifest.trajectory_id),
                });
            }
            let mut w = Self {
                dir,
                id: id.to_string(),
                config,
                state: MemoryState::new(config.max_summary_chars),
                manifest,
                _lock: lock,
                fail_point: None,
            };
            w.recover()?;
            w.state = read_snapshot(&w.dir, &w.manifest, config.max_summary_chars)?;
            w
        } else {
            let now = now_rfc3339();
            let manifest = StoreManifest {
                trajectory_id: id.to_string(),
                snippet_count: 0,
                embedding_count: 0,
                vocab_versions: VocabVersions::default(),
                snippet_generation: 0,
                state_seq: 0,
                files: BTreeMap::new(),
                created_at: now.clone(),
                updated_at: now,
            };
            let mut w = Self {
                dir,
                id: id.to_string(),
                config,
                state: MemoryState::new(config.max_summary_chars),
                manifest,
                _lock: lock,
                fail_point: None,
            };
            w.write_file(&snippets_file(0), b"")?;
            w.write_file(EMBEDDINGS, b"")?;
            w.manifest.files.insert(snippets_file(0), FileChecksum { bytes: 0, crc32: crc_of(b"") });
            w.manifest.files.insert(EMBEDDINGS.into(), FileChecksum { bytes: 0, crc32: crc_of(b"") });
            w.commit_manifest()?;
            w
        };
        writer.state.max_summary_chars = config.max_summary_chars;
        Ok(writer)
    }

    /// Drops bytes written after the last manifest commit.
    fn recover(&mut self) -> Result<(), StoreError> {
        for name in [self.manifest.snippets_file(), EMBEDDINGS.to_string()] {
            let expected = self.manifest.files.get(&name).copied().unwrap_or(FileChecksum { bytes: 0, crc32: 0 });
            let path = self.dir.join(&name);
            let len = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
            if len > expected.bytes {
                tracing::warn!(file = %name, from = len, to = expected.bytes, "truncating uncommitted bytes");
                let f = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
                f.set_len(expected.bytes).map_err(io_err(&path))?;
                f.sync_all().map_err(io_err(&path))?;
            }
        }
        let current = self.manifest.state_seq;
        for entry in fs::read_dir(&self.dir).map_err(io_err(&self.dir))?.flatten() {
            let name = entry.file_name().to_string_lossy().to_string();
            let seq = name
                .strip_prefix("state.")
                .and_then(|r| r.strip_suffix(".json"))
                .and_then(|n| n.parse::<u64>().ok());
            if seq.is_some_and(|s| s > current) {
                let _ = fs::remove_file(entry.path());
            }
        }
        Ok(())
    }

    pub fn trajectory_id(&self) -> &str {
        &self.id
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    #[doc(hidden)]
    pub fn set_fail_point(&mut self, point: Option<FailPoint>) {
        self.fail_point = point;
    }

    fn sync_dir(&self) -> Result<(), StoreError> {
        if self.config.durable {
            if let Ok(d) = File::open(&self.dir) {
                let _ = d.sync_all();
            }
        }
        Ok(())
    }

    fn write_file(&self, name: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let path = self.dir.join(name);
        let mut f = File::create(&path).map_err(io_err(&path))?;
        f.write_all(bytes).map_err(io_err(&path))?;
        if self.config.durable {
            f.sync_all().map_err(io_err(&path))?;
        }
        Ok(())
    }

    fn append_file(&mut self, name: &str, bytes: &[u8]) -> Result<(), StoreError> {
        if bytes.is_empty() {
            return Ok(());
        }
        let path = self.dir.join(name);
        let mut f = OpenOptions::new().append(true).create(true).open(&path).map_err(io_err(&path))?;
        f.write_all(bytes).map_err(io_err(&path))?;
        if self.config.durable {
            f.sync_data().map_err(io_err(&path))?;
        }
        let prev = self.manifest.files.get(name).copied().unwrap_or(FileChecksum { bytes: 0, crc32: 0 });
        self.manifest.files.insert(name.to_string(), extend_crc(prev, bytes));
        Ok(())
    }

    fn write_state(&mut self, session: &SessionState) -> Result<(), StoreError> {
        let seq = self.manifest.state_seq + 1;
        let name = state_file(seq);
        let body = format!("{}\n", to_line(session));
        self.write_file(&name, body.as_bytes())?;
        let old = self.manifest.state_file();
        self.manifest.files.insert(
            name,
            FileChecksum {
                bytes: body.len() as u64,
                crc32: crc_of(body.as_bytes()),
            },
        );
        self.manifest.files.remove(&old);
        self.manifest.state_seq = seq;
        Ok(())
    }

    fn commit_manifest(&mut self) -> Result<(), StoreError> {
        if self.fail_point == Some(FailPoint::BeforeManifest) {
            return Err(StoreError::Injected(FailPoint::BeforeManifest));
        }
        self.manifest.updated_at = now_rfc3339();
        let tmp = self.dir.join("manifest.json.tmp");
        let body = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(body.as_bytes()).map_err(io_err(&tmp))?;
            if self.config.durable {
                f.sync_all().map_err(io_err(&tmp))?;
            }
        }
        let dest = self.dir.join(MANIFEST);
        fs::rename(&tmp, &dest).map_err(io_err(&dest))?;
        self.sync_dir()?;
        // Readers holding the previous manifest may still need its state file.
        if self.manifest.state_seq >= 2 {
            let _ = fs::remove_file(self.dir.join(state_file(self.manifest.state_seq - 2)));
        }
        Ok(())
    }

    /// Runs a file-level transaction; on failure the in-memory manifest is
    /// restored so the writer stays consistent with disk.
    fn transact<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T, StoreError>) -> Result<T, StoreError> {
        let saved = self.manifest.clone();
        match f(self) {
            Ok(v) => Ok(v),
            Err(e) => {
                self.manifest = saved;
                let _ = self.recover();
                Err(e)
            }
        }
    }

    fn embedding_bytes(embeddings: &[EmbeddingRecord]) -> String {
        embeddings.iter().map(|e| to_line(e) + "\n").collect()
    }

    fn write_snippet_generation(&mut self, snippets: &[MemorySnippet]) -> Result<(), StoreError> {
        let gen = self.manifest.snippet_generation + 1;
        let name = snippets_file(gen);
        let body: String = snippets.iter().map(|s| to_line(s) + "\n").collect();
        self.write_file(&name, body.as_bytes())?;
        let old = self.manifest.snippets_file();
        self.manifest.files.remove(&old);
        self.manifest.files.insert(
            name,
            FileChecksum {
                bytes: body.len() as u64,
                crc32: crc_of(body.as_bytes()),
            },
        );
        self.manifest.snippet_generation = gen;
        Ok(())
    }

    fn archive_vocab(&self, kind: LabelKind, version: u64, vocab: &LabelVocabulary) -> Result<(), StoreError> {
        let name = vocab_file(kind, version);
        if self.dir.join(&name).exists() {
            return Ok(());
        }
        self.write_file(&name, format!("{}\n", to_line(vocab)).as_bytes())
    }

    pub fn view(&self) -> StoreView {
        self.state.view(&self.id)
    }
}

impl Backend for StoreWriter {
    fn state(&self) -> &MemoryState {
        &self.state
    }

    fn trajectory_id(&self) -> &str {
        &self.id
    }

    fn append(&mut self, snippet: MemorySnippet, embeddings: Vec<EmbeddingRecord>, session: SessionState) -> Result<String, StoreError> {
        self.state.check_append(&snippet, &embeddings, &session)?;
        let fresh: Vec<EmbeddingRecord> = embeddings.iter().filter(|e| !self.state.index.contains(&e.id)).cloned().collect();
        let line = to_line(&snippet) + "\n";
        self.transact(|w| {
            let name = w.manifest.snippets_file();
            w.append_file(&name, line.as_bytes())?;
            w.append_file(EMBEDDINGS, Self::embedding_bytes(&fresh).as_bytes())?;
            w.write_state(&session)?;
            w.manifest.snippet_count += 1;
            w.manifest.embedding_count += fresh.len() as u64;
            w.manifest.vocab_versions = session.vocab_versions;
            w.commit_manifest()
        })?;
        let id = snippet.summary_embedding_id.clone();
        self.state.apply_append(snippet, embeddings, session);
        Ok(id)
    }

    fn apply_remap(&mut self, kind: LabelKind, remap: &BTreeMap<String, String>, at_step: u64) -> Result<usize, StoreError> {
        self.state.check_remap(kind, remap)?;
        let mut next = self.state.clone();
        let old_version = self.state.session.vocab_versions.get(kind);
        let changed = next.apply_remap(kind, remap, at_step);
        self.transact(|w| {
            w.archive_vocab(kind, old_version, w.state.session.vocab(kind))?;
            w.archive_vocab(kind, old_version + 1, next.session.vocab(kind))?;
            w.write_snippet_generation(&next.snippets)?;
            w.write_state(&next.session)?;
            w.manifest.vocab_versions = next.session.vocab_versions;
            w.commit_manifest()
        })?;
        self.state = next;
        Ok(changed)
    }

    fn relabel(&mut self, updates: &[(u64, ContextualIntent)], embeddings: Vec<EmbeddingRecord>, session: SessionState) -> Result<(), StoreError> {
        self.state.check_relabel(updates, &embeddings, &session)?;
        let mut next = self.state.clone();
        let fresh: Vec<EmbeddingRecord> = next.apply_relabel(updates, embeddings, session);
        self.transact(|w| {
            w.append_file(EMBEDDINGS, Self::embedding_bytes(&fresh).as_bytes())?;
            w.write_snippet_generation(&next.snippets)?;
            w.write_state(&next.session)?;
            w.manifest.embedding_count += fresh.len() as u64;
            w.manifest.vocab_versions = next.session.vocab_versions;
            w.commit_manifest()
        })?;
        self.state = next;
        Ok(())
    }

    fn save_session(&mut self, session: SessionState) -> Result<(), StoreError> {
        self.transact(|w| {
            w.write_state(&session)?;
            w.commit_manifest()
        })?;
        self.state.session = session;
        Ok(())
    }
}
