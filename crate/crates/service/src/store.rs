//! Annotation store: in-memory state rebuilt from an append-only JSONL event
//! log. Every mutation is written and flushed to the log before it becomes
//! visible, so the log alone reproduces the store after a restart.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;
use std::time::{SystemTime, UNIX_EPOCH};

use mslayout_core::corpus::{
    compute_region_statistics, Collection, DocumentAnnotation, RegionClass, RegionInstance,
};
use rand::distributions::Alphanumeric;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Result, ServiceError};

/// Annotator id used for revisions seeded from an imported corpus.
pub const IMPORT_ANNOTATOR: &str = "import";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fresh,
    Correction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorAccount {
    pub annotator_id: String,
    pub display_name: String,
    pub registered_at: u64,
}

/// Registration result; the token is only ever returned here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Registration {
    #[serde(flatten)]
    pub account: AnnotatorAccount,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRevision {
    pub doc_id: String,
    pub annotator_id: String,
    pub revision: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<u32>,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub created_at: u64,
    pub regions: Vec<RegionInstance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub annotator_id: String,
    pub started_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ended_at: Option<u64>,
    pub docs_touched: BTreeSet<String>,
    pub regions_created: usize,
    pub regions_edited: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocumentSummary {
    pub doc_id: String,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub collection: Collection,
    pub script: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_revision: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionCounts {
    pub collection: Collection,
    pub counts: BTreeMap<RegionClass, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorThroughput {
    pub annotator_id: String,
    pub display_name: String,
    pub documents: usize,
    pub revisions: usize,
    pub regions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionProgress {
    pub collection: Collection,
    pub annotated: usize,
    pub total: usize,
}

/// Dashboard payload computed from one consistent snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsSummary {
    pub revisions: usize,
    pub region_counts: Vec<CollectionCounts>,
    pub combined: BTreeMap<RegionClass, usize>,
    pub annotators: Vec<AnnotatorThroughput>,
    pub open_sessions: Vec<SessionRecord>,
    pub progress: Vec<CollectionProgress>,
}

/// Submission payload after region parsing.
#[derive(Debug, Clone)]
pub struct Submission {
    pub mode: Mode,
    pub session_id: Option<String>,
    pub regions: Vec<RegionInstance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Registered {
        account: AnnotatorAccount,
        token: String,
    },
    SessionOpened {
        session_id: String,
        annotator_id: String,
        at: u64,
    },
    SessionClosed {
        session_id: String,
        at: u64,
    },
    Revision(AnnotationRevision),
}

#[derive(Default)]
struct State {
    catalog: Vec<DocumentAnnotation>,
    doc_index: HashMap<String, usize>,
    accounts: BTreeMap<String, AnnotatorAccount>,
    tokens: HashMap<String, String>,
    sessions: BTreeMap<String, SessionRecord>,
    history: HashMap<String, Vec<AnnotationRevision>>,
    log: Option<File>,
}

pub struct Store {
    state: RwLock<State>,
    corpus_dir: Option<PathBuf>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn same_region(a: &RegionInstance, b: &RegionInstance) -> bool {
    a.region_class == b.region_class && a.boundary == b.boundary
}

impl State {
    fn doc(&self, doc_id: &str) -> Result<&DocumentAnnotation> {
        self.doc_index
            .get(doc_id)
            .map(|&i| &self.catalog[i])
            .ok_or_else(|| ServiceError::NotFound(format!("document {doc_id}")))
    }

    fn current(&self, doc_id: &str) -> Option<&AnnotationRevision> {
        self.history.get(doc_id).and_then(|h| h.last())
    }

    fn persist(&mut self, event: &Event) -> Result<()> {
        if let Some(file) = self.log.as_mut() {
            let mut line = serde_json::to_string(event).expect("events serialize");
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|source| ServiceError::Io {
                    path: "store log".into(),
                    source,
                })?;
        }
        Ok(())
    }

    fn apply(&mut self, event: Event) {
        match event {
            Event::Registered { account, token } => {
                self.tokens.insert(token, account.annotator_id.clone());
                self.accounts.insert(account.annotator_id.clone(), account);
            }
            Event::SessionOpened {
                session_id,
                annotator_id,
                at,
            } => {
                self.sessions.insert(
                    session_id.clone(),
                    SessionRecord {
                        session_id,
                        annotator_id,
                        started_at: at,
                        ended_at: None,
                        docs_touched: BTreeSet::new(),
                        regions_created: 0,
                        regions_edited: 0,
                    },
                );
            }
            Event::SessionClosed { session_id, at } => {
                if let Some(s) = self.sessions.get_mut(&session_id) {
                    s.ended_at = Some(at.max(s.started_at));
                }
            }
            Event::Revision(rev) => {
                let parent_regions = rev
                    .parent
                    .and_then(|p| self.history.get(&rev.doc_id)?.get(p as usize - 1))
                    .map(|r| r.regions.clone())
                    .unwrap_or_default();
                if let Some(s) = rev.session_id.as_ref().and_then(|id| self.sessions.get_mut(id)) {
                    s.docs_touched.insert(rev.doc_id.clone());
                    for (i, region) in rev.regions.iter().enumerate() {
                        match parent_regions.get(i) {
                            Some(old) if same_region(old, region) => {}
                            Some(_) => s.regions_edited += 1,
                            None => s.regions_created += 1,
                        }
                    }
                }
                self.history.entry(rev.doc_id.clone()).or_default().push(rev);
            }
        }
    }

    fn commit(&mut self, event: Event) -> Result<()> {
        self.persist(&event)?;
        self.apply(event);
        Ok(())
    }

    fn annotator_of(&self, token: &str) -> Option<&AnnotatorAccount> {
        self.tokens.get(token).and_then(|id| self.accounts.get(id))
    }
}

impl Store {
    /// Builds a store over `catalog`. With a log path, existing events are
    /// replayed and new ones appended; documents of the catalog that carry
    /// regions but have no revision yet are seeded as revision 1.
    pub fn open(
        catalog: Vec<DocumentAnnotation>,
        corpus_dir: Option<PathBuf>,
        log_path: Option<&Path>,
    ) -> Result<Store> {
        let mut state = State::default();
        for (i, doc) in catalog.iter().enumerate() {
            if state.doc_index.insert(doc.doc_id.clone(), i).is_some() {
                return Err(ServiceError::Validation(format!(
                    "duplicate doc_id {} in catalog",
                    doc.doc_id
                )));
            }
        }
        state.catalog = catalog;
        if let Some(path) = log_path {
            let io = |source| ServiceError::Io {
                path: path.display().to_string(),
                source,
            };
            if path.exists() {
                let reader = BufReader::new(File::open(path).map_err(io)?);
                for (n, line) in reader.lines().enumerate() {
                    let line = line.map_err(io)?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let event: Event = serde_json::from_str(&line).map_err(|e| {
                        ServiceError::CorruptLog {
                            line: n + 1,
                            message: e.to_string(),
                        }
                    })?;
                    if let Event::Revision(r) = &event {
                        if !state.doc_index.contains_key(&r.doc_id) {
                            log::warn!("store log line {}: unknown document {}; skipped", n + 1, r.doc_id);
                            continue;
                        }
                    }
                    state.apply(event);
                }
            }
            state.log = Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(io)?,
            );
        }
        let seeds: Vec<AnnotationRevision> = state
            .catalog
            .iter()
            .filter(|d| !d.regions.is_empty() && !state.history.contains_key(&d.doc_id))
            .map(|d| AnnotationRevision {
                doc_id: d.doc_id.clone(),
                annotator_id: IMPORT_ANNOTATOR.into(),
                revision: 1,
                parent: None,
                mode: Mode::Fresh,
                session_id: None,
                created_at: now_ms(),
                regions: d.regions.clone(),
            })
            .collect();
        for rev in seeds {
            state.commit(Event::Revision(rev))?;
        }
        Ok(Store {
            state: RwLock::new(state),
            corpus_dir,
        })
    }

    /// Opens `<corpus_dir>/annotations.json` as the catalog.
    pub fn open_corpus_dir(corpus_dir: &Path, log_path: Option<&Path>) -> Result<Store> {
        let docs = mslayout_core::corpus::parse_annotation_file(corpus_dir.join("annotations.json"))?;
        Store::open(docs, Some(corpus_dir.to_owned()), log_path)
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, State> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn register(&self, name: &str) -> Result<Registration> {
        let name = name.trim();
        if name.is_empty() {
            return Err(ServiceError::Validation("annotator name must be nonempty".into()));
        }
        let token: String = rand::thread_rng()
            .sample_iter(&Alphanumeric)
            .take(32)
            .map(char::from)
            .collect();
        let mut state = self.write();
        let account = AnnotatorAccount {
            annotator_id: format!("annotator-{}", state.accounts.len() + 1),
            display_name: name.to_owned(),
            registered_at: now_ms(),
        };
        state.commit(Event::Registered {
            account: account.clone(),
            token: token.clone(),
        })?;
        Ok(Registration { account, token })
    }

    pub fn authenticate(&self, token: &str) -> Result<AnnotatorAccount> {
        self.read()
            .annotator_of(token)
            .cloned()
            .ok_or(ServiceError::Unauthorized)
    }

    pub fn accounts(&self) -> Vec<AnnotatorAccount> {
        self.read().accounts.values().cloned().collect()
    }

    pub fn open_session(&self, annotator_id: &str) -> Result<SessionRecord> {
        let mut state = self.write();
        if !state.accounts.contains_key(annotator_id) {
            return Err(ServiceError::NotFound(format!("annotator {annotator_id}")));
        }
        let session_id = format!("session-{}", state.sessions.len() + 1);
        state.commit(Event::SessionOpened {
            session_id: session_id.clone(),
            annotator_id: annotator_id.to_owned(),
            at: now_ms(),
        })?;
        Ok(state.sessions[&session_id].clone())
    }

    pub fn close_session(&self, annotator_id: &str, session_id: &str) -> Result<SessionRecord> {
        let mut state = self.write();
        let session = state
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::NotFound(format!("session {session_id}")))?;
        if session.annotator_id != annotator_id {
            return Err(ServiceError::Forbidden(format!(
                "session {session_id} belongs to another annotator"
            )));
        }
        if session.ended_at.is_some() {
            return Err(ServiceError::Conflict(format!("session {session_id} is already closed")));
        }
        state.commit(Event::SessionClosed {
            session_id: session_id.to_owned(),
            at: now_ms(),
        })?;
        Ok(state.sessions[session_id].clone())
    }

    /// Validates and persists a submission as the document's next revision.
    pub fn submit(&self, annotator_id: &str, doc_id: &str, sub: Submission) -> Result<AnnotationRevision> {
        let mut state = self.write();
        let doc = state.doc(doc_id)?;
        let mut regions = sub.regions;
        for (index, region) in regions.iter_mut().enumerate() {
            let mut probe = DocumentAnnotation {
                regions: vec![region.clone()],
                ..doc.clone()
            };
            probe.validate().map_err(|e| ServiceError::InvalidRegion {
                index,
                message: e.to_string(),
            })?;
            *region = probe.regions.pop().expect("one region");
        }
        if let Some(id) = &sub.session_id {
            let session = state
                .sessions
                .get(id)
                .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))?;
            if session.annotator_id != annotator_id {
                return Err(ServiceError::Forbidden(format!("session {id} belongs to another annotator")));
            }
            if session.ended_at.is_some() {
                return Err(ServiceError::Conflict(format!("session {id} is closed")));
            }
        }
        let current = state.current(doc_id);
        let revision = current.map_or(1, |r| r.revision + 1);
        let parent = match sub.mode {
            Mode::Fresh => None,
            Mode::Correction => match current {
                Some(r) => Some(r.revision),
                None => {
                    return Err(ServiceError::Conflict(format!(
                        "document {doc_id} has no revision to correct"
                    )))
                }
            },
        };
        let previous: &[RegionInstance] = match (parent, current) {
            (Some(_), Some(r)) => &r.regions,
            _ => &[],
        };
        for (i, region) in regions.iter_mut().enumerate() {
            match previous.get(i) {
                Some(old) if same_region(old, region) => {
                    region.annotator_id.clone_from(&old.annotator_id);
                    region.revision = old.revision;
                }
                _ => {
                    region.annotator_id = Some(annotator_id.to_owned());
                    region.revision = revision;
                }
            }
        }
        let rev = AnnotationRevision {
            doc_id: doc_id.to_owned(),
            annotator_id: annotator_id.to_owned(),
            revision,
            parent,
            mode: sub.mode,
            session_id: sub.session_id,
            created_at: now_ms(),
            regions,
        };
        state.commit(Event::Revision(rev.clone()))?;
        Ok(rev)
    }

    pub fn documents(&self) -> Vec<DocumentSummary> {
        let state = self.read();
        state
            .catalog
            .iter()
            .map(|d| DocumentSummary {
                doc_id: d.doc_id.clone(),
                image_path: d.image_path.clone(),
                width: d.width,
                height: d.height,
                collection: d.collection,
                script: d.script.clone(),
                current_revision: state.current(&d.doc_id).map(|r| r.revision),
            })
            .collect()
    }

    /// Latest revision of a known document; `None` when it has none yet.
    pub fn current(&self, doc_id: &str) -> Result<Option<AnnotationRevision>> {
        let state = self.read();
        state.doc(doc_id)?;
        Ok(state.current(doc_id).cloned())
    }

    pub fn history(&self, doc_id: &str) -> Result<Vec<AnnotationRevision>> {
        let state = self.read();
        state.doc(doc_id)?;
        Ok(state.history.get(doc_id).cloned().unwrap_or_default())
    }

    pub fn sessions(&self) -> Vec<SessionRecord> {
        self.read().sessions.values().cloned().collect()
    }

    /// Absolute path of a document image inside the corpus directory.
    pub fn image_path(&self, doc_id: &str) -> Result<PathBuf> {
        let state = self.read();
        let doc = state.doc(doc_id)?;
        let dir = self
            .corpus_dir
            .as_ref()
            .ok_or_else(|| ServiceError::NotFound("no image directory configured".into()))?;
        let rel = Path::new(&doc.image_path);
        if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(ServiceError::Forbidden(format!("image path {} escapes the corpus directory", doc.image_path)));
        }
        Ok(dir.join(rel))
    }

    /// Catalog documents carrying their current regions.
    pub fn export(&self) -> Vec<DocumentAnnotation> {
        export_from(&self.read())
    }

    pub fn analytics(&self) -> AnalyticsSummary {
        let state = self.read();
        let docs = export_from(&state);
        let stats = compute_region_statistics(&docs);
        let to_map = |f: &dyn Fn(RegionClass) -> usize| -> BTreeMap<RegionClass, usize> {
            RegionClass::ALL.iter().map(|&c| (c, f(c))).collect()
        };
        let collections: BTreeSet<Collection> = state.catalog.iter().map(|d| d.collection).collect();
        let region_counts = collections
            .iter()
            .map(|&coll| CollectionCounts {
                collection: coll,
                counts: to_map(&|c| stats.count(c, coll)),
            })
            .collect();
        let mut per_annotator: BTreeMap<&str, (BTreeSet<&str>, usize, usize)> = BTreeMap::new();
        for rev in state.history.values().flatten() {
            let e = per_annotator.entry(rev.annotator_id.as_str()).or_default();
            e.0.insert(rev.doc_id.as_str());
            e.1 += 1;
            e.2 += rev.regions.len();
        }
        let annotators = per_annotator
            .into_iter()
            .map(|(id, (docs, revisions, regions))| AnnotatorThroughput {
                annotator_id: id.to_owned(),
                display_name: state
                    .accounts
                    .get(id)
                    .map_or_else(|| id.to_owned(), |a| a.display_name.clone()),
                documents: docs.len(),
                revisions,
                regions,
            })
            .collect();
        let progress = collections
            .iter()
            .map(|&coll| {
                let in_coll = state.catalog.iter().filter(|d| d.collection == coll);
                CollectionProgress {
                    collection: coll,
                    annotated: in_coll.clone().filter(|d| state.history.contains_key(&d.doc_id)).count(),
                    total: in_coll.count(),
                }
            })
            .collect();
        AnalyticsSummary {
            revisions: state.history.values().map(Vec::len).sum(),
            region_counts,
            combined: to_map(&|c| stats.combined(c)),
            annotators,
            open_sessions: state
                .sessions
                .values()
                .filter(|s| s.ended_at.is_none())
                .cloned()
                .collect(),
            progress,
        }
    }
}

fn export_from(state: &State) -> Vec<DocumentAnnotation> {
    state
        .catalog
        .iter()
        .map(|d| DocumentAnnotation {
            regions: state
                .current(&d.doc_id)
                .map(|r| r.regions.clone())
                .unwrap_or_default(),
            ..d.clone()
        })
        .collect()
}
