use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{RwLock, RwLockReadGuard};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::review::{next_state, ActorRole, ReviewAction, ReviewState};
use super::{LabelError, StageClass};
use crate::geom::BoundingBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub ts: DateTime<Utc>,
    pub actor: String,
    /// `create`, `edit`, or a review action name.
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub frame_index: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub stage: StageClass,
    #[serde(default)]
    pub track_id: Option<u32>,
    pub annotator: String,
    pub review: ReviewState,
    pub history: Vec<HistoryEvent>,
}

impl Annotation {
    pub fn role_of(&self, actor: &str) -> ActorRole {
        if actor == self.annotator {
            ActorRole::Author
        } else {
            ActorRole::SecondExpert
        }
    }

    /// Re-derives the review state from the history, starting at Draft.
    pub fn replay_state(&self) -> Result<ReviewState, LabelError> {
        let mut state = ReviewState::Draft;
        for ev in &self.history {
            if let Ok(action) = ev.action.parse::<ReviewAction>() {
                state = next_state(state, action, self.role_of(&ev.actor), ev.note.as_deref())?;
            }
        }
        Ok(state)
    }

    pub fn distinct_actors(&self) -> usize {
        let mut actors: Vec<&str> = self.history.iter().map(|e| e.actor.as_str()).collect();
        actors.sort_unstable();
        actors.dedup();
        actors.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewAnnotation {
    pub frame_index: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub stage: StageClass,
    #[serde(default)]
    pub track_id: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditAnnotation {
    #[serde(default, rename = "box")]
    pub bbox: Option<BoundingBox>,
    #[serde(default)]
    pub stage: Option<StageClass>,
    #[serde(default)]
    pub note: Option<String>,
}

/// One line of the journal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub ts: String,
    pub actor: String,
    pub annotation_id: String,
    pub action: String,
    pub payload: Value,
}

#[derive(Debug, Default)]
struct State {
    annotations: BTreeMap<String, Annotation>,
    version: u64,
    next_id: u64,
    journal: Option<BufWriter<File>>,
}

/// Annotation store with a single serialized writer and concurrent readers.
///
/// Writes hold the lock across validation, journal append and index update, so every
/// mutation is atomic with respect to readers and other writers.
#[derive(Debug)]
pub struct LabelStore {
    state: RwLock<State>,
    path: Option<PathBuf>,
}

impl LabelStore {
    pub fn in_memory() -> Self {
        Self { state: RwLock::new(State::default()), path: None }
    }

    /// Opens (or creates) a journal and replays it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LabelError> {
        let path = path.as_ref().to_path_buf();
        let mut state = State::default();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JournalRecord = serde_json::from_str(&line)
                    .map_err(|e| LabelError::CorruptJournal { line: i + 1, reason: e.to_string() })?;
                state
                    .apply(&rec)
                    .map_err(|e| LabelError::CorruptJournal { line: i + 1, reason: e.to_string() })?;
            }
        }
        state.journal = Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(&path)?));
        Ok(Self { state: RwLock::new(state), path: Some(path) })
    }

    pub fn journal_path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn read(&self) -> RwLockReadGuard<'_, State> {
        self.state.read().unwrap_or_else(|p| p.into_inner())
    }

    fn commit(&self, mut rec: JournalRecord) -> Result<(Annotation, u64), LabelError> {
        let mut st = self.state.write().unwrap_or_else(|p| p.into_inner());
        let id = st.apply(&rec)?;
        rec.annotation_id.clone_from(&id);
        if let Some(w) = st.journal.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok((st.annotations[&id].clone(), st.version))
    }

    pub fn create(&self, new: NewAnnotation, actor: &str) -> Result<(Annotation, u64), LabelError> {
        check_actor(actor)?;
        // The id is assigned under the write lock.
        self.commit(record(actor, "", "create", serde_json::to_value(&new)?))
    }

    pub fn edit(&self, id: &str, edit: EditAnnotation, actor: &str) -> Result<(Annotation, u64), LabelError> {
        check_actor(actor)?;
        self.commit(record(actor, id, "edit", serde_json::to_value(&edit)?))
    }

    pub fn transition(
        &self,
        id: &str,
        action: ReviewAction,
        actor: &str,
        note: Option<&str>,
    ) -> Result<(Annotation, u64), LabelError> {
        check_actor(actor)?;
        self.commit(record(actor, id, action.name(), json!({ "note": note })))
    }

    pub fn get(&self, id: &str) -> Option<Annotation> {
        self.read().annotations.get(id).cloned()
    }

    /// Consistent snapshot of every annotation, ordered by id, plus the store version.
    pub fn snapshot(&self) -> (Vec<Annotation>, u64) {
        let st = self.read();
        (st.annotations.values().cloned().collect(), st.version)
    }

    pub fn list(&self) -> Vec<Annotation> {
        self.snapshot().0
    }

    pub fn version(&self) -> u64 {
        self.read().version
    }
}

fn check_actor(actor: &str) -> Result<(), LabelError> {
    if actor.trim().is_empty() {
        Err(LabelError::EmptyActor)
    } else {
        Ok(())
    }
}

fn record(actor: &str, id: &str, action: &str, payload: Value) -> JournalRecord {
    JournalRecord {
        ts: Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true),
        actor: actor.to_string(),
        annotation_id: id.to_string(),
        action: action.to_string(),
        payload,
    }
}

impl State {
    /// Validates and applies one journal record; returns the affected id.
    fn apply(&mut self, rec: &JournalRecord) -> Result<String, LabelError> {
        let ts = DateTime::parse_from_rfc3339(&rec.ts)
            .map_err(|e| LabelError::CorruptJournal { line: 0, reason: format!("bad timestamp: {e}") })?
            .with_timezone(&Utc);
        match rec.action.as_str() {
            "create" => {
                let new: NewAnnotation = serde_json::from_value(rec.payload.clone())?;
                self.next_id += 1;
                let id = format!("a{:06}", self.next_id);
                let ann = Annotation {
                    id: id.clone(),
                    frame_index: new.frame_index,
                    bbox: new.bbox,
                    stage: new.stage,
                    track_id: new.track_id,
                    annotator: rec.actor.clone(),
                    review: ReviewState::Draft,
                    history: vec![HistoryEvent { ts, actor: rec.actor.clone(), action: "create".into(), note: None }],
                };
                self.annotations.insert(id.clone(), ann);
                self.version += 1;
                Ok(id)
            }
            "edit" => {
                let edit: EditAnnotation = serde_json::from_value(rec.payload.clone())?;
                let ann = self
                    .annotations
                    .get_mut(&rec.annotation_id)
                    .ok_or_else(|| LabelError::NotFound(rec.annotation_id.clone()))?;
                if ann.review == ReviewState::Consensus {
                    return Err(LabelError::Locked(ann.id.clone()));
                }
                if let Some(b) = edit.bbox {
                    ann.bbox = b;
                }
                if let Some(s) = edit.stage {
                    ann.stage = s;
                }
                ann.history.push(HistoryEvent { ts, actor: rec.actor.clone(), action: "edit".into(), note: edit.note });
                self.version += 1;
                Ok(ann.id.clone())
            }
            other => {
                let action: ReviewAction =
                    other.parse().map_err(|reason| LabelError::CorruptJournal { line: 0, reason })?;
                let note = rec.payload.get("note").and_then(Value::as_str).map(str::to_string);
                let ann = self
                    .annotations
                    .get_mut(&rec.annotation_id)
                    .ok_or_else(|| LabelError::NotFound(rec.annotation_id.clone()))?;
                let next = next_state(ann.review, action, ann.role_of(&rec.actor), note.as_deref()).map_err(|e| match e {
                    LabelError::SelfReview { action, .. } => LabelError::SelfReview { actor: rec.actor.clone(), action },
                    e => e,
                })?;
                ann.review = next;
                ann.history.push(HistoryEvent { ts, actor: rec.actor.clone(), action: action.name().into(), note });
                self.version += 1;
                Ok(ann.id.clone())
            }
        }
    }
}
