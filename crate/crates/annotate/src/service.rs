//! Command handling: validates requests, appends events through a single
//! writer and publishes immutable state snapshots for readers.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use qualcode::fixtures::reference_quotes;
use serde::{Deserialize, Serialize};

use crate::model::{self, Event, ExportBundle, Rater, Sentence, ServiceError, Stage, State, TaskList};
use crate::store::EventStore;

/// Seed used for presentation order when a project does not set one.
pub const DEFAULT_PROJECT_SEED: u64 = 20240501;

/// Project id of the bundled 15-sentence fixture.
pub const DEFAULT_PROJECT_ID: &str = "reference-15";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateProject {
    pub id: String,
    pub sentences: Vec<Sentence>,
    pub raters: Vec<String>,
    #[serde(default = "default_true")]
    pub exclude_own_labels: bool,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectCreated {
    pub project: String,
    pub stage: Stage,
    /// Bearer token per rater; shown once, to the admin.
    pub rater_tokens: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Request {
    pub project: String,
    pub rater: String,
    pub sentence: String,
    pub code: String,
    pub difficulty: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreezeRequest {
    /// sentence -> model name -> code
    pub model_labels: BTreeMap<String, BTreeMap<String, String>>,
    /// sentence -> golden-standard code
    pub golden: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatingRequest {
    pub project: String,
    pub rater: String,
    pub sentence: String,
    pub handle: String,
    pub value: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub seq: u64,
}

/// Admin overview of a project, with provenance-free counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectSummary {
    pub project: String,
    pub stage: Stage,
    pub sentences: usize,
    pub raters: Vec<String>,
    pub exclude_own_labels: bool,
    /// rater -> completed tasks in the current stage
    pub completed: BTreeMap<String, usize>,
}

struct Writer {
    store: EventStore,
    state: State,
}

pub struct Service {
    writer: Mutex<Writer>,
    view: RwLock<Arc<State>>,
    admin_token: String,
}

impl Service {
    pub fn new(store: EventStore, state: State, admin_token: impl Into<String>) -> Self {
        let view = RwLock::new(Arc::new(state.clone()));
        Self { writer: Mutex::new(Writer { store, state }), view, admin_token: admin_token.into() }
    }

    pub fn in_memory(admin_token: impl Into<String>) -> Self {
        Self::new(EventStore::in_memory(), State::default(), admin_token)
    }

    /// Opens a file-backed service, replaying its log.
    pub fn open(dir: impl Into<PathBuf>, admin_token: impl Into<String>) -> Result<Self, ServiceError> {
        let (store, state) = EventStore::open(dir)?;
        Ok(Self::new(store, state, admin_token))
    }

    pub fn is_admin(&self, token: &str) -> bool {
        !self.admin_token.is_empty() && token == self.admin_token
    }

    /// Immutable view of the current state.
    pub fn state(&self) -> Arc<State> {
        self.view.read().expect("state lock").clone()
    }

    fn commit(&self, event: Event) -> Result<Ack, ServiceError> {
        let mut w = self.writer.lock().expect("writer lock");
        w.state.validate(&event)?;
        let seq = w.store.append(&event)?;
        w.state.apply(&event).expect("validated event applies");
        w.store.maybe_snapshot(&w.state)?;
        *self.view.write().expect("state lock") = Arc::new(w.state.clone());
        log::debug!("event {seq}: {} on {}", event_kind(&event), event.project());
        Ok(Ack { seq })
    }

    /// Writes a snapshot of the current state now.
    pub fn snapshot(&self) -> Result<(), ServiceError> {
        let w = self.writer.lock().expect("writer lock");
        w.store.snapshot(&w.state)
    }

    pub fn create_project(&self, req: CreateProject) -> Result<ProjectCreated, ServiceError> {
        let raters: Vec<Rater> =
            req.raters.iter().map(|id| Rater { id: id.clone(), token: uuid::Uuid::new_v4().simple().to_string() }).collect();
        let rater_tokens = raters.iter().map(|r| (r.id.clone(), r.token.clone())).collect();
        self.commit(Event::ProjectCreated {
            project: req.id.clone(),
            sentences: req.sentences,
            raters,
            exclude_own_labels: req.exclude_own_labels,
            seed: req.seed.unwrap_or(DEFAULT_PROJECT_SEED),
        })?;
        Ok(ProjectCreated { project: req.id, stage: Stage::Stage1Open, rater_tokens })
    }

    /// Creates the 15 bundled reference sentences as project
    /// [`DEFAULT_PROJECT_ID`] unless it already exists.
    pub fn ensure_default_project(&self, raters: &[String]) -> Result<Option<ProjectCreated>, ServiceError> {
        if self.state().projects.contains_key(DEFAULT_PROJECT_ID) {
            return Ok(None);
        }
        self.create_project(CreateProject {
            id: DEFAULT_PROJECT_ID.into(),
            sentences: default_sentences(),
            raters: raters.to_vec(),
            exclude_own_labels: true,
            seed: None,
        })
        .map(Some)
    }

    pub fn submit_stage1(&self, req: Stage1Request) -> Result<Ack, ServiceError> {
        self.commit(Event::Stage1Submitted {
            project: req.project,
            rater: req.rater,
            sentence: req.sentence,
            code: req.code,
            difficulty: req.difficulty,
        })
    }

    pub fn freeze(&self, project: &str, req: FreezeRequest) -> Result<Ack, ServiceError> {
        self.commit(Event::Stage2Opened { project: project.into(), model_labels: req.model_labels, golden: req.golden })
    }

    pub fn submit_rating(&self, req: RatingRequest) -> Result<Ack, ServiceError> {
        self.commit(Event::RatingSubmitted {
            project: req.project,
            rater: req.rater,
            sentence: req.sentence,
            handle: req.handle,
            value: req.value,
        })
    }

    pub fn close(&self, project: &str) -> Result<Ack, ServiceError> {
        self.commit(Event::ProjectClosed { project: project.into() })
    }

    pub fn tasks(&self, project: &str, rater: &str) -> Result<TaskList, ServiceError> {
        model::task_list(self.state().project(project)?, rater)
    }

    pub fn export(&self, project: &str) -> Result<ExportBundle, ServiceError> {
        Ok(model::export(self.state().project(project)?))
    }

    pub fn summary(&self, project: &str) -> Result<ProjectSummary, ServiceError> {
        let state = self.state();
        let p = state.project(project)?;
        Ok(ProjectSummary {
            project: p.id.clone(),
            stage: p.stage,
            sentences: p.sentences.len(),
            raters: p.raters.iter().map(|r| r.id.clone()).collect(),
            exclude_own_labels: p.exclude_own_labels,
            completed: p
                .raters
                .iter()
                .map(|r| (r.id.clone(), p.sentences.iter().filter(|s| p.task_completed(&r.id, &s.id)).count()))
                .collect(),
        })
    }
}

fn event_kind(e: &Event) -> &'static str {
    match e {
        Event::ProjectCreated { .. } => "project_created",
        Event::Stage1Submitted { .. } => "stage1_submitted",
        Event::Stage2Opened { .. } => "stage2_opened",
        Event::RatingSubmitted { .. } => "rating_submitted",
        Event::ProjectClosed { .. } => "project_closed",
    }
}

/// The bundled reference quotes as project sentences.
pub fn default_sentences() -> Vec<Sentence> {
    reference_quotes().iter().map(|q| Sentence { id: q.id.clone(), text: q.text.clone() }).collect()
}
