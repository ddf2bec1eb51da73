//! Pure annotation state machine: events in, state out. No I/O.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use qualcode::agreement::{DifficultyRating, LabelRating, GOLD_SOURCE};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Validation(String),
    #[error("project {project} is {actual}, operation needs {expected}")]
    WrongStage { project: String, expected: Stage, actual: Stage },
    #[error("{0}")]
    Forbidden(String),
    #[error("missing or invalid bearer token")]
    Unauthorized,
    #[error("store I/O at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("event log is corrupt: {0}")]
    Corrupt(String),
}

fn invalid(msg: impl Into<String>) -> ServiceError {
    ServiceError::Validation(msg.into())
}

/// Who wrote a label. Serialized as the agreement module's source id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Provenance {
    Coder(String),
    Model(String),
    Gold,
}

impl Provenance {
    /// `coder:<id>`, `model:<name>` or `GS`.
    pub fn source_id(&self) -> String {
        match self {
            Provenance::Coder(id) => format!("coder:{id}"),
            Provenance::Model(name) => format!("model:{name}"),
            Provenance::Gold => GOLD_SOURCE.to_string(),
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source_id())
    }
}

impl FromStr for Provenance {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == GOLD_SOURCE {
            Ok(Provenance::Gold)
        } else if let Some(id) = s.strip_prefix("coder:") {
            Ok(Provenance::Coder(id.to_string()))
        } else if let Some(name) = s.strip_prefix("model:") {
            Ok(Provenance::Model(name.to_string()))
        } else {
            Err(format!("unknown provenance {s:?}"))
        }
    }
}

impl Serialize for Provenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.source_id())
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1Open,
    Stage2Open,
    Closed,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Stage1Open => "stage1_open",
            Stage::Stage2Open => "stage2_open",
            Stage::Closed => "closed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rater {
    pub id: String,
    pub token: String,
}

/// Current Stage-1 answer of one rater for one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Entry {
    pub code: String,
    pub difficulty: u8,
    /// 1 for the first submission, incremented on every resubmission.
    pub version: u32,
}

/// One deduplicated label in a sentence's pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub handle: String,
    pub text: String,
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub seed: u64,
    /// Handles in presentation order.
    pub handles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub id: String,
    pub sentences: Vec<Sentence>,
    pub raters: Vec<Rater>,
    pub exclude_own_labels: bool,
    pub seed: u64,
    pub stage: Stage,
    /// rater -> sentence -> entry
    pub stage1: BTreeMap<String, BTreeMap<String, Stage1Entry>>,
    /// sentence -> labels sorted by handle
    pub labels: BTreeMap<String, Vec<Label>>,
    /// rater -> sentence -> assignment
    pub assignments: BTreeMap<String, BTreeMap<String, Assignment>>,
    /// rater -> sentence -> handle -> value
    pub ratings: BTreeMap<String, BTreeMap<String, BTreeMap<String, u8>>>,
}

impl Project {
    pub fn sentence(&self, id: &str) -> Option<&Sentence> {
        self.sentences.iter().find(|s| s.id == id)
    }

    pub fn has_rater(&self, id: &str) -> bool {
        self.raters.iter().any(|r| r.id == id)
    }

    /// The rater a bearer token belongs to.
    pub fn rater_for_token(&self, token: &str) -> Option<&str> {
        self.raters.iter().find(|r| r.token == token).map(|r| r.id.as_str())
    }

    fn expect_stage(&self, expected: Stage) -> Result<(), ServiceError> {
        if self.stage == expected {
            Ok(())
        } else {
            Err(ServiceError::WrongStage { project: self.id.clone(), expected, actual: self.stage })
        }
    }

    fn check_rater_sentence(&self, rater: &str, sentence: &str) -> Result<(), ServiceError> {
        if !self.has_rater(rater) {
            return Err(ServiceError::NotFound(format!("rater {rater:?} in project {:?}", self.id)));
        }
        if self.sentence(sentence).is_none() {
            return Err(ServiceError::NotFound(format!("sentence {sentence:?} in project {:?}", self.id)));
        }
        Ok(())
    }

    pub fn stage1_entry(&self, rater: &str, sentence: &str) -> Option<&Stage1Entry> {
        self.stage1.get(rater).and_then(|m| m.get(sentence))
    }

    pub fn assignment(&self, rater: &str, sentence: &str) -> Option<&Assignment> {
        self.assignments.get(rater).and_then(|m| m.get(sentence))
    }

    pub fn rating(&self, rater: &str, sentence: &str, handle: &str) -> Option<u8> {
        self.ratings.get(rater).and_then(|m| m.get(sentence)).and_then(|m| m.get(handle)).copied()
    }

    /// Whether `rater` has finished `sentence` in the current stage.
    pub fn task_completed(&self, rater: &str, sentence: &str) -> bool {
        match self.stage {
            Stage::Stage1Open => self.stage1_entry(rater, sentence).is_some(),
            Stage::Stage2Open | Stage::Closed => self
                .assignment(rater, sentence)
                .is_some_and(|a| a.handles.iter().all(|h| self.rating(rater, sentence, h).is_some())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    ProjectCreated {
        project: String,
        sentences: Vec<Sentence>,
        raters: Vec<Rater>,
        exclude_own_labels: bool,
        seed: u64,
    },
    Stage1Submitted {
        project: String,
        rater: String,
        sentence: String,
        code: String,
        difficulty: u8,
    },
    Stage2Opened {
        project: String,
        /// sentence -> model name -> code
        model_labels: BTreeMap<String, BTreeMap<String, String>>,
        /// sentence -> golden-standard code
        golden: BTreeMap<String, String>,
    },
    RatingSubmitted {
        project: String,
        rater: String,
        sentence: String,
        handle: String,
        value: u8,
    },
    ProjectClosed {
        project: String,
    },
}

impl Event {
    pub fn project(&self) -> &str {
        match self {
            Event::ProjectCreated { project, .. }
            | Event::Stage1Submitted { project, .. }
            | Event::Stage2Opened { project, .. }
            | Event::RatingSubmitted { project, .. }
            | Event::ProjectClosed { project } => project,
        }
    }
}

/// Opaque, deterministic handle for a label text within a sentence.
pub fn label_handle(project: &str, sentence: &str, text: &str) -> String {
    let digest = Sha256::digest(format!("{project}\0{sentence}\0{text}").as_bytes());
    format!("h{}", &hex::encode(digest)[..12])
}

/// Seed for one rater's presentation order of one sentence.
pub fn permutation_seed(project_seed: u64, rater: &str, sentence: &str) -> u64 {
    let digest = Sha256::digest(format!("{project_seed}\0{rater}\0{sentence}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Pool of deduplicated labels for one sentence. Coder labels come first in
/// rater order, then models by name, then the golden standard.
pub fn build_label_pool(
    project: &str,
    sentence: &str,
    coder_codes: &[(String, String)],
    model_codes: &BTreeMap<String, String>,
    golden: &str,
) -> Vec<Label> {
    let mut by_text: BTreeMap<String, Vec<Provenance>> = BTreeMap::new();
    let entries = coder_codes
        .iter()
        .map(|(rater, code)| (code.as_str(), Provenance::Coder(rater.clone())))
        .chain(model_codes.iter().map(|(m, code)| (code.as_str(), Provenance::Model(m.clone()))))
        .chain(std::iter::once((golden, Provenance::Gold)));
    for (text, prov) in entries {
        by_text.entry(text.trim().to_string()).or_default().push(prov);
    }
    let mut labels: Vec<Label> = by_text
        .into_iter()
        .map(|(text, provenance)| Label { handle: label_handle(project, sentence, &text), text, provenance })
        .collect();
    labels.sort_by(|a, b| a.handle.cmp(&b.handle));
    labels
}

/// Seeded presentation order of `labels` for `rater`. With `exclude_own`,
/// labels whose only author is the rater are left out; shared labels and the
/// golden standard always stay.
pub fn assign(labels: &[Label], rater: &str, seed: u64, exclude_own: bool) -> Assignment {
    let own = Provenance::Coder(rater.to_string());
    let mut handles: Vec<String> = labels
        .iter()
        .filter(|l| !(exclude_own && l.provenance.iter().all(|p| *p == own)))
        .map(|l| l.handle.clone())
        .collect();
    handles.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Assignment { seed, handles }
}

/// Full service state: every project, reconstructed by replaying events.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub projects: BTreeMap<String, Project>,
}

impl State {
    pub fn project(&self, id: &str) -> Result<&Project, ServiceError> {
        self.projects.get(id).ok_or_else(|| ServiceError::NotFound(format!("project {id:?}")))
    }

    /// Checks that `event` is legal in the current state without changing it.
    pub fn validate(&self, event: &Event) -> Result<(), ServiceError> {
        match event {
            Event::ProjectCreated { project, sentences, raters, .. } => {
                if project.trim().is_empty() {
                    return Err(invalid("project id is empty"));
                }
                if self.projects.contains_key(project) {
                    return Err(ServiceError::Conflict(format!("project {project:?} already exists")));
                }
                if sentences.is_empty() {
                    return Err(invalid("a project needs at least one sentence"));
                }
                if raters.is_empty() {
                    return Err(invalid("a project needs at least one rater"));
                }
                let mut seen = BTreeSet::new();
                for s in sentences {
                    if s.id.is_empty() || s.text.trim().is_empty() {
                        return Err(invalid("sentence ids and texts must be nonempty"));
                    }
                    if !seen.insert(&s.id) {
                        return Err(invalid(format!("duplicate sentence id {:?}", s.id)));
                    }
                }
                let mut seen = BTreeSet::new();
                for r in raters {
                    if r.id.is_empty() || r.id.contains(':') {
                        return Err(invalid(format!("invalid rater id {:?}", r.id)));
                    }
                    if !seen.insert(&r.id) {
                        return Err(invalid(format!("duplicate rater id {:?}", r.id)));
                    }
                }
                Ok(())
            }
            Event::Stage1Submitted { project, rater, sentence, code, difficulty } => {
                let p = self.project(project)?;
                p.expect_stage(Stage::Stage1Open)?;
                p.check_rater_sentence(rater, sentence)?;
                if !(1..=3).contains(difficulty) {
                    return Err(invalid(format!("difficulty must be 1, 2 or 3, got {difficulty}")));
                }
                if code.trim().is_empty() {
                    return Err(invalid("code is empty"));
                }
                Ok(())
            }
            Event::Stage2Opened { project, model_labels, golden } => {
                let p = self.project(project)?;
                p.expect_stage(Stage::Stage1Open)?;
                let missing: Vec<String> = p
                    .raters
                    .iter()
                    .flat_map(|r| p.sentences.iter().map(move |s| (r, s)))
                    .filter(|(r, s)| p.stage1_entry(&r.id, &s.id).is_none())
                    .map(|(r, s)| format!("{}/{}", r.id, s.id))
                    .collect();
                if !missing.is_empty() {
                    return Err(invalid(format!("stage-1 submissions missing: {}", missing.join(", "))));
                }
                for s in &p.sentences {
                    let models = model_labels.get(&s.id).filter(|m| !m.is_empty());
                    let models = models.ok_or_else(|| invalid(format!("no model labels for sentence {:?}", s.id)))?;
                    if let Some((m, _)) = models.iter().find(|(m, c)| m.is_empty() || c.trim().is_empty()) {
                        return Err(invalid(format!("empty model name or label {m:?} for sentence {:?}", s.id)));
                    }
                    if golden.get(&s.id).is_none_or(|g| g.trim().is_empty()) {
                        return Err(invalid(format!("no golden-standard label for sentence {:?}", s.id)));
                    }
                }
                let known: BTreeSet<&String> = p.sentences.iter().map(|s| &s.id).collect();
                if let Some(extra) = model_labels.keys().chain(golden.keys()).find(|k| !known.contains(k)) {
                    return Err(ServiceError::NotFound(format!("sentence {extra:?} in project {project:?}")));
                }
                Ok(())
            }
            Event::RatingSubmitted { project, rater, sentence, handle, value } => {
                let p = self.project(project)?;
                p.expect_stage(Stage::Stage2Open)?;
                p.check_rater_sentence(rater, sentence)?;
                if !(1..=5).contains(value) {
                    return Err(invalid(format!("rating must be between 1 and 5, got {value}")));
                }
                let mine = p.assignment(rater, sentence).is_some_and(|a| a.handles.contains(handle));
                if mine {
                    return Ok(());
                }
                let anywhere = p.assignments.values().flat_map(|m| m.values()).any(|a| a.handles.contains(handle));
                if anywhere {
                    Err(ServiceError::Forbidden(format!("label {handle:?} is not part of {rater:?}'s assignment")))
                } else {
                    Err(ServiceError::NotFound(format!("label {handle:?}")))
                }
            }
            Event::ProjectClosed { project } => self.project(project)?.expect_stage(Stage::Stage2Open),
        }
    }

    /// Validates and applies one event.
    pub fn apply(&mut self, event: &Event) -> Result<(), ServiceError> {
        self.validate(event)?;
        match event {
            Event::ProjectCreated { project, sentences, raters, exclude_own_labels, seed } => {
                self.projects.insert(
                    project.clone(),
                    Project {
                        id: project.clone(),
                        sentences: sentences.clone(),
                        raters: raters.clone(),
                        exclude_own_labels: *exclude_own_labels,
                        seed: *seed,
                        stage: Stage::Stage1Open,
                        stage1: BTreeMap::new(),
                        labels: BTreeMap::new(),
                        assignments: BTreeMap::new(),
                        ratings: BTreeMap::new(),
                    },
                );
            }
            Event::Stage1Submitted { project, rater, sentence, code, difficulty } => {
                let p = self.projects.get_mut(project).expect("validated");
                let slot = p.stage1.entry(rater.clone()).or_default();
                let version = slot.get(sentence).map_or(1, |e| e.version + 1);
                slot.insert(sentence.clone(), Stage1Entry { code: code.trim().to_string(), difficulty: *difficulty, version });
            }
            Event::Stage2Opened { project, model_labels, golden } => {
                let p = self.projects.get_mut(project).expect("validated");
                for s in &p.sentences {
                    let coders: Vec<(String, String)> = p
                        .raters
                        .iter()
                        .map(|r| (r.id.clone(), p.stage1[&r.id][&s.id].code.clone()))
                        .collect();
                    let pool = build_label_pool(&p.id, &s.id, &coders, &model_labels[&s.id], &golden[&s.id]);
                    for r in &p.raters {
                        let seed = permutation_seed(p.seed, &r.id, &s.id);
                        let a = assign(&pool, &r.id, seed, p.exclude_own_labels);
                        p.assignments.entry(r.id.clone()).or_default().insert(s.id.clone(), a);
                    }
                    p.labels.insert(s.id.clone(), pool);
                }
                p.stage = Stage::Stage2Open;
            }
            Event::RatingSubmitted { project, rater, sentence, handle, value } => {
                let p = self.projects.get_mut(project).expect("validated");
                p.ratings
                    .entry(rater.clone())
                    .or_default()
                    .entry(sentence.clone())
                    .or_default()
                    .insert(handle.clone(), *value);
            }
            Event::ProjectClosed { project } => {
                self.projects.get_mut(project).expect("validated").stage = Stage::Closed;
            }
        }
        Ok(())
    }

    /// Rebuilds state from a sequence of events.
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a Event>) -> Result<Self, ServiceError> {
        let mut state = State::default();
        for (i, e) in events.into_iter().enumerate() {
            state.apply(e).map_err(|err| ServiceError::Corrupt(format!("event {i} does not apply: {err}")))?;
        }
        Ok(state)
    }
}

// ---------------------------------------------------------------- rater views

/// A label as a rater sees it: handle and text only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCard {
    pub handle: String,
    pub text: String,
    pub rating: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1View {
    pub code: String,
    pub difficulty: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub sentence_id: String,
    pub text: String,
    pub completed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1: Option<Stage1View>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub labels: Vec<LabelCard>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskList {
    pub project: String,
    pub rater: String,
    pub stage: Stage,
    pub total: usize,
    pub completed: usize,
    pub tasks: Vec<TaskView>,
}

/// Blinded task list for one rater in the project's current stage.
pub fn task_list(p: &Project, rater: &str) -> Result<TaskList, ServiceError> {
    if !p.has_rater(rater) {
        return Err(ServiceError::NotFound(format!("rater {rater:?} in project {:?}", p.id)));
    }
    let tasks: Vec<TaskView> = p
        .sentences
        .iter()
        .map(|s| {
            let stage1 = p.stage1_entry(rater, &s.id).map(|e| Stage1View { code: e.code.clone(), difficulty: e.difficulty });
            let labels = match p.stage {
                Stage::Stage1Open => Vec::new(),
                _ => {
                    let pool = &p.labels[&s.id];
                    p.assignment(rater, &s.id)
                        .map(|a| &a.handles[..])
                        .unwrap_or_default()
                        .iter()
                        .map(|h| LabelCard {
                            handle: h.clone(),
                            text: pool.iter().find(|l| &l.handle == h).map(|l| l.text.clone()).unwrap_or_default(),
                            rating: p.rating(rater, &s.id, h),
                        })
                        .collect()
                }
            };
            TaskView {
                sentence_id: s.id.clone(),
                text: s.text.clone(),
                completed: p.task_completed(rater, &s.id),
                stage1,
                labels,
            }
        })
        .collect();
    Ok(TaskList {
        project: p.id.clone(),
        rater: rater.to_string(),
        stage: p.stage,
        total: tasks.len(),
        completed: tasks.iter().filter(|t| t.completed).count(),
        tasks,
    })
}

// ---------------------------------------------------------------- export

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Code {
    pub rater: String,
    pub sentence: String,
    pub code: String,
    pub difficulty: u8,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingRatings {
    pub rater: String,
    pub sentence: String,
    pub unrated: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completeness {
    pub complete: bool,
    /// `rater/sentence` pairs without a Stage-1 submission.
    pub stage1_missing: Vec<String>,
    pub stage2_missing: Vec<MissingRatings>,
}

/// De-anonymized project data in the agreement module's shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportBundle {
    pub project: String,
    pub stage: Stage,
    pub completeness: Completeness,
    pub difficulty: Vec<DifficultyRating>,
    pub label_ratings: Vec<LabelRating>,
    pub stage1_codes: Vec<Stage1Code>,
    pub labels: BTreeMap<String, Vec<Label>>,
}

fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header).expect("in-memory write");
    }
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

impl ExportBundle {
    /// `rater,sentence,level`
    pub fn difficulty_csv(&self) -> String {
        to_csv(&self.difficulty, &["rater", "sentence", "level"])
    }

    /// `expert,sentence,source,value`; a label with several authors yields
    /// one row per author carrying the same value.
    pub fn label_ratings_csv(&self) -> String {
        to_csv(&self.label_ratings, &["expert", "sentence", "source", "value"])
    }

    /// `rater,sentence,code,difficulty,version`
    pub fn stage1_codes_csv(&self) -> String {
        to_csv(&self.stage1_codes, &["rater", "sentence", "code", "difficulty", "version"])
    }

    /// Sentences by raters, difficulty levels, for Krippendorff's alpha.
    pub fn difficulty_matrix_csv(&self) -> String {
        let raters: BTreeSet<&str> = self.difficulty.iter().map(|d| d.rater.as_str()).collect();
        let mut cells: BTreeMap<&str, BTreeMap<&str, u8>> = BTreeMap::new();
        for d in &self.difficulty {
            cells.entry(&d.sentence).or_default().insert(&d.rater, d.level);
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = std::iter::once("item").chain(raters.iter().copied()).collect();
        w.write_record(&header).expect("in-memory write");
        for (sentence, row) in &cells {
            let mut rec = vec![sentence.to_string()];
            rec.extend(raters.iter().map(|r| row.get(r).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }
}

/// Export regardless of stage; gaps are reported, not refused.
pub fn export(p: &Project) -> ExportBundle {
    let mut difficulty = Vec::new();
    let mut stage1_codes = Vec::new();
    let mut stage1_missing = Vec::new();
    for r in &p.raters {
        for s in &p.sentences {
            match p.stage1_entry(&r.id, &s.id) {
                Some(e) => {
                    difficulty.push(DifficultyRating { rater: r.id.clone(), sentence: s.id.clone(), level: e.difficulty });
                    stage1_codes.push(Stage1Code {
                        rater: r.id.clone(),
                        sentence: s.id.clone(),
                        code: e.code.clone(),
                        difficulty: e.difficulty,
                        version: e.version,
                    });
                }
                None => stage1_missing.push(format!("{}/{}", r.id, s.id)),
            }
        }
    }
    let mut label_ratings = Vec::new();
    let mut stage2_missing = Vec::new();
    if p.stage != Stage::Stage1Open {
        for r in &p.raters {
            for s in &p.sentences {
                let pool = &p.labels[&s.id];
                let mut unrated = 0;
                for h in p.assignment(&r.id, &s.id).map(|a| &a.handles[..]).unwrap_or_default() {
                    let Some(value) = p.rating(&r.id, &s.id, h) else {
                        unrated += 1;
                        continue;
                    };
                    let label = pool.iter().find(|l| &l.handle == h).expect("assigned handles are in the pool");
                    for prov in &label.provenance {
                        label_ratings.push(LabelRating {
                            expert: r.id.clone(),
                            sentence: s.id.clone(),
                            source: prov.source_id(),
                            value,
                        });
                    }
                }
                if unrated > 0 {
                    stage2_missing.push(MissingRatings { rater: r.id.clone(), sentence: s.id.clone(), unrated });
                }
            }
        }
    }
    let complete = stage1_missing.is_empty() && stage2_missing.is_empty() && p.stage != Stage::Stage1Open;
    ExportBundle {
        project: p.id.clone(),
        stage: p.stage,
        completeness: Completeness { complete, stage1_missing, stage2_missing },
        difficulty,
        label_ratings,
        stage1_codes,
        labels: p.labels.clone(),
    }
}
