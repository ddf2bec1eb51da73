//! Two-stage expert annotation service.
//!
//! Stage 1 collects an open code and a 1–3 difficulty level per rater and
//! sentence. Freezing the project builds, per sentence, a pool of coder,
//! model and golden-standard labels (identical texts merged into one
//! handle), and Stage 2 collects 1–5 ratings of those labels in a seeded
//! per-rater order. Raters only ever see handles and label text; provenance
//! is resolved in the admin export.
//!
//! State changes are [`model::Event`]s appended to a JSONL log, so replaying
//! the log reproduces the service state exactly.

pub mod api;
pub mod model;
pub mod service;
pub mod store;

pub use api::{router, serve};
pub use model::{Event, ExportBundle, Provenance, ServiceError, Stage, State, TaskList};
pub use service::{CreateProject, FreezeRequest, RatingRequest, Service, Stage1Request};
pub use store::EventStore;
