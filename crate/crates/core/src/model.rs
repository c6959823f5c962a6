//! Shared domain records: tasks, actions, observations, trajectories and
//! preference pairs.
//!
//! Every record is an immutable value once built. Invariants are checked by
//! [`Validate`], which reports violations as data instead of failing.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

/// Default cap on observation output, in characters.
pub const DEFAULT_OBSERVATION_CAP: usize = 2048;

/// Name of the terminal tool call that ends a trajectory.
pub const FINAL_ANSWER_TOOL: &str = "final_answer";

/// Records that can report their own invariant violations.
pub trait Validate {
    /// Returns an empty list iff every invariant of the record holds.
    fn violations(&self) -> Vec<String>;

    fn is_valid(&self) -> bool {
        self.violations().is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Draft,
    Revised,
    Accepted,
    Rejected,
}

impl TaskStatus {
    /// Allowed forward edges: draft→revised→{accepted,rejected}.
    pub fn can_advance_to(self, next: TaskStatus) -> bool {
        matches!(
            (self, next),
            (TaskStatus::Draft, TaskStatus::Revised)
                | (TaskStatus::Revised, TaskStatus::Accepted)
                | (TaskStatus::Revised, TaskStatus::Rejected)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Image,
    Pdf,
    Docx,
    Xlsx,
    Mp3,
    Other,
}

impl FileKind {
    pub fn from_extension(ext: &str) -> FileKind {
        match ext.to_ascii_lowercase().as_str() {
            "png" | "jpg" | "jpeg" | "gif" | "bmp" | "webp" => FileKind::Image,
            "pdf" => FileKind::Pdf,
            "docx" => FileKind::Docx,
            "xlsx" => FileKind::Xlsx,
            "mp3" => FileKind::Mp3,
            _ => FileKind::Other,
        }
    }

    /// Extension used when generating a file of this kind.
    pub fn default_extension(self) -> &'static str {
        match self {
            FileKind::Image => "png",
            FileKind::Pdf => "pdf",
            FileKind::Docx => "docx",
            FileKind::Xlsx => "xlsx",
            FileKind::Mp3 => "mp3",
            FileKind::Other => "txt",
        }
    }

    pub fn parse(s: &str) -> Option<FileKind> {
        match s.trim().to_ascii_lowercase().as_str() {
            "image" | "png" | "jpg" | "jpeg" => Some(FileKind::Image),
            "pdf" => Some(FileKind::Pdf),
            "docx" | "doc" | "word" => Some(FileKind::Docx),
            "xlsx" | "xls" | "excel" | "spreadsheet" => Some(FileKind::Xlsx),
            "mp3" | "audio" => Some(FileKind::Mp3),
            "other" | "txt" | "text" => Some(FileKind::Other),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileOrigin {
    Retrieved,
    CodeGenerated,
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileArtifact {
    /// Path relative to the task workspace.
    pub relative_path: String,
    pub kind: FileKind,
    pub content_description: String,
    pub origin: FileOrigin,
}

/// True when `path` is relative and never climbs out of its base directory.
pub fn is_contained_relative(path: &str) -> bool {
    let p = Path::new(path);
    if path.is_empty() || p.is_absolute() {
        return false;
    }
    let mut depth: i64 = 0;
    for comp in p.components() {
        match comp {
            Component::Normal(_) => depth += 1,
            Component::CurDir => {}
            Component::ParentDir => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            Component::RootDir | Component::Prefix(_) => return false,
        }
    }
    depth > 0
}

impl Validate for FileArtifact {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !is_contained_relative(&self.relative_path) {
            v.push(format!(
                "file path {:?} escapes the workspace",
                self.relative_path
            ));
        }
        let ext = Path::new(&self.relative_path)
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("");
        if FileKind::from_extension(ext) != self.kind {
            v.push(format!(
                "file kind {:?} inconsistent with extension {:?}",
                self.kind, ext
            ));
        }
        v
    }
}

/// Where a task came from, kept for audit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Digests of the prompts sent while producing the task.
    pub prompt_digests: Vec<String>,
    /// Indices of the seed queries shown in-context.
    pub seed_ids: Vec<usize>,
    pub original_query: Option<String>,
    pub status_history: Vec<TaskStatus>,
    /// Parsed JSON verdict of the query-file filter.
    pub filter_verdict: Option<serde_json::Value>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub query: String,
    pub files: Vec<FileArtifact>,
    pub tool_hints: Vec<String>,
    pub status: TaskStatus,
    pub provenance: Provenance,
}

impl Task {
    pub fn draft(id: impl Into<String>, query: impl Into<String>, tool_hints: Vec<String>) -> Task {
        let query = query.into();
        Task {
            id: id.into(),
            provenance: Provenance {
                original_query: Some(query.clone()),
                status_history: vec![TaskStatus::Draft],
                ..Provenance::default()
            },
            query,
            files: Vec::new(),
            tool_hints,
            status: TaskStatus::Draft,
        }
    }

    /// Moves the task forward along draft→revised→{accepted,rejected}.
    pub fn advance(&mut self, next: TaskStatus) -> Result<(), crate::CoreError> {
        if !self.status.can_advance_to(next) {
            return Err(crate::CoreError::InvalidTransition {
                from: self.status,
                to: next,
            });
        }
        self.status = next;
        self.provenance.status_history.push(next);
        Ok(())
    }

    /// Rejects the task from any non-terminal state, passing through
    /// `revised` so the status history stays a prefix of the lifecycle.
    pub fn reject(&mut self, note: impl Into<String>) {
        self.provenance.notes.push(note.into());
        if self.status == TaskStatus::Draft {
            self.status = TaskStatus::Revised;
            self.provenance.status_history.push(TaskStatus::Revised);
        }
        if self.status == TaskStatus::Revised {
            self.status = TaskStatus::Rejected;
            self.provenance.status_history.push(TaskStatus::Rejected);
        }
    }

    pub fn file_summaries(&self) -> Vec<String> {
        self.files
            .iter()
            .map(|f| format!("{} ({:?}): {}", f.relative_path, f.kind, f.content_description))
            .collect()
    }
}

impl Validate for Task {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.id.is_empty() {
            v.push("task id is empty".to_string());
        }
        if self.status == TaskStatus::Accepted && self.query.trim().is_empty() {
            v.push("accepted task has an empty query".to_string());
        }
        let lifecycle = [TaskStatus::Draft, TaskStatus::Revised];
        let hist = &self.provenance.status_history;
        if !hist.is_empty() {
            let prefix_ok = hist.iter().enumerate().all(|(i, s)| match i {
                0 | 1 => *s == lifecycle[i],
                2 => matches!(s, TaskStatus::Accepted | TaskStatus::Rejected),
                _ => false,
            });
            if !prefix_ok || hist.last() != Some(&self.status) {
                v.push(format!("status history {hist:?} is not a lifecycle prefix"));
            }
        }
        for f in &self.files {
            v.extend(f.violations());
        }
        v
    }
}

/// Reports duplicate task ids across a run.
pub fn duplicate_task_ids(tasks: &[Task]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut dups = Vec::new();
    for t in tasks {
        if !seen.insert(t.id.as_str()) {
            dups.push(format!("duplicate task id {:?}", t.id));
        }
    }
    dups
}

/// One step emitted by the controller: a thought and code to run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub thought: String,
    pub code: String,
    /// The unparsed model reply.
    pub raw: String,
}

impl Action {
    /// An action that failed to parse keeps only its raw text.
    pub fn unparsed(raw: impl Into<String>) -> Action {
        Action {
            thought: String::new(),
            code: String::new(),
            raw: raw.into(),
        }
    }

    pub fn is_parsed(&self) -> bool {
        !self.thought.trim().is_empty() && !self.code.trim().is_empty()
    }

    /// Text form used for exports and similarity statistics.
    pub fn text(&self) -> String {
        if self.is_parsed() {
            format!("Thought: {}\nCode:\n{}", self.thought, self.code)
        } else {
            self.raw.clone()
        }
    }
}

impl Validate for Action {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.thought.trim().is_empty() {
            v.push("action thought is empty".to_string());
        }
        if self.code.trim().is_empty() {
            v.push("action code is empty".to_string());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsStatus {
    Ok,
    Error,
    Timeout,
    ParseError,
}

impl ObsStatus {
    /// Error, timeout and parse failures all count as failed executions.
    pub fn is_failure(self) -> bool {
        !matches!(self, ObsStatus::Ok)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub status: ObsStatus,
    pub output: String,
    pub error_kind: Option<String>,
    pub error_message: Option<String>,
    pub duration_ms: u64,
}

impl Observation {
    pub fn ok(output: impl Into<String>) -> Observation {
        Observation {
            status: ObsStatus::Ok,
            output: output.into(),
            error_kind: None,
            error_message: None,
            duration_ms: 0,
        }
    }

    pub fn parse_error(diagnostic: impl Into<String>) -> Observation {
        Observation {
            status: ObsStatus::ParseError,
            output: String::new(),
            error_kind: Some("parse_error".to_string()),
            error_message: Some(diagnostic.into()),
            duration_ms: 0,
        }
    }

    /// Truncates output to `cap` characters.
    pub fn truncated(mut self, cap: usize) -> Observation {
        self.output = truncate_chars(&self.output, cap);
        self
    }

    /// Text shown to the verifier and the controller for this observation.
    pub fn result_text(&self) -> String {
        match self.status {
            ObsStatus::Ok => self.output.clone(),
            ObsStatus::ParseError => format!(
                "[unparseable step] {}",
                self.error_message.as_deref().unwrap_or("parse error")
            ),
            ObsStatus::Error | ObsStatus::Timeout => {
                let mut s = format!(
                    "Error ({}): {}",
                    self.error_kind.as_deref().unwrap_or("error"),
                    self.error_message.as_deref().unwrap_or("")
                );
                if !self.output.is_empty() {
                    s.push_str("\nOutput before error:\n");
                    s.push_str(&self.output);
                }
                s
            }
        }
    }

    pub fn violations_with_cap(&self, cap: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.status == ObsStatus::Ok && self.error_kind.is_some() {
            v.push("ok observation carries an error kind".to_string());
        }
        if matches!(self.status, ObsStatus::Error | ObsStatus::Timeout)
            && self.error_message.is_none()
        {
            v.push("failed observation lacks an error message".to_string());
        }
        let len = self.output.chars().count();
        if len > cap {
            v.push(format!("observation output length {len} exceeds cap {cap}"));
        }
        v
    }
}

impl Validate for Observation {
    fn violations(&self) -> Vec<String> {
        self.violations_with_cap(DEFAULT_OBSERVATION_CAP)
    }
}

pub fn truncate_chars(s: &str, cap: usize) -> String {
    match s.char_indices().nth(cap) {
        Some((idx, _)) => s[..idx].to_string(),
        None => s.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub action: Action,
    pub observation: Observation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based step index.
    pub index: usize,
    pub candidates: Vec<Candidate>,
    /// 1-based index into `candidates`.
    pub chosen: usize,
    pub verifier_reason: String,
}

impl StepRecord {
    pub fn chosen_candidate(&self) -> Option<&Candidate> {
        self.chosen
            .checked_sub(1)
            .and_then(|i| self.candidates.get(i))
    }
}

impl Validate for StepRecord {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.index == 0 {
            v.push("step index must be 1-based".to_string());
        }
        if self.candidates.is_empty() {
            v.push("step has no candidates".to_string());
        }
        match self.chosen_candidate() {
            None => v.push("chosen out of range".to_string()),
            Some(c) if c.observation.status == ObsStatus::ParseError => {
                v.push("chosen candidate is unparseable".to_string())
            }
            Some(_) => {}
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub query: String,
    pub file_summaries: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub terminal: bool,
    pub final_answer: Option<String>,
    pub budget_exhausted: bool,
    pub max_steps: usize,
    /// Reason the exploration stopped early, if it did.
    pub aborted: Option<String>,
}

impl Trajectory {
    pub fn new(task: &Task, max_steps: usize) -> Trajectory {
        Trajectory {
            task_id: task.id.clone(),
            query: task.query.clone(),
            file_summaries: task.file_summaries(),
            steps: Vec::new(),
            terminal: false,
            final_answer: None,
            budget_exhausted: false,
            max_steps,
            aborted: None,
        }
    }

    /// The context the controller saw before step `index` (1-based).
    pub fn context_at(&self, index: usize) -> StepContext {
        let history = self
            .steps
            .iter()
            .take(index.saturating_sub(1))
            .filter_map(|s| s.chosen_candidate())
            .map(|c| HistoryEntry {
                thought: c.action.thought.clone(),
                code: c.action.code.clone(),
                observation: c.observation.result_text(),
            })
            .collect();
        StepContext {
            query: self.query.clone(),
            file_summaries: self.file_summaries.clone(),
            history,
        }
    }

    /// Chosen codes of steps before `index`, in order. A chosen step whose
    /// execution failed left no state behind and is not replayed.
    pub fn chosen_prefix(&self, index: usize) -> Vec<String> {
        self.steps
            .iter()
            .take(index.saturating_sub(1))
            .filter_map(|s| s.chosen_candidate())
            .filter(|c| c.observation.status == ObsStatus::Ok)
            .map(|c| c.action.code.clone())
            .collect()
    }
}

impl Validate for Trajectory {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (pos, step) in self.steps.iter().enumerate() {
            if step.index != pos + 1 {
                v.push(format!(
                    "step at position {} has index {}, expected {}",
                    pos + 1,
                    step.index,
                    pos + 1
                ));
            }
            v.extend(step.violations());
        }
        if self.steps.len() > self.max_steps {
            v.push(format!(
                "{} steps exceed max_steps {}",
                self.steps.len(),
                self.max_steps
            ));
        }
        if self.terminal && self.final_answer.is_none() && !self.budget_exhausted {
            v.push("terminal trajectory lacks a final answer".to_string());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub thought: String,
    pub code: String,
    pub observation: String,
}

/// Input of one step: query, files and the chosen history so far.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StepContext {
    pub query: String,
    pub file_summaries: Vec<String>,
    pub history: Vec<HistoryEntry>,
}

impl StepContext {
    pub fn initial(task: &Task) -> StepContext {
        StepContext {
            query: task.query.clone(),
            file_summaries: task.file_summaries(),
            history: Vec::new(),
        }
    }

    pub fn step_index(&self) -> usize {
        self.history.len() + 1
    }

    /// Rendered text as shown to the controller.
    pub fn render(&self) -> String {
        let mut s = format!("Task: {}\n", self.query);
        if self.file_summaries.is_empty() {
            s.push_str("Files: none\n");
        } else {
            s.push_str("Files:\n");
            for f in &self.file_summaries {
                s.push_str(&format!("- {f}\n"));
            }
        }
        if !self.history.is_empty() {
            s.push_str("\nHistory:\n");
            for (i, h) in self.history.iter().enumerate() {
                s.push_str(&format!(
                    "Step {}:\nThought: {}\nCode:\n```py\n{}\n```\nObservation: {}\n\n",
                    i + 1,
                    h.thought,
                    h.code,
                    h.observation
                ));
            }
        }
        s.push_str(&format!(
            "\nNow write step {}: a Thought followed by one code block.",
            self.step_index()
        ));
        s
    }

    pub fn violations_with_cap(&self, cap: usize) -> Vec<String> {
        self.history
            .iter()
            .enumerate()
            .filter(|(_, h)| h.observation.chars().count() > cap)
            .map(|(i, _)| format!("history entry {} exceeds the observation cap", i + 1))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairMeta {
    pub pair_id: String,
    pub task_id: String,
    pub step_index: usize,
    /// 1-based candidate index of the preferred action.
    pub chosen_candidate: usize,
    /// 1-based candidate index of the dispreferred action.
    pub rejected_candidate: usize,
    pub chosen_status: ObsStatus,
    pub rejected_status: ObsStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context: StepContext,
    pub preferred: Action,
    pub dispreferred: Action,
    pub meta: PairMeta,
}

impl Validate for PreferencePair {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.preferred.raw == self.dispreferred.raw {
            v.push("preferred and dispreferred actions are identical".to_string());
        }
        let m = &self.meta;
        if m.step_index == 0 || m.chosen_candidate == 0 || m.rejected_candidate == 0 {
            v.push("pair indices must be 1-based".to_string());
        }
        if m.chosen_candidate == m.rejected_candidate {
            v.push("pair compares a candidate with itself".to_string());
        }
        if self.context.history.len() + 1 != m.step_index {
            v.push(format!(
                "context history length {} inconsistent with step {}",
                self.context.history.len(),
                m.step_index
            ));
        }
        if m.chosen_status == ObsStatus::ParseError {
            v.push("preferred action is unparseable".to_string());
        }
        v
    }
}

impl PreferencePair {
    /// Checks the pair's indices against the trajectory it was built from.
    pub fn violations_against(&self, source: &Trajectory) -> Vec<String> {
        let mut v = self.violations();
        if source.task_id != self.meta.task_id {
            v.push("pair task id does not match trajectory".to_string());
            return v;
        }
        match source.steps.get(self.meta.step_index.wrapping_sub(1)) {
            None => v.push("pair step index outside trajectory".to_string()),
            Some(step) => {
                if step.chosen != self.meta.chosen_candidate {
                    v.push("pair chosen index differs from the step verdict".to_string());
                }
                if self.meta.rejected_candidate > step.candidates.len() {
                    v.push("pair rejected index outside candidates".to_string());
                }
            }
        }
        v
    }
}

/// Canned responses of a fixture-backed tool, keyed by normalized arguments.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolFixture {
    #[serde(default)]
    pub responses: BTreeMap<String, FixtureResponse>,
    /// Endpoint a real sandbox may proxy to instead of canned responses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passthrough: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FixtureResponse {
    Text(String),
    Error { error: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub signature: String,
    pub doc: String,
    #[serde(default)]
    pub fixture: ToolFixture,
}

/// The fixed toolkit available to the agent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRegistrySpec {
    pub tools: BTreeMap<String, ToolSpec>,
}

impl ToolRegistrySpec {
    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }

    /// One line per tool: signature and documentation.
    pub fn describe(&self) -> String {
        self.tools
            .iter()
            .map(|(name, t)| format!("- {name}{}: {}", t.signature, t.doc))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn fixtures(&self) -> BTreeMap<String, ToolFixture> {
        self.tools
            .iter()
            .map(|(k, t)| (k.clone(), t.fixture.clone()))
            .collect()
    }

    /// Tool hints of an accepted task must all be registered.
    pub fn task_violations(&self, task: &Task) -> Vec<String> {
        if task.status != TaskStatus::Accepted {
            return Vec::new();
        }
        task.tool_hints
            .iter()
            .filter(|t| !self.contains(t))
            .map(|t| format!("tool hint {t:?} is not registered"))
            .collect()
    }
}

impl Validate for ToolRegistrySpec {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for name in self.tools.keys() {
            let ok = !name.is_empty()
                && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                && !name.starts_with(|c: char| c.is_ascii_digit());
            if !ok {
                v.push(format!("tool name {name:?} is not an identifier"));
            }
        }
        v
    }
}
