//! Task synthesis: seed-conditioned query generation, file planning, file
//! materialization, then revision and filtering of each query against its
//! files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::warn;

use crate::canonical::{self, extract_json, extract_json_all};
use crate::executor::{ExecRequest, ExecStatus, Executor, Profile};
use crate::gateway::{ChatRequest, Gateway, GatewayError, Message, RoleTag, Sampling};
use crate::model::{FileArtifact, FileKind, FileOrigin, Task, TaskStatus, ToolRegistrySpec};
use crate::prompts;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("no retrievable image for {0:?}")]
    RetrievalMiss(String),
    #[error("file generation failed: {0}")]
    GenerationFailed(String),
    #[error("task {id} is {status:?}, expected {expected:?}")]
    WrongStatus {
        id: String,
        status: TaskStatus,
        expected: TaskStatus,
    },
    #[error("invalid seed pool: {0}")]
    InvalidPool(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Core(#[from] crate::CoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed {
    pub query: String,
    pub tools: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPool {
    pub seeds: Vec<Seed>,
    pub source_tag: String,
}

impl SeedPool {
    pub fn from_ndjson(text: &str, source_tag: impl Into<String>) -> Result<SeedPool, ForgeError> {
        Ok(SeedPool {
            seeds: canonical::from_ndjson(text)?,
            source_tag: source_tag.into(),
        })
    }

    pub fn violations(&self, registry: &ToolRegistrySpec) -> Vec<String> {
        let mut v = Vec::new();
        if self.seeds.is_empty() {
            v.push("seed pool is empty".to_string());
        }
        for (i, s) in self.seeds.iter().enumerate() {
            for t in &s.tools {
                if !registry.contains(t) {
                    v.push(format!("seed {i} uses unregistered tool {t:?}"));
                }
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilePlanEntry {
    pub content_description: String,
    pub kind: FileKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilePlan {
    pub info_from_web: String,
    pub info_from_files: String,
    pub entries: Vec<FilePlanEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedImage {
    pub path: PathBuf,
    pub caption: String,
    pub score: f64,
}

/// Finds a source image matching a description.
pub trait ImageRetriever: Send + Sync {
    fn retrieve(&self, description: &str) -> Option<RetrievedImage>;
}

#[derive(Debug, Clone, Deserialize)]
struct IndexLine {
    path: String,
    caption: String,
}

/// Captioned images in a directory, listed in `manifest.jsonl` as
/// `{"path": ..., "caption": ...}` lines. Matching is cosine similarity of
/// word-count vectors between description and caption.
#[derive(Debug, Clone)]
pub struct FixtureImageIndex {
    dir: PathBuf,
    entries: Vec<IndexLine>,
    pub threshold: f64,
}

impl FixtureImageIndex {
    pub const DEFAULT_THRESHOLD: f64 = 0.3;

    pub fn load(dir: &Path) -> Result<FixtureImageIndex, ForgeError> {
        let text = std::fs::read_to_string(dir.join("manifest.jsonl")).map_err(crate::CoreError::from)?;
        Ok(FixtureImageIndex {
            dir: dir.to_path_buf(),
            entries: canonical::from_ndjson(&text)?,
            threshold: Self::DEFAULT_THRESHOLD,
        })
    }

    pub fn empty() -> FixtureImageIndex {
        FixtureImageIndex {
            dir: PathBuf::new(),
            entries: Vec::new(),
            threshold: Self::DEFAULT_THRESHOLD,
        }
    }
}

fn word_counts(text: &str) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for w in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
    {
        *m.entry(w.to_lowercase()).or_insert(0.0) += 1.0;
    }
    m
}

/// Cosine similarity of word-count vectors.
pub fn token_cosine(a: &str, b: &str) -> f64 {
    let (ca, cb) = (word_counts(a), word_counts(b));
    let dot: f64 = ca.iter().filter_map(|(w, x)| cb.get(w).map(|y| x * y)).sum();
    let na = ca.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = cb.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl ImageRetriever for FixtureImageIndex {
    fn retrieve(&self, description: &str) -> Option<RetrievedImage> {
        let mut best: Option<RetrievedImage> = None;
        for e in &self.entries {
            let score = token_cosine(description, &e.caption);
            if score >= self.threshold && best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(RetrievedImage {
                    path: self.dir.join(&e.path),
                    caption: e.caption.clone(),
                    score,
                });
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeConfig {
    /// In-context seeds per generation call.
    pub seeds_per_call: usize,
    pub max_tokens: u32,
    pub filegen_attempts: u32,
    pub exec_timeout_s: f64,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            seeds_per_call: 20,
            max_tokens: 2048,
            filegen_attempts: 2,
            exec_timeout_s: 30.0,
        }
    }
}

pub struct TaskForge<'a> {
    pub gateway: &'a Gateway,
    pub executor: &'a dyn Executor,
    pub registry: &'a ToolRegistrySpec,
    pub retriever: &'a dyn ImageRetriever,
    pub cfg: ForgeConfig,
}

const NO_REVISION: &str = "no revision is needed.";

fn require(task: &Task, expected: TaskStatus) -> Result<(), ForgeError> {
    if task.status != expected {
        return Err(ForgeError::WrongStatus {
            id: task.id.clone(),
            status: task.status,
            expected,
        });
    }
    Ok(())
}

fn string_field<'v>(v: &'v Value, key: &str) -> Option<&'v str> {
    v.get(key).and_then(Value::as_str)
}

/// Parses a query-generation reply: a JSON list of `{query, tools}`
/// objects, or a bare comma-separated run of such objects.
pub fn parse_query_reply(text: &str) -> Result<Vec<(String, Vec<String>)>, ForgeError> {
    let items = match extract_json(text, '[') {
        Some(Value::Array(items)) if items.iter().all(Value::is_object) => items,
        _ => {
            let items = extract_json_all(text, '{');
            if items.is_empty() {
                return Err(ForgeError::MalformedReply("no JSON query list found".into()));
            }
            items
        }
    };
    items
        .iter()
        .map(|item| {
            let query = string_field(item, "query")
                .ok_or_else(|| ForgeError::MalformedReply("query entry lacks \"query\"".into()))?;
            let tools = item
                .get("tools")
                .and_then(Value::as_array)
                .ok_or_else(|| ForgeError::MalformedReply("query entry lacks \"tools\"".into()))?
                .iter()
                .map(|t| {
                    t.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| ForgeError::MalformedReply("tool names must be strings".into()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok((query.trim().to_string(), tools))
        })
        .collect()
}

fn as_count(v: &Value) -> Option<usize> {
    match v {
        Value::Number(n) => n.as_u64().map(|n| n as usize),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Parses the file-content reply into a plan.
pub fn parse_file_plan(text: &str) -> Result<FilePlan, ForgeError> {
    let v = extract_json(text, '{')
        .ok_or_else(|| ForgeError::MalformedReply("no JSON object in file plan".into()))?;
    let info_from_web = string_field(&v, "information from the Internet")
        .unwrap_or_default()
        .to_string();
    let info_from_files = string_field(&v, "information from images")
        .unwrap_or_default()
        .to_string();
    let no_image_info = info_from_files
        .to_lowercase()
        .contains("no information is required");
    let mut entries = Vec::new();
    match v.get("file") {
        None | Some(Value::Null) if no_image_info => {}
        None | Some(Value::Null) => {
            return Err(ForgeError::MalformedReply("file plan lacks a \"file\" block".into()))
        }
        Some(file) => {
            let declared = match file.get("image_numbers") {
                Some(n) => as_count(n).ok_or_else(|| {
                    ForgeError::MalformedReply("image_numbers is not a count".into())
                })?,
                None if no_image_info => 0,
                None => return Err(ForgeError::MalformedReply("missing image_numbers".into())),
            };
            let mut images: Vec<(usize, String)> = Vec::new();
            if let Some(content) = file.get("image_content").and_then(Value::as_object) {
                for (k, desc) in content {
                    let idx = k
                        .strip_prefix("image_")
                        .and_then(|n| n.parse::<usize>().ok())
                        .ok_or_else(|| ForgeError::MalformedReply(format!("unexpected key {k:?}")))?;
                    let desc = desc
                        .as_str()
                        .filter(|d| !d.trim().is_empty())
                        .ok_or_else(|| ForgeError::MalformedReply(format!("{k} has no description")))?;
                    images.push((idx, desc.to_string()));
                }
            }
            if images.len() != declared {
                return Err(ForgeError::MalformedReply(format!(
                    "image_numbers={declared} but {} image descriptions",
                    images.len()
                )));
            }
            images.sort();
            entries.extend(images.into_iter().map(|(_, d)| FilePlanEntry {
                content_description: d,
                kind: FileKind::Image,
            }));
            if let Some(others) = file.get("other_files").and_then(Value::as_array) {
                for o in others {
                    let kind = string_field(o, "type")
                        .and_then(FileKind::parse)
                        .filter(|k| *k != FileKind::Image)
                        .ok_or_else(|| ForgeError::MalformedReply("bad other_files type".into()))?;
                    let content = string_field(o, "content")
                        .filter(|c| !c.trim().is_empty())
                        .ok_or_else(|| ForgeError::MalformedReply("other_files entry lacks content".into()))?;
                    entries.push(FilePlanEntry {
                        content_description: content.to_string(),
                        kind,
                    });
                }
            }
        }
    }
    Ok(FilePlan {
        info_from_web,
        info_from_files,
        entries,
    })
}

/// Code between the `## code start` / `## code end` markers, without any
/// surrounding code fence.
pub fn extract_marked_code(text: &str) -> Option<String> {
    let start = text.find("## code start")? + "## code start".len();
    let end = start + text[start..].find("## code end")?;
    let mut code = text[start..end].trim();
    if let Some(rest) = code.strip_prefix("```") {
        code = rest.split_once('\n').map_or("", |(_, body)| body);
        code = code.trim_end().strip_suffix("```").unwrap_or(code);
    }
    let code = code.trim();
    (!code.is_empty()).then(|| code.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterVerdict {
    pub correct: bool,
    pub updated_query: Option<String>,
    pub raw: Value,
}

pub fn parse_filter_reply(text: &str) -> Result<FilterVerdict, ForgeError> {
    let v = extract_json(text, '{')
        .ok_or_else(|| ForgeError::MalformedReply("no JSON object in filter reply".into()))?;
    let correct = string_field(&v, "correct")
        .ok_or_else(|| ForgeError::MalformedReply("filter reply lacks \"correct\"".into()))?
        .trim()
        .trim_matches('\'')
        .to_lowercase();
    let updated = string_field(&v, "updated_query")
        .map(str::trim)
        .filter(|q| !q.is_empty() && !q.eq_ignore_ascii_case(NO_REVISION))
        .map(str::to_string);
    Ok(FilterVerdict {
        correct: correct == "yes",
        updated_query: updated,
        raw: v,
    })
}

impl<'a> TaskForge<'a> {
    fn ask(&self, role: RoleTag, messages: Vec<Message>) -> Result<(String, String), ForgeError> {
        let req = ChatRequest::new(role, messages, Sampling::greedy(self.cfg.max_tokens));
        let digest = req.digest();
        let reply = self.gateway.complete(&req)?;
        Ok((reply.texts.into_iter().next().unwrap_or_default(), digest))
    }

    fn tool_set(&self) -> String {
        self.registry.describe()
    }

    /// Draws seeds, asks the task generator for new queries, and returns up
    /// to `k` draft tasks.
    pub fn generate_queries(&self, pool: &SeedPool, k: usize, seed: u64) -> Result<Vec<Task>, ForgeError> {
        if pool.seeds.is_empty() {
            return Err(ForgeError::InvalidPool("seed pool is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let take = self.cfg.seeds_per_call.min(pool.seeds.len()).max(1);
        let mut seed_ids = sample(&mut rng, pool.seeds.len(), take).into_vec();
        seed_ids.sort_unstable();
        let examples = seed_ids
            .iter()
            .map(|&i| canonical::to_canonical_string(&pool.seeds[i]))
            .collect::<Result<Vec<_>, _>>()?
            .join("\n");
        let system = prompts::fill(
            prompts::QUERY_GEN_SYSTEM,
            &[("TOOL_SET", &self.tool_set()), ("IN_CONTEXT_EXAMPLES", &examples)],
        );
        let user = prompts::fill(prompts::QUERY_GEN_USER, &[("COUNT", &k.to_string())]);
        let mut messages = vec![Message::system(system), Message::user(user)];

        let mut digests = Vec::new();
        let mut parsed = None;
        for attempt in 0..2 {
            let (text, digest) = self.ask(RoleTag::Taskgen, messages.clone())?;
            digests.push(digest);
            match parse_query_reply(&text) {
                Ok(items) => {
                    parsed = Some(items);
                    break;
                }
                Err(e) if attempt == 0 => {
                    messages.push(Message::assistant(text));
                    messages.push(Message::user(format!(
                        "Your reply could not be parsed ({e}). Output only the JSON list of {{\"query\", \"tools\"}} objects."
                    )));
                }
                Err(e) => warn!(seed, "dropping query batch: {e}"),
            }
        }
        let Some(items) = parsed else {
            return Ok(Vec::new());
        };
        Ok(items
            .into_iter()
            .filter(|(q, _)| !q.is_empty())
            .take(k)
            .enumerate()
            .map(|(i, (query, tools))| {
                let tools = tools.into_iter().filter(|t| self.registry.contains(t)).collect();
                let mut task = Task::draft(format!("q{seed:x}-{i:02}"), query, tools);
                task.provenance.seed_ids = seed_ids.clone();
                task.provenance.prompt_digests = digests.clone();
                task
            })
            .collect())
    }

    pub fn plan_files(&self, task: &Task) -> Result<FilePlan, ForgeError> {
        require(task, TaskStatus::Draft)?;
        let system = prompts::fill(prompts::FILE_CONTENT_SYSTEM, &[("TOOL_SET", &self.tool_set())]);
        let query = format!("{} (suggested tools: {})", task.query, task.tool_hints.join(", "));
        let user = prompts::fill(prompts::FILE_CONTENT_USER, &[("QUERY", &query)]);
        let mut messages = vec![Message::system(system), Message::user(user)];
        let (text, _) = self.ask(RoleTag::Taskgen, messages.clone())?;
        match parse_file_plan(&text) {
            Ok(plan) => Ok(plan),
            Err(e) => {
                messages.push(Message::assistant(text));
                messages.push(Message::user(format!(
                    "Your reply did not follow the json template ({e}). Output the json again."
                )));
                let (text, _) = self.ask(RoleTag::Taskgen, messages)?;
                parse_file_plan(&text)
            }
        }
    }

    /// Produces every planned file inside `workspace`.
    pub fn materialize_files(&self, plan: &FilePlan, workspace: &Path) -> Result<Vec<FileArtifact>, ForgeError> {
        std::fs::create_dir_all(workspace).map_err(crate::CoreError::from)?;
        let mut out = Vec::with_capacity(plan.entries.len());
        let (mut images, mut others) = (0, 0);
        for entry in &plan.entries {
            let artifact = if entry.kind == FileKind::Image {
                images += 1;
                self.retrieve_image(entry, workspace, images)?
            } else {
                others += 1;
                self.generate_file(entry, workspace, others)?
            };
            out.push(artifact);
        }
        Ok(out)
    }

    fn retrieve_image(&self, entry: &FilePlanEntry, workspace: &Path, k: usize) -> Result<FileArtifact, ForgeError> {
        let hit = self
            .retriever
            .retrieve(&entry.content_description)
            .ok_or_else(|| ForgeError::RetrievalMiss(entry.content_description.clone()))?;
        let ext = hit
            .path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("png")
            .to_string();
        let name = format!("image_{k}.{ext}");
        std::fs::copy(&hit.path, workspace.join(&name)).map_err(crate::CoreError::from)?;
        Ok(FileArtifact {
            relative_path: name,
            kind: FileKind::from_extension(&ext),
            content_description: entry.content_description.clone(),
            origin: FileOrigin::Retrieved,
        })
    }

    fn generate_file(&self, entry: &FilePlanEntry, workspace: &Path, k: usize) -> Result<FileArtifact, ForgeError> {
        let kind_name = entry.kind.default_extension();
        let name = format!("file_{k}.{kind_name}");
        let system = prompts::fill(prompts::FILE_CODE_SYSTEM, &[("FILE_TYPE", kind_name)]);
        let user = prompts::fill(
            prompts::FILE_CODE_USER,
            &[
                ("CONTENT", &entry.content_description),
                ("FILE_TYPE", kind_name),
                ("FILE_NAME", &name),
                ("SAVE_PATH", "the current working directory"),
            ],
        );
        let mut messages = vec![Message::system(system), Message::user(user)];
        let mut last_error = String::new();
        for attempt in 0..self.cfg.filegen_attempts.max(1) {
            let (text, _) = self.ask(RoleTag::Filegen, messages.clone())?;
            let outcome = match extract_marked_code(&text) {
                None => Err("reply lacks code between the code markers".to_string()),
                Some(code) => {
                    let req = ExecRequest {
                        request_id: format!("filegen-{name}-{attempt}"),
                        profile: Profile::Filegen,
                        prefix_codes: Vec::new(),
                        candidate_code: code,
                        tool_fixtures: BTreeMap::new(),
                        timeout_s: self.cfg.exec_timeout_s,
                        workspace: workspace.to_path_buf(),
                    };
                    match self.executor.exec(&req) {
                        Err(e) => Err(e.to_string()),
                        Ok(r) if r.status != ExecStatus::Ok => Err(format!(
                            "{}: {}",
                            r.error_kind.unwrap_or_default(),
                            r.error_message.unwrap_or_default()
                        )),
                        Ok(_) if !workspace.join(&name).is_file() => {
                            Err(format!("code ran but {name} was not created"))
                        }
                        Ok(_) => Ok(()),
                    }
                }
            };
            match outcome {
                Ok(()) => {
                    return Ok(FileArtifact {
                        relative_path: name,
                        kind: entry.kind,
                        content_description: entry.content_description.clone(),
                        origin: FileOrigin::CodeGenerated,
                    })
                }
                Err(e) => {
                    last_error = e;
                    messages.push(Message::assistant(text));
                    messages.push(Message::user(format!(
                        "The code failed: {last_error}. Fix it and answer with the same template."
                    )));
                }
            }
        }
        Err(ForgeError::GenerationFailed(format!("{name}: {last_error}")))
    }

    fn filter_messages(&self, task: &Task) -> Vec<Message> {
        let system = prompts::fill(prompts::FILTER_SYSTEM, &[("TOOL_SET", &self.tool_set())]);
        let files = if task.files.is_empty() {
            "none".to_string()
        } else {
            task.file_summaries().join("\n")
        };
        let user = prompts::fill(prompts::FILTER_USER, &[("QUERY", &task.query), ("FILES", &files)]);
        vec![Message::system(system), Message::user(user)]
    }

    /// Attaches the artifacts and lets the filter role rewrite the query.
    pub fn revise_task(&self, task: &Task, artifacts: Vec<FileArtifact>) -> Result<Task, ForgeError> {
        require(task, TaskStatus::Draft)?;
        let mut task = task.clone();
        task.files = artifacts;
        match self.ask(RoleTag::Filter, self.filter_messages(&task)) {
            Ok((text, digest)) => {
                task.provenance.prompt_digests.push(digest);
                match parse_filter_reply(&text) {
                    Ok(FilterVerdict {
                        updated_query: Some(q),
                        correct: false,
                        ..
                    }) => {
                        task.provenance.notes.push("query revised to fit files".into());
                        task.query = q;
                    }
                    Ok(_) => {}
                    Err(e) => {
                        warn!(task = %task.id, "revision skipped: {e}");
                        task.provenance.notes.push(format!("revision skipped: {e}"));
                    }
                }
            }
            Err(e) => {
                warn!(task = %task.id, "revision skipped: {e}");
                task.provenance.notes.push(format!("revision skipped: {e}"));
            }
        }
        task.advance(TaskStatus::Revised)?;
        Ok(task)
    }

    /// Accepts the task iff the filter answers "yes".
    pub fn filter_task(&self, task: &Task) -> Result<Task, ForgeError> {
        require(task, TaskStatus::Revised)?;
        let mut task = task.clone();
        let mut messages = self.filter_messages(&task);
        let mut verdict = None;
        for attempt in 0..2 {
            let (text, digest) = self.ask(RoleTag::Filter, messages.clone())?;
            task.provenance.prompt_digests.push(digest);
            match parse_filter_reply(&text) {
                Ok(v) => {
                    verdict = Some(v);
                    break;
                }
                Err(e) if attempt == 0 => {
                    messages.push(Message::assistant(text));
                    messages.push(Message::user(format!(
                        "Your reply could not be parsed ({e}). Output only the json template."
                    )));
                }
                Err(e) => task.provenance.notes.push(format!("filter reply unparseable: {e}")),
            }
        }
        match verdict {
            Some(v) => {
                task.provenance.filter_verdict = Some(v.raw);
                task.advance(if v.correct {
                    TaskStatus::Accepted
                } else {
                    TaskStatus::Rejected
                })?;
            }
            None => task.advance(TaskStatus::Rejected)?,
        }
        Ok(task)
    }

    /// Runs plan → materialize → revise → filter for one draft. Failures
    /// reject the task instead of erroring; only transport errors propagate.
    pub fn process_draft(&self, task: &Task, workspace: &Path) -> Result<Task, ForgeError> {
        let staged = self
            .plan_files(task)
            .and_then(|plan| self.materialize_files(&plan, workspace));
        let artifacts = match staged {
            Ok(a) => a,
            Err(ForgeError::Gateway(e)) if !matches!(e, GatewayError::InvalidRequest(_)) => {
                return Err(ForgeError::Gateway(e))
            }
            Err(e) => {
                let mut t = task.clone();
                t.reject(e.to_string());
                return Ok(t);
            }
        };
        let revised = self.revise_task(task, artifacts)?;
        self.filter_task(&revised)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::FixtureExecutor;
    use crate::gateway::MockBackend;
    use crate::model::ToolSpec;
    use std::sync::Arc;

    fn registry() -> ToolRegistrySpec {
        let mut r = ToolRegistrySpec::default();
        for name in ["ask_search_agent", "visualizer", "ocr"] {
            r.tools.insert(
                name.into(),
                ToolSpec {
                    signature: "(query)".into(),
                    doc: "d".into(),
                    fixture: Default::default(),
                },
            );
        }
        r
    }

    fn pool() -> SeedPool {
        SeedPool {
            seeds: (0..30)
                .map(|i| Seed {
                    query: format!("seed query {i}"),
                    tools: vec!["ocr".into()],
                })
                .collect(),
            source_tag: "test".into(),
        }
    }

    struct Rig {
        gateway: Gateway,
        executor: FixtureExecutor,
        registry: ToolRegistrySpec,
        index: FixtureImageIndex,
    }

    impl Rig {
        fn new(mock: MockBackend) -> Rig {
            Rig {
                gateway: Gateway::uniform(Arc::new(mock)),
                executor: FixtureExecutor::new(),
                registry: registry(),
                index: FixtureImageIndex::empty(),
            }
        }

        fn forge(&self) -> TaskForge<'_> {
            TaskForge {
                gateway: &self.gateway,
                executor: &self.executor,
                registry: &self.registry,
                retriever: &self.index,
                cfg: ForgeConfig::default(),
            }
        }
    }

    #[test]
    fn generates_one_draft_from_template_reply() {
        let rig = Rig::new(MockBackend::new().queued(
            RoleTag::Taskgen,
            r#"[{"query":"What is the weather today?","tools":["ask_search_agent"]}]"#,
        ));
        let tasks = rig.forge().generate_queries(&pool(), 5, 7).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].query, "What is the weather today?");
        assert_eq!(tasks[0].status, TaskStatus::Draft);
        assert_eq!(tasks[0].provenance.seed_ids.len(), 20);
    }

    #[test]
    fn empty_reply_yields_no_tasks() {
        let rig = Rig::new(MockBackend::new().queued(RoleTag::Taskgen, "[]"));
        assert!(rig.forge().generate_queries(&pool(), 5, 1).unwrap().is_empty());
    }

    #[test]
    fn missing_tools_key_drops_batch_after_retry() {
        let bad = r#"[{"query":"q"}]"#;
        let mock = MockBackend::new()
            .queued(RoleTag::Taskgen, bad)
            .queued(RoleTag::Taskgen, bad);
        let rig = Rig::new(mock);
        assert!(rig.forge().generate_queries(&pool(), 5, 1).unwrap().is_empty());
        assert_eq!(rig.gateway.calls_by_role()[&RoleTag::Taskgen], 2);
    }

    #[test]
    fn unregistered_tools_are_filtered_and_k_caps_output() {
        let reply = r#"Here you go: {"query":"a","tools":["ocr","teleport"]}, {"query":"b","tools":[]}"#;
        let rig = Rig::new(MockBackend::new().queued(RoleTag::Taskgen, reply));
        let tasks = rig.forge().generate_queries(&pool(), 1, 1).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].tool_hints, vec!["ocr"]);
    }

    #[test]
    fn seed_sampling_is_without_replacement_and_covers_pool() {
        let rig = Rig::new(MockBackend::new());
        let mut seen = std::collections::BTreeSet::new();
        for s in 0..40u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let ids = sample(&mut rng, 30, rig.forge().cfg.seeds_per_call).into_vec();
            let uniq: std::collections::BTreeSet<_> = ids.iter().collect();
            assert_eq!(uniq.len(), ids.len());
            seen.extend(ids);
        }
        assert_eq!(seen.len(), 30);
    }

    #[test]
    fn file_plan_with_one_image() {
        let plan = parse_file_plan(
            r#"{"information":"x","information from the Internet":"none","information from images":"brand",
               "file":{"image_numbers":1,"image_content":{"image_1":"a red phone on a desk"}}}"#,
        )
        .unwrap();
        assert_eq!(plan.entries.len(), 1);
        assert_eq!(plan.entries[0].kind, FileKind::Image);
    }

    #[test]
    fn file_plan_without_image_information() {
        let plan = parse_file_plan(
            r#"{"information":"x","information from the Internet":"weather","information from images":"Say no information is required from the images."}"#,
        )
        .unwrap();
        assert!(plan.entries.is_empty());
    }

    #[test]
    fn image_count_mismatch_is_malformed() {
        let err = parse_file_plan(
            r#"{"information from images":"a","file":{"image_numbers":2,"image_content":{"image_1":"x"}}}"#,
        );
        assert!(matches!(err, Err(ForgeError::MalformedReply(_))));
    }

    #[test]
    fn plan_files_retries_once() {
        let good = r#"{"information from images":"no information is required from the images","file":{"image_numbers":0,"image_content":{}}}"#;
        let rig = Rig::new(MockBackend::new().queued(RoleTag::Taskgen, "nonsense").queued(RoleTag::Taskgen, good));
        let task = Task::draft("t", "q", vec![]);
        assert!(rig.forge().plan_files(&task).unwrap().entries.is_empty());
    }

    #[test]
    fn materializes_generated_xlsx() {
        let reply = "## extention start\nExtened content: sales\n## extention end\n\n## code start\n```python\nwrite_file('file_1.xlsx', 'month,sales\\njan,3')\n```\n## code end";
        let rig = Rig::new(MockBackend::new().queued(RoleTag::Filegen, reply));
        let dir = tempfile::tempdir().unwrap();
        let plan = FilePlan {
            info_from_web: String::new(),
            info_from_files: String::new(),
            entries: vec![FilePlanEntry {
                content_description: "monthly sales".into(),
                kind: FileKind::Xlsx,
            }],
        };
        let files = rig.forge().materialize_files(&plan, dir.path()).unwrap();
        assert_eq!(files.len(), 1);
        assert_eq!(files[0].kind, FileKind::Xlsx);
        assert_eq!(files[0].origin, FileOrigin::CodeGenerated);
        assert!(dir.path().join(&files[0].relative_path).is_file());
    }

    #[test]
    fn empty_plan_materializes_nothing() {
        let rig = Rig::new(MockBackend::new());
        let dir = tempfile::tempdir().unwrap();
        let plan = FilePlan {
            info_from_web: String::new(),
            info_from_files: String::new(),
            entries: vec![],
        };
        assert!(rig.forge().materialize_files(&plan, dir.path()).unwrap().is_empty());
    }

    #[test]
    fn filegen_gives_up_after_two_attempts() {
        let bad = "## code start\nexplode()\n## code end";
        let rig = Rig::new(MockBackend::new().queued(RoleTag::Filegen, bad).queued(RoleTag::Filegen, bad));
        let dir = tempfile::tempdir().unwrap();
        let plan = FilePlan {
            info_from_web: String::new(),
            info_from_files: String::new(),
            entries: vec![FilePlanEntry {
                content_description: "c".into(),
                kind: FileKind::Pdf,
            }],
        };
        assert!(matches!(
            rig.forge().materialize_files(&plan, dir.path()),
            Err(ForgeError::GenerationFailed(_))
        ));
    }

    #[test]
    fn images_come_from_the_fixture_index() {
        let idx_dir = tempfile::tempdir().unwrap();
        std::fs::write(idx_dir.path().join("phone.png"), b"png").unwrap();
        std::fs::write(idx_dir.path().join("cat.png"), b"png").unwrap();
        std::fs::write(
            idx_dir.path().join("manifest.jsonl"),
            "{\"path\":\"cat.png\",\"caption\":\"a cat sleeping on a sofa\"}\n{\"path\":\"phone.png\",\"caption\":\"a red phone on a desk\"}\n",
        )
        .unwrap();
        let mut rig = Rig::new(MockBackend::new());
        rig.index = FixtureImageIndex::load(idx_dir.path()).unwrap();
        let ws = tempfile::tempdir().unwrap();
        let mut plan = FilePlan {
            info_from_web: String::new(),
            info_from_files: String::new(),
            entries: vec![FilePlanEntry {
                content_description: "a red phone on a desk".into(),
                kind: FileKind::Image,
            }],
        };
        let files = rig.forge().materialize_files(&plan, ws.path()).unwrap();
        assert_eq!(files[0].origin, FileOrigin::Retrieved);
        assert_eq!(files[0].kind, FileKind::Image);
        assert!(ws.path().join("image_1.png").is_file());
        plan.entries[0].content_description = "quarterly tax forms".into();
        assert!(matches!(
            rig.forge().materialize_files(&plan, ws.path()),
            Err(ForgeError::RetrievalMiss(_))
        ));
    }

    #[test]
    fn token_cosine_basics() {
        assert!((token_cosine("a b", "a b") - 1.0).abs() < 1e-12);
        assert_eq!(token_cosine("a", "b"), 0.0);
        assert!((token_cosine("a b", "a c") - 0.5).abs() < 1e-12);
    }

    #[test]
    fn revision_keeps_query_when_not_needed() {
        let reply = r#"{"correct":"yes","updated_query":"no revision is needed."}"#;
        let rig = Rig::new(MockBackend::new().queued(RoleTag::Filter, reply));
        let t = rig.forge().revise_task(&Task::draft("t", "orig", vec![]), vec![]).unwrap();
        assert_eq!(t.query, "orig");
        assert_eq!(t.status, TaskStatus::Revised);
    }

    #[test]
    fn revision_replaces_query() {
        let reply = r#"{"correct":"no","updated_query":"What brand is the phone in the image?"}"#;
        let rig = Rig::new(MockBackend::new().queued(RoleTag::Filter, reply));
        let t = rig.forge().revise_task(&Task::draft("t", "orig", vec![]), vec![]).unwrap();
        assert_eq!(t.query, "What brand is the phone in the image?");
        assert_eq!(t.provenance.original_query.as_deref(), Some("orig"));
    }

    #[test]
    fn revision_survives_transport_failure() {
        let rig = Rig {
            gateway: Gateway::uniform(Arc::new(MockBackend::unavailable())).with_retry(
                crate::gateway::RetryPolicy {
                    attempts: 1,
                    base_delay: std::time::Duration::ZERO,
                },
            ),
            ..Rig::new(MockBackend::new())
        };
        let t = rig.forge().revise_task(&Task::draft("t", "orig", vec![]), vec![]).unwrap();
        assert_eq!(t.query, "orig");
        assert_eq!(t.status, TaskStatus::Revised);
    }

    fn revised() -> Task {
        let mut t = Task::draft("t", "q", vec![]);
        t.advance(TaskStatus::Revised).unwrap();
        t
    }

    #[test]
    fn filter_accepts_and_rejects() {
        let rig = Rig::new(
            MockBackend::new()
                .queued(RoleTag::Filter, r#"{"correct":"yes"}"#)
                .queued(RoleTag::Filter, r#"{"correct":"no"}"#),
        );
        let a = rig.forge().filter_task(&revised()).unwrap();
        assert_eq!(a.status, TaskStatus::Accepted);
        assert!(a.provenance.filter_verdict.is_some());
        assert_eq!(rig.forge().filter_task(&revised()).unwrap().status, TaskStatus::Rejected);
    }

    #[test]
    fn unparseable_filter_twice_rejects() {
        let rig = Rig::new(MockBackend::new().queued(RoleTag::Filter, "??").queued(RoleTag::Filter, "!!"));
        assert_eq!(rig.forge().filter_task(&revised()).unwrap().status, TaskStatus::Rejected);
    }

    #[test]
    fn filter_requires_revised_task() {
        let rig = Rig::new(MockBackend::new());
        assert!(matches!(
            rig.forge().filter_task(&Task::draft("t", "q", vec![])),
            Err(ForgeError::WrongStatus { .. })
        ));
    }

    #[test]
    fn marked_code_extraction() {
        assert_eq!(extract_marked_code("## code start\nx = 1\n## code end").as_deref(), Some("x = 1"));
        assert_eq!(extract_marked_code("no markers"), None);
        assert_eq!(extract_marked_code("## code start\n\n## code end"), None);
    }
}
