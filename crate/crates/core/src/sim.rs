//! Deterministic offline backend that answers every role's prompt with
//! plausible, well-formed replies. Each reply is a pure function of the
//! backend seed, the request digest and the sample index, so whole runs
//! replay byte for byte.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::canonical::{extract_json_all, sha256_hex};
use crate::gateway::{ChatBackend, ChatReply, ChatRequest, GatewayError, RoleTag, Usage};
use crate::model::FINAL_ANSWER_TOOL;

/// Tools whose presence makes the simulated planner ask for an image.
const VISION_TOOLS: [&str; 4] = ["visualizer", "ocr", "objectloc", "seg"];

/// Behaviour knobs of the simulated controller and filter.
#[derive(Debug, Clone, PartialEq)]
pub struct SimProfile {
    /// Probability that a controller sample calls an unregistered tool.
    pub p_unknown_tool: f64,
    /// Probability that a sample references an undefined variable.
    pub p_undefined_var: f64,
    /// Probability that a sample is not in the thought + code format.
    pub p_unparseable: f64,
    /// Probability that the filter rejects a query.
    pub p_filter_reject: f64,
    /// Steps before the simulated controller answers, drawn from 1..=max.
    pub max_plan_steps: usize,
}

impl Default for SimProfile {
    fn default() -> Self {
        SimProfile {
            p_unknown_tool: 0.15,
            p_undefined_var: 0.1,
            p_unparseable: 0.1,
            p_filter_reject: 0.2,
            max_plan_steps: 3,
        }
    }
}

pub struct SimBackend {
    id: String,
    seed: u64,
    profile: SimProfile,
}

impl SimBackend {
    pub fn new(seed: u64) -> SimBackend {
        SimBackend {
            id: "sim".to_string(),
            seed,
            profile: SimProfile::default(),
        }
    }

    pub fn with_profile(mut self, profile: SimProfile) -> SimBackend {
        self.profile = profile;
        self
    }

    fn rng(&self, request: &ChatRequest, sample: usize) -> ChaCha8Rng {
        let h = sha256_hex(format!("{}:{}:{sample}", self.seed, request.digest()).as_bytes());
        ChaCha8Rng::seed_from_u64(u64::from_str_radix(&h[..16], 16).unwrap_or(0))
    }

    fn reply(&self, request: &ChatRequest, sample: usize) -> String {
        let mut rng = self.rng(request, sample);
        let system = request.system_text();
        let user = request.last_user_text().unwrap_or("");
        match request.role_tag {
            RoleTag::Taskgen if system.contains("generating user queries") => queries(system, user, &mut rng),
            RoleTag::Taskgen => file_plan(user),
            RoleTag::Filegen => file_code(user),
            RoleTag::Filter => self.filter(user, &mut rng),
            RoleTag::Controller => self.controller(system, user, sample, &mut rng),
            RoleTag::Verifier => verify(user, &mut rng),
        }
    }

    fn filter(&self, user: &str, rng: &mut ChaCha8Rng) -> String {
        let query = between(user, "the query: ", ", inference whether").unwrap_or("");
        let v = if rng.gen_bool(self.profile.p_filter_reject) {
            json!({
                "thought": "the files do not carry the needed details",
                "correct": "no",
                "updated_query": format!("Using the attached files, {}", lower_first(query)),
            })
        } else {
            json!({
                "thought": "the files contain the needed details",
                "correct": "yes",
                "updated_query": "no revision is needed.",
            })
        };
        v.to_string()
    }

    fn controller(&self, system: &str, user: &str, sample: usize, rng: &mut ChaCha8Rng) -> String {
        let tools = registered_tools(system);
        let step = user.matches("\nStep ").count() + 1;
        let query = between(user, "Task: ", "\n").unwrap_or("the task").trim();
        let plan = 1 + (sha256_hex(query.as_bytes()).as_bytes()[0] as usize) % self.profile.max_plan_steps.max(1);
        let roll: f64 = rng.gen();
        let p = &self.profile;
        if roll < p.p_unparseable {
            return format!("I would call a tool for \"{query}\" now (draft {sample}).");
        }
        let var = format!("result_{step}");
        if step > plan {
            let last = user
                .rsplit("Observation: ")
                .next()
                .filter(|_| user.contains("Observation: "))
                .and_then(|s| s.lines().next())
                .unwrap_or("unknown")
                .trim();
            let answer = format!("{} (checked {sample})", escape(last));
            return format!(
                "Thought: The observations answer the task, so I report the answer.\n```py\n{FINAL_ANSWER_TOOL}(\"{answer}\")\n```"
            );
        }
        let angle = ASPECTS[rng.gen_range(0..ASPECTS.len())];
        if roll < p.p_unparseable + p.p_unknown_tool {
            return format!(
                "Thought: I will look up the {angle} directly.\n```py\n{var} = lookup_web(query=\"{} {angle}\")\nprint({var})\n```",
                escape(query)
            );
        }
        if roll < p.p_unparseable + p.p_unknown_tool + p.p_undefined_var {
            return format!(
                "Thought: The {angle} was found earlier, I print it.\n```py\nprint(previous_{angle})\n```"
            );
        }
        let tool = tools.choose(rng).map(String::as_str).unwrap_or("ask_search_agent");
        format!(
            "Thought: I need the {angle}, so I call {tool}.\n```py\n{var} = {tool}(query=\"{} ({angle})\")\nprint({var})\n```",
            escape(query)
        )
    }
}

const ASPECTS: [&str; 8] = [
    "key facts",
    "exact figures",
    "names involved",
    "relevant dates",
    "visible details",
    "source data",
    "main entity",
    "final value",
];

impl ChatBackend for SimBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        let n = request.sampling.n_samples.max(1);
        let texts: Vec<String> = (0..n).map(|i| self.reply(request, i)).collect();
        let prompt_tokens = request.messages.iter().map(|m| m.text.split_whitespace().count() as u64).sum();
        let completion_tokens = texts.iter().map(|t| t.split_whitespace().count() as u64).sum();
        Ok(ChatReply {
            texts,
            usage: Usage {
                prompt_tokens,
                completion_tokens,
            },
            backend_id: self.id.clone(),
        })
    }
}

fn between<'t>(text: &'t str, start: &str, end: &str) -> Option<&'t str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    Some(rest.find(end).map_or(rest, |e| &rest[..e]))
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "'")
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Tool names listed as `- name(...)` lines in a system prompt.
fn registered_tools(system: &str) -> Vec<String> {
    system
        .lines()
        .filter_map(|l| l.strip_prefix("- "))
        .filter_map(|l| l.split_once('(').map(|(name, _)| name.trim()))
        .filter(|n| !n.is_empty() && n.chars().all(|c| c.is_alphanumeric() || c == '_'))
        .map(str::to_string)
        .collect()
}

const QUERY_FRAMES: [&str; 6] = [
    "{q}",
    "Quickly, {lq}",
    "For a report, {lq}",
    "{q} Please be precise.",
    "I need help: {lq}",
    "{q} Give a short answer.",
];

fn queries(system: &str, user: &str, rng: &mut ChaCha8Rng) -> String {
    let section = between(system, "Examples of user queries:", "Please output").unwrap_or("");
    let examples: Vec<Value> = extract_json_all(section, '{')
        .into_iter()
        .filter(|v| v.get("query").and_then(Value::as_str).is_some())
        .collect();
    let count: usize = user
        .split_whitespace()
        .find_map(|w| w.parse().ok())
        .unwrap_or(1);
    if examples.is_empty() {
        return "[]".to_string();
    }
    let out: Vec<Value> = (0..count)
        .map(|i| {
            let ex = &examples[rng.gen_range(0..examples.len())];
            let q = ex["query"].as_str().unwrap_or_default();
            let frame = QUERY_FRAMES[(i + rng.gen_range(0..QUERY_FRAMES.len())) % QUERY_FRAMES.len()];
            let query = frame.replace("{q}", q).replace("{lq}", &lower_first(q));
            json!({"query": format!("{query} (case {})", rng.gen_range(100..1000)), "tools": ex["tools"].clone()})
        })
        .collect();
    Value::Array(out).to_string()
}

fn file_plan(user: &str) -> String {
    let body = between(user, "given the query: ", ", firstly analyze").unwrap_or("");
    let (query, tools) = match body.rsplit_once(" (suggested tools: ") {
        Some((q, t)) => (q, t.trim_end_matches(')')),
        None => (body, ""),
    };
    let tools: Vec<&str> = tools.split(',').map(str::trim).collect();
    let file = if tools.iter().any(|t| VISION_TOOLS.contains(t)) {
        json!({"image_numbers": 1, "image_content": {"image_1": query}})
    } else if tools.iter().any(|t| t.contains("file") || t.contains("inspector")) {
        json!({"image_numbers": 0, "image_content": {}, "other_files": [{"type": "xlsx", "content": format!("table with the data needed for: {query}")}]})
    } else {
        json!({"image_numbers": 0, "image_content": {}})
    };
    json!({
        "information": format!("facts needed to answer: {query}"),
        "information from the Internet": "background facts about the entities in the query",
        "information from images": if file["image_numbers"] == 1 { "details visible in the image" } else { "no information is required from the images" },
        "file": file,
    })
    .to_string()
}

fn file_code(user: &str) -> String {
    let name = between(user, "the file name is ", " and").unwrap_or("file_1.txt").trim();
    let content = between(user, "following content: ", ", first largely").unwrap_or("data");
    format!(
        "## extention start\nExtened content: {content}\n## extention end\n\n## code start\nwrite_file(\"{name}\", \"{}\")\n## code end",
        escape(content)
    )
}

/// Picks a candidate whose result is neither an error nor unparseable when
/// one exists, otherwise any parseable candidate.
fn verify(user: &str, rng: &mut ChaCha8Rng) -> String {
    let results: Vec<&str> = user
        .split("Step set ")
        .skip(1)
        .map(|s| s.split("CURRENT_RESULT: ").nth(1).unwrap_or(""))
        .collect();
    let good: Vec<usize> = (0..results.len())
        .filter(|&i| !results[i].starts_with("Error") && !results[i].starts_with("[unparseable"))
        .collect();
    let parseable: Vec<usize> = (0..results.len())
        .filter(|&i| !results[i].starts_with("[unparseable"))
        .collect();
    let (pool, reason) = if good.is_empty() {
        (parseable, "no step executed cleanly; this one fails least badly")
    } else {
        (good, "the step executed without errors and uses a suitable tool")
    };
    let best = pool.choose(rng).map_or(1, |i| i + 1);
    json!({"reason": reason, "best_id": best}).to_string()
}
