//! Online step-wise exploration: sample n candidate actions, execute them,
//! let the verifier pick one, extend the history, repeat.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::sha256_hex;
use crate::executor::{ExecError, ExecRequest, Executor, Profile};
use crate::gateway::{derive_seed, ChatRequest, Gateway, GatewayError, Message, RoleTag, Sampling};
use crate::model::{
    Action, Candidate, ObsStatus, Observation, StepContext, StepRecord, Task, TaskStatus, ToolRegistrySpec,
    Trajectory, DEFAULT_OBSERVATION_CAP, FINAL_ANSWER_TOOL,
};
use crate::prompts;
use crate::stats::call_names;
use crate::verifier::{self, VerifyError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExploreConfig {
    pub n_candidates: usize,
    pub max_steps: usize,
    pub timeout_s: f64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub verifier_max_tokens: u32,
    pub observation_cap: usize,
    /// Tool whose call in a chosen action ends the trajectory.
    pub sentinel: String,
    /// Base seed for controller sampling.
    pub seed: u64,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            n_candidates: 5,
            max_steps: 6,
            timeout_s: 30.0,
            temperature: 0.7,
            max_tokens: 1024,
            verifier_max_tokens: 512,
            observation_cap: DEFAULT_OBSERVATION_CAP,
            sentinel: FINAL_ANSWER_TOOL.to_string(),
            seed: 0,
        }
    }
}

impl ExploreConfig {
    pub fn violations(&self, inference: bool) -> Vec<String> {
        let mut v = Vec::new();
        if inference && self.n_candidates != 1 {
            v.push("inference samples exactly one candidate".into());
        }
        if !inference && self.n_candidates < 2 {
            v.push("exploration needs n_candidates >= 2".into());
        }
        if self.max_steps == 0 {
            v.push("max_steps must be positive".into());
        }
        if self.timeout_s.is_nan() || self.timeout_s <= 0.0 {
            v.push("timeout_s must be positive".into());
        }
        if self.sentinel.trim().is_empty() {
            v.push("sentinel must be non-empty".into());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    StepVerificationFailed,
    AllCandidatesInvalid,
    SandboxDown,
}

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("task {} aborted at step {step}: {reason:?} ({detail})", partial.task_id)]
    TaskAborted {
        partial: Box<Trajectory>,
        reason: AbortReason,
        step: usize,
        detail: String,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("task {id} is {status:?}, only accepted tasks are explored")]
    NotAccepted { id: String, status: TaskStatus },
    #[error("invalid explore config: {0}")]
    Config(String),
}

/// Splits a controller reply into thought and code. The code is the body
/// of the first fenced block (language tag dropped); the thought is the
/// text after `Thought:` up to the next fence.
pub fn parse_action(reply: &str) -> Result<Action, String> {
    let code = first_fenced_block(reply).ok_or("missing code block")?;
    let Some(pos) = reply.find("Thought:") else {
        return Err("missing thought".into());
    };
    let after = &reply[pos + "Thought:".len()..];
    let thought = after.split("```").next().unwrap_or("").trim();
    if thought.is_empty() {
        return Err("missing thought".into());
    }
    Ok(Action {
        thought: thought.to_string(),
        code,
        raw: reply.to_string(),
    })
}

fn first_fenced_block(text: &str) -> Option<String> {
    let start = text.find("```")? + 3;
    let rest = &text[start..];
    let end = rest.find("```")?;
    let inner = &rest[..end];
    let body = match inner.split_once('\n') {
        Some((tag, body)) if !tag.trim().contains(char::is_whitespace) => body,
        _ => inner,
    };
    let body = body.trim_matches('\n').trim_end();
    (!body.trim().is_empty()).then(|| body.to_string())
}

/// True when `code` calls `tool` at a call site.
pub fn calls_tool(code: &str, tool: &str) -> bool {
    call_names(code).iter().any(|n| n == tool)
}

fn task_seed(base: u64, task_id: &str) -> u64 {
    let h = sha256_hex(task_id.as_bytes());
    base ^ u64::from_str_radix(&h[..16], 16).unwrap_or(0)
}

pub struct Explorer<'a> {
    pub gateway: &'a Gateway,
    pub executor: &'a dyn Executor,
    pub registry: &'a ToolRegistrySpec,
    pub cfg: ExploreConfig,
}

enum StepFailure {
    Abort(AbortReason, String),
    Gateway(GatewayError),
}

impl<'a> Explorer<'a> {
    /// Messages the controller receives for a step.
    pub fn controller_messages(&self, context: &StepContext) -> Vec<Message> {
        let system = prompts::fill(prompts::CONTROLLER_SYSTEM, &[("TOOL_SET", &self.registry.describe())]);
        vec![Message::system(system), Message::user(context.render())]
    }

    /// Samples `n` replies for the step and executes every parseable one
    /// after replaying `prefix`. Returns exactly `n` candidates.
    pub fn sample_step(
        &self,
        task: &Task,
        context: &StepContext,
        prefix: &[String],
        n: usize,
        workspace: &Path,
    ) -> Result<Vec<Candidate>, ExploreError> {
        self.sample_inner(task, context, prefix, n, workspace).map_err(|f| match f {
            StepFailure::Gateway(e) => ExploreError::Gateway(e),
            StepFailure::Abort(reason, detail) => ExploreError::TaskAborted {
                partial: Box::new(Trajectory::new(task, self.cfg.max_steps)),
                reason,
                step: context.step_index(),
                detail,
            },
        })
    }

    fn sample_inner(
        &self,
        task: &Task,
        context: &StepContext,
        prefix: &[String],
        n: usize,
        workspace: &Path,
    ) -> Result<Vec<Candidate>, StepFailure> {
        let step = context.step_index();
        let sampling = Sampling {
            temperature: if n == 1 { 0.0 } else { self.cfg.temperature },
            max_tokens: self.cfg.max_tokens,
            n_samples: n,
        };
        let seed = derive_seed(task_seed(self.cfg.seed, &task.id), step as u64);
        let req = ChatRequest::new(RoleTag::Controller, self.controller_messages(context), sampling).with_seed(seed);
        let reply = self.gateway.complete(&req).map_err(StepFailure::Gateway)?;
        if reply.texts.len() != n {
            return Err(StepFailure::Gateway(GatewayError::BackendUnavailable(format!(
                "controller returned {} replies, expected {n}",
                reply.texts.len()
            ))));
        }
        let parsed: Vec<Result<Action, (String, String)>> = reply
            .texts
            .into_iter()
            .map(|t| parse_action(&t).map_err(|d| (t, d)))
            .collect();
        let fixtures = self.registry.fixtures();
        let results: Vec<Result<Candidate, ExecError>> = std::thread::scope(|s| {
            let handles: Vec<_> = parsed
                .into_iter()
                .enumerate()
                .map(|(i, p)| {
                    let fixtures = &fixtures;
                    s.spawn(move || match p {
                        Err((raw, diag)) => Ok(Candidate {
                            action: Action::unparsed(raw),
                            observation: Observation::parse_error(diag),
                        }),
                        Ok(action) => {
                            let req = ExecRequest {
                                request_id: format!("{}-s{step}-c{}", task.id, i + 1),
                                profile: Profile::Agent,
                                prefix_codes: prefix.to_vec(),
                                candidate_code: action.code.clone(),
                                tool_fixtures: fixtures.clone(),
                                timeout_s: self.cfg.timeout_s,
                                workspace: workspace.to_path_buf(),
                            };
                            let resp = self.executor.exec(&req)?;
                            if resp.is_prefix_failure() {
                                return Err(ExecError::Unavailable(format!(
                                    "prefix replay failed: {}",
                                    resp.error_message.unwrap_or_default()
                                )));
                            }
                            Ok(Candidate {
                                action,
                                observation: resp.into_observation(self.cfg.observation_cap),
                            })
                        }
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("candidate execution panicked"))
                .collect()
        });
        results
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| StepFailure::Abort(AbortReason::SandboxDown, e.to_string()))
    }

    /// Explores an accepted task with n candidates per step.
    pub fn explore_task(&self, task: &Task, workspace: &Path) -> Result<Trajectory, ExploreError> {
        self.run(task, workspace, false)
    }

    /// Greedy mode: one candidate per step and no verifier.
    pub fn infer_task(&self, task: &Task, workspace: &Path) -> Result<Trajectory, ExploreError> {
        self.run(task, workspace, true)
    }

    fn run(&self, task: &Task, workspace: &Path, inference: bool) -> Result<Trajectory, ExploreError> {
        if task.status != TaskStatus::Accepted {
            return Err(ExploreError::NotAccepted {
                id: task.id.clone(),
                status: task.status,
            });
        }
        let problems = self.cfg.violations(inference);
        if !problems.is_empty() {
            return Err(ExploreError::Config(problems.join("; ")));
        }
        let n = self.cfg.n_candidates;
        let mut traj = Trajectory::new(task, self.cfg.max_steps);
        for step in 1..=self.cfg.max_steps {
            let context = traj.context_at(step);
            let prefix = traj.chosen_prefix(step);
            let outcome = self
                .sample_inner(task, &context, &prefix, n, workspace)
                .and_then(|candidates| {
                    self.choose(&context, &candidates, inference)
                        .map(|(chosen, reason)| (candidates, chosen, reason))
                });
            let (candidates, chosen, reason) = match outcome {
                Ok(v) => v,
                Err(StepFailure::Gateway(e)) => return Err(ExploreError::Gateway(e)),
                Err(StepFailure::Abort(reason, detail)) => {
                    traj.aborted = Some(format!("step {step}: {detail}"));
                    return Err(ExploreError::TaskAborted {
                        partial: Box::new(traj),
                        reason,
                        step,
                        detail,
                    });
                }
            };
            let record = StepRecord {
                index: step,
                candidates,
                chosen,
                verifier_reason: reason,
            };
            let best = record.chosen_candidate().expect("chosen index validated");
            let done = calls_tool(&best.action.code, &self.cfg.sentinel);
            let answer = done.then(|| match best.observation.status {
                ObsStatus::Ok => best.observation.output.trim().to_string(),
                _ => best.observation.result_text(),
            });
            traj.steps.push(record);
            if done {
                traj.terminal = true;
                traj.final_answer = answer;
                return Ok(traj);
            }
        }
        traj.terminal = true;
        traj.budget_exhausted = true;
        Ok(traj)
    }

    fn choose(&self, context: &StepContext, candidates: &[Candidate], inference: bool) -> Result<(usize, String), StepFailure> {
        if inference {
            return match candidates[0].observation.status {
                ObsStatus::ParseError => Err(StepFailure::Abort(
                    AbortReason::AllCandidatesInvalid,
                    candidates[0].observation.result_text(),
                )),
                _ => Ok((1, "inference".to_string())),
            };
        }
        match verifier::select_best(self.gateway, context, candidates, self.cfg.verifier_max_tokens) {
            Ok(v) => Ok((v.best_id, v.reason)),
            Err(VerifyError::Gateway(e)) => Err(StepFailure::Gateway(e)),
            Err(VerifyError::AllCandidatesInvalid) => Err(StepFailure::Abort(
                AbortReason::AllCandidatesInvalid,
                "every candidate is unparseable".into(),
            )),
            Err(e @ VerifyError::StepVerificationFailed { .. }) => {
                Err(StepFailure::Abort(AbortReason::StepVerificationFailed, e.to_string()))
            }
        }
    }
}

/// Re-executes every chosen step of a trajectory after its chosen prefix
/// and lists the steps whose observation differs from the stored one
/// (durations ignored).
pub fn replay_check(
    trajectory: &Trajectory,
    executor: &dyn Executor,
    registry: &ToolRegistrySpec,
    workspace: &Path,
    timeout_s: f64,
    observation_cap: usize,
) -> Result<Vec<String>, ExecError> {
    let fixtures = registry.fixtures();
    let mut mismatches = Vec::new();
    for step in &trajectory.steps {
        let Some(chosen) = step.chosen_candidate() else {
            mismatches.push(format!("step {} has no chosen candidate", step.index));
            continue;
        };
        let req = ExecRequest {
            request_id: format!("{}-replay-s{}", trajectory.task_id, step.index),
            profile: Profile::Agent,
            prefix_codes: trajectory.chosen_prefix(step.index),
            candidate_code: chosen.action.code.clone(),
            tool_fixtures: fixtures.clone(),
            timeout_s,
            workspace: workspace.to_path_buf(),
        };
        let mut got = executor.exec(&req)?.into_observation(observation_cap);
        let mut want = chosen.observation.clone();
        got.duration_ms = 0;
        want.duration_ms = 0;
        if got != want {
            mismatches.push(format!(
                "step {}: replayed {:?} but stored {:?}",
                step.index,
                got.result_text(),
                want.result_text()
            ));
        }
    }
    Ok(mismatches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::{ExecResponse, FixtureExecutor};
    use crate::gateway::{FnBackend, MockBackend};
    use crate::model::{FixtureResponse, ToolFixture, ToolSpec, Validate};
    use std::sync::Arc;

    #[test]
    fn parse_action_examples() {
        let a = parse_action("Thought: search brand.\n```\nask_search_agent(query='phone brand')\n```").unwrap();
        assert_eq!(a.thought, "search brand.");
        assert_eq!(a.code, "ask_search_agent(query='phone brand')");
        assert_eq!(parse_action("Thought: hmm, no code").unwrap_err(), "missing code block");
        assert_eq!(parse_action("```py\nprint(1)\n```").unwrap_err(), "missing thought");
        let b = parse_action("Thought: x\n```py\nprint(1)\nprint(2)\n```\ntrailing").unwrap();
        assert_eq!(b.code, "print(1)\nprint(2)");
        assert_eq!(parse_action("Thought: x\n```\nunclosed").unwrap_err(), "missing code block");
    }

    #[test]
    fn sentinel_detection_is_call_site_based() {
        assert!(calls_tool("final_answer(x)", "final_answer"));
        assert!(!calls_tool("print('final_answer(x)')", "final_answer"));
    }

    fn registry() -> ToolRegistrySpec {
        let mut r = ToolRegistrySpec::default();
        let mut fixture = ToolFixture::default();
        fixture
            .responses
            .insert("*".into(), FixtureResponse::Text("Acme".into()));
        r.tools.insert(
            "ask_search_agent".into(),
            ToolSpec {
                signature: "(query)".into(),
                doc: "web search".into(),
                fixture,
            },
        );
        r
    }

    fn accepted() -> Task {
        let mut t = Task::draft("t1", "What brand?", vec![]);
        t.advance(TaskStatus::Revised).unwrap();
        t.advance(TaskStatus::Accepted).unwrap();
        t
    }

    const GOOD: &str = "Thought: search.\n```py\nr = ask_search_agent(query='brand')\nprint(r)\n```";
    const FINISH: &str = "Thought: done.\n```py\nfinal_answer(r)\n```";

    /// Controller replying per step from a script; each step's replies are
    /// the n samples.
    fn controller(script: Vec<Vec<&'static str>>) -> Arc<FnBackend> {
        Arc::new(FnBackend::new("scripted", move |req: &ChatRequest| {
            let step = req.last_user_text().unwrap_or("").matches("\nStep ").count();
            let texts = script[step.min(script.len() - 1)].iter().map(|s| s.to_string()).collect();
            Ok(texts)
        }))
    }

    fn verifier_first_ok() -> Arc<FnBackend> {
        Arc::new(FnBackend::new("verifier", |req: &ChatRequest| {
            let user = req.last_user_text().unwrap_or("");
            let id = user
                .split("Step set ")
                .skip(1)
                .position(|s| !s.contains("CURRENT_RESULT: [unparseable") && !s.contains("CURRENT_RESULT: Error"))
                .map_or(1, |i| i + 1);
            Ok(vec![format!("{{\"reason\":\"works\",\"best_id\":{id}}}")])
        }))
    }

    fn gateway(script: Vec<Vec<&'static str>>) -> Gateway {
        Gateway::new()
            .with_backend(RoleTag::Controller, controller(script))
            .with_backend(RoleTag::Verifier, verifier_first_ok())
    }

    fn cfg(n: usize, max_steps: usize) -> ExploreConfig {
        ExploreConfig {
            n_candidates: n,
            max_steps,
            ..ExploreConfig::default()
        }
    }

    #[test]
    fn two_steps_then_sentinel() {
        let g = gateway(vec![vec![GOOD, "oops"], vec!["bad", GOOD], vec![FINISH, GOOD]]);
        let (exec, reg) = (FixtureExecutor::new(), registry());
        let ex = Explorer {
            gateway: &g,
            executor: &exec,
            registry: &reg,
            cfg: cfg(2, 5),
        };
        let dir = tempfile::tempdir().unwrap();
        let t = ex.explore_task(&accepted(), dir.path()).unwrap();
        assert_eq!(t.steps.len(), 3);
        assert!(t.terminal && !t.budget_exhausted);
        assert_eq!(t.final_answer.as_deref(), Some("Acme"));
        assert_eq!(t.steps[1].chosen, 2);
        assert_eq!(t.steps[0].candidates[1].observation.status, ObsStatus::ParseError);
        assert!(t.violations().is_empty());
        let mism = replay_check(&t, &exec, &reg, dir.path(), 30.0, DEFAULT_OBSERVATION_CAP).unwrap();
        assert!(mism.is_empty(), "{mism:?}");
    }

    #[test]
    fn all_unparseable_aborts_with_partial() {
        let g = gateway(vec![vec![GOOD, GOOD], vec![GOOD, GOOD], vec!["x", "y"]]);
        let (exec, reg) = (FixtureExecutor::new(), registry());
        let ex = Explorer {
            gateway: &g,
            executor: &exec,
            registry: &reg,
            cfg: cfg(2, 5),
        };
        let dir = tempfile::tempdir().unwrap();
        match ex.explore_task(&accepted(), dir.path()) {
            Err(ExploreError::TaskAborted {
                partial, reason, step, ..
            }) => {
                assert_eq!(reason, AbortReason::AllCandidatesInvalid);
                assert_eq!(step, 3);
                assert_eq!(partial.steps.len(), 2);
                assert!(!partial.terminal);
                assert!(partial.aborted.is_some());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn budget_exhaustion() {
        let g = gateway(vec![vec![GOOD, GOOD]]);
        let (exec, reg) = (FixtureExecutor::new(), registry());
        let ex = Explorer {
            gateway: &g,
            executor: &exec,
            registry: &reg,
            cfg: cfg(2, 1),
        };
        let t = ex.explore_task(&accepted(), Path::new(".")).unwrap();
        assert_eq!(t.steps.len(), 1);
        assert!(t.terminal && t.budget_exhausted);
        assert!(t.violations().is_empty());
    }

    #[test]
    fn sample_step_marks_unparseable_and_keeps_n() {
        let g = gateway(vec![vec![GOOD, "a", GOOD, "b", GOOD]]);
        let (exec, reg) = (FixtureExecutor::new(), registry());
        let ex = Explorer {
            gateway: &g,
            executor: &exec,
            registry: &reg,
            cfg: cfg(5, 3),
        };
        let task = accepted();
        let c = ex
            .sample_step(&task, &StepContext::initial(&task), &[], 5, Path::new("."))
            .unwrap();
        assert_eq!(c.len(), 5);
        let bad = c.iter().filter(|c| c.observation.status == ObsStatus::ParseError).count();
        assert_eq!(bad, 2);
    }

    #[test]
    fn timeout_affects_only_its_candidate() {
        let slow = "Thought: loop.\n```\nspin()\n```";
        let g = gateway(vec![vec![slow, GOOD, GOOD]]);
        let mut timeout = ExecResponse::error("x", "timeout", "execution timed out");
        timeout.status = crate::executor::ExecStatus::Timeout;
        let exec = FixtureExecutor::new().with_canned("spin()", timeout);
        let reg = registry();
        let ex = Explorer {
            gateway: &g,
            executor: &exec,
            registry: &reg,
            cfg: cfg(3, 3),
        };
        let task = accepted();
        let c = ex
            .sample_step(&task, &StepContext::initial(&task), &[], 3, Path::new("."))
            .unwrap();
        assert_eq!(c[0].observation.status, ObsStatus::Timeout);
        assert!(c[1..].iter().all(|c| c.observation.status == ObsStatus::Ok));
    }

    #[test]
    fn inference_uses_one_candidate_and_no_verifier() {
        let g = Gateway::new().with_backend(
            RoleTag::Controller,
            controller(vec![vec![GOOD], vec![GOOD], vec![FINISH]]),
        );
        let (exec, reg) = (FixtureExecutor::new(), registry());
        let ex = Explorer {
            gateway: &g,
            executor: &exec,
            registry: &reg,
            cfg: cfg(1, 5),
        };
        let t = ex.infer_task(&accepted(), Path::new(".")).unwrap();
        assert_eq!(t.steps.len(), 3);
        assert!(t.steps.iter().all(|s| s.candidates.len() == 1 && s.chosen == 1));
        assert!(!g.has_backend(RoleTag::Verifier));
    }

    #[test]
    fn inference_aborts_on_parse_error() {
        let g = Gateway::new().with_backend(RoleTag::Controller, controller(vec![vec![GOOD], vec!["junk"]]));
        let (exec, reg) = (FixtureExecutor::new(), registry());
        let ex = Explorer {
            gateway: &g,
            executor: &exec,
            registry: &reg,
            cfg: cfg(1, 5),
        };
        assert!(matches!(
            ex.infer_task(&accepted(), Path::new(".")),
            Err(ExploreError::TaskAborted { step: 2, .. })
        ));
        let g = Gateway::new().with_backend(RoleTag::Controller, controller(vec![vec![FINISH]]));
        let ex = Explorer { gateway: &g, ..ex };
        assert_eq!(ex.infer_task(&accepted(), Path::new(".")).unwrap().steps.len(), 1);
    }

    #[test]
    fn exploration_requires_accepted_task_and_valid_config() {
        let g = Gateway::uniform(Arc::new(MockBackend::new()));
        let (exec, reg) = (FixtureExecutor::new(), registry());
        let ex = Explorer {
            gateway: &g,
            executor: &exec,
            registry: &reg,
            cfg: cfg(1, 5),
        };
        assert!(matches!(
            ex.explore_task(&Task::draft("t", "q", vec![]), Path::new(".")),
            Err(ExploreError::NotAccepted { .. })
        ));
        assert!(matches!(
            ex.explore_task(&accepted(), Path::new(".")),
            Err(ExploreError::Config(_))
        ));
    }

    #[test]
    fn contexts_match_what_the_controller_saw() {
        let g = gateway(vec![vec![GOOD, GOOD], vec![FINISH, GOOD]]);
        let (exec, reg) = (FixtureExecutor::new(), registry());
        let ex = Explorer {
            gateway: &g,
            executor: &exec,
            registry: &reg,
            cfg: cfg(2, 4),
        };
        let t = ex.explore_task(&accepted(), Path::new(".")).unwrap();
        let seen: Vec<String> = g
            .audit_log()
            .into_iter()
            .filter(|e| e.role == RoleTag::Controller)
            .filter_map(|e| e.user_digest)
            .collect();
        let rebuilt: Vec<String> = (1..=t.steps.len())
            .map(|i| sha256_hex(t.context_at(i).render().as_bytes()))
            .collect();
        assert_eq!(seen, rebuilt);
    }
}
