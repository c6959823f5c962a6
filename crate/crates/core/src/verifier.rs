//! Step verification: one prompt listing every candidate of a step with its
//! execution result, and a JSON verdict naming the best candidate.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical::extract_json;
use crate::gateway::{ChatRequest, Gateway, GatewayError, Message, RoleTag, Sampling};
use crate::model::{Candidate, ObsStatus, StepContext};
use crate::prompts;

/// Verifier replies tried before the step is given up.
pub const MAX_VERIFY_ATTEMPTS: usize = 3;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("every candidate is unparseable")]
    AllCandidatesInvalid,
    #[error("no usable verdict after {attempts} attempts: {last}")]
    StepVerificationFailed { attempts: usize, last: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    /// 1-based candidate index.
    pub best_id: usize,
    pub reason: String,
    pub raw: String,
}

fn task_text(context: &StepContext) -> String {
    if context.file_summaries.is_empty() {
        context.query.clone()
    } else {
        format!("{}\nFiles:\n{}", context.query, context.file_summaries.join("\n"))
    }
}

/// System and user messages for verifying one step.
pub fn build_prompt(context: &StepContext, candidates: &[Candidate]) -> Result<Vec<Message>, VerifyError> {
    if candidates.iter().all(|c| c.observation.status == ObsStatus::ParseError) {
        return Err(VerifyError::AllCandidatesInvalid);
    }
    let n = candidates.len();
    let previous = context
        .history
        .last()
        .map_or_else(|| "none".to_string(), |h| h.observation.clone());
    let sets = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            format!(
                "Step set {}:\nPREVIOUS_RESULT: {}\nCURRENT_STEP: {}\nCURRENT_RESULT: {}\n",
                i + 1,
                previous,
                c.action.text(),
                c.observation.result_text()
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    let system = prompts::fill(
        prompts::VERIFIER_SYSTEM,
        &[("N", &n.to_string()), ("ID_RANGE", &prompts::id_range(n))],
    );
    let user = prompts::fill(
        prompts::VERIFIER_USER,
        &[("TASK", &task_text(context)), ("STEP_SETS", &sets)],
    );
    Ok(vec![Message::system(system), Message::user(user)])
}

/// Parses a verifier reply against the candidates it ranks.
pub fn parse_verdict(reply: &str, candidates: &[Candidate]) -> Result<Verdict, String> {
    let v = extract_json(reply, '{').ok_or("the reply contains no JSON object")?;
    let best_id = match v.get("best_id") {
        Some(Value::Number(n)) => n.as_u64().map(|x| x as usize),
        Some(Value::String(s)) => s.trim().parse().ok(),
        _ => None,
    }
    .ok_or("best_id is missing or not an integer")?;
    let reason = v
        .get("reason")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .ok_or("reason is missing or empty")?;
    match best_id.checked_sub(1).and_then(|i| candidates.get(i)) {
        None => Err(format!("best_id {best_id} is outside 1..{}", candidates.len())),
        Some(c) if c.observation.status == ObsStatus::ParseError => {
            Err(format!("candidate {best_id} is unparseable and cannot be chosen"))
        }
        Some(_) => Ok(Verdict {
            best_id,
            reason: reason.to_string(),
            raw: reply.to_string(),
        }),
    }
}

/// Asks the verifier for the best candidate, correcting it up to
/// [`MAX_VERIFY_ATTEMPTS`] times.
pub fn select_best(
    gateway: &Gateway,
    context: &StepContext,
    candidates: &[Candidate],
    max_tokens: u32,
) -> Result<Verdict, VerifyError> {
    let mut messages = build_prompt(context, candidates)?;
    let mut last = String::new();
    for _ in 0..MAX_VERIFY_ATTEMPTS {
        let req = ChatRequest::new(RoleTag::Verifier, messages.clone(), Sampling::greedy(max_tokens));
        let reply = gateway.complete(&req)?;
        let text = reply.texts.into_iter().next().unwrap_or_default();
        match parse_verdict(&text, candidates) {
            Ok(v) => return Ok(v),
            Err(why) => {
                messages.push(Message::assistant(text));
                messages.push(Message::user(format!(
                    "{why}. Answer again with the json structure; best_id must be one of {}, and not an unparseable step.",
                    prompts::id_range(candidates.len())
                )));
                last = why;
            }
        }
    }
    Err(VerifyError::StepVerificationFailed {
        attempts: MAX_VERIFY_ATTEMPTS,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;
    use crate::model::{Action, HistoryEntry, Observation};
    use std::sync::Arc;

    fn ok(i: usize) -> Candidate {
        Candidate {
            action: Action {
                thought: format!("thought {i}"),
                code: format!("print({i})"),
                raw: format!("Thought: thought {i}\n```\nprint({i})\n```"),
            },
            observation: Observation::ok(i.to_string()),
        }
    }

    fn bad() -> Candidate {
        Candidate {
            action: Action::unparsed("no fence"),
            observation: Observation::parse_error("missing code block"),
        }
    }

    fn ctx() -> StepContext {
        StepContext {
            query: "What brand?".into(),
            file_summaries: vec!["image_1.png (image): a phone".into()],
            history: vec![],
        }
    }

    fn user_text(m: &[Message]) -> &str {
        &m[1].text
    }

    #[test]
    fn prompt_lists_candidates_in_order() {
        let cands: Vec<_> = (1..=5).map(ok).collect();
        let m = build_prompt(&ctx(), &cands).unwrap();
        let u = user_text(&m);
        let pos: Vec<usize> = (1..=5).map(|i| u.find(&format!("Step set {i}:")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(u.matches("PREVIOUS_RESULT: none").count(), 5);
        assert!(m[0].text.contains("1,2,3,4, and 5"));
        assert!(u.contains("image_1.png"));
    }

    #[test]
    fn previous_result_is_last_history_observation() {
        let mut c = ctx();
        c.history.push(HistoryEntry {
            thought: "t".into(),
            code: "x".into(),
            observation: "42".into(),
        });
        let m = build_prompt(&c, &[ok(1), ok(2)]).unwrap();
        assert!(user_text(&m).contains("PREVIOUS_RESULT: 42"));
    }

    #[test]
    fn unparseable_candidates_carry_diagnostic() {
        let m = build_prompt(&ctx(), &[ok(1), bad()]).unwrap();
        assert!(user_text(&m).contains("CURRENT_RESULT: [unparseable step] missing code block"));
        assert!(matches!(
            build_prompt(&ctx(), &[bad(), bad()]),
            Err(VerifyError::AllCandidatesInvalid)
        ));
    }

    #[test]
    fn distinct_candidates_give_distinct_prompts() {
        let a = build_prompt(&ctx(), &[ok(1), ok(2)]).unwrap();
        let b = build_prompt(&ctx(), &[ok(2), ok(1)]).unwrap();
        assert_ne!(a, b);
    }

    fn gateway(replies: &[&str]) -> Gateway {
        let mut mock = MockBackend::new();
        for r in replies {
            mock = mock.queued(RoleTag::Verifier, *r);
        }
        Gateway::uniform(Arc::new(mock))
    }

    #[test]
    fn selects_reported_id() {
        let cands: Vec<_> = (1..=5).map(ok).collect();
        let g = gateway(&[r#"{"reason":"correct tool","best_id":2}"#]);
        let v = select_best(&g, &ctx(), &cands, 512).unwrap();
        assert_eq!(v.best_id, 2);
        assert_eq!(v.reason, "correct tool");
    }

    #[test]
    fn out_of_range_is_corrected() {
        let cands: Vec<_> = (1..=5).map(ok).collect();
        let g = gateway(&[r#"{"reason":"r","best_id":7}"#, r#"Sure: {"reason":"r","best_id":"3"}"#]);
        assert_eq!(select_best(&g, &ctx(), &cands, 512).unwrap().best_id, 3);
        assert_eq!(g.calls_by_role()[&RoleTag::Verifier], 2);
    }

    #[test]
    fn choosing_unparseable_is_corrected() {
        let g = gateway(&[r#"{"reason":"r","best_id":2}"#, r#"{"reason":"r","best_id":1}"#]);
        assert_eq!(select_best(&g, &ctx(), &[ok(1), bad()], 512).unwrap().best_id, 1);
    }

    #[test]
    fn three_bad_replies_fail() {
        let g = gateway(&["nope", "still no", "{\"best_id\": 1}"]);
        assert!(matches!(
            select_best(&g, &ctx(), &[ok(1), ok(2)], 512),
            Err(VerifyError::StepVerificationFailed { attempts: 3, .. })
        ));
    }

    #[test]
    fn transport_errors_propagate() {
        let g = Gateway::uniform(Arc::new(MockBackend::unavailable())).with_retry(crate::gateway::RetryPolicy {
            attempts: 1,
            base_delay: std::time::Duration::ZERO,
        });
        assert!(matches!(
            select_best(&g, &ctx(), &[ok(1), ok(2)], 512),
            Err(VerifyError::Gateway(_))
        ));
    }
}
