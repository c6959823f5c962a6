//! Client side of the code-execution sandbox.
//!
//! The sandbox speaks newline-delimited JSON: one [`ExecRequest`] per line
//! in, one [`ExecResponse`] per line out, over a Unix socket or a child
//! process's stdio. A health probe is the line `{"op":"health"}`.
//!
//! [`FixtureExecutor`] is an in-process stand-in that runs a small,
//! deterministic subset of the agent code dialect against canned tool
//! fixtures. It is what the tests and the desk-scale pipeline run on.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FixtureResponse, ObsStatus, Observation, ToolFixture, FINAL_ANSWER_TOOL};

pub const KIND_NAME_RESOLUTION: &str = "name_resolution";
pub const KIND_FIXTURE_MISS: &str = "tool_argument";
pub const KIND_TOOL_ERROR: &str = "tool_error";
pub const KIND_SYNTAX: &str = "syntax";
pub const KIND_PREFIX_FAILURE: &str = "prefix_failure";
pub const KIND_FILESYSTEM: &str = "filesystem";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Agent,
    Filegen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecRequest {
    pub request_id: String,
    pub profile: Profile,
    /// Chosen codes of earlier steps, replayed before the candidate.
    pub prefix_codes: Vec<String>,
    pub candidate_code: String,
    pub tool_fixtures: BTreeMap<String, ToolFixture>,
    pub timeout_s: f64,
    pub workspace: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecResponse {
    pub request_id: String,
    pub status: ExecStatus,
    pub output: String,
    #[serde(default)]
    pub error_kind: Option<String>,
    #[serde(default)]
    pub error_message: Option<String>,
    pub duration_ms: u64,
}

impl ExecResponse {
    pub fn ok(request_id: &str, output: impl Into<String>) -> ExecResponse {
        ExecResponse {
            request_id: request_id.to_string(),
            status: ExecStatus::Ok,
            output: output.into(),
            error_kind: None,
            error_message: None,
            duration_ms: 0,
        }
    }

    pub fn error(request_id: &str, kind: &str, message: impl Into<String>) -> ExecResponse {
        ExecResponse {
            request_id: request_id.to_string(),
            status: ExecStatus::Error,
            output: String::new(),
            error_kind: Some(kind.to_string()),
            error_message: Some(message.into()),
            duration_ms: 0,
        }
    }

    pub fn is_prefix_failure(&self) -> bool {
        self.error_kind.as_deref() == Some(KIND_PREFIX_FAILURE)
    }

    /// Converts to an observation, truncating output to `cap` characters.
    pub fn into_observation(self, cap: usize) -> Observation {
        let status = match self.status {
            ExecStatus::Ok => ObsStatus::Ok,
            ExecStatus::Error => ObsStatus::Error,
            ExecStatus::Timeout => ObsStatus::Timeout,
        };
        let (error_kind, error_message) = match status {
            ObsStatus::Ok => (None, None),
            ObsStatus::Timeout => (
                Some(self.error_kind.unwrap_or_else(|| "timeout".into())),
                Some(self.error_message.unwrap_or_else(|| "execution timed out".into())),
            ),
            _ => (
                Some(self.error_kind.unwrap_or_else(|| "error".into())),
                Some(self.error_message.unwrap_or_else(|| "execution failed".into())),
            ),
        };
        Observation {
            status,
            output: self.output,
            error_kind,
            error_message,
            duration_ms: self.duration_ms,
        }
        .truncated(cap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub version: String,
    pub uptime_s: f64,
    pub profiles: Vec<Profile>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ExecError {
    #[error("sandbox unavailable: {0}")]
    Unavailable(String),
    #[error("invalid exec request: {0}")]
    InvalidRequest(String),
}

pub trait Executor: Send + Sync {
    fn exec(&self, request: &ExecRequest) -> Result<ExecResponse, ExecError>;
    fn health(&self) -> Result<Health, ExecError>;
}

/// Checks a request against the client-side hard timeout cap.
pub fn check_request(request: &ExecRequest, hard_cap_s: f64) -> Result<(), ExecError> {
    if !(request.timeout_s > 0.0 && request.timeout_s <= hard_cap_s) {
        return Err(ExecError::InvalidRequest(format!(
            "timeout {}s outside (0, {hard_cap_s}]",
            request.timeout_s
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct HealthProbe {
    op: &'static str,
}

fn exchange<R: BufRead, W: Write>(
    reader: &mut R,
    writer: &mut W,
    line: &[u8],
) -> Result<String, ExecError> {
    let unavailable = |e: std::io::Error| ExecError::Unavailable(e.to_string());
    writer.write_all(line).map_err(unavailable)?;
    writer.write_all(b"\n").map_err(unavailable)?;
    writer.flush().map_err(unavailable)?;
    let mut reply = String::new();
    let n = reader.read_line(&mut reply).map_err(unavailable)?;
    if n == 0 {
        return Err(ExecError::Unavailable("sandbox closed the connection".into()));
    }
    Ok(reply)
}

fn decode_response(request: &ExecRequest, line: &str) -> Result<ExecResponse, ExecError> {
    let resp: ExecResponse = serde_json::from_str(line)
        .map_err(|e| ExecError::Unavailable(format!("malformed sandbox reply: {e}")))?;
    if resp.request_id != request.request_id {
        return Err(ExecError::Unavailable(format!(
            "reply for {} does not echo request {}",
            resp.request_id, request.request_id
        )));
    }
    Ok(resp)
}

/// Talks to the sandbox service over a Unix socket, one connection per call.
pub struct SocketExecutor {
    path: PathBuf,
    hard_cap_s: f64,
    io_timeout: Duration,
}

impl SocketExecutor {
    pub fn new(path: impl Into<PathBuf>, hard_cap_s: f64) -> SocketExecutor {
        SocketExecutor {
            path: path.into(),
            hard_cap_s,
            io_timeout: Duration::from_secs_f64(hard_cap_s + 5.0),
        }
    }

    fn round_trip(&self, line: &[u8], timeout: Duration) -> Result<String, ExecError> {
        let stream = UnixStream::connect(&self.path)
            .map_err(|e| ExecError::Unavailable(format!("{}: {e}", self.path.display())))?;
        stream
            .set_read_timeout(Some(timeout))
            .map_err(|e| ExecError::Unavailable(e.to_string()))?;
        let mut writer = stream
            .try_clone()
            .map_err(|e| ExecError::Unavailable(e.to_string()))?;
        let mut reader = BufReader::new(stream);
        exchange(&mut reader, &mut writer, line)
    }
}

impl Executor for SocketExecutor {
    fn exec(&self, request: &ExecRequest) -> Result<ExecResponse, ExecError> {
        check_request(request, self.hard_cap_s)?;
        let line = serde_json::to_vec(request).expect("exec requests encode");
        let reply = self.round_trip(&line, self.io_timeout)?;
        decode_response(request, &reply)
    }

    fn health(&self) -> Result<Health, ExecError> {
        let line = serde_json::to_vec(&HealthProbe { op: "health" }).expect("encodes");
        let reply = self.round_trip(&line, Duration::from_secs(1))?;
        serde_json::from_str(&reply)
            .map_err(|e| ExecError::Unavailable(format!("malformed health reply: {e}")))
    }
}

struct StdioChild {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Single-worker mode: a child process reading requests on stdin.
pub struct StdioExecutor {
    inner: Mutex<StdioChild>,
    hard_cap_s: f64,
}

impl StdioExecutor {
    pub fn spawn(program: &str, args: &[String], hard_cap_s: f64) -> Result<StdioExecutor, ExecError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ExecError::Unavailable(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(StdioExecutor {
            inner: Mutex::new(StdioChild {
                child,
                stdin,
                stdout,
            }),
            hard_cap_s,
        })
    }

    fn round_trip(&self, line: &[u8]) -> Result<String, ExecError> {
        let mut guard = self.inner.lock().unwrap();
        let inner = &mut *guard;
        if let Ok(Some(status)) = inner.child.try_wait() {
            return Err(ExecError::Unavailable(format!("sandbox exited with {status}")));
        }
        exchange(&mut inner.stdout, &mut inner.stdin, line)
    }
}

impl Drop for StdioExecutor {
    fn drop(&mut self) {
        if let Ok(mut inner) = self.inner.lock() {
            let _ = inner.child.kill();
            let _ = inner.child.wait();
        }
    }
}

impl Executor for StdioExecutor {
    fn exec(&self, request: &ExecRequest) -> Result<ExecResponse, ExecError> {
        check_request(request, self.hard_cap_s)?;
        let line = serde_json::to_vec(request).expect("exec requests encode");
        let reply = self.round_trip(&line)?;
        decode_response(request, &reply)
    }

    fn health(&self) -> Result<Health, ExecError> {
        let line = serde_json::to_vec(&HealthProbe { op: "health" }).expect("encodes");
        let reply = self.round_trip(&line)?;
        serde_json::from_str(&reply)
            .map_err(|e| ExecError::Unavailable(format!("malformed health reply: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Value {
    Str(String),
    Num(String),
    Bool(bool),
    None,
    /// An unresolved identifier, only produced when normalizing fixture keys.
    Name(String),
}

impl Value {
    fn display(&self) -> String {
        match self {
            Value::Str(s) => s.clone(),
            Value::Num(n) => n.clone(),
            Value::Bool(true) => "True".into(),
            Value::Bool(false) => "False".into(),
            Value::None => "None".into(),
            Value::Name(n) => n.clone(),
        }
    }

    fn repr(&self) -> String {
        match self {
            Value::Str(s) => serde_json::to_string(s).expect("strings encode"),
            other => other.display(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Lit(Value),
    Var(String),
    Call(String, Vec<(Option<String>, Expr)>),
}

#[derive(Debug, Clone, PartialEq)]
enum Stmt {
    Assign(String, Expr),
    Expr(Expr),
}

struct Lexer<'a> {
    s: &'a [u8],
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            s: src.as_bytes(),
            src,
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && (self.s[self.pos] as char).is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn at_end(&mut self) -> bool {
        self.peek().is_none()
    }

    fn ident(&mut self) -> Option<String> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len()
            && (self.s[self.pos].is_ascii_alphanumeric() || self.s[self.pos] == b'_')
        {
            self.pos += 1;
        }
        if self.pos == start || self.s[start].is_ascii_digit() {
            self.pos = start;
            return None;
        }
        Some(self.src[start..self.pos].to_string())
    }

    fn string(&mut self) -> Result<String, String> {
        let quote = self.s[self.pos];
        self.pos += 1;
        let mut out = String::new();
        let rest = &self.src[self.pos..];
        let mut chars = rest.char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '\\' => match chars.next() {
                    Some((_, 'n')) => out.push('\n'),
                    Some((_, 't')) => out.push('\t'),
                    Some((_, e)) => out.push(e),
                    None => break,
                },
                c if c as u32 == quote as u32 => {
                    self.pos += i + 1;
                    return Ok(out);
                }
                c => out.push(c),
            }
        }
        Err("unterminated string literal".into())
    }

    fn number(&mut self) -> String {
        let start = self.pos;
        if self.s[self.pos] == b'-' {
            self.pos += 1;
        }
        while self.pos < self.s.len() && (self.s[self.pos].is_ascii_digit() || self.s[self.pos] == b'.') {
            self.pos += 1;
        }
        self.src[start..self.pos].to_string()
    }

    fn expr(&mut self) -> Result<Expr, String> {
        match self.peek() {
            Some(b'"') | Some(b'\'') => Ok(Expr::Lit(Value::Str(self.string()?))),
            Some(c) if c.is_ascii_digit() || c == b'-' => Ok(Expr::Lit(Value::Num(self.number()))),
            Some(_) => {
                let name = self.ident().ok_or_else(|| self.unexpected())?;
                match name.as_str() {
                    "True" => return Ok(Expr::Lit(Value::Bool(true))),
                    "False" => return Ok(Expr::Lit(Value::Bool(false))),
                    "None" => return Ok(Expr::Lit(Value::None)),
                    _ => {}
                }
                if self.eat(b'(') {
                    Ok(Expr::Call(name, self.args()?))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            None => Err("unexpected end of statement".into()),
        }
    }

    fn args(&mut self) -> Result<Vec<(Option<String>, Expr)>, String> {
        let mut args = Vec::new();
        if self.eat(b')') {
            return Ok(args);
        }
        loop {
            let save = self.pos;
            let kw = match self.ident() {
                Some(name) if self.peek() == Some(b'=') && self.s.get(self.pos + 1) != Some(&b'=') => {
                    self.pos += 1;
                    Some(name)
                }
                _ => {
                    self.pos = save;
                    None
                }
            };
            args.push((kw, self.expr()?));
            if self.eat(b',') {
                if self.eat(b')') {
                    return Ok(args);
                }
                continue;
            }
            if self.eat(b')') {
                return Ok(args);
            }
            return Err(self.unexpected());
        }
    }

    fn unexpected(&mut self) -> String {
        self.skip_ws();
        let tail: String = self.src[self.pos..].chars().take(20).collect();
        format!("invalid syntax near {tail:?}")
    }

    fn statement(&mut self) -> Result<Stmt, String> {
        let save = self.pos;
        if let Some(name) = self.ident() {
            if self.peek() == Some(b'=') && self.s.get(self.pos + 1) != Some(&b'=') {
                self.pos += 1;
                let e = self.expr()?;
                return self.finish(Stmt::Assign(name, e));
            }
        }
        self.pos = save;
        let e = self.expr()?;
        self.finish(Stmt::Expr(e))
    }

    fn finish(&mut self, stmt: Stmt) -> Result<Stmt, String> {
        if self.at_end() {
            Ok(stmt)
        } else {
            Err(self.unexpected())
        }
    }
}

/// Splits code into logical statements: newlines inside brackets or
/// strings continue the statement, and `#` comments are dropped.
fn logical_lines(code: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    let mut in_comment = false;
    for c in code.chars() {
        if in_comment {
            if c == '\n' {
                in_comment = false;
            } else {
                continue;
            }
        }
        if let Some(q) = quote {
            cur.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '#' => in_comment = true,
            '\'' | '"' => {
                quote = Some(c);
                cur.push(c);
            }
            '(' | '[' | '{' => {
                depth += 1;
                cur.push(c);
            }
            ')' | ']' | '}' => {
                depth -= 1;
                cur.push(c);
            }
            '\n' if depth <= 0 => {
                if !cur.trim().is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                cur.clear();
            }
            '\n' => cur.push(' '),
            c => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur);
    }
    out
}

/// Canonical form of a call's argument list, used as the fixture key.
/// Literal values are rendered with double-quoted strings and keyword
/// arguments as `name=value`, joined by `", "`.
pub fn normalize_args(args_src: &str) -> Result<String, String> {
    let wrapped = format!("{args_src})");
    let mut lx = Lexer::new(&wrapped);
    let args = lx.args()?;
    if !lx.at_end() {
        return Err(lx.unexpected());
    }
    let mut parts = Vec::new();
    for (kw, e) in args {
        let v = match e {
            Expr::Lit(v) => v,
            Expr::Var(n) => Value::Name(n),
            Expr::Call(..) => return Err("nested calls are not fixture keys".into()),
        };
        parts.push(render_arg(kw.as_deref(), &v));
    }
    Ok(parts.join(", "))
}

fn render_arg(kw: Option<&str>, v: &Value) -> String {
    match kw {
        Some(k) => format!("{k}={}", v.repr()),
        None => v.repr(),
    }
}

enum Halt {
    Error(&'static str, String),
}

struct Session<'a> {
    vars: BTreeMap<String, Value>,
    fixtures: &'a BTreeMap<String, ToolFixture>,
    profile: Profile,
    workspace: &'a Path,
    output: String,
}

impl<'a> Session<'a> {
    fn run(&mut self, code: &str) -> Result<(), Halt> {
        for line in logical_lines(code) {
            let stmt = Lexer::new(&line)
                .statement()
                .map_err(|e| Halt::Error(KIND_SYNTAX, format!("SyntaxError: {e}")))?;
            match stmt {
                Stmt::Assign(name, e) => {
                    let v = self.eval(&e)?;
                    self.vars.insert(name, v);
                }
                Stmt::Expr(e) => {
                    self.eval(&e)?;
                }
            }
        }
        Ok(())
    }

    fn eval(&mut self, e: &Expr) -> Result<Value, Halt> {
        match e {
            Expr::Lit(v) => Ok(v.clone()),
            Expr::Var(n) => self.vars.get(n).cloned().ok_or_else(|| {
                Halt::Error(KIND_NAME_RESOLUTION, format!("NameError: name '{n}' is not defined"))
            }),
            Expr::Call(name, args) => {
                let mut vals = Vec::with_capacity(args.len());
                for (kw, a) in args {
                    vals.push((kw.clone(), self.eval(a)?));
                }
                self.call(name, &vals)
            }
        }
    }

    fn call(&mut self, name: &str, args: &[(Option<String>, Value)]) -> Result<Value, Halt> {
        match name {
            "print" => {
                let line: Vec<String> = args.iter().map(|(_, v)| v.display()).collect();
                self.output.push_str(&line.join(" "));
                self.output.push('\n');
                Ok(Value::None)
            }
            "str" if args.len() == 1 => Ok(Value::Str(args[0].1.display())),
            FINAL_ANSWER_TOOL => {
                let answer = args.first().map(|(_, v)| v.display()).unwrap_or_default();
                self.output.push_str(&answer);
                Ok(Value::None)
            }
            "write_file" if self.profile == Profile::Filegen => self.write_file(args),
            _ => match self.fixtures.get(name) {
                Some(fixture) => self.call_tool(name, fixture, args),
                None => Err(Halt::Error(
                    KIND_NAME_RESOLUTION,
                    format!("NameError: name '{name}' is not defined"),
                )),
            },
        }
    }

    fn call_tool(
        &self,
        name: &str,
        fixture: &ToolFixture,
        args: &[(Option<String>, Value)],
    ) -> Result<Value, Halt> {
        let key = args
            .iter()
            .map(|(kw, v)| render_arg(kw.as_deref(), v))
            .collect::<Vec<_>>()
            .join(", ");
        let hit = fixture
            .responses
            .iter()
            .find(|(k, _)| normalize_args(k).as_deref() == Ok(key.as_str()))
            .or_else(|| fixture.responses.get_key_value("*"))
            .map(|(_, r)| r);
        match hit {
            Some(FixtureResponse::Text(t)) => Ok(Value::Str(t.clone())),
            Some(FixtureResponse::Error { error }) => {
                Err(Halt::Error(KIND_TOOL_ERROR, format!("{name} raised: {error}")))
            }
            None if fixture.passthrough.is_some() => Err(Halt::Error(
                KIND_TOOL_ERROR,
                format!("{name}: passthrough endpoints are unavailable in the fixture executor"),
            )),
            None => Err(Halt::Error(
                KIND_FIXTURE_MISS,
                format!("fixture miss: no canned response for {name}({key})"),
            )),
        }
    }

    fn write_file(&mut self, args: &[(Option<String>, Value)]) -> Result<Value, Halt> {
        let (path, text) = match args {
            [(_, Value::Str(p)), (_, v)] => (p.clone(), v.display()),
            _ => {
                return Err(Halt::Error(
                    KIND_TOOL_ERROR,
                    "write_file(path, text) takes a path string and a value".into(),
                ))
            }
        };
        if !crate::model::is_contained_relative(&path) {
            return Err(Halt::Error(
                KIND_FILESYSTEM,
                format!("PermissionError: {path:?} is outside the workspace"),
            ));
        }
        let target = self.workspace.join(&path);
        let written = target
            .parent()
            .map_or(Ok(()), std::fs::create_dir_all)
            .and_then(|_| std::fs::write(&target, text.as_bytes()));
        written.map_err(|e| Halt::Error(KIND_FILESYSTEM, format!("OSError: {e}")))?;
        Ok(Value::None)
    }
}

/// Deterministic in-process executor over tool fixtures.
///
/// Supported dialect: one statement per logical line, either
/// `name = expr` or an expression; expressions are string/number/bool
/// literals, variables, and calls. `print`, `str` and `final_answer` are
/// builtins; `write_file(path, text)` exists in the filegen profile only.
/// Any registered fixture tool is callable. Canned responses registered
/// with [`FixtureExecutor::with_canned`] short-circuit execution for an
/// exact candidate code.
pub struct FixtureExecutor {
    canned: BTreeMap<String, ExecResponse>,
    started: Instant,
    hard_cap_s: f64,
}

impl FixtureExecutor {
    pub fn new() -> FixtureExecutor {
        FixtureExecutor {
            canned: BTreeMap::new(),
            started: Instant::now(),
            hard_cap_s: 600.0,
        }
    }

    pub fn with_canned(mut self, candidate_code: impl Into<String>, response: ExecResponse) -> Self {
        self.canned.insert(candidate_code.into(), response);
        self
    }
}

impl Default for FixtureExecutor {
    fn default() -> Self {
        FixtureExecutor::new()
    }
}

impl Executor for FixtureExecutor {
    fn exec(&self, request: &ExecRequest) -> Result<ExecResponse, ExecError> {
        check_request(request, self.hard_cap_s)?;
        if let Some(canned) = self.canned.get(&request.candidate_code) {
            return Ok(ExecResponse {
                request_id: request.request_id.clone(),
                ..canned.clone()
            });
        }
        let mut session = Session {
            vars: BTreeMap::new(),
            fixtures: &request.tool_fixtures,
            profile: request.profile,
            workspace: &request.workspace,
            output: String::new(),
        };
        for (i, code) in request.prefix_codes.iter().enumerate() {
            if let Err(Halt::Error(kind, msg)) = session.run(code) {
                return Ok(ExecResponse::error(
                    &request.request_id,
                    KIND_PREFIX_FAILURE,
                    format!("prefix step {} failed ({kind}): {msg}", i + 1),
                ));
            }
        }
        session.output.clear();
        let result = session.run(&request.candidate_code);
        let output = std::mem::take(&mut session.output);
        Ok(match result {
            Ok(()) => ExecResponse::ok(&request.request_id, output.trim_end_matches('\n')),
            Err(Halt::Error(kind, msg)) => ExecResponse {
                output: output.trim_end_matches('\n').to_string(),
                ..ExecResponse::error(&request.request_id, kind, msg)
            },
        })
    }

    fn health(&self) -> Result<Health, ExecError> {
        Ok(Health {
            version: concat!("fixture-", env!("CARGO_PKG_VERSION")).to_string(),
            uptime_s: self.started.elapsed().as_secs_f64(),
            profiles: vec![Profile::Agent, Profile::Filegen],
        })
    }
}
