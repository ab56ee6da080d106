//! "Check Answer": runs a problem's test suite against the rendered group
//! solution in a subprocess, one fresh temp file per test.
//!
//! Sandboxing is the executor command's job. This module enforces the
//! wall-clock limit and caps captured output.

pub mod echo_script;

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::model::{Problem, TestOutcome, TestStatus};

/// Placeholder in `command_template` replaced by the source file path.
pub const SOURCE_PLACEHOLDER: &str = "{source}";

/// Stdout kept for comparison; anything past this is dropped.
const STDOUT_CEILING: usize = 8 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorConfig {
    pub language_tag: String,
    /// Shell-style words; exactly one contains `{source}`.
    pub command_template: String,
    pub hard_timeout_ms: u64,
    pub max_output_bytes: usize,
    /// File extension for the rendered source, without the dot.
    #[serde(default)]
    pub source_extension: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraderError {
    #[error("executor is for `{executor}` but the problem is `{problem}`")]
    LanguageMismatch { executor: String, problem: String },
    #[error("command template must contain exactly one {SOURCE_PLACEHOLDER} placeholder, found {0}")]
    Placeholder(usize),
    #[error("command template is not valid shell words")]
    Unparsable,
    #[error("hard_timeout_ms and max_output_bytes must be positive")]
    Limits,
}

impl ExecutorConfig {
    /// The bundled toy interpreter, run through `program echo-script <file>`.
    pub fn echo_script(program: &Path) -> Self {
        let quoted = shlex::try_quote(&program.to_string_lossy())
            .map(|q| q.into_owned())
            .unwrap_or_else(|_| program.display().to_string());
        ExecutorConfig {
            language_tag: echo_script::LANGUAGE_TAG.to_owned(),
            command_template: format!("{quoted} echo-script {SOURCE_PLACEHOLDER}"),
            hard_timeout_ms: 10_000,
            max_output_bytes: 4096,
            source_extension: Some("echo".to_owned()),
        }
    }

    pub fn validate(&self) -> Result<(), GraderError> {
        let count = self.command_template.matches(SOURCE_PLACEHOLDER).count();
        if count != 1 {
            return Err(GraderError::Placeholder(count));
        }
        if self.hard_timeout_ms == 0 || self.max_output_bytes == 0 {
            return Err(GraderError::Limits);
        }
        self.argv(Path::new("x")).map(|_| ())
    }

    fn argv(&self, source: &Path) -> Result<Vec<String>, GraderError> {
        let words = shlex::split(&self.command_template).ok_or(GraderError::Unparsable)?;
        if words.is_empty() {
            return Err(GraderError::Unparsable);
        }
        let path = source.to_string_lossy();
        Ok(words.into_iter().map(|w| w.replace(SOURCE_PLACEHOLDER, &path)).collect())
    }
}

/// CRLF to LF, trailing whitespace stripped per line, trailing blank lines
/// dropped.
pub fn normalize_output(text: &str) -> String {
    let unified = text.replace("\r\n", "\n");
    let mut lines: Vec<&str> = unified.split('\n').map(str::trim_end).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines.join("\n")
}

/// Longest prefix of `text` no larger than `max_bytes`, on a char boundary.
pub fn cap_bytes(text: &str, max_bytes: usize) -> &str {
    if text.len() <= max_bytes {
        return text;
    }
    let mut end = max_bytes;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    &text[..end]
}

fn unified_diff(expected: &str, actual: &str) -> String {
    let expected = format!("{expected}\n");
    let actual = format!("{actual}\n");
    similar::TextDiff::from_lines(&expected, &actual)
        .unified_diff()
        .context_radius(3)
        .header("expected", "actual")
        .to_string()
}

/// Runs every test in declared order, never stopping early.
pub fn run_tests(
    problem: &Problem,
    solution: &str,
    executor: &ExecutorConfig,
    work_root: &Path,
) -> Result<Vec<TestOutcome>, GraderError> {
    if executor.language_tag != problem.language_tag {
        return Err(GraderError::LanguageMismatch {
            executor: executor.language_tag.clone(),
            problem: problem.language_tag.clone(),
        });
    }
    executor.validate()?;

    let cap = executor.max_output_bytes;
    let all_error = |detail: String| {
        let detail = cap_bytes(&detail, cap).to_owned();
        problem
            .tests
            .iter()
            .map(|t| TestOutcome {
                test_id: t.id.clone(),
                status: TestStatus::Error,
                detail: detail.clone(),
            })
            .collect()
    };

    let dir = match tempfile::Builder::new().prefix("grade-").tempdir_in(work_root) {
        Ok(dir) => dir,
        Err(e) => return Ok(all_error(format!("cannot create work directory: {e}"))),
    };

    let mut outcomes = Vec::with_capacity(problem.tests.len());
    for (index, test) in problem.tests.iter().enumerate() {
        let file_name = match &executor.source_extension {
            Some(ext) => format!("test-{index}.{ext}"),
            None => format!("test-{index}"),
        };
        let source = dir.path().join(file_name);
        let program = format!("{solution}\n{}", test.program_suffix);
        if let Err(e) = std::fs::write(&source, program) {
            return Ok(all_error(format!("cannot write source file: {e}")));
        }
        let limit = Duration::from_millis(test.timeout_ms.min(executor.hard_timeout_ms));
        let run = match execute(executor, &source, dir.path(), limit) {
            Ok(run) => run,
            Err(detail) => return Ok(all_error(detail)),
        };
        let (status, detail) = match run.status {
            None => (TestStatus::Timeout, format!("timed out after {} ms", limit.as_millis())),
            Some(status) if status.success() => {
                let expected = normalize_output(&test.expected_stdout);
                let actual = normalize_output(&String::from_utf8_lossy(&run.stdout));
                if expected == actual {
                    (TestStatus::Pass, String::new())
                } else {
                    (TestStatus::Fail, unified_diff(&expected, &actual))
                }
            }
            Some(status) => {
                let stderr = String::from_utf8_lossy(&run.stderr).into_owned();
                if stderr.is_empty() {
                    (TestStatus::Error, format!("exited with {status}"))
                } else {
                    (TestStatus::Error, stderr)
                }
            }
        };
        outcomes.push(TestOutcome {
            test_id: test.id.clone(),
            status,
            detail: cap_bytes(&detail, cap).to_owned(),
        });
    }
    Ok(outcomes)
}

struct Run {
    /// `None` when the wall-clock limit was hit.
    status: Option<ExitStatus>,
    stdout: Vec<u8>,
    stderr: Vec<u8>,
}

fn execute(executor: &ExecutorConfig, source: &Path, cwd: &Path, limit: Duration) -> Result<Run, String> {
    let argv = executor.argv(source).map_err(|e| e.to_string())?;
    let mut command = Command::new(&argv[0]);
    command
        .args(&argv[1..])
        .current_dir(cwd)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        command.process_group(0);
    }
    let mut child = command
        .spawn()
        .map_err(|e| format!("failed to start executor `{}`: {e}", argv[0]))?;

    let stdout = drain(child.stdout.take(), STDOUT_CEILING);
    let stderr = drain(child.stderr.take(), executor.max_output_bytes);

    let status = match child.wait_timeout(limit) {
        Ok(Some(status)) => Some(status),
        Ok(None) => {
            kill_tree(&mut child);
            None
        }
        Err(e) => {
            kill_tree(&mut child);
            return Err(format!("failed waiting for executor: {e}"));
        }
    };
    Ok(Run {
        status,
        stdout: stdout.join().unwrap_or_default(),
        stderr: stderr.join().unwrap_or_default(),
    })
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>, keep: usize) -> JoinHandle<Vec<u8>> {
    std::thread::spawn(move || {
        let mut kept = Vec::new();
        let Some(mut pipe) = pipe else { return kept };
        let mut chunk = [0u8; 8192];
        loop {
            match pipe.read(&mut chunk) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = keep.saturating_sub(kept.len());
                    kept.extend_from_slice(&chunk[..n.min(room)]);
                }
            }
        }
        kept
    })
}

fn kill_tree(child: &mut Child) {
    #[cfg(unix)]
    {
        // The child leads its own process group, so this reaches grandchildren too.
        unsafe {
            libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
        }
    }
    let _ = child.kill();
    let _ = child.wait();
}

/// Default work directory for grading temp files.
pub fn default_work_root() -> PathBuf {
    std::env::temp_dir()
}

/// Grades a rendered solution. Called by the server outside any room lock.
pub trait Grade: Send + Sync {
    fn grade(&self, problem: &Problem, solution: &str) -> Vec<TestOutcome>;
}

/// Executors keyed by language tag.
#[derive(Clone, Debug, Default)]
pub struct ExecutorTable {
    pub executors: BTreeMap<String, ExecutorConfig>,
    pub work_root: PathBuf,
}

impl ExecutorTable {
    pub fn new(work_root: impl Into<PathBuf>) -> Self {
        ExecutorTable {
            executors: BTreeMap::new(),
            work_root: work_root.into(),
        }
    }

    /// Adds or replaces the executor for its language.
    pub fn insert(&mut self, executor: ExecutorConfig) {
        self.executors.insert(executor.language_tag.clone(), executor);
    }

    pub fn with(mut self, executor: ExecutorConfig) -> Self {
        self.insert(executor);
        self
    }
}

impl Grade for ExecutorTable {
    fn grade(&self, problem: &Problem, solution: &str) -> Vec<TestOutcome> {
        let failure = |detail: String| {
            problem
                .tests
                .iter()
                .map(|t| TestOutcome {
                    test_id: t.id.clone(),
                    status: TestStatus::Error,
                    detail: detail.clone(),
                })
                .collect()
        };
        match self.executors.get(&problem.language_tag) {
            None => failure(format!("no executor configured for `{}`", problem.language_tag)),
            Some(executor) => {
                run_tests(problem, solution, executor, &self.work_root).unwrap_or_else(|e| failure(e.to_string()))
            }
        }
    }
}
