//! A tiny line-oriented toy language used as the hermetic default executor.
//!
//! One statement per line; blank lines and lines starting with `#` are
//! skipped. Leading indentation is ignored.
//!
//! ```text
//! print <text>    write <text> and a newline to stdout
//! eprint <text>   write <text> and a newline to stderr
//! sleep <ms>      pause
//! exit <code>     stop with the given exit code
//! loop            spin forever
//! ```
//!
//! Anything else is a syntax error: a message on stderr and exit code 2.

use std::io::Write;
use std::time::Duration;

use super::{normalize_output, Grade};
use crate::model::{Problem, TestOutcome, TestStatus};

pub const LANGUAGE_TAG: &str = "echo-script";

/// Runs `source`, returning the process exit code.
pub fn run(source: &str, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    for (index, raw) in source.lines().enumerate() {
        let line = raw.trim_start();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (word, rest) = match line.split_once(' ') {
            Some((w, r)) => (w, r),
            None => (line.trim_end(), ""),
        };
        let result = match word {
            "print" => writeln!(stdout, "{rest}"),
            "eprint" => writeln!(stderr, "{rest}"),
            "sleep" => match rest.trim().parse::<u64>() {
                Ok(ms) => {
                    std::thread::sleep(Duration::from_millis(ms));
                    Ok(())
                }
                Err(_) => return syntax_error(stderr, index, raw),
            },
            "exit" => {
                let _ = stdout.flush();
                return match rest.trim().parse::<i32>() {
                    Ok(code) => code,
                    Err(_) => syntax_error(stderr, index, raw),
                };
            }
            "loop" => loop {
                std::hint::spin_loop();
                std::thread::sleep(Duration::from_millis(1));
            },
            _ => return syntax_error(stderr, index, raw),
        };
        if result.is_err() {
            return 3;
        }
    }
    let _ = stdout.flush();
    0
}

fn syntax_error(stderr: &mut dyn Write, index: usize, line: &str) -> i32 {
    let _ = writeln!(stderr, "SyntaxError: line {}: {}", index + 1, line.trim());
    2
}

/// Grades echo-script problems inside the calling process, for simulations
/// and embedders without a subprocess budget. Programs that would `loop` or
/// sleep past the test's limit are reported as timeouts without running.
#[derive(Clone, Copy, Debug, Default)]
pub struct InProcess;

fn exceeds(source: &str, limit_ms: u64) -> bool {
    let mut slept = 0u64;
    for line in source.lines().map(str::trim) {
        if line == "loop" {
            return true;
        }
        if let Some(ms) = line.strip_prefix("sleep ").and_then(|r| r.trim().parse::<u64>().ok()) {
            slept = slept.saturating_add(ms);
        }
    }
    slept >= limit_ms
}

impl Grade for InProcess {
    fn grade(&self, problem: &Problem, solution: &str) -> Vec<TestOutcome> {
        problem
            .tests
            .iter()
            .map(|test| {
                let program = format!("{solution}\n{}", test.program_suffix);
                let (status, detail) = if problem.language_tag != LANGUAGE_TAG {
                    (TestStatus::Error, format!("not an {LANGUAGE_TAG} problem"))
                } else if exceeds(&program, test.timeout_ms) {
                    (TestStatus::Timeout, format!("timed out after {} ms", test.timeout_ms))
                } else {
                    let mut out = Vec::new();
                    let mut err = Vec::new();
                    let code = run(&program, &mut out, &mut err);
                    let expected = normalize_output(&test.expected_stdout);
                    let actual = normalize_output(&String::from_utf8_lossy(&out));
                    match code {
                        0 if expected == actual => (TestStatus::Pass, String::new()),
                        0 => (TestStatus::Fail, format!("expected:\n{expected}\nactual:\n{actual}")),
                        _ => (TestStatus::Error, String::from_utf8_lossy(&err).into_owned()),
                    }
                };
                TestOutcome {
                    test_id: test.id.clone(),
                    status,
                    detail,
                }
            })
            .collect()
    }
}
