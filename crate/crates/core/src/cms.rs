//! Markdown worksheets: import, canonical export, and the on-disk content
//! store (`<content_dir>/worksheets/<id>.md`).
//!
//! The full grammar lives in `docs/worksheet-format.md`. In short: a
//! `---` front-matter block, then one `## Title` heading per problem with an
//! optional `id:` line, prompt markdown, a ```` ```starter <language> ````
//! block, optional ```` ```blank <id> ```` blocks and ```` ```test ```` blocks.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{blank_markers, validate_problem, BlankRegion, Problem, TestCase, Worksheet};

pub const DEFAULT_TEST_TIMEOUT_MS: u64 = 2000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ParseError {}

fn err(line: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        line,
        message: message.into(),
    }
}

/// Lowercased ASCII slug: runs of other characters become a single `-`.
pub fn slugify(text: &str) -> String {
    let mut slug = String::new();
    for c in text.chars() {
        if c.is_ascii_alphanumeric() {
            slug.push(c.to_ascii_lowercase());
        } else if !slug.is_empty() && !slug.ends_with('-') {
            slug.push('-');
        }
    }
    while slug.ends_with('-') {
        slug.pop();
    }
    slug
}

struct Fence {
    marker: char,
    len: usize,
}

fn opening_fence(line: &str) -> Option<(Fence, &str)> {
    let indent = line.len() - line.trim_start_matches(' ').len();
    if indent > 3 {
        return None;
    }
    let rest = &line[indent..];
    let marker = rest.chars().next().filter(|c| *c == '`' || *c == '~')?;
    let len = rest.chars().take_while(|c| *c == marker).count();
    if len < 3 {
        return None;
    }
    let info = rest[len..].trim();
    if marker == '`' && info.contains('`') {
        return None;
    }
    Some((Fence { marker, len }, info))
}

fn closes(fence: &Fence, line: &str) -> bool {
    let indent = line.len() - line.trim_start_matches(' ').len();
    if indent > 3 {
        return false;
    }
    let rest = line[indent..].trim_end();
    rest.len() >= fence.len && rest.chars().all(|c| c == fence.marker)
}

/// `key: value` lines with `key: |` introducing a block of two-space
/// indented lines.
fn parse_fields(lines: &[(usize, &str)], errors: &mut Vec<ParseError>) -> Vec<(usize, String, String)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let (no, line) = lines[i];
        i += 1;
        if line.trim().is_empty() {
            continue;
        }
        let Some((key, rest)) = line.split_once(':') else {
            errors.push(err(no, format!("expected `key: value`, found `{}`", line.trim())));
            continue;
        };
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
            errors.push(err(no, format!("invalid field name `{key}`")));
            continue;
        }
        let value = if rest.trim() == "|" {
            let mut block = Vec::new();
            let mut j = i;
            while j < lines.len() {
                let candidate = lines[j].1;
                if let Some(stripped) = candidate.strip_prefix("  ") {
                    block.push(stripped);
                    j += 1;
                    i = j;
                } else if candidate.trim().is_empty() {
                    // A bare empty line continues the block only when more
                    // indented lines follow.
                    let mut k = j;
                    while k < lines.len() && lines[k].1.trim().is_empty() && !lines[k].1.starts_with("  ") {
                        k += 1;
                    }
                    if k < lines.len() && lines[k].1.starts_with("  ") {
                        block.extend(std::iter::repeat_n("", k - j));
                        j = k;
                    } else {
                        break;
                    }
                } else {
                    break;
                }
            }
            block.join("\n")
        } else {
            rest.strip_prefix(' ').unwrap_or(rest).to_owned()
        };
        fields.push((no, key.to_owned(), value));
    }
    fields
}

fn write_field(out: &mut String, key: &str, value: &str) {
    let inline = !value.is_empty() && !value.contains('\n') && value.trim() == value && value != "|";
    if inline {
        out.push_str(&format!("{key}: {value}\n"));
        return;
    }
    out.push_str(&format!("{key}: |\n"));
    if value.is_empty() {
        return;
    }
    for line in value.split('\n') {
        out.push_str("  ");
        out.push_str(line);
        out.push('\n');
    }
}

struct ProblemDraft {
    heading_line: usize,
    title: String,
    id: Option<String>,
    prompt: Vec<String>,
    starter: Option<(String, String)>,
    starter_reported: bool,
    blank_props: Vec<(usize, String, String, String)>,
    tests: Vec<TestCase>,
}

impl ProblemDraft {
    fn new(heading_line: usize, title: String) -> Self {
        ProblemDraft {
            heading_line,
            title,
            id: None,
            prompt: Vec::new(),
            starter: None,
            starter_reported: false,
            blank_props: Vec::new(),
            tests: Vec::new(),
        }
    }

    fn finish(self, errors: &mut Vec<ParseError>) -> Option<Problem> {
        let heading = self.heading_line;
        let id = self.id.unwrap_or_else(|| slugify(&self.title));
        if id.is_empty() {
            errors.push(err(heading, format!("cannot derive a problem id from heading `{}`", self.title)));
            return None;
        }
        let Some((language_tag, starter_code)) = self.starter else {
            if !self.starter_reported {
                errors.push(err(heading, format!("problem `{}` has no ```starter block", self.title)));
            }
            return None;
        };
        let markers = match blank_markers(&starter_code) {
            Ok(m) => m,
            Err(e) => {
                errors.push(err(heading, format!("problem `{}`: {e}", self.title)));
                return None;
            }
        };
        let mut blanks: Vec<BlankRegion> = markers
            .iter()
            .map(|m| BlankRegion {
                id: m.id.clone(),
                placeholder: String::new(),
                initial_text: String::new(),
            })
            .collect();
        for (line, blank_id, placeholder, initial) in self.blank_props {
            match blanks.iter_mut().find(|b| b.id == blank_id) {
                Some(b) => {
                    b.placeholder = placeholder;
                    b.initial_text = initial;
                }
                None => errors.push(err(line, format!("blank block for `{blank_id}`, which has no marker in the starter code"))),
            }
        }
        let mut prompt = self.prompt;
        while prompt.last().is_some_and(|l| l.trim().is_empty()) {
            prompt.pop();
        }
        let first = prompt.iter().position(|l| !l.trim().is_empty()).unwrap_or(prompt.len());
        let problem = Problem {
            id,
            title: self.title,
            prompt_markdown: prompt[first..].join("\n"),
            language_tag,
            starter_code,
            blanks,
            tests: self.tests,
        };
        let invalid = validate_problem(&problem);
        if invalid.is_empty() {
            Some(problem)
        } else {
            errors.extend(invalid.into_iter().map(|e| err(heading, e.to_string())));
            None
        }
    }
}

/// Parses a worksheet, accumulating every error found.
pub fn import_worksheet(source: &str) -> Result<Worksheet, Vec<ParseError>> {
    let lines: Vec<(usize, &str)> = source.lines().enumerate().map(|(i, l)| (i + 1, l)).collect();
    let mut errors = Vec::new();

    let mut cursor = 0;
    while cursor < lines.len() && lines[cursor].1.trim().is_empty() {
        cursor += 1;
    }
    if cursor >= lines.len() || lines[cursor].1.trim_end() != "---" {
        return Err(vec![err(lines.get(cursor).map_or(1, |l| l.0), "worksheet must start with a `---` front-matter block")]);
    }
    let fm_start = cursor + 1;
    let Some(fm_len) = lines[fm_start..].iter().position(|(_, l)| l.trim_end() == "---") else {
        return Err(vec![err(lines[cursor].0, "front-matter block is not closed with `---`")]);
    };
    let mut id = None;
    let mut title = String::new();
    let mut published = false;
    for (no, key, value) in parse_fields(&lines[fm_start..fm_start + fm_len], &mut errors) {
        match key.as_str() {
            "id" => id = Some(value),
            "title" => title = value,
            "published" => match value.as_str() {
                "true" => published = true,
                "false" => published = false,
                other => errors.push(err(no, format!("published must be true or false, found `{other}`"))),
            },
            other => errors.push(err(no, format!("unknown front-matter field `{other}`"))),
        }
    }
    let id = id.unwrap_or_else(|| {
        errors.push(err(lines[cursor].0, "front matter needs an `id` field"));
        String::new()
    });
    cursor = fm_start + fm_len + 1;

    let mut problems = Vec::new();
    let mut draft: Option<ProblemDraft> = None;
    let mut expect_id_line = false;
    while cursor < lines.len() {
        let (no, line) = lines[cursor];
        cursor += 1;

        if let Some(heading) = line.strip_prefix("## ") {
            if let Some(done) = draft.take() {
                problems.extend(done.finish(&mut errors));
            }
            let title = heading.trim().to_owned();
            if title.is_empty() {
                errors.push(err(no, "problem heading has no title"));
            }
            draft = Some(ProblemDraft::new(no, title));
            expect_id_line = true;
            continue;
        }
        let Some(current) = draft.as_mut() else {
            if !line.trim().is_empty() {
                errors.push(err(no, "content before the first `## ` problem heading"));
            }
            continue;
        };
        if std::mem::take(&mut expect_id_line) {
            if let Some(explicit) = line.strip_prefix("id:") {
                current.id = Some(explicit.trim().to_owned());
                continue;
            }
        }

        let Some((fence, info)) = opening_fence(line) else {
            if current.starter.is_some() {
                if !line.trim().is_empty() {
                    errors.push(err(no, format!("unexpected text after the starter block of `{}`", current.title)));
                }
            } else {
                current.prompt.push(line.to_owned());
            }
            continue;
        };
        let body_start = cursor;
        while cursor < lines.len() && !closes(&fence, lines[cursor].1) {
            cursor += 1;
        }
        if cursor >= lines.len() {
            errors.push(err(no, "code fence is never closed"));
        }
        let body = &lines[body_start..cursor.min(lines.len())];
        cursor += 1;

        let mut words = info.split_whitespace();
        match words.next() {
            Some("starter") => {
                let Some(language) = words.next() else {
                    errors.push(err(
                        no,
                        format!("starter block under heading `{}` is missing a language tag", current.title),
                    ));
                    current.starter_reported = true;
                    continue;
                };
                if current.starter.is_some() {
                    errors.push(err(no, format!("problem `{}` has more than one starter block", current.title)));
                    continue;
                }
                let code = body.iter().map(|(_, l)| *l).collect::<Vec<_>>().join("\n");
                current.starter = Some((language.to_owned(), code));
            }
            Some("test") => {
                let mut test = TestCase {
                    id: format!("t{}", current.tests.len() + 1),
                    program_suffix: String::new(),
                    expected_stdout: String::new(),
                    timeout_ms: DEFAULT_TEST_TIMEOUT_MS,
                };
                for (fno, key, value) in parse_fields(body, &mut errors) {
                    match key.as_str() {
                        "id" => test.id = value,
                        "suffix" => test.program_suffix = value,
                        "expect" => test.expected_stdout = value,
                        "timeout_ms" => match value.parse() {
                            Ok(ms) => test.timeout_ms = ms,
                            Err(_) => errors.push(err(fno, format!("timeout_ms must be a positive integer, found `{value}`"))),
                        },
                        other => errors.push(err(fno, format!("unknown test field `{other}`"))),
                    }
                }
                current.tests.push(test);
            }
            Some("blank") => {
                let Some(blank_id) = words.next() else {
                    errors.push(err(no, "blank block needs an id: ```blank <id>"));
                    continue;
                };
                let (mut placeholder, mut initial) = (String::new(), String::new());
                for (fno, key, value) in parse_fields(body, &mut errors) {
                    match key.as_str() {
                        "placeholder" => placeholder = value,
                        "initial" => initial = value,
                        other => errors.push(err(fno, format!("unknown blank field `{other}`"))),
                    }
                }
                current.blank_props.push((no, blank_id.to_owned(), placeholder, initial));
            }
            _ if current.starter.is_none() => {
                // Illustrative code inside the prompt.
                current.prompt.push(line.to_owned());
                current.prompt.extend(body.iter().map(|(_, l)| (*l).to_owned()));
                if let Some((_, close)) = lines.get(cursor - 1) {
                    current.prompt.push((*close).to_owned());
                }
            }
            _ => errors.push(err(no, format!("unexpected code block after the starter block of `{}`", current.title))),
        }
    }
    if let Some(done) = draft.take() {
        problems.extend(done.finish(&mut errors));
    }

    let worksheet = Worksheet {
        id,
        title,
        problems,
        published,
    };
    if errors.is_empty() {
        errors.extend(worksheet.validate().into_iter().map(|e| err(1, e.to_string())));
    }
    if errors.is_empty() {
        Ok(worksheet)
    } else {
        errors.sort_by_key(|e| e.line);
        Err(errors)
    }
}

fn fence_for<'a>(contents: impl IntoIterator<Item = &'a str>) -> String {
    let longest = contents
        .into_iter()
        .flat_map(|c| c.split(|ch| ch != '`'))
        .map(str::len)
        .max()
        .unwrap_or(0);
    "`".repeat((longest + 1).max(3))
}

/// Canonical text form; `import_worksheet` of the output yields `w` again.
pub fn export_worksheet(w: &Worksheet) -> String {
    let mut out = String::from("---\n");
    write_field(&mut out, "id", &w.id);
    write_field(&mut out, "title", &w.title);
    out.push_str(&format!("published: {}\n---\n", w.published));

    for p in &w.problems {
        out.push_str(&format!("\n## {}\nid: {}\n", p.title, p.id));
        if !p.prompt_markdown.is_empty() {
            out.push('\n');
            out.push_str(&p.prompt_markdown);
            out.push('\n');
        }

        let fence = fence_for([p.starter_code.as_str()]);
        out.push_str(&format!("\n{fence}starter {}\n", p.language_tag));
        if !p.starter_code.is_empty() {
            out.push_str(&p.starter_code);
            out.push('\n');
        }
        out.push_str(&fence);
        out.push('\n');

        for b in p.blanks.iter().filter(|b| !b.placeholder.is_empty() || !b.initial_text.is_empty()) {
            let mut body = String::new();
            write_field(&mut body, "placeholder", &b.placeholder);
            write_field(&mut body, "initial", &b.initial_text);
            let fence = fence_for([body.as_str()]);
            out.push_str(&format!("\n{fence}blank {}\n{body}{fence}\n", b.id));
        }
        for t in &p.tests {
            let mut body = String::new();
            write_field(&mut body, "id", &t.id);
            body.push_str(&format!("timeout_ms: {}\n", t.timeout_ms));
            write_field(&mut body, "suffix", &t.program_suffix);
            write_field(&mut body, "expect", &t.expected_stdout);
            let fence = fence_for([body.as_str()]);
            out.push_str(&format!("\n{fence}test\n{body}{fence}\n"));
        }
    }
    out
}

/// Looks worksheets up by id.
pub trait WorksheetSource: Send + Sync {
    fn worksheet(&self, id: &str) -> Option<Arc<Worksheet>>;
}

impl WorksheetSource for BTreeMap<String, Arc<Worksheet>> {
    fn worksheet(&self, id: &str) -> Option<Arc<Worksheet>> {
        self.get(id).cloned()
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("worksheet `{0}` not found")]
    NotFound(String),
    #[error("invalid worksheet id `{0}`")]
    InvalidId(String),
    #[error("worksheet `{id}` does not parse: {errors:?}")]
    Corrupt { id: String, errors: Vec<ParseError> },
    #[error("worksheet is invalid: {0:?}")]
    Invalid(Vec<ParseError>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Worksheets persisted as `<root>/worksheets/<id>.md`.
#[derive(Debug)]
pub struct WorksheetStore {
    dir: PathBuf,
    cache: Mutex<BTreeMap<String, Arc<Worksheet>>>,
    locks: Mutex<BTreeMap<String, Arc<Mutex<()>>>>,
}

impl WorksheetStore {
    pub fn open(content_dir: &Path) -> Result<Self, StoreError> {
        let dir = content_dir.join("worksheets");
        std::fs::create_dir_all(&dir)?;
        Ok(WorksheetStore {
            dir,
            cache: Mutex::new(BTreeMap::new()),
            locks: Mutex::new(BTreeMap::new()),
        })
    }

    fn path(&self, id: &str) -> Result<PathBuf, StoreError> {
        if !crate::model::is_valid_blank_id(id) {
            return Err(StoreError::InvalidId(id.to_owned()));
        }
        Ok(self.dir.join(format!("{id}.md")))
    }

    fn lock_for(&self, id: &str) -> Arc<Mutex<()>> {
        self.locks.lock().unwrap().entry(id.to_owned()).or_default().clone()
    }

    pub fn store(&self, worksheet: &Worksheet) -> Result<(), StoreError> {
        let path = self.path(&worksheet.id)?;
        let invalid = worksheet.validate();
        if !invalid.is_empty() {
            return Err(StoreError::Invalid(invalid.into_iter().map(|e| err(0, e.to_string())).collect()));
        }
        let lock = self.lock_for(&worksheet.id);
        let _guard = lock.lock().unwrap();
        let tmp = path.with_extension("md.tmp");
        std::fs::write(&tmp, export_worksheet(worksheet))?;
        std::fs::rename(&tmp, &path)?;
        self.cache
            .lock()
            .unwrap()
            .insert(worksheet.id.clone(), Arc::new(worksheet.clone()));
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<Arc<Worksheet>, StoreError> {
        let path = self.path(id)?;
        if let Some(hit) = self.cache.lock().unwrap().get(id) {
            return Ok(hit.clone());
        }
        let lock = self.lock_for(id);
        let _guard = lock.lock().unwrap();
        let text = match std::fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::NotFound(id.to_owned())),
            Err(e) => return Err(e.into()),
        };
        let worksheet = Arc::new(import_worksheet(&text).map_err(|errors| StoreError::Corrupt {
            id: id.to_owned(),
            errors,
        })?);
        self.cache.lock().unwrap().insert(id.to_owned(), worksheet.clone());
        Ok(worksheet)
    }

    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let mut ids: Vec<String> = std::fs::read_dir(&self.dir)?
            .filter_map(Result::ok)
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".md").map(str::to_owned)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }
}

impl WorksheetSource for WorksheetStore {
    fn worksheet(&self, id: &str) -> Option<Arc<Worksheet>> {
        self.load(id).ok()
    }
}
