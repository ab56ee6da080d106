//! Deployment configuration, read from a TOML file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grader::{ExecutorConfig, ExecutorTable};
use crate::model::DEFAULT_MAX_GROUP_SIZE;
use crate::server::hub::{HubConfig, JoinVerifier};
use crate::sync::DEFAULT_REORDER_WINDOW;
use crate::tutor::{ContextPolicy, HttpBackend, ScriptedMock, TutorBackend, DEFAULT_MAX_TURNS, DEFAULT_SYSTEM_PROMPT};

pub const DEFAULT_API_KEY_ENV: &str = "TUTORHUB_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TutorConfig {
    pub backend: BackendKind,
    pub prompt_file: Option<PathBuf>,
    pub max_turns: usize,
    pub timeout_secs: u64,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub max_retries: u32,
}

impl Default for TutorConfig {
    fn default() -> Self {
        TutorConfig {
            backend: BackendKind::Mock,
            prompt_file: None,
            max_turns: DEFAULT_MAX_TURNS,
            timeout_secs: 60,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            max_retries: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierConfig {
    /// Shell words; `{email}` and `{group}` are substituted. Exit 0 admits.
    pub command: String,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_content_dir() -> PathBuf {
    "content".into()
}

fn default_data_dir() -> PathBuf {
    "data".into()
}

fn default_max_group_size() -> usize {
    DEFAULT_MAX_GROUP_SIZE
}

fn default_snapshot_every() -> u64 {
    200
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_content_dir")]
    pub content_dir: PathBuf,
    /// Event log and snapshots live here.
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    pub active_worksheet: String,
    #[serde(default)]
    pub groups: Vec<u32>,
    #[serde(default = "default_max_group_size")]
    pub max_group_size: usize,
    #[serde(default)]
    pub ta_allowlist: Vec<String>,
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
    #[serde(default)]
    pub fsync: bool,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: u64,
    #[serde(default)]
    pub unlabelable_sections: Vec<String>,
    #[serde(default)]
    pub tutor: TutorConfig,
    #[serde(default)]
    pub executors: Vec<ExecutorConfig>,
    #[serde(default)]
    pub verifier: Option<VerifierConfig>,
}

impl Config {
    /// Parses and validates; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Config, ConfigError> {
        let mut config: Config = toml::from_str(text)?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.content_dir);
        resolve(&mut config.data_dir);
        for p in [&mut config.static_dir, &mut config.work_dir, &mut config.tutor.prompt_file]
            .into_iter()
            .flatten()
        {
            resolve(p);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Config::parse(&text, base)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.active_worksheet.trim().is_empty() {
            return Err(ConfigError::Invalid("active_worksheet must be set".into()));
        }
        if self.max_group_size == 0 {
            return Err(ConfigError::Invalid("max_group_size must be positive".into()));
        }
        if self.tutor.max_turns == 0 || self.tutor.timeout_secs == 0 {
            return Err(ConfigError::Invalid("tutor.max_turns and tutor.timeout_secs must be positive".into()));
        }
        for e in &self.executors {
            e.validate()
                .map_err(|err| ConfigError::Invalid(format!("executor `{}`: {err}", e.language_tag)))?;
        }
        Ok(())
    }

    pub fn system_prompt(&self) -> Result<String, ConfigError> {
        match &self.tutor.prompt_file {
            None => Ok(DEFAULT_SYSTEM_PROMPT.to_owned()),
            Some(path) => std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.clone(),
                source,
            }),
        }
    }

    pub fn hub_config(&self) -> Result<HubConfig, ConfigError> {
        Ok(HubConfig {
            active_worksheet: self.active_worksheet.clone(),
            groups: self.groups.iter().copied().collect(),
            max_group_size: self.max_group_size,
            ta_allowlist: self.ta_allowlist.iter().map(|e| e.trim().to_lowercase()).collect(),
            context: ContextPolicy {
                system_prompt: self.system_prompt()?,
                max_turns: self.tutor.max_turns,
            },
            reorder_window: DEFAULT_REORDER_WINDOW,
            snapshot_every: self.snapshot_every,
            sequential_tokens: false,
        })
    }

    /// The API key is read through `env` so tests need not touch the
    /// process environment.
    pub fn backend(&self, env: impl Fn(&str) -> Option<String>) -> Result<Arc<dyn TutorBackend>, ConfigError> {
        match self.tutor.backend {
            BackendKind::Mock => Ok(Arc::new(ScriptedMock::default())),
            BackendKind::Http => {
                let key = env(&self.tutor.api_key_env).filter(|k| !k.is_empty()).ok_or_else(|| {
                    ConfigError::Invalid(format!("the http backend needs ${} to be set", self.tutor.api_key_env))
                })?;
                let mut backend = HttpBackend::new(&self.tutor.endpoint, &self.tutor.model, Some(key));
                backend.timeout = Duration::from_secs(self.tutor.timeout_secs);
                backend.max_retries = self.tutor.max_retries;
                Ok(Arc::new(backend))
            }
        }
    }

    pub fn tutor_timeout(&self) -> Duration {
        Duration::from_secs(self.tutor.timeout_secs)
    }

    /// Configured executors, plus the bundled echo-script interpreter via
    /// `program` unless the config overrides it.
    pub fn executor_table(&self, program: &Path) -> ExecutorTable {
        let root = self.work_dir.clone().unwrap_or_else(crate::grader::default_work_root);
        let mut table = ExecutorTable::new(root).with(ExecutorConfig::echo_script(program));
        for e in &self.executors {
            table.insert(e.clone());
        }
        table
    }

    pub fn unlabelable_sections(&self) -> BTreeSet<String> {
        self.unlabelable_sections.iter().cloned().collect()
    }

    pub fn verifier(&self) -> Option<Arc<dyn JoinVerifier>> {
        self.verifier.as_ref().map(|v| {
            Arc::new(CommandVerifier {
                command: v.command.clone(),
            }) as Arc<dyn JoinVerifier>
        })
    }
}

/// Admits a join when an external command exits 0.
#[derive(Clone, Debug)]
pub struct CommandVerifier {
    pub command: String,
}

impl JoinVerifier for CommandVerifier {
    fn verify(&self, email: &str, group_number: Option<u32>) -> Result<(), String> {
        let group = group_number.map(|g| g.to_string()).unwrap_or_default();
        let words = shlex::split(&self.command).filter(|w| !w.is_empty()).ok_or("verifier command is not valid shell words")?;
        let argv: Vec<String> = words
            .into_iter()
            .map(|w| w.replace("{email}", email).replace("{group}", &group))
            .collect();
        let output = Command::new(&argv[0])
            .args(&argv[1..])
            .output()
            .map_err(|e| format!("verifier failed to start: {e}"))?;
        if output.status.success() {
            Ok(())
        } else {
            let reason = String::from_utf8_lossy(&output.stderr).trim().to_owned();
            Err(if reason.is_empty() { "not allowed".to_owned() } else { reason })
        }
    }
}
