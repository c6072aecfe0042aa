//! Run configuration: a `key = value` file merged under command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use screennav_core::agent::VariantKind;
use screennav_core::llm::{DecodeParams, DEFAULT_API_KEY_ENV};
use screennav_core::{AgentConfig, Condition, PromptVariant, TagStyle};

/// Keys accepted in a config file. Flag names use the same words with dashes.
pub const KNOWN_KEYS: &[&str] = &[
    "dataset",
    "sample",
    "seed",
    "stratified",
    "condition",
    "variant",
    "prompt_dir",
    "use_tags",
    "tag_style",
    "font_scale",
    "max_steps",
    "temperature",
    "max_tokens",
    "backend",
    "script",
    "session",
    "endpoint",
    "model",
    "api_key_env",
    "auth_header",
    "parallel",
    "timeout_secs",
    "out",
    "run_id",
    "wall_clock",
];

/// Parsed `key = value` lines. `#` starts a comment; keys may use `-` or `_`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected `key = value`", n + 1))?;
            let key = key.trim().replace('-', "_");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                bail!("config line {}: unknown key `{key}`", n + 1);
            }
            let value = value.trim().trim_matches('"').to_string();
            if values.insert(key.clone(), value).is_some() {
                bail!("config line {}: duplicate key `{key}`", n + 1);
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        ConfigFile::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// `flag` if given, else the parsed file value, else `None`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("config `{key} = {v}`: {e}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Scripted,
    Replay,
    Gold,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "remote" => Ok(BackendKind::Remote),
            "scripted" => Ok(BackendKind::Scripted),
            "replay" => Ok(BackendKind::Replay),
            "gold" => Ok(BackendKind::Gold),
            other => Err(format!("unknown backend `{other}` (remote, scripted, replay, gold)")),
        }
    }
}

impl BackendKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackendKind::Remote => "remote",
            BackendKind::Scripted => "scripted",
            BackendKind::Replay => "replay",
            BackendKind::Gold => "gold",
        }
    }
}

/// Look up a tag style preset by name (`by-side`, `red`, `center`).
pub fn tag_style(name: &str, font_scale: Option<f64>) -> Result<TagStyle> {
    let key = name.trim().to_ascii_lowercase().replace('_', "-");
    let mut style = TagStyle::presets()
        .into_iter()
        .find(|(n, _)| *n == key)
        .map(|(_, s)| s)
        .ok_or_else(|| anyhow!("unknown tag style `{name}` (by-side, red, center)"))?;
    if let Some(scale) = font_scale {
        style = TagStyle::new(style.placement, style.shape, scale)?;
    }
    Ok(style)
}

/// Fully resolved settings for `screennav run`. Written to `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub sample: Option<usize>,
    pub seed: u64,
    pub stratified: bool,
    pub condition: Condition,
    pub variant: VariantKind,
    pub prompt_dir: Option<PathBuf>,
    pub use_tags: bool,
    pub tag_style: String,
    pub font_scale: Option<f64>,
    pub max_steps: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub backend: BackendKind,
    pub script: Option<PathBuf>,
    pub session: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: String,
    pub auth_header: String,
    pub parallel: usize,
    pub timeout_secs: u64,
    pub out: PathBuf,
    pub run_id: String,
    pub wall_clock: bool,
}

/// Flag values before merging; `None` means "not given on the command line".
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub dataset: Option<PathBuf>,
    pub sample: Option<usize>,
    pub seed: Option<u64>,
    pub stratified: Option<bool>,
    pub condition: Option<Condition>,
    pub variant: Option<VariantKind>,
    pub prompt_dir: Option<PathBuf>,
    pub use_tags: Option<bool>,
    pub tag_style: Option<String>,
    pub font_scale: Option<f64>,
    pub max_steps: Option<usize>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub backend: Option<BackendKind>,
    pub script: Option<PathBuf>,
    pub session: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub auth_header: Option<String>,
    pub parallel: Option<usize>,
    pub timeout_secs: Option<u64>,
    pub out: Option<PathBuf>,
    pub run_id: Option<String>,
    pub wall_clock: Option<bool>,
}

impl RunConfig {
    pub fn resolve(flags: RunOverrides, file: &ConfigFile) -> Result<Self> {
        let condition = file.pick(flags.condition, "condition")?.unwrap_or(Condition::PlusHistory);
        let backend = file.pick(flags.backend, "backend")?.unwrap_or(BackendKind::Remote);
        let run_id = file
            .pick(flags.run_id, "run_id")?
            .unwrap_or_else(|| default_run_id(backend, condition));
        let cfg = RunConfig {
            dataset: file
                .pick(flags.dataset, "dataset")?
                .ok_or_else(|| anyhow!("--dataset is required"))?,
            sample: file.pick(flags.sample, "sample")?,
            seed: file.pick(flags.seed, "seed")?.unwrap_or(0),
            stratified: file.pick(flags.stratified, "stratified")?.unwrap_or(false),
            condition,
            variant: file.pick(flags.variant, "variant")?.unwrap_or(VariantKind::Baseline),
            prompt_dir: file.pick(flags.prompt_dir, "prompt_dir")?,
            use_tags: file.pick(flags.use_tags, "use_tags")?.unwrap_or(true),
            tag_style: file.pick(flags.tag_style, "tag_style")?.unwrap_or_else(|| "center".into()),
            font_scale: file.pick(flags.font_scale, "font_scale")?,
            max_steps: file.pick(flags.max_steps, "max_steps")?.unwrap_or(10),
            temperature: file.pick(flags.temperature, "temperature")?.unwrap_or(0.0),
            max_tokens: file.pick(flags.max_tokens, "max_tokens")?.unwrap_or(512),
            backend,
            script: file.pick(flags.script, "script")?,
            session: file.pick(flags.session, "session")?,
            endpoint: file.pick(flags.endpoint, "endpoint")?,
            model: file.pick(flags.model, "model")?,
            api_key_env: file
                .pick(flags.api_key_env, "api_key_env")?
                .unwrap_or_else(|| DEFAULT_API_KEY_ENV.into()),
            auth_header: file
                .pick(flags.auth_header, "auth_header")?
                .unwrap_or_else(|| "Authorization".into()),
            parallel: file.pick(flags.parallel, "parallel")?.unwrap_or(1),
            timeout_secs: file.pick(flags.timeout_secs, "timeout_secs")?.unwrap_or(120),
            out: file.pick(flags.out, "out")?.unwrap_or_else(|| PathBuf::from("runs")),
            run_id,
            wall_clock: file.pick(flags.wall_clock, "wall_clock")?.unwrap_or(false),
        };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        if self.parallel == 0 {
            bail!("parallel must be at least 1");
        }
        if self.run_id.is_empty() || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.+".contains(c)) {
            bail!("run id `{}` may only contain letters, digits, `-`, `_`, `.`, `+`", self.run_id);
        }
        match self.backend {
            BackendKind::Remote if self.endpoint.is_none() || self.model.is_none() => {
                bail!("the remote backend needs --endpoint and --model")
            }
            BackendKind::Scripted if self.script.is_none() => bail!("the scripted backend needs --script"),
            BackendKind::Replay if self.session.is_none() => bail!("the replay backend needs --session"),
            _ => {}
        }
        self.agent_config()?;
        Ok(())
    }

    /// Agent settings implied by the condition and the prompt/tag options.
    pub fn agent_config(&self) -> Result<AgentConfig> {
        let mut agent = AgentConfig::for_condition(self.condition);
        agent.prompt_variant = match &self.prompt_dir {
            Some(dir) => PromptVariant::load(dir, self.variant)?,
            None => PromptVariant::builtin(self.variant),
        };
        agent.use_tags = self.use_tags;
        agent.tag_style = tag_style(&self.tag_style, self.font_scale)?;
        agent.max_steps = self.max_steps;
        agent.decode = DecodeParams {
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        };
        agent.validate()?;
        Ok(agent)
    }
}

/// `<backend>-<condition>` with the condition's leading `+` dropped.
pub fn default_run_id(backend: BackendKind, condition: Condition) -> String {
    format!("{}-{}", backend.as_str(), condition.to_string().trim_start_matches('+'))
}
