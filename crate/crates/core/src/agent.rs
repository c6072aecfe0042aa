//! The navigation loop.
//!
//! Each step tags the current screen, asks the backend for an action given
//! the instruction, both screenshots and the running history summary, parses
//! the reply, then asks the backend to fold the reply into a new summary.
//! The summary produced at step `t` is embedded verbatim in the prompt at
//! step `t + 1`.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::{SystemTime, UNIX_EPOCH};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{BackendError, ChatBackend, ChatRequest, ChatResponse, DecodeParams, Usage};
use crate::model::{classify_gesture, Action, ElementContent, Episode, GestureClass, ImageData, Point, UIElement};
use crate::som::{annotate, resolve_tag, SomError, TagStyle, TaggedScreen};

/// Stored history is capped at this many characters; the oldest text goes first.
pub const HISTORY_CAP_CHARS: usize = 2_000;

/// Displacement used when a scroll is synthesized from a direction word.
pub const SYNTHETIC_SCROLL_MAGNITUDE: f64 = 0.4;

const SYSTEM_PROMPT: &str = include_str!("../assets/prompts/system.txt");
const SUMMARIZE_PROMPT: &str = include_str!("../assets/prompts/summarize.txt");
const REMINDER_PROMPT: &str = include_str!("../assets/prompts/reminder.txt");

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("tagging: {0}")]
    Som(#[from] SomError),
    #[error("screen text is required when text descriptions are enabled")]
    MissingScreenText,
    #[error("screen provider: {0}")]
    Screen(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("prompt template: {0}")]
    Template(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Baseline,
    Think,
    Detail,
}

impl VariantKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            VariantKind::Baseline => "baseline",
            VariantKind::Think => "think",
            VariantKind::Detail => "detail",
        }
    }
}

impl FromStr for VariantKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(VariantKind::Baseline),
            "think" => Ok(VariantKind::Think),
            "detail" | "specific" => Ok(VariantKind::Detail),
            other => Err(format!("unknown prompt variant `{other}`")),
        }
    }
}

/// An action-prompt template. Placeholders: `{instruction}`, `{history}`,
/// `{tag_range}`, `{screen_text}`, `{images}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVariant {
    pub variant: VariantKind,
    pub template_text: String,
}

const REQUIRED_PLACEHOLDERS: [&str; 3] = ["{instruction}", "{history}", "{tag_range}"];

impl PromptVariant {
    pub fn builtin(variant: VariantKind) -> Self {
        let template_text = match variant {
            VariantKind::Baseline => include_str!("../assets/prompts/baseline.txt"),
            VariantKind::Think => include_str!("../assets/prompts/think.txt"),
            VariantKind::Detail => include_str!("../assets/prompts/detail.txt"),
        };
        Self {
            variant,
            template_text: template_text.to_string(),
        }
    }

    pub fn new(variant: VariantKind, template_text: impl Into<String>) -> Result<Self, AgentError> {
        let template_text = template_text.into();
        if let Some(missing) = REQUIRED_PLACEHOLDERS.iter().find(|p| !template_text.contains(*p)) {
            return Err(AgentError::Template(format!("missing placeholder {missing}")));
        }
        Ok(Self { variant, template_text })
    }

    /// Load `<dir>/<variant>.txt`.
    pub fn load(dir: &Path, variant: VariantKind) -> Result<Self, AgentError> {
        let path = dir.join(format!("{}.txt", variant.as_str()));
        let text = std::fs::read_to_string(&path)
            .map_err(|e| AgentError::Template(format!("{}: {e}", path.display())))?;
        PromptVariant::new(variant, text)
    }
}

/// Which inputs the agent sees besides the screenshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "image-only")]
    ImageOnly,
    #[serde(rename = "+text")]
    PlusText,
    #[serde(rename = "+history")]
    PlusHistory,
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "image-only" | "image_only" => Ok(Condition::ImageOnly),
            "+text" | "text" => Ok(Condition::PlusText),
            "+history" | "history" => Ok(Condition::PlusHistory),
            other => Err(format!("unknown condition `{other}` (image-only, +text, +history)")),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::ImageOnly => "image-only",
            Condition::PlusText => "+text",
            Condition::PlusHistory => "+history",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub prompt_variant: PromptVariant,
    pub use_tags: bool,
    pub include_text_description: bool,
    pub include_history: bool,
    pub max_steps: usize,
    pub tag_style: TagStyle,
    pub decode: DecodeParams,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig::for_condition(Condition::ImageOnly)
    }
}

impl AgentConfig {
    /// `+history` builds on `+text`: both use the parsed screen description.
    pub fn for_condition(condition: Condition) -> Self {
        let (text, history) = match condition {
            Condition::ImageOnly => (false, false),
            Condition::PlusText => (true, false),
            Condition::PlusHistory => (true, true),
        };
        Self {
            prompt_variant: PromptVariant::builtin(VariantKind::Baseline),
            use_tags: true,
            include_text_description: text,
            include_history: history,
            max_steps: 10,
            tag_style: TagStyle::center(),
            decode: DecodeParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.max_steps < 1 {
            return Err(AgentError::Config("max_steps must be at least 1".into()));
        }
        if self.decode.temperature < 0.0 {
            return Err(AgentError::Config("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

/// Running self-summary. `step` counts completed updates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryState {
    pub step: usize,
    pub text: String,
}

/// Render elements as a plain-text screen description for the `+text` condition.
pub fn describe_screen(elements: &[UIElement]) -> String {
    elements
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let (kind, label) = match &e.content {
                ElementContent::OcrText(t) => ("text", t.as_str()),
                ElementContent::IconClass(c) => ("icon", c.as_str()),
            };
            format!(
                "[{}] {kind} \"{label}\" at x={:.3} y={:.3} w={:.3} h={:.3}",
                i + 1,
                e.bbox.x,
                e.bbox.y,
                e.bbox.w,
                e.bbox.h
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_action_prompt(
    cfg: &AgentConfig,
    instruction: &str,
    tagged: &TaggedScreen,
    hist: &HistoryState,
    screen_text: Option<&str>,
) -> Result<ChatRequest, AgentError> {
    let screen_block = if cfg.include_text_description {
        let text = screen_text.ok_or(AgentError::MissingScreenText)?;
        format!("Screen description:\n{text}\n")
    } else {
        String::new()
    };
    let history_block = if cfg.include_history && !hist.text.is_empty() {
        format!("Summary of previous steps:\n{}\n", hist.text)
    } else {
        String::new()
    };
    let (images, images_text, tag_range) = if cfg.use_tags {
        (
            vec![tagged.raw_image.clone(), tagged.tagged_image.clone()],
            "The first image is the current screen. The second image is the same screen with numeric tags on the detected elements.",
            tagged.tag_range(),
        )
    } else {
        (
            vec![tagged.raw_image.clone()],
            "The image is the current screen. Answer clicks with a Location.",
            "none".to_string(),
        )
    };
    let user_text = cfg
        .prompt_variant
        .template_text
        .replace("{instruction}", instruction)
        .replace("{history}", &history_block)
        .replace("{screen_text}", &screen_block)
        .replace("{images}", images_text)
        .replace("{tag_range}", &tag_range);
    Ok(ChatRequest {
        system_text: SYSTEM_PROMPT.trim_end().to_string(),
        user_text,
        images,
        decode: cfg.decode,
    })
}

/// Text-only summarization request folding `action_text` into `hist`.
pub fn summary_request(action_text: &str, hist: &HistoryState, decode: DecodeParams) -> ChatRequest {
    let previous = if hist.text.is_empty() { "(none)" } else { hist.text.as_str() };
    ChatRequest {
        system_text: SYSTEM_PROMPT.trim_end().to_string(),
        user_text: SUMMARIZE_PROMPT
            .replace("{previous_history}", previous)
            .replace("{action}", action_text.trim()),
        images: Vec::new(),
        decode,
    }
}

pub fn summarize_history(
    backend: &dyn ChatBackend,
    action_text: &str,
    hist: &HistoryState,
) -> Result<HistoryState, AgentError> {
    summarize_history_with(backend, action_text, hist, DecodeParams::default())
}

pub fn summarize_history_with(
    backend: &dyn ChatBackend,
    action_text: &str,
    hist: &HistoryState,
    decode: DecodeParams,
) -> Result<HistoryState, AgentError> {
    let resp = backend.complete(&summary_request(action_text, hist, decode))?;
    let text = resp.text.trim();
    let text = if text.is_empty() {
        tracing::warn!(step = hist.step, "empty history summary; keeping previous history");
        hist.text.clone()
    } else {
        cap_history(text)
    };
    Ok(HistoryState {
        step: hist.step + 1,
        text,
    })
}

fn cap_history(text: &str) -> String {
    let n = text.chars().count();
    if n <= HISTORY_CAP_CHARS {
        text.to_string()
    } else {
        text.chars().skip(n - HISTORY_CAP_CHARS).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailureKind {
    Unparseable,
    UnknownTag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("{kind:?}: {detail}")]
pub struct ParseFailure {
    pub kind: ParseFailureKind,
    pub detail: String,
}

impl ParseFailure {
    fn unparseable(detail: impl Into<String>) -> Self {
        Self {
            kind: ParseFailureKind::Unparseable,
            detail: detail.into(),
        }
    }
}

/// A step's prediction: an executable action or the reason there is none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedAction {
    Action(Action),
    ParseFailure(ParseFailure),
}

impl ParsedAction {
    pub fn action(&self) -> Option<&Action> {
        match self {
            ParsedAction::Action(a) => Some(a),
            ParsedAction::ParseFailure(_) => None,
        }
    }
}

impl From<Result<Action, ParseFailure>> for ParsedAction {
    fn from(r: Result<Action, ParseFailure>) -> Self {
        match r {
            Ok(a) => ParsedAction::Action(a),
            Err(f) => ParsedAction::ParseFailure(f),
        }
    }
}

#[derive(Clone, Copy)]
enum Directive {
    ClickId,
    ClickLocation,
    Scroll,
    Type,
    Press,
    Status,
}

const NUM: &str = r"[-+]?(?:\d+\.?\d*|\.\d+)";

fn directive_patterns() -> &'static [(Directive, Regex)] {
    static PATTERNS: OnceLock<Vec<(Directive, Regex)>> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        let re = |p: String| Regex::new(&format!("(?i){p}")).expect("directive regex");
        vec![
            (
                Directive::ClickId,
                re(r"\b(?:click|tap)\s*[,:]?\s*(?:on\s+)?(?:id|tag|mark)\s*[:#=]?\s*([-+]?\d+)".into()),
            ),
            (
                Directive::ClickLocation,
                re(format!(
                    r"\b(?:click|tap)\s*[,:]?\s*(?:at\s+|on\s+)?(?:location|loc|coordinates?|point)?\s*[:=]?\s*\(\s*({NUM})\s*,\s*({NUM})\s*\)"
                )),
            ),
            (
                Directive::Scroll,
                re(r"\b(?:scroll|swipe)\s*[,:]?\s*(?:direction\s*[:=]\s*)?(up|down|left|right)\b".into()),
            ),
            (
                Directive::Type,
                re(r#"\btype\s*[,:]?\s*(?:text\s*[:=]\s*)?["“]([^"”]+)["”]"#.into()),
            ),
            (
                Directive::Press,
                re(r"\b(?:press\s*[,:]?\s*(?:button\s*[:=]\s*)?|action\s*:\s*)(back|home|enter)\b".into()),
            ),
            (
                Directive::Status,
                re(r"\bstatus\s*[,:]?\s*(?:status\s*[:=]\s*)?(?:task\s+)?(?:is\s+)?(complete|completed|impossible|infeasible)\b".into()),
            ),
        ]
    })
}

/// Turn model text into an action. The earliest well-formed directive wins.
pub fn parse_action(text: &str, tagged: &TaggedScreen) -> Result<Action, ParseFailure> {
    let earliest = directive_patterns()
        .iter()
        .filter_map(|(d, re)| re.captures(text).map(|c| (c.get(0).map_or(0, |m| m.start()), *d, c)))
        .min_by_key(|(start, _, _)| *start);
    let Some((_, directive, caps)) = earliest else {
        return Err(ParseFailure::unparseable("no action directive found"));
    };
    let word = |i: usize| caps.get(i).map_or(String::new(), |m| m.as_str().to_ascii_lowercase());
    match directive {
        Directive::ClickId => {
            let id: i64 = caps[1]
                .parse()
                .map_err(|_| ParseFailure::unparseable(format!("tag `{}` is not a number", &caps[1])))?;
            resolve_tag(tagged, id).map(Action::tap).map_err(|_| ParseFailure {
                kind: ParseFailureKind::UnknownTag,
                detail: format!("tag {id} is not on screen; valid tags {}", tagged.tag_range()),
            })
        }
        Directive::ClickLocation => {
            let x: f64 = caps[1].parse().map_err(|_| ParseFailure::unparseable("bad x coordinate"))?;
            let y: f64 = caps[2].parse().map_err(|_| ParseFailure::unparseable("bad y coordinate"))?;
            Point::new(x, y)
                .map(Action::tap)
                .map_err(|_| ParseFailure::unparseable(format!("location ({x}, {y}) is outside [0, 1]")))
        }
        Directive::Scroll => Ok(synthetic_scroll(&word(1))),
        Directive::Type => Action::type_text(caps[1].to_string()).map_err(|e| ParseFailure::unparseable(e.to_string())),
        Directive::Press => Ok(match word(1).as_str() {
            "back" => Action::PressBack,
            "home" => Action::PressHome,
            _ => Action::PressEnter,
        }),
        Directive::Status => Ok(match word(1).as_str() {
            "impossible" | "infeasible" => Action::StatusImpossible,
            _ => Action::StatusComplete,
        }),
    }
}

/// Center-anchored swipe in the named finger direction.
fn synthetic_scroll(direction: &str) -> Action {
    let m = SYNTHETIC_SCROLL_MAGNITUDE;
    let (dx, dy) = match direction {
        "up" => (0.0, -m),
        "down" => (0.0, m),
        "left" => (-m, 0.0),
        _ => (m, 0.0),
    };
    Action::DualPoint {
        touch: Point { x: 0.5, y: 0.5 },
        lift: Point {
            x: 0.5 + dx,
            y: 0.5 + dy,
        },
    }
}

/// Inverse of [`parse_action`] for well-formed actions; clicks are written
/// by location.
pub fn format_action(action: &Action) -> String {
    match action {
        Action::DualPoint { touch, .. } => match classify_gesture(action) {
            Ok(GestureClass::Tap) | Err(_) => {
                format!("Action: Click, Location: ({}, {})", touch.x, touch.y)
            }
            Ok(g) => {
                let dir = match g {
                    GestureClass::ScrollUp => "up",
                    GestureClass::ScrollDown => "down",
                    GestureClass::ScrollLeft => "left",
                    _ => "right",
                };
                format!("Action: Scroll, Direction: {dir}")
            }
        },
        Action::TypeText { text } => format!("Action: Type, Text: \"{text}\""),
        Action::PressBack => "Action: Press, Button: back".into(),
        Action::PressHome => "Action: Press, Button: home".into(),
        Action::PressEnter => "Action: Press, Button: enter".into(),
        Action::StatusComplete => "Action: Status, Status: complete".into(),
        Action::StatusImpossible => "Action: Status, Status: impossible".into(),
    }
}

/// Oracle backend for one episode. Action requests get the gold actions in
/// order; summary requests get the list of actions taken so far.
pub struct GoldBackend {
    state: Mutex<GoldState>,
}

struct GoldState {
    pending: VecDeque<String>,
    taken: Vec<String>,
}

impl GoldBackend {
    pub fn new(episode: &Episode) -> Self {
        Self {
            state: Mutex::new(GoldState {
                pending: episode.steps.iter().map(|s| format_action(&s.gold_action)).collect(),
                taken: Vec::new(),
            }),
        }
    }
}

impl ChatBackend for GoldBackend {
    fn id(&self) -> &str {
        "gold"
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let text = if req.images.is_empty() {
            state.taken.join("\n")
        } else {
            let next = state.pending.pop_front().ok_or(BackendError::ScriptExhausted {
                consumed: state.taken.len(),
            })?;
            state.taken.push(next.clone());
            next
        };
        Ok(ChatResponse {
            text,
            usage: Usage::default(),
            latency_ms: 0,
            backend_id: "gold".into(),
        })
    }
}

/// One screen handed to the agent.
#[derive(Debug, Clone)]
pub struct Screen {
    pub image: ImageData,
    pub elements: Vec<UIElement>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderMode {
    /// Screens come from a recorded gold trajectory; the agent's actions do
    /// not change what it sees next.
    DatasetReplay,
    /// Screens come from a device and the agent's actions are executed.
    Live,
}

pub trait ScreenProvider {
    fn mode(&self) -> ProviderMode;

    /// Screen for step `step`, or `None` when no screens remain.
    fn next_screen(&mut self, step: usize) -> Result<Option<Screen>, AgentError>;

    /// Called after each parsed action. Replay providers ignore it.
    fn apply(&mut self, _action: &Action) -> Result<(), AgentError> {
        Ok(())
    }
}

/// In-memory sequence of screens.
pub struct ScreenList {
    screens: Vec<Screen>,
}

impl ScreenList {
    pub fn new(screens: Vec<Screen>) -> Self {
        Self { screens }
    }
}

impl ScreenProvider for ScreenList {
    fn mode(&self) -> ProviderMode {
        ProviderMode::DatasetReplay
    }

    fn next_screen(&mut self, step: usize) -> Result<Option<Screen>, AgentError> {
        Ok(self.screens.get(step).cloned())
    }
}

/// Placeholder for a device capture adapter. No device driver ships with
/// this crate, so every call fails.
pub struct LiveCapture;

impl ScreenProvider for LiveCapture {
    fn mode(&self) -> ProviderMode {
        ProviderMode::Live
    }

    fn next_screen(&mut self, _step: usize) -> Result<Option<Screen>, AgentError> {
        Err(AgentError::Screen("live capture requires a device adapter".into()))
    }

    fn apply(&mut self, _action: &Action) -> Result<(), AgentError> {
        Err(AgentError::Screen("live capture requires a device adapter".into()))
    }
}

/// Millisecond timestamps for transcript records.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Counts up by one per reading, so transcripts stay byte-reproducible.
#[derive(Default)]
pub struct LogicalClock(AtomicU64);

impl Clock for LogicalClock {
    fn now_ms(&self) -> u64 {
        self.0.fetch_add(1, Ordering::SeqCst)
    }
}

/// Receives each tagged screen and returns the reference stored in the transcript.
pub trait TaggedSink {
    fn store(&mut self, episode_id: &str, step: usize, tagged: &TaggedScreen) -> Result<String, AgentError>;
}

/// Keeps nothing; references are `sha256:<digest>` of the tagged PNG.
pub struct DigestSink;

impl TaggedSink for DigestSink {
    fn store(&mut self, _episode_id: &str, _step: usize, tagged: &TaggedScreen) -> Result<String, AgentError> {
        Ok(format!("sha256:{}", tagged.tagged_image.sha256()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub prompt_text: String,
    pub raw_model_text: String,
    pub parsed_action: ParsedAction,
    pub history_after: String,
    pub tagged_screen: String,
    /// Action requests issued for this step (2 when a format reminder was sent).
    pub attempts: u32,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Complete,
    Impossible,
    MaxSteps,
    ScreensExhausted,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTranscript {
    pub episode_id: String,
    pub instruction: String,
    pub steps: Vec<StepRecord>,
    pub termination: Termination,
}

impl AgentTranscript {
    pub fn predictions(&self) -> Vec<ParsedAction> {
        self.steps.iter().map(|s| s.parsed_action.clone()).collect()
    }
}

pub struct EpisodeInput<'a> {
    pub episode_id: &'a str,
    pub instruction: &'a str,
    pub screens: &'a mut dyn ScreenProvider,
}

/// Roll out one episode.
pub fn run_episode(
    cfg: &AgentConfig,
    backend: &dyn ChatBackend,
    input: EpisodeInput<'_>,
    clock: &dyn Clock,
    sink: &mut dyn TaggedSink,
) -> Result<AgentTranscript, AgentError> {
    cfg.validate()?;
    let mut hist = HistoryState::default();
    let mut steps = Vec::new();
    let mode = input.screens.mode();

    let termination = loop {
        let t = steps.len();
        if t >= cfg.max_steps {
            break Termination::MaxSteps;
        }
        let Some(screen) = input.screens.next_screen(t)? else {
            break Termination::ScreensExhausted;
        };
        let started_at_ms = clock.now_ms();
        let tagged = annotate(&screen.image, &screen.elements, &cfg.tag_style)?;
        let tagged_ref = sink.store(input.episode_id, t, &tagged)?;
        let screen_text = cfg.include_text_description.then(|| describe_screen(&screen.elements));
        let request = build_action_prompt(cfg, input.instruction, &tagged, &hist, screen_text.as_deref())?;

        let mut attempts = 1;
        let mut raw = backend.complete(&request)?.text;
        let mut parsed = parse_action(&raw, &tagged);
        if let Err(failure) = &parsed {
            tracing::debug!(episode = input.episode_id, step = t, %failure, "resending with format reminder");
            let mut retry = request.clone();
            retry.user_text.push_str(
                &REMINDER_PROMPT
                    .replace("{reason}", &failure.detail)
                    .replace("{tag_range}", &tagged.tag_range()),
            );
            attempts += 1;
            raw = backend.complete(&retry)?.text;
            parsed = parse_action(&raw, &tagged);
        }

        if cfg.include_history {
            hist = summarize_history_with(backend, &raw, &hist, cfg.decode)?;
        }

        let parsed = ParsedAction::from(parsed);
        let abort = mode == ProviderMode::Live && parsed.action().is_none();
        let stop = match parsed.action() {
            Some(Action::StatusComplete) => Some(Termination::Complete),
            Some(Action::StatusImpossible) => Some(Termination::Impossible),
            _ if abort => Some(Termination::Aborted),
            _ => None,
        };
        if let (Some(action), None) = (parsed.action(), stop) {
            input.screens.apply(action)?;
        }
        steps.push(StepRecord {
            step: t,
            prompt_text: request.user_text,
            raw_model_text: raw,
            parsed_action: parsed,
            history_after: hist.text.clone(),
            tagged_screen: tagged_ref,
            attempts,
            started_at_ms,
            finished_at_ms: clock.now_ms(),
        });
        if let Some(stop) = stop {
            break stop;
        }
    };

    Ok(AgentTranscript {
        episode_id: input.episode_id.to_string(),
        instruction: input.instruction.to_string(),
        steps,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{FnBackend, ScriptEntry, ScriptedBackend};
    use crate::model::BBox;
    use crate::som::blank_png;
    use std::sync::atomic::AtomicUsize;

    fn screen(n: usize) -> TaggedScreen {
        let elements: Vec<UIElement> = (0..n)
            .map(|i| {
                let x = (i % 4) as f64 * 0.25;
                let y = (i / 4) as f64 * 0.1;
                UIElement::text(BBox::new(x, y, 0.2, 0.08).unwrap(), format!("item {i}")).unwrap()
            })
            .collect();
        annotate(&blank_png(40, 80, [255, 255, 255]), &elements, &TagStyle::center()).unwrap()
    }

    #[test]
    fn parses_bracketed_location_form() {
        let a = parse_action("{Action: Click, Location: (0.31, 0.57)}", &screen(0)).unwrap();
        assert_eq!(a, Action::tap(Point::new(0.31, 0.57).unwrap()));
    }

    #[test]
    fn parses_tag_form_after_reasoning() {
        let ts = screen(20);
        let a = parse_action("The menu sits in the top corner. Action: Click, ID: 9", &ts).unwrap();
        assert_eq!(a, Action::tap(ts.tag_map[&9].bbox.center()));
    }

    #[test]
    fn unparseable_and_unknown_tag() {
        let ts = screen(3);
        assert_eq!(parse_action("I am unsure.", &ts).unwrap_err().kind, ParseFailureKind::Unparseable);
        assert_eq!(
            parse_action("Action: Click, ID: 4", &ts).unwrap_err().kind,
            ParseFailureKind::UnknownTag
        );
        assert_eq!(
            parse_action("Action: Click, ID: 0", &ts).unwrap_err().kind,
            ParseFailureKind::UnknownTag
        );
        assert_eq!(
            parse_action("Action: Click, Location: (1.2, 0.5)", &ts).unwrap_err().kind,
            ParseFailureKind::Unparseable
        );
    }

    #[test]
    fn first_directive_wins() {
        let ts = screen(3);
        let a = parse_action("Status: Complete. Earlier I did Action: Click, ID: 2", &ts).unwrap();
        assert_eq!(a, Action::StatusComplete);
    }

    #[test]
    fn synthesized_scroll_shape() {
        let a = parse_action("action: SCROLL, direction: Up", &screen(0)).unwrap();
        let Action::DualPoint { touch, lift } = a else { panic!() };
        assert_eq!((touch.x, touch.y), (0.5, 0.5));
        assert!((lift.y - 0.1).abs() < 1e-12 && lift.x == 0.5);
    }

    #[test]
    fn format_then_parse_round_trips() {
        let ts = screen(0);
        for a in [
            Action::tap(Point::new(0.123456789, 0.9).unwrap()),
            Action::type_text("wet cat food").unwrap(),
            Action::PressBack,
            Action::PressHome,
            Action::PressEnter,
            Action::StatusComplete,
            Action::StatusImpossible,
        ] {
            assert_eq!(parse_action(&format_action(&a), &ts).unwrap(), a);
        }
    }

    #[test]
    fn prompt_sections() {
        let ts = screen(5);
        let mut cfg = AgentConfig::for_condition(Condition::ImageOnly);
        let req = build_action_prompt(&cfg, "open settings", &ts, &HistoryState::default(), None).unwrap();
        assert_eq!(req.images, vec![ts.raw_image.clone(), ts.tagged_image.clone()]);
        assert!(req.user_text.contains("open settings"));
        assert!(req.user_text.contains("1..5"));
        assert!(!req.user_text.contains("Screen description"));

        cfg.include_history = true;
        let req = build_action_prompt(&cfg, "x", &ts, &HistoryState::default(), None).unwrap();
        assert!(!req.user_text.contains("Summary of previous steps"));
        let hist = HistoryState {
            step: 1,
            text: "Opened the app drawer.".into(),
        };
        let req = build_action_prompt(&cfg, "x", &ts, &hist, None).unwrap();
        assert!(req.user_text.contains("Summary of previous steps:\nOpened the app drawer."));

        cfg.include_text_description = true;
        assert!(matches!(
            build_action_prompt(&cfg, "x", &ts, &hist, None),
            Err(AgentError::MissingScreenText)
        ));
        cfg.use_tags = false;
        let req = build_action_prompt(&cfg, "x", &ts, &hist, Some("[1] text")).unwrap();
        assert_eq!(req.images.len(), 1);
        assert!(req.user_text.contains("Screen description:\n[1] text"));
    }

    #[test]
    fn variants_differ_as_described() {
        let base = PromptVariant::builtin(VariantKind::Baseline).template_text;
        let think = PromptVariant::builtin(VariantKind::Think).template_text;
        let detail = PromptVariant::builtin(VariantKind::Detail).template_text;
        assert!(think.starts_with(base.trim_end()));
        assert!(think.to_lowercase().contains("step by step"));
        assert!(detail.trim_end().ends_with(base.trim_end()));
        assert!(detail.len() > base.len() + 100);
        for v in [VariantKind::Baseline, VariantKind::Think, VariantKind::Detail] {
            assert!(PromptVariant::new(v, PromptVariant::builtin(v).template_text).is_ok());
        }
        assert!(PromptVariant::new(VariantKind::Baseline, "{instruction} {history}").is_err());
    }

    #[test]
    fn summary_base_case_and_empty_reply() {
        let seen = std::sync::Mutex::new(Vec::new());
        let b = FnBackend::new("echo", |r: &ChatRequest| {
            seen.lock().unwrap().push(r.user_text.clone());
            assert!(r.images.is_empty());
            Ok("Opened Settings.".to_string())
        });
        let h = summarize_history(&b, "Clicked tag 5 (Settings icon)", &HistoryState::default()).unwrap();
        assert_eq!(h, HistoryState { step: 1, text: "Opened Settings.".into() });
        assert!(seen.lock().unwrap()[0].contains("Previous summary:\n(none)"));

        let empty = ScriptedBackend::new(vec![ScriptEntry::any("   ")]);
        let h2 = summarize_history(&empty, "x", &h).unwrap();
        assert_eq!(h2, HistoryState { step: 2, text: "Opened Settings.".into() });
    }

    #[test]
    fn history_is_capped_from_the_front() {
        let long = format!("{}END", "a".repeat(3000));
        let b = FnBackend::new("long", |_: &ChatRequest| Ok(long.clone()));
        let h = summarize_history(&b, "x", &HistoryState::default()).unwrap();
        assert_eq!(h.text.chars().count(), HISTORY_CAP_CHARS);
        assert!(h.text.ends_with("END"));
    }

    fn screens(n: usize) -> ScreenList {
        ScreenList::new(
            (0..n)
                .map(|i| Screen {
                    image: blank_png(20, 40, [i as u8, 0, 0]),
                    elements: vec![UIElement::icon(BBox::new(0.1, 0.1, 0.3, 0.3).unwrap(), "SETTINGS").unwrap()],
                })
                .collect(),
        )
    }

    #[test]
    fn single_step_completion() {
        let b = ScriptedBackend::new(vec![ScriptEntry::any("Status: Complete")]);
        let mut s = screens(1);
        let t = run_episode(
            &AgentConfig::default(),
            &b,
            EpisodeInput {
                episode_id: "e",
                instruction: "i",
                screens: &mut s,
            },
            &LogicalClock::default(),
            &mut DigestSink,
        )
        .unwrap();
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.termination, Termination::Complete);
    }

    #[test]
    fn parse_failure_retries_once_then_records() {
        let b = ScriptedBackend::new(vec![
            ScriptEntry::any("hmm"),
            ScriptEntry::new("could not be executed", None, "Action: Click, ID: 1"),
            ScriptEntry::any("no idea"),
            ScriptEntry::new("could not be executed", None, "still no idea"),
        ]);
        let mut s = screens(2);
        let t = run_episode(
            &AgentConfig::default(),
            &b,
            EpisodeInput {
                episode_id: "e",
                instruction: "i",
                screens: &mut s,
            },
            &LogicalClock::default(),
            &mut DigestSink,
        )
        .unwrap();
        assert_eq!(t.termination, Termination::ScreensExhausted);
        assert_eq!(t.steps[0].attempts, 2);
        assert!(t.steps[0].parsed_action.action().is_some());
        assert!(matches!(t.steps[1].parsed_action, ParsedAction::ParseFailure(_)));
        assert_eq!(b.remaining(), 0);
    }

    struct FakeLive {
        applied: usize,
    }

    impl ScreenProvider for FakeLive {
        fn mode(&self) -> ProviderMode {
            ProviderMode::Live
        }

        fn next_screen(&mut self, _step: usize) -> Result<Option<Screen>, AgentError> {
            screens(1).next_screen(0)
        }

        fn apply(&mut self, _action: &Action) -> Result<(), AgentError> {
            self.applied += 1;
            Ok(())
        }
    }

    #[test]
    fn live_mode_aborts_on_repeated_parse_failure() {
        let b = ScriptedBackend::new(vec![
            ScriptEntry::any("Action: Press, Button: back"),
            ScriptEntry::any("?"),
            ScriptEntry::any("??"),
        ]);
        let mut live = FakeLive { applied: 0 };
        let t = run_episode(
            &AgentConfig::default(),
            &b,
            EpisodeInput {
                episode_id: "e",
                instruction: "i",
                screens: &mut live,
            },
            &LogicalClock::default(),
            &mut DigestSink,
        )
        .unwrap();
        assert_eq!(t.termination, Termination::Aborted);
        assert_eq!(t.steps.len(), 2);
        assert_eq!(live.applied, 1);
    }

    #[test]
    fn max_steps_bounds_rollout() {
        let calls = AtomicUsize::new(0);
        let b = FnBackend::new("loop", |_: &ChatRequest| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok("Action: Press, Button: back".into())
        });
        let cfg = AgentConfig {
            max_steps: 3,
            ..Default::default()
        };
        let mut s = screens(10);
        let t = run_episode(
            &cfg,
            &b,
            EpisodeInput {
                episode_id: "e",
                instruction: "i",
                screens: &mut s,
            },
            &LogicalClock::default(),
            &mut DigestSink,
        )
        .unwrap();
        assert_eq!(t.termination, Termination::MaxSteps);
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        let zero = AgentConfig { max_steps: 0, ..cfg };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn live_capture_stub_fails() {
        let b = ScriptedBackend::new(vec![]);
        let err = run_episode(
            &AgentConfig::default(),
            &b,
            EpisodeInput {
                episode_id: "e",
                instruction: "i",
                screens: &mut LiveCapture,
            },
            &LogicalClock::default(),
            &mut DigestSink,
        )
        .unwrap_err();
        assert!(matches!(err, AgentError::Screen(_)));
    }

    #[test]
    fn conditions_match_table_rows() {
        let io = AgentConfig::for_condition(Condition::ImageOnly);
        let tx = AgentConfig::for_condition(Condition::PlusText);
        let hi = AgentConfig::for_condition(Condition::PlusHistory);
        assert_eq!((io.include_text_description, io.include_history), (false, false));
        assert_eq!((tx.include_text_description, tx.include_history), (true, false));
        assert_eq!((hi.include_text_description, hi.include_history), (true, true));
        assert_eq!("+history".parse::<Condition>().unwrap(), Condition::PlusHistory);
    }
}
