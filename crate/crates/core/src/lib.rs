//! Core of the screen navigation agent: screen tagging, the agent loop,
//! model backends, action parsing, scoring, and the on-disk dataset format.

pub mod agent;
pub mod dataset;
pub mod evaluator;
pub mod llm;
pub mod model;
pub mod som;

pub use agent::{
    parse_action, run_episode, AgentConfig, AgentTranscript, Condition, ParsedAction, PromptVariant, StepRecord,
    Termination,
};
pub use dataset::{Dataset, DatasetManifest};
pub use evaluator::{aggregate, human_accuracy, match_step, score_episode, MatchRule, ScoreReport, StepVerdict};
pub use llm::{ChatBackend, ChatRequest, ChatResponse};
pub use model::{Action, BBox, Category, Episode, GestureClass, ImageData, Point, Step, UIElement};
pub use som::{annotate, TagStyle, TaggedScreen};
