//! Shared domain types: normalized geometry, UI elements, the action
//! taxonomy, and gold episodes.
//!
//! All coordinates are normalized to `[0, 1]` with the origin at the top-left
//! corner and `y` growing downward. Pixel coordinates only appear inside the
//! annotator.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Rounding slack allowed when a box's far edge lands just past 1.0.
pub const BBOX_EPSILON: f64 = 1e-6;

/// Displacement (normalized Euclidean) at or below which a dual-point
/// gesture counts as a tap.
pub const DEFAULT_TAP_THRESHOLD: f64 = 0.04;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("coordinate {name}={value} is outside [0, 1]")]
    CoordinateOutOfRange { name: &'static str, value: f64 },
    #[error("bounding box extent {name}={value} exceeds the screen")]
    BoxOverflow { name: &'static str, value: f64 },
    #[error("bounding box {name} must be positive, got {value}")]
    EmptyBox { name: &'static str, value: f64 },
    #[error("ui element must carry exactly one of `text` or `icon_class`")]
    ElementContent,
    #[error("ui element text must not be empty")]
    EmptyElementText,
    #[error("type_text action requires non-empty text")]
    EmptyTypedText,
    #[error("episode must contain at least one step")]
    EmptyEpisode,
    #[error("step at position {position} has index {index}")]
    StepIndex { position: usize, index: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}

fn check_unit(name: &'static str, value: f64) -> Result<f64, ModelError> {
    if value.is_finite() && (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(ModelError::CoordinateOutOfRange { name, value })
    }
}

/// A normalized screen location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPoint {
    x: f64,
    y: f64,
}

impl TryFrom<RawPoint> for Point {
    type Error = ModelError;

    fn try_from(raw: RawPoint) -> Result<Self, Self::Error> {
        Point::new(raw.x, raw.y)
    }
}

impl Point {
    pub fn new(x: f64, y: f64) -> Result<Self, ModelError> {
        Ok(Self {
            x: check_unit("x", x)?,
            y: check_unit("y", y)?,
        })
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Mirror horizontally around the vertical center line.
    pub fn mirror_x(&self) -> Point {
        Point {
            x: 1.0 - self.x,
            y: self.y,
        }
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Normalized axis-aligned box stored as top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBBox")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl TryFrom<RawBBox> for BBox {
    type Error = ModelError;

    fn try_from(raw: RawBBox) -> Result<Self, Self::Error> {
        BBox::new(raw.x, raw.y, raw.w, raw.h)
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, ModelError> {
        let x = check_unit("x", x)?;
        let y = check_unit("y", y)?;
        let w = check_unit("w", w)?;
        let h = check_unit("h", h)?;
        if w <= 0.0 {
            return Err(ModelError::EmptyBox { name: "w", value: w });
        }
        if h <= 0.0 {
            return Err(ModelError::EmptyBox { name: "h", value: h });
        }
        if x + w > 1.0 + BBOX_EPSILON {
            return Err(ModelError::BoxOverflow {
                name: "x+w",
                value: x + w,
            });
        }
        if y + h > 1.0 + BBOX_EPSILON {
            return Err(ModelError::BoxOverflow {
                name: "y+h",
                value: y + h,
            });
        }
        Ok(Self { x, y, w, h })
    }

    /// Build from the `(y_min, x_min, y_max, x_max)` ordering some datasets use.
    pub fn from_yxyx(y_min: f64, x_min: f64, y_max: f64, x_max: f64) -> Result<Self, ModelError> {
        BBox::new(x_min, y_min, x_max - x_min, y_max - y_min)
    }

    pub fn center(&self) -> Point {
        bbox_center(self)
    }

    pub fn contains(&self, p: &Point) -> bool {
        point_in_bbox(p, self)
    }
}

pub fn bbox_center(b: &BBox) -> Point {
    Point {
        x: b.x + b.w / 2.0,
        y: b.y + b.h / 2.0,
    }
}

/// Slack on box edges so a point on an edge stays inside when `x + w`
/// rounds below it.
pub const CONTAINMENT_EPSILON: f64 = 1e-9;

/// Closed-interval containment: boundary points are inside.
pub fn point_in_bbox(p: &Point, b: &BBox) -> bool {
    let e = CONTAINMENT_EPSILON;
    b.x - e <= p.x && p.x <= b.x + b.w + e && b.y - e <= p.y && p.y <= b.y + b.h + e
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ElementSource {
    Ocr,
    IconDetector,
    #[default]
    Dataset,
}

/// What a detected region shows: recognized text or an icon class label.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ElementContent {
    OcrText(String),
    IconClass(String),
}

impl ElementContent {
    pub fn label(&self) -> &str {
        match self {
            ElementContent::OcrText(s) | ElementContent::IconClass(s) => s,
        }
    }
}

/// One detected screen region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawElement", into = "RawElement")]
pub struct UIElement {
    pub bbox: BBox,
    pub content: ElementContent,
    pub source: ElementSource,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawElement {
    bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    icon_class: Option<String>,
    #[serde(default)]
    source: ElementSource,
}

impl TryFrom<RawElement> for UIElement {
    type Error = ModelError;

    fn try_from(raw: RawElement) -> Result<Self, Self::Error> {
        let content = match (raw.text, raw.icon_class) {
            (Some(t), None) => ElementContent::OcrText(t),
            (None, Some(c)) => ElementContent::IconClass(c),
            _ => return Err(ModelError::ElementContent),
        };
        UIElement::new(raw.bbox, content, raw.source)
    }
}

impl From<UIElement> for RawElement {
    fn from(e: UIElement) -> Self {
        let (text, icon_class) = match e.content {
            ElementContent::OcrText(t) => (Some(t), None),
            ElementContent::IconClass(c) => (None, Some(c)),
        };
        RawElement {
            bbox: e.bbox,
            text,
            icon_class,
            source: e.source,
        }
    }
}

impl UIElement {
    pub fn new(bbox: BBox, content: ElementContent, source: ElementSource) -> Result<Self, ModelError> {
        if let ElementContent::OcrText(t) = &content {
            if t.trim().is_empty() {
                return Err(ModelError::EmptyElementText);
            }
        }
        Ok(Self { bbox, content, source })
    }

    pub fn text(bbox: BBox, text: impl Into<String>) -> Result<Self, ModelError> {
        UIElement::new(bbox, ElementContent::OcrText(text.into()), ElementSource::Ocr)
    }

    pub fn icon(bbox: BBox, class: impl Into<String>) -> Result<Self, ModelError> {
        UIElement::new(
            bbox,
            ElementContent::IconClass(class.into()),
            ElementSource::IconDetector,
        )
    }
}

/// Discriminant of [`Action`], also used on the wire as `kind`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    DualPoint,
    TypeText,
    PressBack,
    PressHome,
    PressEnter,
    StatusComplete,
    StatusImpossible,
}

impl ActionKind {
    pub const ALL: [ActionKind; 7] = [
        ActionKind::DualPoint,
        ActionKind::TypeText,
        ActionKind::PressBack,
        ActionKind::PressHome,
        ActionKind::PressEnter,
        ActionKind::StatusComplete,
        ActionKind::StatusImpossible,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ActionKind::DualPoint => "dual_point",
            ActionKind::TypeText => "type_text",
            ActionKind::PressBack => "press_back",
            ActionKind::PressHome => "press_home",
            ActionKind::PressEnter => "press_enter",
            ActionKind::StatusComplete => "status_complete",
            ActionKind::StatusImpossible => "status_impossible",
        }
    }
}

/// An executable step. Payloads live in the variants so that the
/// per-kind payload rules hold by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAction", into = "RawAction")]
pub enum Action {
    DualPoint { touch: Point, lift: Point },
    TypeText { text: String },
    PressBack,
    PressHome,
    PressEnter,
    StatusComplete,
    StatusImpossible,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAction {
    kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    touch: Option<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lift: Option<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

impl TryFrom<RawAction> for Action {
    type Error = ModelError;

    fn try_from(raw: RawAction) -> Result<Self, Self::Error> {
        let no_payload = raw.touch.is_none() && raw.lift.is_none() && raw.text.is_none();
        let bare = |a: Action| {
            if no_payload {
                Ok(a)
            } else {
                Err(ModelError::Contract(format!(
                    "{} carries no payload",
                    raw.kind.as_str()
                )))
            }
        };
        match raw.kind {
            ActionKind::DualPoint => match (raw.touch, raw.lift, &raw.text) {
                (Some(touch), Some(lift), None) => Ok(Action::DualPoint { touch, lift }),
                _ => Err(ModelError::Contract(
                    "dual_point requires touch and lift and no text".into(),
                )),
            },
            ActionKind::TypeText => match (raw.touch, raw.lift, raw.text) {
                (None, None, Some(text)) => Action::type_text(text),
                _ => Err(ModelError::EmptyTypedText),
            },
            ActionKind::PressBack => bare(Action::PressBack),
            ActionKind::PressHome => bare(Action::PressHome),
            ActionKind::PressEnter => bare(Action::PressEnter),
            ActionKind::StatusComplete => bare(Action::StatusComplete),
            ActionKind::StatusImpossible => bare(Action::StatusImpossible),
        }
    }
}

impl From<Action> for RawAction {
    fn from(a: Action) -> Self {
        let kind = a.kind();
        let (touch, lift, text) = match a {
            Action::DualPoint { touch, lift } => (Some(touch), Some(lift), None),
            Action::TypeText { text } => (None, None, Some(text)),
            _ => (None, None, None),
        };
        RawAction {
            kind,
            touch,
            lift,
            text,
        }
    }
}

impl Action {
    pub fn tap(p: Point) -> Action {
        Action::DualPoint { touch: p, lift: p }
    }

    pub fn type_text(text: impl Into<String>) -> Result<Action, ModelError> {
        let text = text.into();
        if text.is_empty() {
            return Err(ModelError::EmptyTypedText);
        }
        Ok(Action::TypeText { text })
    }

    pub fn kind(&self) -> ActionKind {
        match self {
            Action::DualPoint { .. } => ActionKind::DualPoint,
            Action::TypeText { .. } => ActionKind::TypeText,
            Action::PressBack => ActionKind::PressBack,
            Action::PressHome => ActionKind::PressHome,
            Action::PressEnter => ActionKind::PressEnter,
            Action::StatusComplete => ActionKind::StatusComplete,
            Action::StatusImpossible => ActionKind::StatusImpossible,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Action::StatusComplete | Action::StatusImpossible)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GestureClass {
    Tap,
    ScrollUp,
    ScrollDown,
    ScrollLeft,
    ScrollRight,
}

impl GestureClass {
    pub fn is_scroll(&self) -> bool {
        !matches!(self, GestureClass::Tap)
    }
}

/// Classify a dual-point gesture with the default tap threshold.
pub fn classify_gesture(a: &Action) -> Result<GestureClass, ModelError> {
    classify_gesture_with(a, DEFAULT_TAP_THRESHOLD)
}

/// Direction names follow the finger: a lift above the touch is `ScrollUp`.
/// Equal horizontal and vertical displacement resolves to the horizontal axis.
pub fn classify_gesture_with(a: &Action, tap_threshold: f64) -> Result<GestureClass, ModelError> {
    let Action::DualPoint { touch, lift } = a else {
        return Err(ModelError::Contract(format!(
            "classify_gesture expects dual_point, got {}",
            a.kind().as_str()
        )));
    };
    if touch.distance(lift) <= tap_threshold {
        return Ok(GestureClass::Tap);
    }
    let dx = lift.x - touch.x;
    let dy = lift.y - touch.y;
    Ok(if dx.abs() >= dy.abs() {
        if dx > 0.0 {
            GestureClass::ScrollRight
        } else {
            GestureClass::ScrollLeft
        }
    } else if dy < 0.0 {
        GestureClass::ScrollUp
    } else {
        GestureClass::ScrollDown
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    General,
    Install,
    GoogleApps,
    Single,
    WebShopping,
    Ios,
    Custom,
}

impl Category {
    /// The five Android-in-the-Wild subsets, in table column order.
    pub const AITW: [Category; 5] = [
        Category::General,
        Category::Install,
        Category::GoogleApps,
        Category::Single,
        Category::WebShopping,
    ];

    pub const ALL: [Category; 7] = [
        Category::General,
        Category::Install,
        Category::GoogleApps,
        Category::Single,
        Category::WebShopping,
        Category::Ios,
        Category::Custom,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::General => "general",
            Category::Install => "install",
            Category::GoogleApps => "googleapps",
            Category::Single => "single",
            Category::WebShopping => "webshopping",
            Category::Ios => "ios",
            Category::Custom => "custom",
        }
    }

    pub fn display_name(&self) -> &'static str {
        match self {
            Category::General => "General",
            Category::Install => "Install",
            Category::GoogleApps => "GoogleApps",
            Category::Single => "Single",
            Category::WebShopping => "WebShopping",
            Category::Ios => "iOS",
            Category::Custom => "Custom",
        }
    }
}

impl std::str::FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == lower)
            .ok_or_else(|| format!("unknown category `{s}`"))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub index: usize,
    /// Screenshot path relative to the dataset root.
    pub screenshot: String,
    #[serde(default)]
    pub elements: Vec<UIElement>,
    pub gold_action: Action,
}

/// A gold trajectory for one instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEpisode")]
pub struct Episode {
    pub episode_id: String,
    pub instruction: String,
    pub category: Category,
    pub steps: Vec<Step>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEpisode {
    episode_id: String,
    instruction: String,
    category: Category,
    steps: Vec<Step>,
}

impl TryFrom<RawEpisode> for Episode {
    type Error = ModelError;

    fn try_from(raw: RawEpisode) -> Result<Self, Self::Error> {
        Episode::new(raw.episode_id, raw.instruction, raw.category, raw.steps)
    }
}

impl Episode {
    pub fn new(
        episode_id: impl Into<String>,
        instruction: impl Into<String>,
        category: Category,
        steps: Vec<Step>,
    ) -> Result<Self, ModelError> {
        if steps.is_empty() {
            return Err(ModelError::EmptyEpisode);
        }
        if let Some((position, step)) = steps.iter().enumerate().find(|(i, s)| s.index != *i) {
            return Err(ModelError::StepIndex {
                position,
                index: step.index,
            });
        }
        Ok(Self {
            episode_id: episode_id.into(),
            instruction: instruction.into(),
            category,
            steps,
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Encoded image bytes (PNG in practice), cheap to clone.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageData(Arc<[u8]>);

impl ImageData {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        ImageData(Arc::from(bytes.into().into_boxed_slice()))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Hex SHA-256 of the encoded bytes.
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(&self.0))
    }
}

impl fmt::Debug for ImageData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageData({} bytes)", self.0.len())
    }
}
