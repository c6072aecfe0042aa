//! Screen-wise partial action matching and its aggregations.
//!
//! A prediction is correct when its action type matches the gold action and:
//! taps land within the click radius of the gold tap or inside a gold
//! element box that also holds the gold tap; scrolls share the gold
//! direction; typed text matches case-insensitively after trimming; presses
//! and status reports match by kind.
//!
//! Episode score = correct steps / episode length. Category score = mean of
//! episode scores x 100. Overall = unweighted mean of category scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::ParsedAction;
use crate::model::{classify_gesture_with, Action, BBox, Category, Episode, Point, UIElement, DEFAULT_TAP_THRESHOLD};

pub const DEFAULT_CLICK_THRESHOLD: f64 = 0.14;

/// Slack on the click radius so that a distance of exactly the threshold,
/// computed in floating point, is accepted.
pub const DISTANCE_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("nothing to aggregate")]
    Empty,
    #[error("click threshold must be in (0, 1), got {0}")]
    Threshold(f64),
    #[error("judgment for {sample_id} has score {score}; expected 0 or 1")]
    InvalidScore { sample_id: String, score: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMatch {
    #[default]
    ExactCaseInsensitive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRule {
    pub click_distance_threshold: f64,
    pub tap_threshold: f64,
    pub text_match: TextMatch,
}

impl Default for MatchRule {
    fn default() -> Self {
        Self {
            click_distance_threshold: DEFAULT_CLICK_THRESHOLD,
            tap_threshold: DEFAULT_TAP_THRESHOLD,
            text_match: TextMatch::ExactCaseInsensitive,
        }
    }
}

impl MatchRule {
    pub fn with_threshold(threshold: f64) -> Result<Self, EvalError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(EvalError::Threshold(threshold));
        }
        Ok(Self {
            click_distance_threshold: threshold,
            ..Self::default()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    TypeMismatch,
    /// Tap against scroll, or scroll against tap.
    GestureMismatch,
    DistancePass,
    DistanceFail,
    SameBboxPass,
    ScrollDirPass,
    ScrollDirFail,
    TextPass,
    TextFail,
    StatusPass,
    PressPass,
    ParseFailure,
    MissingPrediction,
}

impl Reason {
    pub fn is_pass(&self) -> bool {
        matches!(
            self,
            Reason::DistancePass
                | Reason::SameBboxPass
                | Reason::ScrollDirPass
                | Reason::TextPass
                | Reason::StatusPass
                | Reason::PressPass
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepVerdict {
    pub correct: bool,
    pub reason: Reason,
    /// Tap-to-tap distance, when both actions are taps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
}

impl StepVerdict {
    fn of(reason: Reason) -> Self {
        Self {
            correct: reason.is_pass(),
            reason,
            distance: None,
        }
    }
}

/// Whether some element box holds both points.
fn share_element(a: &Point, b: &Point, elements: &[UIElement]) -> bool {
    elements.iter().any(|e| e.bbox.contains(a) && e.bbox.contains(b))
}

pub fn match_step(pred: &ParsedAction, gold: &Action, gold_elements: &[UIElement], rule: &MatchRule) -> StepVerdict {
    let pred = match pred {
        ParsedAction::Action(a) => a,
        ParsedAction::ParseFailure(_) => return StepVerdict::of(Reason::ParseFailure),
    };
    match_actions(pred, gold, gold_elements, rule)
}

pub fn match_actions(pred: &Action, gold: &Action, gold_elements: &[UIElement], rule: &MatchRule) -> StepVerdict {
    if pred.kind() != gold.kind() {
        return StepVerdict::of(Reason::TypeMismatch);
    }
    match (pred, gold) {
        (Action::DualPoint { touch: pt, .. }, Action::DualPoint { touch: gt, .. }) => {
            let (Ok(pg), Ok(gg)) = (
                classify_gesture_with(pred, rule.tap_threshold),
                classify_gesture_with(gold, rule.tap_threshold),
            ) else {
                return StepVerdict::of(Reason::TypeMismatch);
            };
            match (pg.is_scroll(), gg.is_scroll()) {
                (false, false) => {
                    let distance = pt.distance(gt);
                    let reason = if distance <= rule.click_distance_threshold + DISTANCE_EPSILON {
                        Reason::DistancePass
                    } else if share_element(pt, gt, gold_elements) {
                        Reason::SameBboxPass
                    } else {
                        Reason::DistanceFail
                    };
                    StepVerdict {
                        distance: Some(distance),
                        ..StepVerdict::of(reason)
                    }
                }
                (true, true) if pg == gg => StepVerdict::of(Reason::ScrollDirPass),
                (true, true) => StepVerdict::of(Reason::ScrollDirFail),
                _ => StepVerdict::of(Reason::GestureMismatch),
            }
        }
        (Action::TypeText { text: a }, Action::TypeText { text: b }) => {
            if a.trim().to_lowercase() == b.trim().to_lowercase() {
                StepVerdict::of(Reason::TextPass)
            } else {
                StepVerdict::of(Reason::TextFail)
            }
        }
        (Action::StatusComplete, _) | (Action::StatusImpossible, _) => StepVerdict::of(Reason::StatusPass),
        _ => StepVerdict::of(Reason::PressPass),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub episode_id: String,
    pub category: Category,
    pub correct: usize,
    pub total: usize,
    pub fraction: f64,
    pub verdicts: Vec<StepVerdict>,
}

/// Score predictions aligned to `episode.steps` by index. Missing
/// predictions count as incorrect; extra predictions are ignored.
pub fn score_episode(preds: &[ParsedAction], episode: &Episode, rule: &MatchRule) -> EpisodeScore {
    let verdicts: Vec<StepVerdict> = episode
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| match preds.get(i) {
            Some(p) => match_step(p, &step.gold_action, &step.elements, rule),
            None => StepVerdict::of(Reason::MissingPrediction),
        })
        .collect();
    let correct = verdicts.iter().filter(|v| v.correct).count();
    let total = episode.steps.len();
    EpisodeScore {
        episode_id: episode.episode_id.clone(),
        category: episode.category,
        correct,
        total,
        fraction: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        verdicts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Episode id -> fraction of correct steps.
    pub per_episode: BTreeMap<String, f64>,
    /// Category -> mean episode fraction x 100.
    pub per_category: BTreeMap<Category, f64>,
    /// Unweighted mean of the category scores.
    pub overall: f64,
    pub counts: Counts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub episodes: usize,
    pub episodes_per_category: BTreeMap<Category, usize>,
    pub steps: usize,
    pub correct_steps: usize,
}

impl ScoreReport {
    /// Canonical JSON: sorted keys, stable float formatting.
    pub fn to_json(&self) -> String {
        crate::dataset::canonical_json_pretty(self).expect("score report serializes")
    }
}

pub fn aggregate(scores: &[EpisodeScore]) -> Result<ScoreReport, EvalError> {
    let mut by_category: BTreeMap<Category, Vec<(String, f64)>> = BTreeMap::new();
    for s in scores {
        by_category
            .entry(s.category)
            .or_default()
            .push((s.episode_id.clone(), s.fraction));
    }
    let mut report = aggregate_fractions(&by_category)?;
    report.counts.steps = scores.iter().map(|s| s.total).sum();
    report.counts.correct_steps = scores.iter().map(|s| s.correct).sum();
    Ok(report)
}

/// Aggregate per-category lists of `(episode_id, fraction)`.
pub fn aggregate_fractions(by_category: &BTreeMap<Category, Vec<(String, f64)>>) -> Result<ScoreReport, EvalError> {
    let mut per_episode = BTreeMap::new();
    let mut per_category = BTreeMap::new();
    let mut counts = Counts::default();
    for (category, episodes) in by_category {
        if episodes.is_empty() {
            continue;
        }
        let mean = episodes.iter().map(|(_, f)| f).sum::<f64>() / episodes.len() as f64;
        per_category.insert(*category, mean * 100.0);
        counts.episodes += episodes.len();
        counts.episodes_per_category.insert(*category, episodes.len());
        for (id, f) in episodes {
            per_episode.insert(id.clone(), *f);
        }
    }
    if per_category.is_empty() {
        return Err(EvalError::Empty);
    }
    let overall = per_category.values().sum::<f64>() / per_category.len() as f64;
    Ok(ScoreReport {
        per_episode,
        per_category,
        overall,
        counts,
    })
}

/// Markdown table: one row per report, one column per category.
pub fn render_markdown(rows: &[(&str, &ScoreReport)]) -> String {
    let columns = table_columns(rows);
    let mut out = String::new();
    let _ = write!(out, "| Model | Overall |");
    for c in &columns {
        let _ = write!(out, " {} |", c.display_name());
    }
    out.push('\n');
    out.push_str("|---|---:|");
    for _ in &columns {
        out.push_str("---:|");
    }
    out.push('\n');
    for (label, report) in rows {
        let _ = write!(out, "| {label} | {:.2} |", report.overall);
        for c in &columns {
            match report.per_category.get(c) {
                Some(v) => {
                    let _ = write!(out, " {v:.2} |");
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn render_csv(rows: &[(&str, &ScoreReport)]) -> String {
    let columns = table_columns(rows);
    let mut out = String::from("model,overall");
    for c in &columns {
        let _ = write!(out, ",{}", c.as_str());
    }
    out.push('\n');
    for (label, report) in rows {
        let _ = write!(out, "{},{:.2}", csv_field(label), report.overall);
        for c in &columns {
            match report.per_category.get(c) {
                Some(v) => {
                    let _ = write!(out, ",{v:.2}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// The five AITW columns always, plus any other category present.
fn table_columns(rows: &[(&str, &ScoreReport)]) -> Vec<Category> {
    let mut columns = Category::AITW.to_vec();
    for c in Category::ALL {
        if !columns.contains(&c) && rows.iter().any(|(_, r)| r.per_category.contains_key(&c)) {
            columns.push(c);
        }
    }
    columns
}

/// One annotator decision on one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub sample_id: String,
    pub score: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default)]
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanAccuracy {
    pub samples: usize,
    pub correct: usize,
    pub fraction: f64,
    /// `100 x fraction` rounded to one decimal.
    pub percent: f64,
}

/// Collapse to one judgment per sample: the latest timestamp wins, and
/// among equal timestamps the later entry wins.
pub fn latest_judgments(judgments: &[Judgment]) -> BTreeMap<String, Judgment> {
    let mut latest: BTreeMap<String, Judgment> = BTreeMap::new();
    for j in judgments {
        match latest.get(&j.sample_id) {
            Some(prev) if prev.timestamp > j.timestamp => {}
            _ => {
                latest.insert(j.sample_id.clone(), j.clone());
            }
        }
    }
    latest
}

pub fn human_accuracy(judgments: &[Judgment]) -> Result<HumanAccuracy, EvalError> {
    if let Some(bad) = judgments.iter().find(|j| j.score != 0 && j.score != 1) {
        return Err(EvalError::InvalidScore {
            sample_id: bad.sample_id.clone(),
            score: bad.score,
        });
    }
    let latest = latest_judgments(judgments);
    if latest.is_empty() {
        return Err(EvalError::Empty);
    }
    let correct = latest.values().filter(|j| j.score == 1).count();
    let fraction = correct as f64 / latest.len() as f64;
    Ok(HumanAccuracy {
        samples: latest.len(),
        correct,
        fraction,
        percent: (fraction * 1000.0).round() / 10.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewBucket {
    /// Tap on a different element carrying the same label as the gold target.
    SameTargetCandidate,
    /// Tap on an element touching the gold element; the target may be over-segmented.
    AdjacentRegion,
    /// Tap where the annotator scrolled; another path may also be valid.
    AlternatePath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub episode_id: String,
    pub step: usize,
    pub bucket: ReviewBucket,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TriageReport {
    /// Incorrect steps per failure reason.
    pub failures: BTreeMap<Reason, usize>,
    /// Possible false negatives for a human to look at. Never auto-excused.
    pub review: Vec<ReviewItem>,
}

impl TriageReport {
    pub fn is_empty(&self) -> bool {
        self.failures.is_empty() && self.review.is_empty()
    }
}

/// Gap (normalized) under which two boxes count as touching.
const ADJACENT_GAP: f64 = 0.01;

fn boxes_touch(a: &BBox, b: &BBox) -> bool {
    let gap_x = (a.x.max(b.x) - (a.x + a.w).min(b.x + b.w)).max(0.0);
    let gap_y = (a.y.max(b.y) - (a.y + a.h).min(b.y + b.h)).max(0.0);
    gap_x <= ADJACENT_GAP && gap_y <= ADJACENT_GAP
}

/// Bucket incorrect steps by reason and list review candidates.
pub fn triage(
    episodes: &[Episode],
    predictions: &BTreeMap<String, Vec<ParsedAction>>,
    scores: &[EpisodeScore],
    rule: &MatchRule,
) -> TriageReport {
    let mut report = TriageReport::default();
    let by_id: BTreeMap<&str, &Episode> = episodes.iter().map(|e| (e.episode_id.as_str(), e)).collect();
    for score in scores {
        let Some(episode) = by_id.get(score.episode_id.as_str()) else {
            continue;
        };
        let preds = predictions.get(&score.episode_id).map(Vec::as_slice).unwrap_or(&[]);
        for (step, verdict) in score.verdicts.iter().enumerate() {
            if verdict.correct {
                continue;
            }
            *report.failures.entry(verdict.reason).or_default() += 1;
            let (Some(pred), Some(gold_step)) = (preds.get(step).and_then(ParsedAction::action), episode.steps.get(step))
            else {
                continue;
            };
            if let Some((bucket, detail)) = review_bucket(pred, &gold_step.gold_action, &gold_step.elements, rule) {
                report.review.push(ReviewItem {
                    episode_id: score.episode_id.clone(),
                    step,
                    bucket,
                    detail,
                });
            }
        }
    }
    report
}

fn review_bucket(
    pred: &Action,
    gold: &Action,
    elements: &[UIElement],
    rule: &MatchRule,
) -> Option<(ReviewBucket, String)> {
    let (Action::DualPoint { touch: p, .. }, Action::DualPoint { touch: g, .. }) = (pred, gold) else {
        return None;
    };
    let pred_class = classify_gesture_with(pred, rule.tap_threshold).ok()?;
    let gold_class = classify_gesture_with(gold, rule.tap_threshold).ok()?;
    if pred_class.is_scroll() {
        return None;
    }
    if gold_class.is_scroll() {
        return Some((
            ReviewBucket::AlternatePath,
            format!("tapped {p} where the annotator scrolled ({gold_class:?})"),
        ));
    }
    let gold_elems: Vec<&UIElement> = elements.iter().filter(|e| e.bbox.contains(g)).collect();
    let pred_elems: Vec<&UIElement> = elements
        .iter()
        .filter(|e| e.bbox.contains(p) && !e.bbox.contains(g))
        .collect();
    for pe in &pred_elems {
        for ge in &gold_elems {
            if pe.content.label().trim().eq_ignore_ascii_case(ge.content.label().trim()) {
                return Some((
                    ReviewBucket::SameTargetCandidate,
                    format!("pred and gold elements are both labelled {:?}", ge.content.label()),
                ));
            }
        }
    }
    for pe in &pred_elems {
        for ge in &gold_elems {
            if boxes_touch(&pe.bbox, &ge.bbox) {
                return Some((
                    ReviewBucket::AdjacentRegion,
                    format!(
                        "pred element {:?} touches gold element {:?}",
                        pe.content.label(),
                        ge.content.label()
                    ),
                ));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{ParseFailure, ParseFailureKind};
    use crate::model::Step;

    fn tap(x: f64, y: f64) -> Action {
        Action::tap(Point::new(x, y).unwrap())
    }

    fn swipe(a: (f64, f64), b: (f64, f64)) -> Action {
        Action::DualPoint {
            touch: Point::new(a.0, a.1).unwrap(),
            lift: Point::new(b.0, b.1).unwrap(),
        }
    }

    fn pa(a: Action) -> ParsedAction {
        ParsedAction::Action(a)
    }

    #[test]
    fn distance_examples() {
        let rule = MatchRule::default();
        let v = match_step(&pa(tap(0.50, 0.63)), &tap(0.50, 0.50), &[], &rule);
        assert_eq!(v.reason, Reason::DistancePass);
        assert!((v.distance.unwrap() - 0.13).abs() < 1e-12);
        let v = match_step(&pa(tap(0.60, 0.60)), &tap(0.50, 0.50), &[], &rule);
        assert_eq!(v.reason, Reason::DistanceFail);
        assert!((v.distance.unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn exact_boundary_accepted() {
        let rule = MatchRule::default();
        // 0.64 - 0.5 is 0.14000000000000001 in binary floating point.
        assert!(match_step(&pa(tap(0.5, 0.64)), &tap(0.5, 0.5), &[], &rule).correct);
        assert!(!match_step(&pa(tap(0.5, 0.6401)), &tap(0.5, 0.5), &[], &rule).correct);
    }

    #[test]
    fn same_bbox_rule() {
        let el = UIElement::icon(BBox::new(0.7, 0.7, 0.3, 0.3).unwrap(), "PLAY").unwrap();
        let v = match_step(&pa(tap(0.95, 0.95)), &tap(0.72, 0.72), &[el], &MatchRule::default());
        assert!(v.correct);
        assert_eq!(v.reason, Reason::SameBboxPass);
    }

    #[test]
    fn scroll_direction_only() {
        let rule = MatchRule::default();
        let v = match_step(&pa(swipe((0.5, 0.9), (0.5, 0.7))), &swipe((0.5, 0.5), (0.5, 0.1)), &[], &rule);
        assert_eq!(v.reason, Reason::ScrollDirPass);
        let v = match_step(&pa(swipe((0.5, 0.1), (0.5, 0.7))), &swipe((0.5, 0.5), (0.5, 0.1)), &[], &rule);
        assert_eq!(v.reason, Reason::ScrollDirFail);
        let v = match_step(&pa(tap(0.5, 0.5)), &swipe((0.5, 0.5), (0.5, 0.1)), &[], &rule);
        assert_eq!(v.reason, Reason::GestureMismatch);
        assert!(!v.correct);
    }

    #[test]
    fn kinds_and_text() {
        let rule = MatchRule::default();
        let t = |s: &str| Action::type_text(s).unwrap();
        assert!(match_step(&pa(t(" Wet Cat Food ")), &t("wet cat food"), &[], &rule).correct);
        assert_eq!(match_step(&pa(t("cat")), &t("dog"), &[], &rule).reason, Reason::TextFail);
        assert_eq!(match_step(&pa(Action::PressBack), &Action::PressHome, &[], &rule).reason, Reason::TypeMismatch);
        assert_eq!(match_step(&pa(Action::PressHome), &Action::PressHome, &[], &rule).reason, Reason::PressPass);
        assert_eq!(
            match_step(&pa(Action::StatusComplete), &Action::StatusComplete, &[], &rule).reason,
            Reason::StatusPass
        );
        assert_eq!(
            match_step(&pa(Action::StatusComplete), &Action::StatusImpossible, &[], &rule).reason,
            Reason::TypeMismatch
        );
        let fail = ParsedAction::ParseFailure(ParseFailure {
            kind: ParseFailureKind::Unparseable,
            detail: String::new(),
        });
        assert_eq!(match_step(&fail, &Action::PressBack, &[], &rule).reason, Reason::ParseFailure);
    }

    fn episode(id: &str, category: Category, gold: Vec<Action>) -> Episode {
        let steps = gold
            .into_iter()
            .enumerate()
            .map(|(i, a)| Step {
                index: i,
                screenshot: format!("screens/{id}_{i}.png"),
                elements: vec![],
                gold_action: a,
            })
            .collect();
        Episode::new(id, "do it", category, steps).unwrap()
    }

    #[test]
    fn episode_fractions() {
        let gold = vec![Action::PressBack, Action::PressHome, tap(0.1, 0.1), Action::StatusComplete];
        let ep = episode("e", Category::General, gold.clone());
        let all: Vec<_> = gold.iter().cloned().map(pa).collect();
        assert_eq!(score_episode(&all, &ep, &MatchRule::default()).fraction, 1.0);
        let mut three = all.clone();
        three[1] = pa(Action::PressEnter);
        assert_eq!(score_episode(&three, &ep, &MatchRule::default()).fraction, 0.75);
        let short = score_episode(&all[..2], &ep, &MatchRule::default());
        assert_eq!(short.fraction, 0.5);
        assert_eq!(short.verdicts[3].reason, Reason::MissingPrediction);
    }

    fn one_episode_per_category(values: [f64; 5]) -> Vec<EpisodeScore> {
        Category::AITW
            .iter()
            .zip(values)
            .map(|(c, v)| EpisodeScore {
                episode_id: format!("{c}-1"),
                category: *c,
                correct: 0,
                total: 1,
                fraction: v / 100.0,
                verdicts: vec![],
            })
            .collect()
    }

    #[test]
    fn aggregate_table_rows() {
        let r = aggregate(&one_episode_per_category([41.66, 42.64, 49.82, 72.83, 45.73])).unwrap();
        assert!((r.overall - 50.54).abs() <= 0.005);
        let r = aggregate(&one_episode_per_category([43.01, 46.14, 49.18, 78.29, 48.18])).unwrap();
        assert!((r.overall - 52.96).abs() <= 0.005);
        assert!(matches!(aggregate(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn overall_is_unweighted_over_categories() {
        let mut scores = one_episode_per_category([10.0, 20.0, 30.0, 40.0, 50.0]);
        scores.push(EpisodeScore {
            episode_id: "general-2".into(),
            category: Category::General,
            correct: 0,
            total: 1,
            fraction: 0.3,
            verdicts: vec![],
        });
        let r = aggregate(&scores).unwrap();
        assert!((r.per_category[&Category::General] - 20.0).abs() < 1e-9);
        assert!((r.overall - 32.0).abs() < 1e-9);
        assert_eq!(r.counts.episodes, 6);
    }

    #[test]
    fn markdown_table_layout() {
        let r = aggregate(&one_episode_per_category([41.66, 42.64, 49.82, 72.83, 45.73])).unwrap();
        let md = render_markdown(&[("image-only", &r)]);
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines[0], "| Model | Overall | General | Install | GoogleApps | Single | WebShopping |");
        assert_eq!(lines[2], "| image-only | 50.54 | 41.66 | 42.64 | 49.82 | 72.83 | 45.73 |");
        let csv = render_csv(&[("a,b", &r)]);
        assert!(csv.lines().nth(1).unwrap().starts_with("\"a,b\",50.54,41.66"));
    }

    fn judgments(correct: usize, total: usize) -> Vec<Judgment> {
        (0..total)
            .map(|i| Judgment {
                sample_id: format!("s{i}"),
                score: i64::from(i < correct),
                note: None,
                timestamp: i as u64,
            })
            .collect()
    }

    #[test]
    fn human_accuracy_fixtures() {
        assert_eq!(human_accuracy(&judgments(50, 55)).unwrap().percent, 90.9);
        assert_eq!(human_accuracy(&judgments(41, 55)).unwrap().percent, 74.5);
        assert_eq!(human_accuracy(&judgments(0, 7)).unwrap().percent, 0.0);
        assert_eq!(human_accuracy(&[]), Err(EvalError::Empty));
    }

    #[test]
    fn latest_judgment_wins() {
        let mut js = judgments(1, 2);
        js.push(Judgment {
            sample_id: "s0".into(),
            score: 0,
            note: Some("misread".into()),
            timestamp: 99,
        });
        // An older correction does not override.
        js.push(Judgment {
            sample_id: "s1".into(),
            score: 1,
            note: None,
            timestamp: 0,
        });
        let acc = human_accuracy(&js).unwrap();
        assert_eq!((acc.samples, acc.correct), (2, 0));
        js.push(Judgment {
            sample_id: "s9".into(),
            score: 2,
            note: None,
            timestamp: 0,
        });
        assert!(matches!(human_accuracy(&js), Err(EvalError::InvalidScore { .. })));
    }

    #[test]
    fn triage_buckets() {
        let logo = |x| UIElement::icon(BBox::new(x, 0.1, 0.1, 0.1).unwrap(), "GOOGLE_PLAY").unwrap();
        let mut ep = episode("t", Category::GoogleApps, vec![tap(0.15, 0.15), tap(0.5, 0.5)]);
        ep.steps[0].elements = vec![logo(0.1), logo(0.6)];
        ep.steps[1].elements = vec![
            UIElement::text(BBox::new(0.4, 0.45, 0.1, 0.1).unwrap(), "Accept").unwrap(),
            UIElement::text(BBox::new(0.5, 0.45, 0.3, 0.1).unwrap(), "all").unwrap(),
        ];
        // gold (0.5, 0.5) lies on the shared edge; pred in the right half only.
        let preds = vec![pa(tap(0.65, 0.15)), pa(tap(0.78, 0.5))];
        let rule = MatchRule::default();
        let score = score_episode(&preds, &ep, &rule);
        assert_eq!(score.correct, 1);
        let mut map = BTreeMap::new();
        map.insert("t".to_string(), preds);
        let report = triage(std::slice::from_ref(&ep), &map, &[score], &rule);
        assert_eq!(report.failures[&Reason::DistanceFail], 1);
        assert_eq!(report.review.len(), 1);
        assert_eq!(report.review[0].bucket, ReviewBucket::SameTargetCandidate);
    }

    #[test]
    fn triage_clean_and_parse_failure() {
        let ep = episode("c", Category::Single, vec![Action::PressBack]);
        let rule = MatchRule::default();
        let good = vec![pa(Action::PressBack)];
        let s = score_episode(&good, &ep, &rule);
        let mut map = BTreeMap::new();
        map.insert("c".to_string(), good);
        assert!(triage(std::slice::from_ref(&ep), &map, &[s], &rule).is_empty());

        let bad = vec![ParsedAction::ParseFailure(ParseFailure {
            kind: ParseFailureKind::Unparseable,
            detail: "x".into(),
        })];
        let s = score_episode(&bad, &ep, &rule);
        map.insert("c".to_string(), bad);
        let r = triage(std::slice::from_ref(&ep), &map, &[s], &rule);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[&Reason::ParseFailure], 1);
    }

    #[test]
    fn threshold_validation() {
        assert!(MatchRule::with_threshold(0.0).is_err());
        assert!(MatchRule::with_threshold(1.0).is_err());
        assert!(MatchRule::with_threshold(0.2).is_ok());
    }
}
