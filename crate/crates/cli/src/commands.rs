//! Subcommand implementations. Each returns data; printing and exit codes
//! live in `main`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use screennav_core::agent::{AgentError, Clock, EpisodeInput, GoldBackend, LogicalClock, SystemClock};
use screennav_core::dataset::{
    self, canonical_json, canonical_json_pretty, load_predictions, store_predictions, validate_dataset, DirSink, Split,
    Violation, MANIFEST_FILE, TRANSCRIPTS_FILE,
};
use screennav_core::evaluator::{aggregate_fractions, render_csv, render_markdown, triage, EpisodeScore, TriageReport};
use screennav_core::llm::{BackendError, RecordingBackend, RemoteBackend, RemoteConfig, ReplayBackend, ScriptedBackend};
use screennav_core::{
    aggregate, annotate, run_episode, AgentTranscript, Category, ChatBackend, Dataset, DatasetManifest, Episode, ImageData,
    MatchRule, ParsedAction, ScoreReport, StepVerdict, UIElement,
};

use crate::config::{tag_style, BackendKind, RunConfig};

pub const RUN_CONFIG_FILE: &str = "run.json";
pub const SESSION_FILE: &str = "session.jsonl";
pub const ERRORS_FILE: &str = "errors.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";
pub const TRIAGE_FILE: &str = "triage.json";
pub const TABLE_MD_FILE: &str = "table.md";
pub const TABLE_CSV_FILE: &str = "table.csv";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn open_valid_dataset(root: &Path) -> Result<Dataset> {
    let violations = validate_dataset(root)?;
    if !violations.is_empty() {
        let shown: Vec<String> = violations.iter().take(10).map(Violation::to_string).collect();
        bail!(
            "dataset {} has {} violation(s):\n  {}",
            root.display(),
            violations.len(),
            shown.join("\n  ")
        );
    }
    Ok(Dataset::open(root)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub episode_id: String,
    pub error: String,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub transcripts: Vec<AgentTranscript>,
    pub failures: Vec<EpisodeFailure>,
}

/// Errors after which no further episode can succeed.
fn is_fatal(e: &AgentError) -> bool {
    matches!(
        e,
        AgentError::Backend(
            BackendError::Auth(_)
                | BackendError::Config(_)
                | BackendError::ScriptExhausted { .. }
                | BackendError::ScriptMismatch { .. }
        )
    )
}

fn shared_backend(cfg: &RunConfig, run_dir: &Path) -> Result<Option<Box<dyn ChatBackend>>> {
    let session = run_dir.join(SESSION_FILE);
    Ok(match cfg.backend {
        BackendKind::Gold => None,
        BackendKind::Replay => Some(Box::new(ReplayBackend::open(cfg.session.as_deref().unwrap())?)),
        BackendKind::Scripted => {
            let scripted = ScriptedBackend::from_jsonl(cfg.script.as_deref().unwrap())?;
            Some(Box::new(RecordingBackend::create(scripted, session)?))
        }
        BackendKind::Remote => {
            let mut remote = RemoteConfig::new(cfg.endpoint.clone().unwrap(), cfg.model.clone().unwrap());
            remote.api_key_env = cfg.api_key_env.clone();
            remote.auth_header = cfg.auth_header.clone();
            remote.timeout = Duration::from_secs(cfg.timeout_secs);
            remote.max_in_flight = cfg.parallel;
            let backend = RemoteBackend::from_env(remote)?;
            Some(Box::new(RecordingBackend::create(backend, session)?))
        }
    })
}

/// Ids to run: a seeded sample when `sample` is set, else the whole pool. Sorted.
pub fn select_episodes(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<Vec<String>> {
    let mut ids = match cfg.sample {
        Some(n) => dataset::sample(manifest, n, cfg.seed, cfg.stratified)?,
        None => manifest.sample_pool(),
    };
    ids.sort();
    Ok(ids)
}

/// Roll out every selected episode and store transcripts under `<out>/<run_id>/`.
///
/// Episodes that fail are listed in the outcome and in `errors.jsonl`; the
/// rest are still written.
pub fn run(cfg: &RunConfig, force: bool) -> Result<RunOutcome> {
    let dataset = open_valid_dataset(&cfg.dataset)?;
    let ids = select_episodes(dataset.manifest(), cfg)?;
    let episodes: Vec<Episode> = ids
        .iter()
        .map(|id| dataset.load_episode(id))
        .collect::<Result<_, _>>()?;
    let agent = cfg.agent_config()?;

    let run_dir = cfg.out.join(&cfg.run_id);
    if run_dir.exists() && fs::read_dir(&run_dir)?.next().is_some() {
        if !force {
            bail!("{} is not empty; pass --force to replace it", run_dir.display());
        }
        fs::remove_dir_all(&run_dir).with_context(|| format!("clearing {}", run_dir.display()))?;
    }
    fs::create_dir_all(&run_dir)?;
    write_text(&run_dir.join(RUN_CONFIG_FILE), &(canonical_json_pretty(cfg)? + "\n"))?;

    let backend = shared_backend(cfg, &run_dir)?;
    // A script is consumed in order, so it cannot be shared across threads.
    let workers = match cfg.backend {
        BackendKind::Scripted => 1,
        _ => cfg.parallel.min(episodes.len()).max(1),
    };
    tracing::info!(episodes = episodes.len(), workers, backend = cfg.backend.as_str(), "starting run");

    let next = AtomicUsize::new(0);
    let halted = AtomicBool::new(false);
    let results: Mutex<Vec<(usize, Result<AgentTranscript, String>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(episode) = episodes.get(i) else { break };
                let result = if halted.load(Ordering::SeqCst) {
                    Err("skipped after a fatal backend error".to_string())
                } else {
                    let gold;
                    let backend: &dyn ChatBackend = match &backend {
                        Some(b) => b.as_ref(),
                        None => {
                            gold = GoldBackend::new(episode);
                            &gold
                        }
                    };
                    let clock: Box<dyn Clock> = if cfg.wall_clock {
                        Box::new(SystemClock)
                    } else {
                        Box::new(LogicalClock::default())
                    };
                    let mut screens = dataset.screens(episode);
                    let mut sink = DirSink::new(&run_dir);
                    let input = EpisodeInput {
                        episode_id: &episode.episode_id,
                        instruction: &episode.instruction,
                        screens: &mut screens,
                    };
                    run_episode(&agent, backend, input, clock.as_ref(), &mut sink).map_err(|e| {
                        if is_fatal(&e) {
                            halted.store(true, Ordering::SeqCst);
                        }
                        tracing::warn!(episode = %episode.episode_id, error = %e, "episode failed");
                        e.to_string()
                    })
                };
                results.lock().unwrap().push((i, result));
            });
        }
    });

    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    let mut transcripts = Vec::new();
    let mut failures = Vec::new();
    for (i, result) in results {
        match result {
            Ok(t) => transcripts.push(t),
            Err(error) => failures.push(EpisodeFailure {
                episode_id: episodes[i].episode_id.clone(),
                error,
            }),
        }
    }
    store_predictions(&cfg.out, &cfg.run_id, &transcripts)?;
    if !failures.is_empty() {
        let lines: Vec<String> = failures.iter().map(|f| canonical_json(f).unwrap()).collect();
        write_text(&run_dir.join(ERRORS_FILE), &(lines.join("\n") + "\n"))?;
    }
    Ok(RunOutcome {
        run_dir,
        transcripts,
        failures,
    })
}

/// One line of `verdicts.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictLine {
    pub episode_id: String,
    pub step: usize,
    #[serde(flatten)]
    pub verdict: StepVerdict,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub label: String,
    pub report: ScoreReport,
    pub scores: Vec<EpisodeScore>,
    pub triage: TriageReport,
}

/// Table label for a run directory: its recorded run id, else the directory name.
pub fn run_label(run_dir: &Path) -> String {
    fs::read_to_string(run_dir.join(RUN_CONFIG_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<RunConfig>(&t).ok())
        .map(|c| c.run_id)
        .unwrap_or_else(|| {
            run_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into())
        })
}

/// Score a run directory against the dataset and write the report files
/// into it.
pub fn eval_run(run_dir: &Path, dataset: &Dataset, rule: &MatchRule) -> Result<EvalOutcome> {
    let path = run_dir.join(TRANSCRIPTS_FILE);
    if !path.is_file() {
        bail!("no {TRANSCRIPTS_FILE} in {}", run_dir.display());
    }
    let transcripts = load_predictions(&path)?;
    if transcripts.is_empty() {
        bail!("{} holds no transcripts", path.display());
    }
    let mut episodes = Vec::new();
    let mut predictions: BTreeMap<String, Vec<ParsedAction>> = BTreeMap::new();
    for t in &transcripts {
        if predictions.insert(t.episode_id.clone(), t.predictions()).is_some() {
            bail!("episode {} appears twice in {}", t.episode_id, path.display());
        }
        episodes.push(
            dataset
                .load_episode(&t.episode_id)
                .with_context(|| format!("transcript episode {}", t.episode_id))?,
        );
    }
    let scores: Vec<EpisodeScore> = episodes
        .iter()
        .map(|e| screennav_core::score_episode(&predictions[&e.episode_id], e, rule))
        .collect();
    let report = aggregate(&scores)?;
    let triage = triage(&episodes, &predictions, &scores, rule);
    let label = run_label(run_dir);

    write_text(&run_dir.join(REPORT_FILE), &report.to_json())?;
    let mut verdicts = String::new();
    for s in &scores {
        for (step, v) in s.verdicts.iter().enumerate() {
            let line = VerdictLine {
                episode_id: s.episode_id.clone(),
                step,
                verdict: *v,
            };
            verdicts.push_str(&canonical_json(&line)?);
            verdicts.push('\n');
        }
    }
    write_text(&run_dir.join(VERDICTS_FILE), &verdicts)?;
    write_text(&run_dir.join(TRIAGE_FILE), &canonical_json_pretty(&triage)?)?;
    write_text(&run_dir.join(TABLE_MD_FILE), &render_markdown(&[(&label, &report)]))?;
    write_text(&run_dir.join(TABLE_CSV_FILE), &render_csv(&[(&label, &report)]))?;
    Ok(EvalOutcome {
        label,
        report,
        scores,
        triage,
    })
}

/// Evaluate several run directories and optionally write one combined table
/// (`<table>.md` and `<table>.csv`).
pub fn eval(run_dirs: &[PathBuf], dataset_root: &Path, threshold: Option<f64>, table: Option<&Path>) -> Result<Vec<EvalOutcome>> {
    if run_dirs.is_empty() {
        bail!("no run directories given");
    }
    let rule = match threshold {
        Some(t) => MatchRule::with_threshold(t)?,
        None => MatchRule::default(),
    };
    let dataset = open_valid_dataset(dataset_root)?;
    let outcomes = run_dirs
        .iter()
        .map(|d| eval_run(d, &dataset, &rule).with_context(|| format!("evaluating {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    if let Some(table) = table {
        write_tables(table, &outcomes.iter().map(|o| (o.label.as_str(), &o.report)).collect::<Vec<_>>())?;
    }
    Ok(outcomes)
}

fn write_tables(base: &Path, rows: &[(&str, &ScoreReport)]) -> Result<()> {
    if let Some(parent) = base.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_text(&base.with_extension("md"), &render_markdown(rows))?;
    write_text(&base.with_extension("csv"), &render_csv(rows))
}

/// Per-episode fractions grouped by category, as read by `eval --fractions`.
pub type FractionFile = BTreeMap<Category, BTreeMap<String, f64>>;

/// Aggregate externally scored episodes. Writes `report.json`, `table.md`,
/// and `table.csv` into `out_dir`.
pub fn eval_fractions(path: &Path, out_dir: &Path, label: &str) -> Result<ScoreReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: FractionFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    for (category, episodes) in &file {
        if let Some((id, f)) = episodes.iter().find(|(_, f)| !(0.0..=1.0).contains(*f)) {
            bail!("{category}/{id}: fraction {f} outside [0, 1]");
        }
    }
    let grouped = file
        .into_iter()
        .map(|(c, eps)| (c, eps.into_iter().collect()))
        .collect();
    let report = aggregate_fractions(&grouped)?;
    fs::create_dir_all(out_dir)?;
    write_text(&out_dir.join(REPORT_FILE), &report.to_json())?;
    write_tables(&out_dir.join("table"), &[(label, &report)])?;
    Ok(report)
}

/// Tag one screenshot. Writes the PNG to `out` and the tag map next to it
/// as `<stem>.tagmap.json`. Returns the sidecar path.
pub fn tag(image: &Path, elements: &Path, style: &str, font_scale: Option<f64>, out: &Path) -> Result<PathBuf> {
    let bytes = fs::read(image).with_context(|| format!("reading {}", image.display()))?;
    let text = fs::read_to_string(elements).with_context(|| format!("reading {}", elements.display()))?;
    let elements: Vec<UIElement> =
        serde_json::from_str(&text).with_context(|| format!("parsing elements in {}", elements.display()))?;
    let tagged = annotate(&ImageData::new(bytes), &elements, &tag_style(style, font_scale)?)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_text_bytes(out, tagged.tagged_image.as_bytes())?;
    let sidecar = out.with_extension("tagmap.json");
    write_text(&sidecar, &canonical_json_pretty(&tagged.sidecar())?)?;
    Ok(sidecar)
}

fn write_text_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn validate(path: &Path) -> Result<Vec<Violation>> {
    Ok(dataset::validate(path)?)
}

pub fn sample(root: &Path, n: usize, seed: u64, stratified: bool) -> Result<Vec<String>> {
    let dataset = Dataset::open(root)?;
    Ok(dataset::sample(dataset.manifest(), n, seed, stratified)?)
}

/// Rebuild `manifest.json` from the episode files. An existing manifest's
/// split is kept for episodes that still exist; new episodes join the test split.
pub fn index(root: &Path, name: Option<&str>, version: Option<&str>) -> Result<DatasetManifest> {
    let previous: Option<DatasetManifest> = fs::read_to_string(root.join(MANIFEST_FILE))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let name = name
        .map(str::to_string)
        .or_else(|| previous.as_ref().map(|m| m.name.clone()))
        .ok_or_else(|| anyhow!("--name is required when there is no existing manifest"))?;
    let version = version
        .map(str::to_string)
        .or_else(|| previous.as_ref().map(|m| m.version.clone()))
        .unwrap_or_else(|| "1".into());

    let mut manifest = dataset::build_manifest(root, &name, &version, None)?;
    if let Some(prev) = previous {
        let present: BTreeSet<&String> = manifest.episodes.keys().collect();
        let train: Vec<String> = prev.split.train.into_iter().filter(|id| present.contains(id)).collect();
        let assigned: BTreeSet<&String> = train.iter().collect();
        let test: Vec<String> = manifest
            .episodes
            .keys()
            .filter(|id| !assigned.contains(id))
            .cloned()
            .collect();
        manifest.split = Split { train, test };
    }
    dataset::write_manifest(root, &manifest)?;
    Ok(manifest)
}
