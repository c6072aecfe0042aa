//! On-disk episode store.
//!
//! Layout: `<root>/manifest.json`, `<root>/episodes/*.json`, `<root>/screens/*.png`.
//! Screenshot paths inside episode files are relative to `<root>`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{
    AgentError, AgentTranscript, ParsedAction, ProviderMode, Screen, ScreenProvider, StepRecord, TaggedSink,
    Termination,
};
use crate::model::{Category, Episode, ImageData, ModelError, BBOX_EPSILON};
use crate::som::TaggedScreen;

pub const EPISODE_SCHEMA: &str = include_str!("../schema/episode.schema.json");
pub const MANIFEST_SCHEMA: &str = include_str!("../schema/manifest.schema.json");
pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".manifest.lock";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("no episode with id {0:?}")]
    MissingEpisode(String),
    #[error("checksum mismatch for {id}: manifest {expected}, file {actual}")]
    Checksum {
        id: String,
        expected: String,
        actual: String,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("requested {requested} episodes but only {available} available")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("{0} violation(s); first: {1}")]
    Invalid(usize, Violation),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialize with object keys sorted.
pub fn canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    serde_json::to_string(&serde_json::to_value(value)?)
}

pub fn canonical_json_pretty<T: Serialize>(value: &T) -> serde_json::Result<String> {
    serde_json::to_string_pretty(&serde_json::to_value(value)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root.
    pub file: String,
    pub sha256: String,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub version: String,
    pub schema_version: u32,
    pub categories: BTreeMap<Category, usize>,
    pub split: Split,
    pub episodes: BTreeMap<String, ManifestEntry>,
}

impl DatasetManifest {
    /// Check counts and split membership against the episode table.
    pub fn check(&self) -> Result<(), DatasetError> {
        let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
        for entry in self.episodes.values() {
            *counts.entry(entry.category).or_default() += 1;
        }
        let declared: BTreeMap<Category, usize> = self.categories.iter().filter(|(_, n)| **n > 0).map(|(c, n)| (*c, *n)).collect();
        if counts != declared {
            return Err(DatasetError::Manifest(format!(
                "category counts {declared:?} do not match episodes {counts:?}"
            )));
        }
        let mut seen = BTreeSet::new();
        for id in self.split.train.iter().chain(&self.split.test) {
            if !self.episodes.contains_key(id) {
                return Err(DatasetError::Manifest(format!("split lists unknown episode {id:?}")));
            }
            if !seen.insert(id) {
                return Err(DatasetError::Manifest(format!("episode {id:?} listed twice in split")));
            }
        }
        Ok(())
    }

    /// Ids the sampler draws from: the test split when present, else every episode.
    pub fn sample_pool(&self) -> Vec<String> {
        if self.split.test.is_empty() {
            self.episodes.keys().cloned().collect()
        } else {
            self.split.test.clone()
        }
    }
}

/// Seeded draw of `n` episode ids from the manifest's sample pool.
///
/// With `stratified`, every category present in the pool receives
/// floor(n/k) or ceil(n/k) draws (k categories); a category short of
/// episodes hands its remainder to the others.
pub fn sample(manifest: &DatasetManifest, n: usize, seed: u64, stratified: bool) -> Result<Vec<String>, DatasetError> {
    let mut pool = manifest.sample_pool();
    pool.sort();
    if n > pool.len() {
        return Err(DatasetError::SampleTooLarge {
            requested: n,
            available: pool.len(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !stratified {
        pool.shuffle(&mut rng);
        pool.truncate(n);
        return Ok(pool);
    }

    let mut groups: BTreeMap<Category, Vec<String>> = BTreeMap::new();
    for id in pool {
        let category = manifest.episodes[&id].category;
        groups.entry(category).or_default().push(id);
    }
    for ids in groups.values_mut() {
        ids.shuffle(&mut rng);
    }
    let mut order: Vec<Category> = groups.keys().copied().collect();
    order.shuffle(&mut rng);

    let mut quota: BTreeMap<Category, usize> = groups.keys().map(|c| (*c, 0)).collect();
    let mut remaining = n;
    while remaining > 0 {
        let open: Vec<Category> = order.iter().copied().filter(|c| quota[c] < groups[c].len()).collect();
        let share = remaining / open.len();
        let extra = remaining % open.len();
        for (i, c) in open.iter().enumerate() {
            let want = share + usize::from(i < extra);
            let room = groups[c].len() - quota[c];
            let take = want.min(room);
            *quota.get_mut(c).unwrap() += take;
            remaining -= take;
        }
    }
    Ok(groups
        .into_iter()
        .flat_map(|(c, ids)| ids.into_iter().take(quota[&c]))
        .collect())
}

/// Exclusive writer lock on a dataset root, released on drop.
pub struct ManifestLock {
    file: File,
}

impl ManifestLock {
    pub fn acquire(root: &Path) -> Result<Self, DatasetError> {
        let path = root.join(LOCK_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        file.lock().map_err(io_err(&path))?;
        Ok(Self { file })
    }
}

impl Drop for ManifestLock {
    fn drop(&mut self) {
        let _ = self.file.unlock();
    }
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), DatasetError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<PathBuf, DatasetError> {
    manifest.check()?;
    let _lock = ManifestLock::acquire(root)?;
    let path = root.join(MANIFEST_FILE);
    let mut text = canonical_json_pretty(manifest).map_err(|e| DatasetError::Json {
        path: path.clone(),
        message: e.to_string(),
    })?;
    text.push('\n');
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

/// Write an episode file under `<root>/episodes/<id>.json` and return its
/// manifest entry. The manifest itself is not touched.
pub fn write_episode(root: &Path, episode: &Episode) -> Result<ManifestEntry, DatasetError> {
    let dir = root.join("episodes");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let rel = format!("episodes/{}.json", episode.episode_id);
    let path = root.join(&rel);
    let mut text = canonical_json_pretty(episode).map_err(|e| DatasetError::Json {
        path: path.clone(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(&path, &text).map_err(io_err(&path))?;
    Ok(ManifestEntry {
        file: rel,
        sha256: sha256_hex(text.as_bytes()),
        category: episode.category,
    })
}

/// Scan `<root>/episodes/*.json` and build a manifest with fresh checksums.
/// Every scanned episode goes into the test split unless `split` is given.
pub fn build_manifest(root: &Path, name: &str, version: &str, split: Option<Split>) -> Result<DatasetManifest, DatasetError> {
    let dir = root.join("episodes");
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut episodes = BTreeMap::new();
    let mut categories: BTreeMap<Category, usize> = BTreeMap::new();
    for path in files {
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let episode: Episode = serde_json::from_slice(&bytes).map_err(|e| DatasetError::Json {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let rel = format!("episodes/{}", path.file_name().unwrap().to_string_lossy());
        let entry = ManifestEntry {
            file: rel,
            sha256: sha256_hex(&bytes),
            category: episode.category,
        };
        if episodes.insert(episode.episode_id.clone(), entry).is_some() {
            return Err(DatasetError::Manifest(format!("duplicate episode id {:?}", episode.episode_id)));
        }
        *categories.entry(episode.category).or_default() += 1;
    }
    let split = split.unwrap_or_else(|| Split {
        train: vec![],
        test: episodes.keys().cloned().collect(),
    });
    let manifest = DatasetManifest {
        name: name.to_string(),
        version: version.to_string(),
        schema_version: SCHEMA_VERSION,
        categories,
        split,
        episodes,
    };
    manifest.check()?;
    Ok(manifest)
}

/// Read-only handle on a dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, DatasetError> {
        let root = root.into();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DatasetError::Json {
            path: path.clone(),
            message: e.to_string(),
        })?;
        manifest.check()?;
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn episode_ids(&self) -> Vec<String> {
        self.manifest.episodes.keys().cloned().collect()
    }

    pub fn load_episode(&self, id: &str) -> Result<Episode, DatasetError> {
        let entry = self
            .manifest
            .episodes
            .get(id)
            .ok_or_else(|| DatasetError::MissingEpisode(id.to_string()))?;
        let path = self.root.join(&entry.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(DatasetError::Checksum {
                id: id.to_string(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        let episode: Episode = serde_json::from_slice(&bytes).map_err(|e| DatasetError::Json {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if episode.episode_id != id {
            return Err(DatasetError::Manifest(format!(
                "{} holds episode {:?}, manifest says {id:?}",
                entry.file, episode.episode_id
            )));
        }
        Ok(episode)
    }

    pub fn load_all(&self) -> Result<Vec<Episode>, DatasetError> {
        self.manifest.episodes.keys().map(|id| self.load_episode(id)).collect()
    }

    pub fn load_image(&self, rel: &str) -> Result<ImageData, DatasetError> {
        let path = self.root.join(rel);
        Ok(ImageData::new(fs::read(&path).map_err(io_err(&path))?))
    }

    pub fn screens(&self, episode: &Episode) -> DatasetScreens {
        DatasetScreens {
            root: self.root.clone(),
            episode: episode.clone(),
        }
    }
}

/// Replays an episode's recorded screenshots in step order.
pub struct DatasetScreens {
    root: PathBuf,
    episode: Episode,
}

impl ScreenProvider for DatasetScreens {
    fn mode(&self) -> ProviderMode {
        ProviderMode::DatasetReplay
    }

    fn next_screen(&mut self, step: usize) -> Result<Option<Screen>, AgentError> {
        let Some(s) = self.episode.steps.get(step) else {
            return Ok(None);
        };
        let path = self.root.join(&s.screenshot);
        let bytes = fs::read(&path).map_err(|e| AgentError::Screen(format!("{}: {e}", path.display())))?;
        Ok(Some(Screen {
            image: ImageData::new(bytes),
            elements: s.elements.clone(),
        }))
    }
}

/// Gold actions as predictions, for oracle runs.
pub fn gold_predictions(episode: &Episode) -> Vec<ParsedAction> {
    episode
        .steps
        .iter()
        .map(|s| ParsedAction::Action(s.gold_action.clone()))
        .collect()
}

/// Writes tagged screenshots under `<dir>/tagged/` and returns paths
/// relative to `<dir>`.
pub struct DirSink {
    dir: PathBuf,
}

impl DirSink {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl TaggedSink for DirSink {
    fn store(&mut self, episode_id: &str, step: usize, tagged: &TaggedScreen) -> Result<String, AgentError> {
        let rel = format!("tagged/{episode_id}_{step}.png");
        let path = self.dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| AgentError::Screen(e.to_string()))?;
        }
        fs::write(&path, tagged.tagged_image.as_bytes()).map_err(|e| AgentError::Screen(format!("{}: {e}", path.display())))?;
        Ok(rel)
    }
}

/// One line of a transcript file. Steps of an episode are consecutive and
/// the last one carries the termination. An episode with no steps is a
/// single line with only the header fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub episode_id: String,
    pub instruction: String,
    #[serde(flatten)]
    pub record: Option<StepRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination: Option<Termination>,
}

pub fn transcript_lines(transcripts: &[AgentTranscript]) -> Vec<TranscriptLine> {
    let mut lines = Vec::new();
    for t in transcripts {
        let header = |record, termination| TranscriptLine {
            episode_id: t.episode_id.clone(),
            instruction: t.instruction.clone(),
            record,
            termination,
        };
        if t.steps.is_empty() {
            lines.push(header(None, Some(t.termination)));
            continue;
        }
        let last = t.steps.len() - 1;
        for (i, s) in t.steps.iter().enumerate() {
            lines.push(header(Some(s.clone()), (i == last).then_some(t.termination)));
        }
    }
    lines
}

pub fn encode_transcripts(transcripts: &[AgentTranscript]) -> String {
    let mut out = String::new();
    for line in transcript_lines(transcripts) {
        out.push_str(&canonical_json(&line).expect("transcript line serializes"));
        out.push('\n');
    }
    out
}

pub fn decode_transcripts(text: &str) -> Result<Vec<AgentTranscript>, String> {
    let mut out: Vec<AgentTranscript> = Vec::new();
    let mut open: Option<AgentTranscript> = None;
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: TranscriptLine = serde_json::from_str(raw).map_err(|e| format!("line {}: {e}", n + 1))?;
        let current = open.get_or_insert_with(|| AgentTranscript {
            episode_id: line.episode_id.clone(),
            instruction: line.instruction.clone(),
            steps: vec![],
            termination: Termination::Aborted,
        });
        if current.episode_id != line.episode_id {
            return Err(format!(
                "line {}: episode {:?} starts before {:?} terminated",
                n + 1,
                line.episode_id,
                current.episode_id
            ));
        }
        if let Some(record) = line.record {
            current.steps.push(record);
        }
        if let Some(termination) = line.termination {
            let mut done = open.take().unwrap();
            done.termination = termination;
            out.push(done);
        }
    }
    if let Some(t) = open {
        return Err(format!("episode {:?} has no termination", t.episode_id));
    }
    Ok(out)
}

/// Store transcripts as `<root>/<run_id>/transcripts.jsonl`.
pub fn store_predictions(root: &Path, run_id: &str, transcripts: &[AgentTranscript]) -> Result<PathBuf, DatasetError> {
    let dir = root.join(run_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join(TRANSCRIPTS_FILE);
    write_atomic(&path, encode_transcripts(transcripts).as_bytes())?;
    Ok(path)
}

pub fn load_predictions(path: &Path) -> Result<Vec<AgentTranscript>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    decode_transcripts(&text).map_err(|message| DatasetError::Json {
        path: path.to_path_buf(),
        message,
    })
}

/// Append one JSON line and flush.
pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let mut line = canonical_json(value).map_err(|e| DatasetError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    line.push('\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    file.write_all(line.as_bytes()).map_err(io_err(path))?;
    file.flush().map_err(io_err(path))
}

/// Read a JSONL file; a missing file reads as empty.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Json {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

/// Which invariant a violation breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Missing field, wrong JSON type, or unknown field.
    Schema,
    CoordinateRange,
    BoxOverflow,
    BoxEmpty,
    ElementContent,
    EmptyElementText,
    ActionPayload,
    EmptyTypedText,
    EmptyEpisode,
    StepIndex,
    ImageMissing,
    DuplicateEpisodeId,
    ManifestCounts,
    Checksum,
}

impl Rule {
    pub const ALL: [Rule; 14] = [
        Rule::Schema,
        Rule::CoordinateRange,
        Rule::BoxOverflow,
        Rule::BoxEmpty,
        Rule::ElementContent,
        Rule::EmptyElementText,
        Rule::ActionPayload,
        Rule::EmptyTypedText,
        Rule::EmptyEpisode,
        Rule::StepIndex,
        Rule::ImageMissing,
        Rule::DuplicateEpisodeId,
        Rule::ManifestCounts,
        Rule::Checksum,
    ];

    /// The validator rule enforcing the invariant behind a model error.
    pub fn for_model_error(e: &ModelError) -> Rule {
        match e {
            ModelError::CoordinateOutOfRange { .. } => Rule::CoordinateRange,
            ModelError::BoxOverflow { .. } => Rule::BoxOverflow,
            ModelError::EmptyBox { .. } => Rule::BoxEmpty,
            ModelError::ElementContent => Rule::ElementContent,
            ModelError::EmptyElementText => Rule::EmptyElementText,
            ModelError::EmptyTypedText => Rule::EmptyTypedText,
            ModelError::EmptyEpisode => Rule::EmptyEpisode,
            ModelError::StepIndex { .. } => Rule::StepIndex,
            ModelError::Contract(_) => Rule::ActionPayload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// File the violation was found in, relative to the dataset root when known.
    pub file: String,
    /// JSON pointer into that file.
    pub pointer: String,
    pub rule: Rule,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{} [{:?}] {}", self.file, self.pointer, self.rule, self.message)
    }
}

struct Checker<'a> {
    file: String,
    root: Option<&'a Path>,
    out: Vec<Violation>,
}

impl Checker<'_> {
    fn push(&mut self, pointer: &str, rule: Rule, message: impl Into<String>) {
        self.out.push(Violation {
            file: self.file.clone(),
            pointer: pointer.to_string(),
            rule,
            message: message.into(),
        });
    }

    fn object<'v>(&mut self, v: &'v Value, ptr: &str, required: &[&str], optional: &[&str]) -> Option<&'v serde_json::Map<String, Value>> {
        let Some(obj) = v.as_object() else {
            self.push(ptr, Rule::Schema, "expected an object");
            return None;
        };
        for key in required {
            if !obj.contains_key(*key) {
                self.push(&format!("{ptr}/{key}"), Rule::Schema, "missing required field");
            }
        }
        for key in obj.keys() {
            if !required.contains(&key.as_str()) && !optional.contains(&key.as_str()) {
                self.push(&format!("{ptr}/{key}"), Rule::Schema, "unknown field");
            }
        }
        Some(obj)
    }

    fn string<'v>(&mut self, v: Option<&'v Value>, ptr: &str) -> Option<&'v str> {
        match v? {
            Value::String(s) => Some(s),
            _ => {
                self.push(ptr, Rule::Schema, "expected a string");
                None
            }
        }
    }

    fn unit(&mut self, v: Option<&Value>, ptr: &str) -> Option<f64> {
        let n = match v? {
            Value::Number(n) => n.as_f64()?,
            _ => {
                self.push(ptr, Rule::Schema, "expected a number");
                return None;
            }
        };
        if !(0.0..=1.0).contains(&n) {
            self.push(ptr, Rule::CoordinateRange, format!("{n} is outside [0, 1]"));
        }
        Some(n)
    }

    fn episode(&mut self, v: &Value) {
        let Some(obj) = self.object(v, "", &["episode_id", "instruction", "category", "steps"], &[]) else {
            return;
        };
        if let Some(id) = self.string(obj.get("episode_id"), "/episode_id") {
            if id.is_empty() {
                self.push("/episode_id", Rule::Schema, "episode_id is empty");
            }
        }
        self.string(obj.get("instruction"), "/instruction");
        if let Some(c) = self.string(obj.get("category"), "/category") {
            if c.parse::<Category>().is_err() {
                self.push("/category", Rule::Schema, format!("unknown category {c:?}"));
            }
        }
        match obj.get("steps") {
            None => {}
            Some(Value::Array(steps)) => {
                if steps.is_empty() {
                    self.push("/steps", Rule::EmptyEpisode, "an episode needs at least one step");
                }
                for (i, step) in steps.iter().enumerate() {
                    self.step(step, i);
                }
            }
            Some(_) => self.push("/steps", Rule::Schema, "expected an array"),
        }
    }

    fn step(&mut self, v: &Value, i: usize) {
        let ptr = format!("/steps/{i}");
        let Some(obj) = self.object(v, &ptr, &["index", "screenshot", "gold_action"], &["elements"]) else {
            return;
        };
        match obj.get("index").map(Value::as_u64) {
            None => {}
            Some(Some(index)) if index == i as u64 => {}
            Some(Some(index)) => self.push(&format!("{ptr}/index"), Rule::StepIndex, format!("index {index} at position {i}")),
            Some(None) => self.push(&format!("{ptr}/index"), Rule::Schema, "expected a non-negative integer"),
        }
        if let Some(shot) = self.string(obj.get("screenshot"), &format!("{ptr}/screenshot")) {
            if let Some(root) = self.root {
                if !root.join(shot).is_file() {
                    self.push(&format!("{ptr}/screenshot"), Rule::ImageMissing, format!("{shot} does not exist"));
                }
            }
        }
        match obj.get("elements") {
            None => {}
            Some(Value::Array(elements)) => {
                for (j, e) in elements.iter().enumerate() {
                    self.element(e, &format!("{ptr}/elements/{j}"));
                }
            }
            Some(_) => self.push(&format!("{ptr}/elements"), Rule::Schema, "expected an array"),
        }
        if let Some(a) = obj.get("gold_action") {
            self.action(a, &format!("{ptr}/gold_action"));
        }
    }

    fn element(&mut self, v: &Value, ptr: &str) {
        let Some(obj) = self.object(v, ptr, &["bbox"], &["text", "icon_class", "source"]) else {
            return;
        };
        if let Some(b) = obj.get("bbox") {
            self.bbox(b, &format!("{ptr}/bbox"));
        }
        match (obj.get("text"), obj.get("icon_class")) {
            (Some(_), Some(_)) | (None, None) => {
                self.push(ptr, Rule::ElementContent, "exactly one of text or icon_class is required")
            }
            (Some(t), None) => {
                if self.string(Some(t), &format!("{ptr}/text")) == Some("") {
                    self.push(&format!("{ptr}/text"), Rule::EmptyElementText, "element text is empty");
                }
            }
            (None, Some(c)) => {
                if self.string(Some(c), &format!("{ptr}/icon_class")) == Some("") {
                    self.push(&format!("{ptr}/icon_class"), Rule::EmptyElementText, "icon class is empty");
                }
            }
        }
        if let Some(s) = self.string(obj.get("source"), &format!("{ptr}/source")) {
            if !matches!(s, "ocr" | "icon_detector" | "dataset") {
                self.push(&format!("{ptr}/source"), Rule::Schema, format!("unknown source {s:?}"));
            }
        }
    }

    fn bbox(&mut self, v: &Value, ptr: &str) {
        let Some(obj) = self.object(v, ptr, &["x", "y", "w", "h"], &[]) else {
            return;
        };
        let x = self.unit(obj.get("x"), &format!("{ptr}/x"));
        let y = self.unit(obj.get("y"), &format!("{ptr}/y"));
        let w = self.unit(obj.get("w"), &format!("{ptr}/w"));
        let h = self.unit(obj.get("h"), &format!("{ptr}/h"));
        for (name, size) in [("w", w), ("h", h)] {
            if size.is_some_and(|s| s <= 0.0) {
                self.push(&format!("{ptr}/{name}"), Rule::BoxEmpty, "box side must be positive");
            }
        }
        for (name, start, size) in [("w", x, w), ("h", y, h)] {
            if let (Some(a), Some(s)) = (start, size) {
                if a + s > 1.0 + BBOX_EPSILON {
                    self.push(&format!("{ptr}/{name}"), Rule::BoxOverflow, format!("box extends to {}", a + s));
                }
            }
        }
    }

    fn point(&mut self, v: &Value, ptr: &str) {
        let Some(obj) = self.object(v, ptr, &["x", "y"], &[]) else {
            return;
        };
        self.unit(obj.get("x"), &format!("{ptr}/x"));
        self.unit(obj.get("y"), &format!("{ptr}/y"));
    }

    fn action(&mut self, v: &Value, ptr: &str) {
        let Some(obj) = self.object(v, ptr, &["kind"], &["touch", "lift", "text"]) else {
            return;
        };
        let Some(kind) = self.string(obj.get("kind"), &format!("{ptr}/kind")) else {
            return;
        };
        let has = |k: &str| obj.contains_key(k);
        for key in ["touch", "lift"] {
            if let Some(p) = obj.get(key) {
                self.point(p, &format!("{ptr}/{key}"));
            }
        }
        match kind {
            "dual_point" => {
                for key in ["touch", "lift"] {
                    if !has(key) {
                        self.push(&format!("{ptr}/{key}"), Rule::ActionPayload, format!("dual_point requires {key}"));
                    }
                }
                if has("text") {
                    self.push(&format!("{ptr}/text"), Rule::ActionPayload, "dual_point carries no text");
                }
            }
            "type_text" => {
                match obj.get("text") {
                    None => self.push(&format!("{ptr}/text"), Rule::EmptyTypedText, "type_text requires non-empty text"),
                    Some(t) => {
                        if self.string(Some(t), &format!("{ptr}/text")) == Some("") {
                            self.push(&format!("{ptr}/text"), Rule::EmptyTypedText, "type_text requires non-empty text");
                        }
                    }
                }
                for key in ["touch", "lift"] {
                    if has(key) {
                        self.push(&format!("{ptr}/{key}"), Rule::ActionPayload, format!("type_text carries no {key}"));
                    }
                }
            }
            "press_back" | "press_home" | "press_enter" | "status_complete" | "status_impossible" => {
                for key in ["touch", "lift", "text"] {
                    if has(key) {
                        self.push(&format!("{ptr}/{key}"), Rule::ActionPayload, format!("{kind} carries no payload"));
                    }
                }
            }
            other => self.push(&format!("{ptr}/kind"), Rule::Schema, format!("unknown action kind {other:?}")),
        }
    }
}

/// Check an episode document. `root` enables screenshot existence checks.
pub fn validate_episode_value(value: &Value, file: &str, root: Option<&Path>) -> Vec<Violation> {
    let mut checker = Checker {
        file: file.to_string(),
        root,
        out: Vec::new(),
    };
    checker.episode(value);
    checker.out
}

/// Validate an episode file or a whole dataset directory.
///
/// For a single file the dataset root is taken to be the parent of its
/// `episodes/` directory, when there is one. Only unreadable input is an
/// error; everything else is reported as violations.
pub fn validate(path: &Path) -> Result<Vec<Violation>, DatasetError> {
    if path.is_dir() {
        return validate_dataset(path);
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    let root = path
        .parent()
        .filter(|p| p.file_name().is_some_and(|n| n == "episodes"))
        .and_then(Path::parent);
    let file = path.display().to_string();
    Ok(validate_bytes(&bytes, &file, root))
}

fn validate_bytes(bytes: &[u8], file: &str, root: Option<&Path>) -> Vec<Violation> {
    match serde_json::from_slice::<Value>(bytes) {
        Ok(value) => validate_episode_value(&value, file, root),
        Err(e) => vec![Violation {
            file: file.to_string(),
            pointer: String::new(),
            rule: Rule::Schema,
            message: format!("not JSON: {e}"),
        }],
    }
}

pub fn validate_dataset(root: &Path) -> Result<Vec<Violation>, DatasetError> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest_violation = |pointer: &str, rule, message: String| Violation {
        file: MANIFEST_FILE.to_string(),
        pointer: pointer.to_string(),
        rule,
        message,
    };
    let manifest: DatasetManifest = match serde_json::from_str(&text) {
        Ok(m) => m,
        Err(e) => return Ok(vec![manifest_violation("", Rule::Schema, e.to_string())]),
    };
    let mut out = Vec::new();
    if let Err(e) = manifest.check() {
        out.push(manifest_violation("/categories", Rule::ManifestCounts, e.to_string()));
    }
    let mut seen_ids: BTreeMap<String, String> = BTreeMap::new();
    for (id, entry) in &manifest.episodes {
        let pointer = format!("/episodes/{}", id.replace('~', "~0").replace('/', "~1"));
        let file_path = root.join(&entry.file);
        let bytes = match fs::read(&file_path) {
            Ok(b) => b,
            Err(e) => {
                out.push(manifest_violation(&format!("{pointer}/file"), Rule::Schema, format!("{}: {e}", entry.file)));
                continue;
            }
        };
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            out.push(manifest_violation(
                &format!("{pointer}/sha256"),
                Rule::Checksum,
                format!("file hashes to {actual}"),
            ));
        }
        let found = validate_bytes(&bytes, &entry.file, Some(root));
        let clean = found.is_empty();
        out.extend(found);
        if !clean {
            continue;
        }
        let episode: Episode = match serde_json::from_slice(&bytes) {
            Ok(e) => e,
            Err(e) => {
                out.push(Violation {
                    file: entry.file.clone(),
                    pointer: String::new(),
                    rule: Rule::Schema,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if episode.episode_id != *id {
            out.push(manifest_violation(
                &pointer,
                Rule::ManifestCounts,
                format!("file holds episode {:?}", episode.episode_id),
            ));
        }
        if episode.category != entry.category {
            out.push(manifest_violation(
                &format!("{pointer}/category"),
                Rule::ManifestCounts,
                format!("file says {}", episode.category),
            ));
        }
        if let Some(other) = seen_ids.insert(episode.episode_id.clone(), entry.file.clone()) {
            out.push(Violation {
                file: entry.file.clone(),
                pointer: "/episode_id".into(),
                rule: Rule::DuplicateEpisodeId,
                message: format!("id also used by {other}"),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Step;
    use serde_json::json;

    fn manifest_with(counts: &[(Category, usize)]) -> DatasetManifest {
        let mut episodes = BTreeMap::new();
        let mut categories = BTreeMap::new();
        for (c, n) in counts {
            categories.insert(*c, *n);
            for i in 0..*n {
                let id = format!("{}-{i:04}", c.as_str());
                episodes.insert(
                    id.clone(),
                    ManifestEntry {
                        file: format!("episodes/{id}.json"),
                        sha256: String::new(),
                        category: *c,
                    },
                );
            }
        }
        DatasetManifest {
            name: "synthetic".into(),
            version: "1".into(),
            schema_version: SCHEMA_VERSION,
            categories,
            split: Split::default(),
            episodes,
        }
    }

    #[test]
    fn sample_is_seeded() {
        let m = manifest_with(&[(Category::General, 400), (Category::Install, 300)]);
        let a = sample(&m, 300, 7, false).unwrap();
        assert_eq!(a.len(), 300);
        assert_eq!(a, sample(&m, 300, 7, false).unwrap());
        assert_ne!(a, sample(&m, 300, 8, false).unwrap());
        assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), 300);
        assert_eq!(sample(&m, 0, 7, true).unwrap(), Vec::<String>::new());
        assert!(matches!(sample(&m, 701, 7, false), Err(DatasetError::SampleTooLarge { .. })));
    }

    #[test]
    fn stratified_balances() {
        let m = manifest_with(&Category::AITW.map(|c| (c, 40)));
        let ids = sample(&m, 50, 1, true).unwrap();
        let mut per: BTreeMap<Category, usize> = BTreeMap::new();
        for id in &ids {
            *per.entry(m.episodes[id].category).or_default() += 1;
        }
        assert!(per.values().all(|n| *n == 10), "{per:?}");

        let ids = sample(&m, 52, 1, true).unwrap();
        assert_eq!(ids.len(), 52);
        let mut per: BTreeMap<Category, usize> = BTreeMap::new();
        for id in &ids {
            *per.entry(m.episodes[id].category).or_default() += 1;
        }
        assert!(per.values().all(|n| *n == 10 || *n == 11), "{per:?}");
    }

    #[test]
    fn stratified_redistributes_shortfall() {
        let m = manifest_with(&[
            (Category::General, 2),
            (Category::Install, 30),
            (Category::GoogleApps, 30),
            (Category::Single, 30),
            (Category::WebShopping, 30),
        ]);
        let ids = sample(&m, 50, 3, true).unwrap();
        assert_eq!(ids.len(), 50);
        assert_eq!(ids.iter().filter(|id| id.starts_with("general")).count(), 2);
    }

    #[test]
    fn sample_prefers_test_split() {
        let mut m = manifest_with(&[(Category::General, 10)]);
        m.split.test = vec!["general-0003".into(), "general-0007".into()];
        let mut got = sample(&m, 2, 0, false).unwrap();
        got.sort();
        assert_eq!(got, m.split.test);
    }

    #[test]
    fn manifest_check() {
        let mut m = manifest_with(&[(Category::General, 2)]);
        assert!(m.check().is_ok());
        m.categories.insert(Category::General, 3);
        assert!(m.check().is_err());
        let mut m = manifest_with(&[(Category::General, 2)]);
        m.split.test = vec!["nope".into()];
        assert!(m.check().is_err());
    }

    fn good_episode() -> Value {
        json!({
            "episode_id": "e1",
            "instruction": "open settings",
            "category": "general",
            "steps": [{
                "index": 0,
                "screenshot": "screens/e1_0.png",
                "elements": [
                    {"bbox": {"x": 0.1, "y": 0.1, "w": 0.2, "h": 0.1}, "text": "Settings"},
                    {"bbox": {"x": 0.5, "y": 0.1, "w": 0.2, "h": 0.1}, "icon_class": "SEARCH", "source": "icon_detector"},
                    {"bbox": {"x": 0.1, "y": 0.5, "w": 0.2, "h": 0.1}, "text": "Wi-Fi"}
                ],
                "gold_action": {"kind": "dual_point", "touch": {"x": 0.2, "y": 0.15}, "lift": {"x": 0.2, "y": 0.15}}
            }]
        })
    }

    fn rules(v: &Value) -> Vec<(String, Rule)> {
        validate_episode_value(v, "e.json", None)
            .into_iter()
            .map(|x| (x.pointer, x.rule))
            .collect()
    }

    #[test]
    fn well_formed_is_clean() {
        assert_eq!(rules(&good_episode()), vec![]);
        let e: Episode = serde_json::from_value(good_episode()).unwrap();
        assert_eq!(e.steps[0].elements.len(), 3);
    }

    #[test]
    fn bbox_out_of_range_pointer() {
        let mut v = good_episode();
        v["steps"][0]["elements"][2]["bbox"]["x"] = json!(1.3);
        let found = rules(&v);
        assert!(found.contains(&("/steps/0/elements/2/bbox/x".into(), Rule::CoordinateRange)), "{found:?}");
    }

    #[test]
    fn type_text_without_text() {
        let mut v = good_episode();
        v["steps"][0]["gold_action"] = json!({"kind": "type_text"});
        assert_eq!(rules(&v), vec![("/steps/0/gold_action/text".into(), Rule::EmptyTypedText)]);
    }

    /// Every model invariant has a validator rule, and each rule fires on a
    /// document breaking that invariant while serde rejects the same document.
    #[test]
    fn every_invariant_has_a_rule() {
        type Mutate = fn(&mut Value);
        let cases: Vec<(Rule, Mutate)> = vec![
            (Rule::Schema, |v| v["steps"][0]["extra"] = json!(1)),
            (Rule::CoordinateRange, |v| v["steps"][0]["gold_action"]["touch"]["y"] = json!(-0.1)),
            (Rule::BoxOverflow, |v| v["steps"][0]["elements"][0]["bbox"]["w"] = json!(0.95)),
            (Rule::BoxEmpty, |v| v["steps"][0]["elements"][0]["bbox"]["h"] = json!(0.0)),
            (Rule::ElementContent, |v| v["steps"][0]["elements"][0]["icon_class"] = json!("X")),
            (Rule::EmptyElementText, |v| v["steps"][0]["elements"][0]["text"] = json!("")),
            (Rule::ActionPayload, |v| v["steps"][0]["gold_action"] = json!({"kind": "press_back", "text": "x"})),
            (Rule::EmptyTypedText, |v| v["steps"][0]["gold_action"] = json!({"kind": "type_text", "text": ""})),
            (Rule::EmptyEpisode, |v| v["steps"] = json!([])),
            (Rule::StepIndex, |v| v["steps"][0]["index"] = json!(3)),
        ];
        let model_errors = [
            ModelError::CoordinateOutOfRange { name: "x", value: 2.0 },
            ModelError::BoxOverflow { name: "w", value: 2.0 },
            ModelError::EmptyBox { name: "w", value: 0.0 },
            ModelError::ElementContent,
            ModelError::EmptyElementText,
            ModelError::EmptyTypedText,
            ModelError::EmptyEpisode,
            ModelError::StepIndex { position: 0, index: 1 },
            ModelError::Contract(String::new()),
        ];
        for e in &model_errors {
            let rule = Rule::for_model_error(e);
            assert!(cases.iter().any(|(r, _)| *r == rule), "no case for {rule:?}");
        }
        for (rule, mutate) in &cases {
            let mut v = good_episode();
            mutate(&mut v);
            let found = rules(&v);
            assert!(found.iter().any(|(_, r)| r == rule), "{rule:?} not reported: {found:?}");
            assert!(serde_json::from_value::<Episode>(v).is_err(), "serde accepted a {rule:?} violation");
        }
        // The rest are file-level and exercised against real directories.
        let file_level = [Rule::ImageMissing, Rule::DuplicateEpisodeId, Rule::ManifestCounts, Rule::Checksum];
        for rule in Rule::ALL {
            assert!(cases.iter().any(|(r, _)| *r == rule) || file_level.contains(&rule));
        }
    }

    #[test]
    fn image_existence() {
        let dir = tempfile::tempdir().unwrap();
        let found = validate_episode_value(&good_episode(), "e.json", Some(dir.path()));
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].rule, Rule::ImageMissing);
        assert_eq!(found[0].pointer, "/steps/0/screenshot");
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let s = canonical_json(&json!({"b": 1, "a": {"d": 2, "c": 3}})).unwrap();
        assert_eq!(s, r#"{"a":{"c":3,"d":2},"b":1}"#);
    }

    #[test]
    fn dataset_round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("screens")).unwrap();
        fs::write(root.join("screens/e1_0.png"), crate::som::blank_png(4, 8, [255, 255, 255]).as_bytes()).unwrap();
        let episode: Episode = serde_json::from_value(good_episode()).unwrap();
        write_episode(root, &episode).unwrap();
        let manifest = build_manifest(root, "tmp", "1", None).unwrap();
        write_manifest(root, &manifest).unwrap();
        assert_eq!(validate(root).unwrap(), vec![]);

        let ds = Dataset::open(root).unwrap();
        assert_eq!(ds.load_episode("e1").unwrap(), episode);
        assert!(matches!(ds.load_episode("e2"), Err(DatasetError::MissingEpisode(_))));

        let path = root.join("episodes/e1.json");
        let text = fs::read_to_string(&path).unwrap().replace("open settings", "open setting");
        fs::write(&path, text).unwrap();
        assert!(matches!(ds.load_episode("e1"), Err(DatasetError::Checksum { .. })));
        let found = validate(root).unwrap();
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].rule, Rule::Checksum);
    }

    #[test]
    fn empty_transcript_line_round_trips() {
        let t = AgentTranscript {
            episode_id: "e".into(),
            instruction: "i".into(),
            steps: vec![],
            termination: Termination::ScreensExhausted,
        };
        let text = encode_transcripts(std::slice::from_ref(&t));
        assert_eq!(text.lines().count(), 1);
        assert_eq!(decode_transcripts(&text).unwrap(), vec![t]);
        assert!(decode_transcripts("{\"episode_id\":\"e\",\"instruction\":\"i\"}\n").is_err());
    }

    #[test]
    fn dataset_screens_replay() {
        let dir = tempfile::tempdir().unwrap();
        let png = crate::som::blank_png(4, 8, [1, 2, 3]);
        fs::create_dir_all(dir.path().join("screens")).unwrap();
        fs::write(dir.path().join("screens/a.png"), png.as_bytes()).unwrap();
        let episode = Episode::new(
            "e",
            "i",
            Category::Single,
            vec![Step {
                index: 0,
                screenshot: "screens/a.png".into(),
                elements: vec![],
                gold_action: crate::model::Action::PressBack,
            }],
        )
        .unwrap();
        let mut screens = DatasetScreens {
            root: dir.path().to_path_buf(),
            episode,
        };
        assert_eq!(screens.next_screen(0).unwrap().unwrap().image, png);
        assert!(screens.next_screen(1).unwrap().is_none());
    }
}
