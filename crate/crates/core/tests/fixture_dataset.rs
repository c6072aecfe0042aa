//! The six-episode fixture dataset: validation, schema agreement, loading,
//! gold replay, and transcript storage.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use screennav_core::agent::{GoldBackend, LogicalClock, DigestSink, EpisodeInput};
use screennav_core::dataset::{
    self, build_manifest, gold_predictions, load_predictions, sample, store_predictions, validate, write_manifest,
    Dataset, DatasetError, Rule, EPISODE_SCHEMA, MANIFEST_SCHEMA,
};
use screennav_core::evaluator::{aggregate, score_episode, MatchRule};
use screennav_core::model::{classify_gesture, ActionKind, Category, GestureClass};
use screennav_core::{run_episode, AgentConfig, Condition};
use serde_json::{json, Value};

fn fixture_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/dataset/fixture6")
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

fn schema(text: &str) -> jsonschema::Validator {
    jsonschema::validator_for(&serde_json::from_str(text).unwrap()).unwrap()
}

#[test]
fn fixture_validates_cleanly() {
    assert_eq!(validate(&fixture_root()).unwrap(), vec![]);
    for entry in fs::read_dir(fixture_root().join("episodes")).unwrap() {
        assert_eq!(validate(&entry.unwrap().path()).unwrap(), vec![]);
    }
}

#[test]
fn fixture_conforms_to_published_schemas() {
    let episode_schema = schema(EPISODE_SCHEMA);
    let manifest_schema = schema(MANIFEST_SCHEMA);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(fixture_root().join("manifest.json")).unwrap()).unwrap();
    assert!(manifest_schema.is_valid(&manifest));
    for entry in fs::read_dir(fixture_root().join("episodes")).unwrap() {
        let doc: Value = serde_json::from_str(&fs::read_to_string(entry.unwrap().path()).unwrap()).unwrap();
        let errors: Vec<String> = episode_schema.iter_errors(&doc).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{errors:?}");
    }
}

/// The hand-written validator and the JSON schema agree on broken documents.
#[test]
fn validator_and_schema_agree() {
    let episode_schema = schema(EPISODE_SCHEMA);
    let base: Value =
        serde_json::from_str(&fs::read_to_string(fixture_root().join("episodes/install-0001.json")).unwrap()).unwrap();
    type Mutate = fn(&mut Value);
    let mutations: Vec<Mutate> = vec![
        |v| v["steps"][0]["elements"][2]["bbox"]["x"] = json!(1.3),
        |v| v["steps"][2]["gold_action"] = json!({"kind": "type_text"}),
        |v| v["steps"][2]["gold_action"]["text"] = json!(""),
        |v| v["steps"][0]["gold_action"] = json!({"kind": "dual_point", "touch": {"x": 0.1, "y": 0.1}}),
        |v| v["steps"][3]["gold_action"]["touch"] = json!({"x": 0.1, "y": 0.1}),
        |v| v["steps"][0]["elements"][0]["text"] = json!("Gmail"),
        |v| {
            v["steps"][0]["elements"][1].as_object_mut().unwrap().remove("text");
        },
        |v| v["steps"][0]["elements"][0]["bbox"]["w"] = json!(0),
        |v| v["steps"] = json!([]),
        |v| v["category"] = json!("shopping"),
        |v| v["steps"][0]["gold_action"]["kind"] = json!("long_press"),
        |v| v["steps"][1]["surprise"] = json!(true),
        |v| v["steps"][0]["elements"][0]["source"] = json!("sam"),
        |v| v["steps"][0]["gold_action"]["lift"]["y"] = json!(-0.01),
    ];
    assert!(episode_schema.is_valid(&base));
    assert!(dataset::validate_episode_value(&base, "x", None).is_empty());
    for (i, mutate) in mutations.iter().enumerate() {
        let mut doc = base.clone();
        mutate(&mut doc);
        let ours = dataset::validate_episode_value(&doc, "x", None);
        assert!(!ours.is_empty(), "mutation {i} passed the validator");
        assert!(!episode_schema.is_valid(&doc), "mutation {i} passed the schema");
    }
}

#[test]
fn fixture_covers_every_category_and_action() {
    let ds = Dataset::open(fixture_root()).unwrap();
    let episodes = ds.load_all().unwrap();
    assert_eq!(episodes.len(), 6);
    let categories: BTreeSet<Category> = episodes.iter().map(|e| e.category).collect();
    let mut expected: BTreeSet<Category> = Category::AITW.into_iter().collect();
    expected.insert(Category::Ios);
    assert_eq!(categories, expected);

    let actions = episodes.iter().flat_map(|e| e.steps.iter().map(|s| &s.gold_action));
    let kinds: BTreeSet<ActionKind> = actions.clone().map(|a| a.kind()).collect();
    assert_eq!(kinds, ActionKind::ALL.into_iter().collect());
    let gestures: BTreeSet<GestureClass> = actions.filter_map(|a| classify_gesture(a).ok()).collect();
    assert_eq!(gestures.len(), 5, "{gestures:?}");
}

#[test]
fn gold_replay_scores_one() {
    let start = Instant::now();
    let ds = Dataset::open(fixture_root()).unwrap();
    let rule = MatchRule::default();
    let scores: Vec<_> = ds
        .load_all()
        .unwrap()
        .iter()
        .map(|e| score_episode(&gold_predictions(e), e, &rule))
        .collect();
    for s in &scores {
        assert_eq!(s.fraction, 1.0, "{}", s.episode_id);
    }
    let report = aggregate(&scores).unwrap();
    assert_eq!(report.overall, 100.0);
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn gold_rollout_through_agent_loop() {
    let ds = Dataset::open(fixture_root()).unwrap();
    let rule = MatchRule::default();
    for condition in [Condition::ImageOnly, Condition::PlusText, Condition::PlusHistory] {
        let cfg = AgentConfig {
            max_steps: 20,
            ..AgentConfig::for_condition(condition)
        };
        for episode in ds.load_all().unwrap() {
            let backend = GoldBackend::new(&episode);
            let mut screens = ds.screens(&episode);
            let transcript = run_episode(
                &cfg,
                &backend,
                EpisodeInput {
                    episode_id: &episode.episode_id,
                    instruction: &episode.instruction,
                    screens: &mut screens,
                },
                &LogicalClock::default(),
                &mut DigestSink,
            )
            .unwrap();
            assert_eq!(transcript.steps.len(), episode.steps.len());
            let score = score_episode(&transcript.predictions(), &episode, &rule);
            assert_eq!(score.fraction, 1.0, "{condition} {}", episode.episode_id);
        }
    }
}

#[test]
fn tampered_file_fails_checksum() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixture_root(), dir.path());
    let path = dir.path().join("episodes/single-0001.json");
    let text = fs::read_to_string(&path).unwrap().replace("Turn off Bluetooth", "Turn on Bluetooth");
    fs::write(&path, text).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert!(matches!(ds.load_episode("single-0001"), Err(DatasetError::Checksum { .. })));
    assert!(ds.load_episode("general-0001").is_ok());
    let violations = validate(dir.path()).unwrap();
    assert_eq!(violations.iter().map(|v| v.rule).collect::<Vec<_>>(), vec![Rule::Checksum]);
}

#[test]
fn missing_screenshot_is_reported_with_pointer() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixture_root(), dir.path());
    fs::remove_file(dir.path().join("screens/ios-0001_2.png")).unwrap();
    let violations = validate(dir.path()).unwrap();
    assert_eq!(violations.len(), 1);
    assert_eq!(violations[0].rule, Rule::ImageMissing);
    assert_eq!(violations[0].pointer, "/steps/2/screenshot");
    assert_eq!(violations[0].file, "episodes/ios-0001.json");
}

#[test]
fn duplicate_ids_and_bad_counts_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixture_root(), dir.path());
    let text = fs::read_to_string(dir.path().join("episodes/single-0001.json")).unwrap();
    fs::write(dir.path().join("episodes/single-0002.json"), &text).unwrap();
    assert!(matches!(
        build_manifest(dir.path(), "dup", "1", None),
        Err(DatasetError::Manifest(_))
    ));

    let mut manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let entry = manifest["episodes"]["single-0001"].clone();
    manifest["episodes"]["single-0002"] = entry;
    manifest["episodes"]["single-0002"]["file"] = json!("episodes/single-0002.json");
    fs::write(dir.path().join("manifest.json"), manifest.to_string()).unwrap();
    let rules: BTreeSet<Rule> = validate(dir.path()).unwrap().into_iter().map(|v| v.rule).collect();
    assert!(rules.contains(&Rule::DuplicateEpisodeId), "{rules:?}");
    assert!(rules.contains(&Rule::ManifestCounts), "{rules:?}");
}

#[test]
fn rebuilt_manifest_matches_committed_one() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixture_root(), dir.path());
    let committed = Dataset::open(dir.path()).unwrap().manifest().clone();
    let rebuilt = build_manifest(dir.path(), "fixture6", "1", None).unwrap();
    assert_eq!(rebuilt, committed);
    write_manifest(dir.path(), &rebuilt).unwrap();
    assert_eq!(Dataset::open(dir.path()).unwrap().manifest(), &committed);
}

#[test]
fn sampling_the_fixture() {
    let ds = Dataset::open(fixture_root()).unwrap();
    let ids = sample(ds.manifest(), 6, 42, true).unwrap();
    assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), 6);
    assert_eq!(sample(ds.manifest(), 3, 42, false).unwrap(), sample(ds.manifest(), 3, 42, false).unwrap());
    assert!(sample(ds.manifest(), 7, 42, false).is_err());
}

#[test]
fn transcripts_round_trip_through_storage() {
    let ds = Dataset::open(fixture_root()).unwrap();
    let cfg = AgentConfig {
        max_steps: 20,
        ..AgentConfig::for_condition(Condition::PlusHistory)
    };
    let transcripts: Vec<_> = ds
        .load_all()
        .unwrap()
        .iter()
        .map(|episode| {
            let backend = GoldBackend::new(episode);
            let mut screens = ds.screens(episode);
            run_episode(
                &cfg,
                &backend,
                EpisodeInput {
                    episode_id: &episode.episode_id,
                    instruction: &episode.instruction,
                    screens: &mut screens,
                },
                &LogicalClock::default(),
                &mut DigestSink,
            )
            .unwrap()
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = store_predictions(dir.path(), "run-1", &transcripts).unwrap();
    assert_eq!(path, dir.path().join("run-1/transcripts.jsonl"));
    assert_eq!(load_predictions(&path).unwrap(), transcripts);

    // One line per step, keyed by (episode_id, step).
    let text = fs::read_to_string(&path).unwrap();
    let total_steps: usize = transcripts.iter().map(|t| t.steps.len()).sum();
    assert_eq!(text.lines().count(), total_steps);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);
    assert!(first["episode_id"].is_string());
}
