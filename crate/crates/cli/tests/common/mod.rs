#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use screennav_cli::commands;
use screennav_cli::config::{BackendKind, ConfigFile, RunConfig, RunOverrides};
use serde_json::Value;

pub fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/dataset/fixture6")
}

pub fn run_config(dataset: &Path, out: &Path, backend: BackendKind, run_id: &str) -> RunConfig {
    let flags = RunOverrides {
        dataset: Some(dataset.to_path_buf()),
        backend: Some(backend),
        out: Some(out.to_path_buf()),
        run_id: Some(run_id.to_string()),
        // The longest fixture episode has 11 steps.
        max_steps: Some(20),
        ..Default::default()
    };
    RunConfig::resolve(flags, &ConfigFile::default()).unwrap()
}

/// Gold run over `dataset`; returns the run directory.
pub fn gold_run(dataset: &Path, out: &Path, run_id: &str) -> PathBuf {
    let outcome = commands::run(&run_config(dataset, out, BackendKind::Gold, run_id), false).unwrap();
    assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
    outcome.run_dir
}

/// A dataset of `n` one-step iOS episodes built from the first step of a
/// fixture episode, indexed through the CLI.
pub fn one_step_dataset(root: &Path, n: usize) -> PathBuf {
    let src = fixture();
    let template: Value =
        serde_json::from_str(&fs::read_to_string(src.join("episodes/single-0001.json")).unwrap()).unwrap();
    let step = template["steps"][0].clone();
    let shot = step["screenshot"].as_str().unwrap().to_string();
    fs::create_dir_all(root.join("episodes")).unwrap();
    fs::create_dir_all(root.join(&shot).parent().unwrap()).unwrap();
    fs::copy(src.join(&shot), root.join(&shot)).unwrap();
    for i in 0..n {
        let id = format!("ios-{i:03}");
        let episode = serde_json::json!({
            "episode_id": id,
            "instruction": format!("Task number {i}"),
            "category": "ios",
            "steps": [step],
        });
        fs::write(root.join(format!("episodes/{id}.json")), serde_json::to_string_pretty(&episode).unwrap()).unwrap();
    }
    commands::index(root, Some("one-step"), None).unwrap();
    root.to_path_buf()
}
