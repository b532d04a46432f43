#![allow(dead_code)]

use std::path::{Path, PathBuf};

use judgerank::config::RunConfig;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny")
}

pub fn fixture(name: &str) -> PathBuf {
    fixture_dir().join(name)
}

/// The fixture config with data paths pointing at the fixture files and all
/// output going to `out`. `extra` is appended verbatim.
pub fn fixture_config(out: &Path, extra: &str) -> RunConfig {
    let text = std::fs::read_to_string(fixture("config.toml"))
        .unwrap()
        .replace("output_dir = \"out\"", &format!("output_dir = {:?}", out.display().to_string()));
    RunConfig::from_toml(&format!("{text}\n{extra}"), &fixture_dir()).unwrap()
}

/// All files under `dir`, relative path and bytes, sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}
