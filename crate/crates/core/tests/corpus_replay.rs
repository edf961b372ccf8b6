//! Replays the checked-in fuzz corpora through the three parser entry
//! points on stable. Every seed must return a typed result (no panics),
//! and the seeds named `valid_*` must actually parse.

use std::path::PathBuf;

use mvmrf::archive::PosteriorArchive;
use mvmrf::config::RunConfig;
use mvmrf::dataset::EnsembleCsv;

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut seeds: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("corpus dir {} missing: {e}", dir.display()))
        .map(|entry| {
            let path = entry.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read(&path).unwrap())
        })
        .collect();
    assert!(!seeds.is_empty(), "no seeds in {}", dir.display());
    seeds.sort();
    seeds
}

#[test]
fn config_corpus_parses_without_panicking() {
    let mut valid = 0;
    for (name, bytes) in corpus("fuzz_config") {
        let Ok(text) = std::str::from_utf8(&bytes) else { continue };
        let result = RunConfig::from_toml_str(text);
        if let Ok(cfg) = &result {
            let _ = cfg.validate();
            let _ = cfg.config_hash();
        }
        if name.starts_with("valid_") {
            assert!(result.is_ok(), "{name}: {result:?}");
            valid += 1;
        }
    }
    assert!(valid > 0, "corpus has no valid config seed");
}

#[test]
fn dataset_corpus_parses_without_panicking() {
    let mut valid = 0;
    for (name, bytes) in corpus("fuzz_dataset") {
        let Ok(text) = std::str::from_utf8(&bytes) else { continue };
        let result = EnsembleCsv::parse(text);
        if name.starts_with("valid_") {
            assert!(result.is_ok(), "{name}: {result:?}");
            valid += 1;
        }
    }
    assert!(valid > 0, "corpus has no valid dataset seed");
}

#[test]
fn archive_corpus_parses_without_panicking() {
    let mut valid = 0;
    for (name, bytes) in corpus("fuzz_archive") {
        let result = PosteriorArchive::from_bytes(&bytes);
        if name.starts_with("valid_") {
            assert!(result.is_ok(), "{name}: {result:?}");
            valid += 1;
        } else {
            assert!(result.is_err(), "{name} unexpectedly parsed");
        }
    }
    assert!(valid > 0, "corpus has no valid archive seed");
}
