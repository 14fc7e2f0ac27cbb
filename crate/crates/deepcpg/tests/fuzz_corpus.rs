//! Replays the fuzz seed corpora through the fuzz targets' checks.

use deepcpg::checkpoint::{self, Record};
use deepcpg::config::RunConfig;
use std::path::PathBuf;

fn corpus(name: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(name);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty());
    files.into_iter().map(|p| { let b = std::fs::read(&p).unwrap(); (p, b) }).collect()
}

#[test]
fn checkpoint_seeds() {
    let mut loaded = 0;
    for (path, bytes) in corpus("checkpoint_decode") {
        let Ok(rec) = Record::decode(&bytes) else { continue };
        assert_eq!(rec.encode(), bytes, "{}", path.display());
        if let Ok(tr) = checkpoint::load_trainer(&rec) {
            assert_eq!(checkpoint::trainer_record(&tr).encode(), bytes);
            loaded += 1;
        }
    }
    assert!(loaded > 0, "corpus should hold one complete trainer checkpoint");
}

#[test]
fn config_seeds() {
    for (path, bytes) in corpus("config_parse") {
        let text = std::str::from_utf8(&bytes).unwrap();
        if let Ok(run) = RunConfig::from_toml(text) {
            let again = RunConfig::from_toml(&run.to_toml()).unwrap();
            assert_eq!(run, again, "{}", path.display());
        }
    }
}
