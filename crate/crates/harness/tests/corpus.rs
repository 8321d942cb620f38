use std::fs;
use std::path::PathBuf;

use asyncflow::nn::checkpoint::{decode_checkpoint, encode_checkpoint, Sidecar};
use asyncflow::sampler::parse_trajectory_jsonl;
use asyncflow_harness::config::Config;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn config_seeds_parse_and_round_trip() {
    for (p, bytes) in seeds("config_parse") {
        let cfg = Config::parse(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(Config::parse(&cfg.to_toml()).unwrap(), cfg, "{}", p.display());
    }
}

#[test]
fn checkpoint_seeds_are_canonical() {
    for (p, bytes) in seeds("checkpoint_decode") {
        let entries = decode_checkpoint(&bytes).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(encode_checkpoint(&entries), bytes, "{}", p.display());
    }
}

#[test]
fn sidecar_seeds_parse() {
    for (p, bytes) in seeds("sidecar_json") {
        let sc: Sidecar = serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert!(sc.check("tpm").is_ok() || sc.check("field").is_ok(), "{}", p.display());
    }
}

#[test]
fn trajectory_seeds_parse() {
    for (p, bytes) in seeds("trajectory_dump_parse") {
        let (steps, _) = parse_trajectory_jsonl(std::str::from_utf8(&bytes).unwrap())
            .unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert!(steps.iter().enumerate().all(|(i, s)| s.k == i), "{}", p.display());
    }
}
