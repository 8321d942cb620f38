use std::fs;
use std::path::Path;
use std::process::Command;

use asyncflow::nn::checkpoint::read_checkpoint;
use asyncflow::rewards::Metric;
use asyncflow::sampler::{parse_trajectory_jsonl, pseudo_timestep, BoundMode};
use asyncflow::Error;
use asyncflow_harness::commands::{self, DumpOptions, Inputs};
use asyncflow_harness::config::{Config, FieldKind};
use asyncflow_harness::exit_code;

fn tiny() -> Config {
    let mut cfg = Config::parse(include_str!("../../../configs/oracle.toml")).unwrap();
    cfg.train.iterations = 4;
    cfg.train.checkpoint_every = 2;
    cfg.eval.rollouts = 16;
    cfg.eval.seeds = vec![42, 5];
    cfg.tpm.layers = 1;
    cfg.tpm.width = 8;
    cfg.tpm.ffn = 16;
    cfg.tpm.heads = 2;
    cfg.tpm.head_hidden = 8;
    cfg.field.hidden = 16;
    cfg.field.layers = 2;
    cfg.field_train.iterations = 120;
    cfg.field_train.batch = 32;
    cfg.field_train.lr = 3e-3;
    cfg
}

fn learned(cfg: &Config) -> Config {
    let mut c = cfg.clone();
    c.field.kind = FieldKind::Learned;
    c
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let h = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (h, rows)
}

#[test]
fn shipped_configs_parse_and_round_trip() {
    for text in [include_str!("../../../configs/oracle.toml"), include_str!("../../../configs/lifted.toml")] {
        let c = Config::parse(text).unwrap();
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
        assert!(matches!(c.reward.metrics[0], Metric::DetailBand { .. }));
    }
}

#[test]
fn train_smoke_writes_log_and_checkpoints() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.iterations = 5;
    let dir = commands::train_tpm(&cfg, out.path(), &Inputs::default()).unwrap();
    let log = fs::read_to_string(dir.join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["iter"], i as u64);
        for k in ["mean_reward", "mean_deviation", "clip_fraction", "grad_norm", "lr"] {
            assert!(l[k].is_f64(), "{k}");
        }
    }
    // Zero read-out: the first group is sampled around r = 0.5.
    assert!(lines[0]["mean_deviation"].as_f64().unwrap().abs() < 0.1);
    assert!(!read_checkpoint(&dir.join("tpm.ckpt")).unwrap().is_empty());
    assert!(dir.join("checkpoints/tpm-000002.ckpt").exists());
    assert!(dir.join("checkpoints/tpm-000004.ckpt").exists());
    assert!(fs::read_to_string(dir.join("training.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn learned_field_is_required_when_configured() {
    let out = tempfile::tempdir().unwrap();
    let cfg = learned(&tiny());
    let err = commands::train_tpm(&cfg, out.path(), &Inputs::default()).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
    assert_eq!(exit_code(&err), 2);
    let missing = Inputs { field: Some(out.path().join("nope.ckpt")), ..Inputs::default() };
    assert!(matches!(commands::evaluate(&cfg, out.path(), &missing), Err(Error::Usage(_))));
}

#[test]
fn pretrain_resume_matches_uninterrupted_run() {
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let full = commands::pretrain_field(&cfg, &out.path().join("full"), &Inputs::default()).unwrap();
    let mut short = cfg.clone();
    short.field_train.iterations = 100;
    let first = commands::pretrain_field(&short, &out.path().join("part"), &Inputs::default()).unwrap();
    let resumed = commands::pretrain_field(
        &cfg,
        &out.path().join("part"),
        &Inputs { resume: Some(first.join("field.ckpt")), ..Inputs::default() },
    )
    .unwrap();
    for f in ["field.ckpt", "field.opt.ckpt", "field.json"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(resumed.join(f)).unwrap(), "{f}");
    }
    let (_, rows) = csv_rows(&full.join("loss.csv"));
    assert_eq!(rows.len(), 120);
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap() > 0.0));
}

#[test]
fn tpm_resume_matches_uninterrupted_run() {
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let full = commands::train_tpm(&cfg, out.path(), &Inputs::default()).unwrap();
    let mid = full.join("checkpoints/tpm-000002.ckpt");
    let resumed = commands::train_tpm(&cfg, &out.path().join("again"), &Inputs { resume: Some(mid), ..Inputs::default() })
        .unwrap();
    for f in ["tpm.ckpt", "tpm.opt.ckpt", "tpm.json"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(resumed.join(f)).unwrap(), "{f}");
    }
    let full_log = fs::read_to_string(full.join("train_log.jsonl")).unwrap();
    let tail: Vec<&str> = full_log.lines().skip(2).collect();
    assert_eq!(fs::read_to_string(resumed.join("train_log.jsonl")).unwrap().lines().collect::<Vec<_>>(), tail);
}

#[test]
fn incompatible_checkpoint_is_a_version_error() {
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let t = commands::train_tpm(&cfg, out.path(), &Inputs::default()).unwrap();
    let mut other = cfg.clone();
    other.tpm.width = 12;
    other.tpm.heads = 3;
    let err = commands::evaluate(&other, out.path(), &Inputs { tpm: Some(t.join("tpm.ckpt")), ..Inputs::default() })
        .unwrap_err();
    assert!(matches!(err, Error::Version(_)), "{err}");
    assert_eq!(exit_code(&err), 2);
}

#[test]
fn async_at_zero_gamma_matches_sync_evaluation() {
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let t = commands::train_tpm(&cfg, out.path(), &Inputs::default()).unwrap();
    let sync = commands::evaluate(&cfg, out.path(), &Inputs::default()).unwrap();
    let mut sweep_cfg = cfg.clone();
    sweep_cfg.sweep.gammas = vec![0.0];
    let sweep = commands::sweep_gamma(&sweep_cfg, out.path(), &Inputs { tpm: Some(t.join("tpm.ckpt")), ..Inputs::default() })
        .unwrap();
    let (sh, srows) = csv_rows(&sync.join("summary.csv"));
    let (wh, wrows) = csv_rows(&sweep.join("sweep.csv"));
    assert_eq!(srows.len(), 2);
    assert_eq!(wrows.len(), 2);
    for (s, w) in srows.iter().zip(&wrows) {
        for (i, col) in sh.iter().enumerate().skip(2) {
            let j = wh.iter().position(|h| h == col).unwrap();
            assert_eq!(s[i], w[j], "{col}");
        }
    }
    let again = fs::read(sync.join("summary.csv")).unwrap();
    let rerun = commands::evaluate(&cfg, &out.path().join("rerun"), &Inputs::default()).unwrap();
    assert_eq!(again, fs::read(rerun.join("summary.csv")).unwrap());
    assert!(sync.join("samples-42.csv").exists() && sync.join("samples-5.csv").exists());
}

#[test]
fn sweep_rows_and_lifted_comparator() {
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let standard = commands::train_tpm(&cfg, out.path(), &Inputs::default()).unwrap();
    let mut lifted_cfg = cfg.clone();
    lifted_cfg.sampler.bound = BoundMode::Lifted;
    let lifted = commands::train_tpm(&lifted_cfg, out.path(), &Inputs::default()).unwrap();
    let inputs = Inputs {
        tpm: Some(standard.join("tpm.ckpt")),
        lifted_tpm: Some(lifted.join("tpm.ckpt")),
        ..Inputs::default()
    };
    let dir = commands::sweep_gamma(&cfg, out.path(), &inputs).unwrap();
    let (h, rows) = csv_rows(&dir.join("sweep.csv"));
    assert_eq!(&h[..3], ["gamma", "bound", "seed"]);
    assert_eq!(rows.len(), cfg.sweep.gammas.len() * 2 + 2);
    assert_eq!(rows.iter().filter(|r| r[1] == "lifted").count(), 2);
    assert!(dir.join("sweep-composite.svg").exists());

    // A standard checkpoint cannot pose as the lifted comparator.
    let wrong = Inputs { lifted_tpm: Some(standard.join("tpm.ckpt")), ..inputs.clone() };
    assert!(commands::sweep_gamma(&cfg, out.path(), &wrong).is_err());
    let mut empty = cfg.clone();
    empty.sweep.gammas.clear();
    assert!(matches!(commands::sweep_gamma(&empty, out.path(), &inputs), Err(Error::Usage(_))));
}

#[test]
fn comparison_schema_and_unit_scale_anchor() {
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let dir = commands::compare_alternative(&cfg, out.path(), &Inputs::default()).unwrap();
    let (h, rows) = csv_rows(&dir.join("comparison.csv"));
    assert_eq!(h, ["mode", "knob", "composite", "noise_penalty", "alignment"]);
    let unit = rows.iter().find(|r| r[0] == "alternative" && r[1].parse::<f64>().unwrap() == 1.0).unwrap();
    let zero = rows.iter().find(|r| r[0] == "async" && r[1].parse::<f64>().unwrap() == 0.0).unwrap();
    // Unit scaling and zero deviation are both the synchronous sampler.
    assert_eq!(unit[2..], zero[2..]);
    assert!(unit[2].parse::<f64>().unwrap().abs() < 1e-9);
}

#[test]
fn dump_records_steps_and_rederives_query_times() {
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let t = commands::train_tpm(&cfg, out.path(), &Inputs::default()).unwrap();
    let inputs = Inputs { tpm: Some(t.join("tpm.ckpt")), ..Inputs::default() };
    let dir = commands::dump_trajectory(&cfg, out.path(), &inputs, DumpOptions { index: 2, class: Some(1), stochastic: true })
        .unwrap();
    let text = fs::read_to_string(dir.join("trajectory.jsonl")).unwrap();
    let (steps, trailer) = parse_trajectory_jsonl(&text).unwrap();
    assert_eq!(text.lines().count(), steps.len() + 1);
    assert!(!steps.is_empty() && steps.len() <= cfg.sampler.k_max);
    let sc = cfg.sampler_config();
    for s in &steps {
        assert!(s.deviation.abs() <= 0.5 * sc.gamma);
        let (t_star, _) = pseudo_timestep(s.t, s.t_next, s.ratio.unwrap(), &sc).unwrap();
        assert!((t_star - s.t_star_next).abs() <= 1e-12);
    }
    assert_eq!(trailer.grid.len(), cfg.sampler.steps + 1);
    assert!(dir.join("deviation.svg").exists());
    let bad = DumpOptions { class: Some(9), ..DumpOptions::default() };
    assert!(matches!(commands::dump_trajectory(&cfg, out.path(), &inputs, bad), Err(Error::Usage(_))));
}

#[test]
fn sync_point_target_lands_on_the_point() {
    let out = tempfile::tempdir().unwrap();
    let text = r#"
        [target]
        means = [[1.5, -0.5]]
        variances = [[0.0, 0.0]]
        weights = [1.0]

        [[reward.metrics]]
        kind = "neg-distance"

        [eval]
        rollouts = 8
        seeds = [42]
    "#;
    let cfg = Config::parse(text).unwrap();
    let dir = commands::evaluate(&cfg, out.path(), &Inputs::default()).unwrap();
    let (h, rows) = csv_rows(&dir.join("samples-42.csv"));
    let j = h.iter().position(|c| c == "raw_neg_distance_0").unwrap();
    for r in rows {
        assert!(r[j].parse::<f64>().unwrap().abs() < 1e-9, "{}", r[j]);
    }
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_asyncflow");
    let out = tempfile::tempdir().unwrap();
    let cfg_path = out.path().join("bad.toml");
    fs::write(&cfg_path, "unknown_key = 1\n").unwrap();
    let run = |args: &[&str]| Command::new(bin).args(args).output().unwrap();
    let o = run(&["--config", cfg_path.to_str().unwrap(), "evaluate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["--config", out.path().join("missing.toml").to_str().unwrap(), "evaluate"]);
    assert_eq!(o.status.code(), Some(4));
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));

    let good = out.path().join("good.toml");
    fs::write(&good, "[eval]\nrollouts = 8\nseeds = [1]\n").unwrap();
    let o = run(&["--config", good.to_str().unwrap(), "--out", out.path().to_str().unwrap(), "evaluate"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = String::from_utf8(o.stdout).unwrap();
    let dir = Path::new(dir.trim());
    assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("evaluate-"));
    assert!(dir.join("summary.csv").exists());
}
