//! The experiment commands. Each writes into its own content-addressed
//! directory under the output root and returns that directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use asyncflow::eval::{evaluate as eval_batch, reference_stats, rollout_batch, Evaluation, Mode};
use asyncflow::flow::{pretrain_field as fit_field, AnalyticField, Condition, LearnedField, VelocityField};
use asyncflow::grpo::{train_tpm as run_grpo, TrainSetup};
use asyncflow::nn::checkpoint::{read_checkpoint, read_sidecar, write_checkpoint, write_sidecar, RngState, Sidecar};
use asyncflow::nn::{AdamConfig, AdamState, ParameterStore};
use asyncflow::rewards::{fmt_f64, metric_condition_alignment, metric_noise_penalty, ScoreStats};
use asyncflow::rng::{Domain, Streams};
use asyncflow::sampler::{
    sample_async, sample_sync, write_trajectory_jsonl, BoundMode, RatioSource, SamplerConfig, VelocityScale,
};
use asyncflow::tpm::Tpm;
use asyncflow::{Error, Result};
use serde_json::json;

use crate::config::{Config, FieldKind};
use crate::output::{csv_writer, floats, run_dir, write_chart, RunKey, Series};

const RNG_ALGORITHM: &str = "chacha20";
const FORMAT: &str = "AFCKPT1";

/// Checkpoint inputs shared by the commands. Paths point at `.ckpt` files;
/// sidecars and optimizer state are found next to them.
#[derive(Clone, Debug, Default)]
pub struct Inputs {
    pub field: Option<PathBuf>,
    pub tpm: Option<PathBuf>,
    pub lifted_tpm: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DumpOptions {
    /// Which rollout of the evaluation batch to record.
    pub index: u64,
    pub class: Option<usize>,
    pub stochastic: bool,
}

pub fn optimizer_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("opt.ckpt")
}

fn key_inputs(key: &mut RunKey, label: &str, ckpt: Option<&Path>) -> Result<()> {
    if let Some(p) = ckpt {
        key.add_file(label, p)?;
        key.add_file(&format!("{label}.sidecar"), &asyncflow::nn::checkpoint::sidecar_path(p))?;
        let opt = optimizer_path(p);
        if opt.exists() {
            key.add_file(&format!("{label}.optimizer"), &opt)?;
        }
    }
    Ok(())
}

fn save_state(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    store: &ParameterStore,
    opt: &AdamState,
    seed: u64,
    next_iteration: u64,
) -> Result<()> {
    write_checkpoint(path, &store.to_named())?;
    write_checkpoint(&optimizer_path(path), &opt.to_named(store))?;
    let sidecar = Sidecar {
        format: FORMAT.into(),
        version: asyncflow::nn::checkpoint::SIDECAR_VERSION,
        kind: kind.into(),
        config,
        rng: RngState { algorithm: RNG_ALGORITHM.into(), seed, next_iteration },
        optimizer: Some(opt.cfg),
        optimizer_step: opt.step,
    };
    write_sidecar(path, &sidecar)
}

fn load_sidecar(path: &Path, kind: &str, expected: &serde_json::Value, key: &str) -> Result<Sidecar> {
    if !path.exists() {
        return Err(Error::usage(format!("checkpoint {} does not exist", path.display())));
    }
    let sc = read_sidecar(path)?;
    sc.check(kind)?;
    if sc.rng.algorithm != RNG_ALGORITHM {
        return Err(Error::Version(format!("unknown generator {:?}", sc.rng.algorithm)));
    }
    if sc.config.get(key) != expected.get(key) {
        return Err(Error::Version(format!(
            "{} was written for a different {kind} configuration",
            path.display()
        )));
    }
    Ok(sc)
}

fn field_identity(cfg: &Config) -> serde_json::Value {
    json!({ "field": cfg.field_config(), "target": cfg.target })
}

fn tpm_identity(cfg: &Config) -> serde_json::Value {
    json!({ "tpm": cfg.tpm_config(), "sampler": cfg.sampler_config() })
}

pub enum Field {
    Analytic(AnalyticField),
    Learned(LearnedField),
}

impl Field {
    pub fn as_dyn(&self) -> &dyn VelocityField {
        match self {
            Field::Analytic(f) => f,
            Field::Learned(f) => f,
        }
    }
}

pub fn load_field(cfg: &Config, path: Option<&Path>) -> Result<Field> {
    match (cfg.field.kind, path) {
        (FieldKind::Analytic, None) => Ok(Field::Analytic(AnalyticField::new(cfg.target.clone())?)),
        (FieldKind::Analytic, Some(_)) => {
            Err(Error::usage("a field checkpoint was given but the configured field is analytic"))
        }
        (FieldKind::Learned, None) => Err(Error::usage("the configured field is learned; pass --field")),
        (FieldKind::Learned, Some(p)) => {
            let identity = field_identity(cfg);
            load_sidecar(p, "field", &identity, "field")?;
            let sc = read_sidecar(p)?;
            if sc.config.get("target") != identity.get("target") {
                return Err(Error::Version(format!("{} was trained on a different target", p.display())));
            }
            let mut f = LearnedField::init(cfg.field_config(), &Streams::new(cfg.seed))?;
            f.load(&read_checkpoint(p)?)?;
            Ok(Field::Learned(f))
        }
    }
}

/// Loads a predictor checkpoint; the returned bound is the one it was
/// trained under.
pub fn load_tpm(cfg: &Config, path: &Path) -> Result<(Tpm, Sidecar)> {
    let sc = load_sidecar(path, "tpm", &tpm_identity(cfg), "tpm")?;
    let mut tpm = Tpm::init(cfg.tpm_config(), &Streams::new(sc.rng.seed))?;
    tpm.load(&read_checkpoint(path)?)?;
    Ok((tpm, sc))
}

fn trained_bound(sc: &Sidecar) -> Result<BoundMode> {
    let s: SamplerConfig = serde_json::from_value(
        sc.config.get("sampler").cloned().ok_or_else(|| Error::format("predictor sidecar lacks sampler settings"))?,
    )?;
    Ok(s.bound)
}

fn base_key(command: &str, cfg: &Config, inputs: &Inputs) -> Result<RunKey> {
    let mut key = RunKey::new(command, &cfg.to_toml());
    key_inputs(&mut key, "field", inputs.field.as_deref())?;
    key_inputs(&mut key, "tpm", inputs.tpm.as_deref())?;
    key_inputs(&mut key, "lifted_tpm", inputs.lifted_tpm.as_deref())?;
    key_inputs(&mut key, "resume", inputs.resume.as_deref())?;
    Ok(key)
}

pub fn pretrain_field(cfg: &Config, out: &Path, inputs: &Inputs) -> Result<PathBuf> {
    let dir = run_dir(out, "pretrain-field", base_key("pretrain-field", cfg, inputs)?)?;
    let streams = Streams::new(cfg.seed);
    let mut field = LearnedField::init(cfg.field_config(), &streams)?;
    let adam = AdamConfig::with_lr(cfg.field_train.lr);
    let (mut opt, start) = match &inputs.resume {
        None => (AdamState::new(adam, field.store())?, 0),
        Some(p) => {
            let sc = load_sidecar(p, "field", &field_identity(cfg), "field")?;
            if sc.rng.seed != cfg.seed {
                return Err(Error::usage(format!("resume seed {} differs from configured seed {}", sc.rng.seed, cfg.seed)));
            }
            field.load(&read_checkpoint(p)?)?;
            let opt = AdamState::from_named(adam, sc.optimizer_step, field.store(), &read_checkpoint(&optimizer_path(p))?)?;
            (opt, sc.rng.next_iteration)
        }
    };
    if start > cfg.field_train.iterations {
        return Err(Error::usage("checkpoint is already past the configured iteration count"));
    }
    let log = fit_field(&mut field, &cfg.target, &cfg.field_train, &streams, &mut opt, start, |e, _, _| {
        if (e.iter + 1) % 100 == 0 {
            log::info!("field iteration {} loss {:.6e}", e.iter + 1, e.loss);
        }
        Ok(())
    })?;
    let ckpt = dir.join("field.ckpt");
    save_state(&ckpt, "field", field_identity(cfg), field.store(), &opt, cfg.seed, cfg.field_train.iterations)?;
    let mut w = csv_writer(&dir.join("loss.csv"))?;
    w.write_record(["iter", "loss"])?;
    for e in &log {
        w.write_record([e.iter.to_string(), fmt_f64(e.loss)])?;
    }
    w.flush()?;
    let pts = log.iter().map(|e| (e.iter as f64, e.loss.max(1e-300).log10())).collect();
    write_chart(&dir.join("loss.svg"), "Field training loss", "iteration", "log10 loss", &[Series::new("loss", pts)])?;
    Ok(dir)
}

pub fn train_tpm(cfg: &Config, out: &Path, inputs: &Inputs) -> Result<PathBuf> {
    let field = load_field(cfg, inputs.field.as_deref())?;
    let dir = run_dir(out, "train-tpm", base_key("train-tpm", cfg, inputs)?)?;
    let streams = Streams::new(cfg.seed);
    let mut tpm = Tpm::init(cfg.tpm_config(), &streams)?;
    let adam = AdamConfig::with_lr(cfg.train.lr);
    let (mut opt, start) = match &inputs.resume {
        None => (AdamState::new(adam, tpm.store())?, 0),
        Some(p) => {
            let sc = load_sidecar(p, "tpm", &tpm_identity(cfg), "tpm")?;
            if sc.rng.seed != cfg.seed {
                return Err(Error::usage(format!("resume seed {} differs from configured seed {}", sc.rng.seed, cfg.seed)));
            }
            tpm.load(&read_checkpoint(p)?)?;
            let opt = AdamState::from_named(adam, sc.optimizer_step, tpm.store(), &read_checkpoint(&optimizer_path(p))?)?;
            (opt, sc.rng.next_iteration)
        }
    };
    if start > cfg.train.iterations {
        return Err(Error::usage("checkpoint is already past the configured iteration count"));
    }
    let grid = cfg.grid()?;
    let sampler = cfg.sampler_config();
    let eval_streams = Streams::new(cfg.eval.seeds[0]);
    let reference =
        reference_stats(field.as_dyn(), &grid, &sampler, &cfg.reward, &cfg.target, cfg.eval.rollouts, &eval_streams)?;
    let setup = TrainSetup {
        field: field.as_dyn(),
        target: &cfg.target,
        grid: &grid,
        sampler,
        reward: &cfg.reward,
        reference: Some(&reference),
    };
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut log_file = std::io::BufWriter::new(fs::File::create(dir.join("train_log.jsonl"))?);
    let identity = tpm_identity(cfg);
    let every = cfg.train.checkpoint_every;
    let report = run_grpo(&setup, &mut tpm, &mut opt, &cfg.train, &streams, start, |e, tpm, opt| {
        serde_json::to_writer(&mut log_file, e)?;
        log_file.write_all(b"\n")?;
        let done = e.iter + 1;
        if every > 0 && done % every == 0 && done < cfg.train.iterations {
            let p = ckpt_dir.join(format!("tpm-{done:06}.ckpt"));
            save_state(&p, "tpm", identity.clone(), tpm.store(), opt, cfg.seed, done)?;
        }
        if done % 50 == 0 {
            log::info!(
                "iteration {done}: reward {:.4} deviation {:.4} clip {:.3}",
                e.mean_reward,
                e.mean_deviation,
                e.clip_fraction
            );
        }
        Ok(())
    })?;
    log_file.flush()?;
    drop(log_file);
    save_state(&dir.join("tpm.ckpt"), "tpm", identity, tpm.store(), &opt, cfg.seed, cfg.train.iterations)?;
    fs::write(dir.join("warnings.txt"), report.warnings.iter().map(|w| format!("{w}\n")).collect::<String>())?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let series = |f: fn(&asyncflow::grpo::IterLog) -> f64, name: &str| {
        Series::new(name, report.log.iter().map(|e| (e.iter as f64, f(e))).collect())
    };
    write_chart(
        &dir.join("training.svg"),
        "Predictor training",
        "iteration",
        "value",
        &[series(|e| e.mean_reward, "mean reward"), series(|e| e.mean_deviation, "mean deviation")],
    )?;
    Ok(dir)
}

struct Scored {
    eval: Evaluation,
    reference: ScoreStats,
}

fn score(
    cfg: &Config,
    field: &dyn VelocityField,
    mode: Mode<'_>,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Scored> {
    let grid = cfg.grid()?;
    let streams = Streams::new(seed);
    let base = cfg.sampler_config();
    let reference = reference_stats(field, &grid, &base, &cfg.reward, &cfg.target, cfg.eval.rollouts, &streams)?;
    let trajs = rollout_batch(field, mode, &grid, sampler, cfg.target.classes(), cfg.eval.rollouts, &streams)?;
    Ok(Scored { eval: eval_batch(trajs, &cfg.reward, &cfg.target, &reference)?, reference })
}

fn summary_header(cfg: &Config, lead: &[&str]) -> Vec<String> {
    let mut h: Vec<String> = lead.iter().map(|s| s.to_string()).collect();
    h.extend(["rollouts".into(), "composite".into()]);
    h.extend(cfg.reward.column_names().into_iter().map(|n| format!("mean_{n}")));
    h.extend(["mean_deviation".into(), "mean_abs_deviation".into()]);
    h
}

fn summary_fields(e: &Evaluation) -> Vec<String> {
    let s = &e.summary;
    let mut r = vec![s.rollouts.to_string(), fmt_f64(s.composite)];
    r.extend(floats(&s.metric_means));
    r.extend([fmt_f64(s.mean_deviation), fmt_f64(s.mean_abs_deviation)]);
    r
}

fn policy_mode(tpm: &Tpm) -> Mode<'_> {
    Mode::Async(RatioSource::Policy { policy: tpm, stochastic: false })
}

pub fn evaluate(cfg: &Config, out: &Path, inputs: &Inputs) -> Result<PathBuf> {
    let field = load_field(cfg, inputs.field.as_deref())?;
    let tpm = inputs.tpm.as_deref().map(|p| load_tpm(cfg, p)).transpose()?;
    let dir = run_dir(out, "evaluate", base_key("evaluate", cfg, inputs)?)?;
    let sampler = cfg.sampler_config();
    let (label, mode) = match &tpm {
        Some((t, _)) => ("async", policy_mode(t)),
        None => ("sync", Mode::Sync),
    };
    let mut w = csv_writer(&dir.join("summary.csv"))?;
    w.write_record(summary_header(cfg, &["seed", "mode"]))?;
    for &seed in &cfg.eval.seeds {
        let s = score(cfg, field.as_dyn(), mode, &sampler, seed)?;
        let mut row = vec![seed.to_string(), label.to_string()];
        row.extend(summary_fields(&s.eval));
        w.write_record(&row)?;
        let z = s.reference.normalize(&s.eval.raw, cfg.reward.eps_z)?;
        let audit = fs::File::create(dir.join(format!("samples-{seed}.csv")))?;
        asyncflow::rewards::write_audit_csv(&cfg.reward, &s.eval.raw, &z, audit)?;
    }
    w.flush()?;
    Ok(dir)
}

pub fn sweep_gamma(cfg: &Config, out: &Path, inputs: &Inputs) -> Result<PathBuf> {
    if cfg.sweep.gammas.is_empty() {
        return Err(Error::usage("the gamma list is empty"));
    }
    let path = inputs.tpm.as_deref().ok_or_else(|| Error::usage("sweep-gamma needs --tpm"))?;
    let field = load_field(cfg, inputs.field.as_deref())?;
    let (tpm, _) = load_tpm(cfg, path)?;
    let lifted = match inputs.lifted_tpm.as_deref() {
        Some(p) => {
            let mut lifted_cfg = cfg.clone();
            lifted_cfg.sampler.bound = BoundMode::Lifted;
            let (t, sc) = load_tpm(&lifted_cfg, p)?;
            if trained_bound(&sc)? != BoundMode::Lifted {
                return Err(Error::usage(format!("{} was not trained under the lifted bound", p.display())));
            }
            Some(t)
        }
        None => None,
    };
    let dir = run_dir(out, "sweep-gamma", base_key("sweep-gamma", cfg, inputs)?)?;
    let mut w = csv_writer(&dir.join("sweep.csv"))?;
    w.write_record(summary_header(cfg, &["gamma", "bound", "seed"]))?;
    let names = cfg.reward.column_names();
    let mut curves: Vec<Vec<Series>> = (0..names.len() + 1).map(|_| Vec::new()).collect();
    for &seed in &cfg.eval.seeds {
        let mut pts: Vec<Vec<(f64, f64)>> = vec![Vec::new(); names.len() + 1];
        for &gamma in &cfg.sweep.gammas {
            let sampler = SamplerConfig { gamma, ..cfg.sampler_config() };
            let s = score(cfg, field.as_dyn(), policy_mode(&tpm), &sampler, seed)?;
            let mut row = vec![fmt_f64(gamma), "standard".into(), seed.to_string()];
            row.extend(summary_fields(&s.eval));
            w.write_record(&row)?;
            pts[0].push((gamma, s.eval.summary.composite));
            for (j, m) in s.eval.summary.metric_means.iter().enumerate() {
                pts[j + 1].push((gamma, *m));
            }
        }
        if let Some(t) = &lifted {
            let sampler = SamplerConfig { bound: BoundMode::Lifted, ..cfg.sampler_config() };
            let s = score(cfg, field.as_dyn(), policy_mode(t), &sampler, seed)?;
            let mut row = vec![fmt_f64(sampler.gamma), "lifted".into(), seed.to_string()];
            row.extend(summary_fields(&s.eval));
            w.write_record(&row)?;
        }
        for (c, p) in curves.iter_mut().zip(pts) {
            c.push(Series::new(format!("seed {seed}"), p));
        }
    }
    w.flush()?;
    let mut titles = vec!["composite".to_string()];
    titles.extend(names);
    for (title, series) in titles.iter().zip(&curves) {
        write_chart(&dir.join(format!("sweep-{title}.svg")), &format!("{title} against gamma"), "gamma", title, series)?;
    }
    Ok(dir)
}

/// Mean raw noise penalty and alignment of a batch, whether or not the
/// reward uses them.
fn side_metrics(cfg: &Config, e: &Evaluation) -> Result<(f64, f64)> {
    let n = e.trajectories.len() as f64;
    let (mut noise, mut align) = (0.0, 0.0);
    for t in &e.trajectories {
        noise += metric_noise_penalty(&t.sample)?;
        align += metric_condition_alignment(&t.sample, t.cond, &cfg.target.means)?;
    }
    Ok((noise / n, align / n))
}

pub fn compare_alternative(cfg: &Config, out: &Path, inputs: &Inputs) -> Result<PathBuf> {
    let field = load_field(cfg, inputs.field.as_deref())?;
    let dir = run_dir(out, "compare-alternative", base_key("compare-alternative", cfg, inputs)?)?;
    let base = cfg.sampler_config();
    let mut w = csv_writer(&dir.join("comparison.csv"))?;
    w.write_record(["mode", "knob", "composite", "noise_penalty", "alignment"])?;
    let seeds = cfg.eval.seeds.len() as f64;
    let mut run = |mode: Mode<'_>, label: &str, knob: f64| -> Result<(f64, f64)> {
        let (mut comp, mut noise, mut align) = (0.0, 0.0, 0.0);
        for &seed in &cfg.eval.seeds {
            let s = score(cfg, field.as_dyn(), mode, &base, seed)?;
            let (n, a) = side_metrics(cfg, &s.eval)?;
            comp += s.eval.summary.composite / seeds;
            noise += n / seeds;
            align += a / seeds;
        }
        w.write_record([label.to_string(), fmt_f64(knob), fmt_f64(comp), fmt_f64(noise), fmt_f64(align)])?;
        Ok((knob, noise))
    };
    let (mut alt, mut asy) = (Vec::new(), Vec::new());
    for &scale in &cfg.alternative.scales {
        alt.push(run(Mode::Alternative(VelocityScale::Constant(scale)), "alternative", scale)?);
        // Matched deviation: the alternative at scale w deviates by w - 1.
        let d = scale - 1.0;
        let r = match base.bound {
            BoundMode::Standard => 0.5 + d / base.gamma,
            BoundMode::Lifted => 0.5 + d / (2.0 * base.gamma),
        };
        if base.gamma > 0.0 && (0.0..=1.0).contains(&r) {
            let (_, noise) = run(Mode::Async(RatioSource::Fixed(r)), "async", d)?;
            asy.push((scale, noise));
        } else {
            log::warn!("deviation {d} is outside the async bound; skipped");
        }
    }
    w.flush()?;
    write_chart(
        &dir.join("comparison.svg"),
        "Noise penalty at matched deviation",
        "1 + deviation",
        "noise penalty",
        &[Series::new("velocity scaling", alt), Series::new("async", asy)],
    )?;
    Ok(dir)
}

pub fn dump_trajectory(cfg: &Config, out: &Path, inputs: &Inputs, opts: DumpOptions) -> Result<PathBuf> {
    let field = load_field(cfg, inputs.field.as_deref())?;
    let tpm = inputs.tpm.as_deref().map(|p| load_tpm(cfg, p)).transpose()?;
    let mut key = base_key("dump-trajectory", cfg, inputs)?;
    key.add("options", format!("{opts:?}").as_bytes());
    let dir = run_dir(out, "dump-trajectory", key)?;
    let grid = cfg.grid()?;
    let sampler = cfg.sampler_config();
    let classes = cfg.target.classes();
    let class = opts.class.unwrap_or(opts.index as usize % classes);
    if class >= classes {
        return Err(Error::usage(format!("class {class} out of range for {classes} classes")));
    }
    let mut rng = Streams::new(cfg.seed).stream(Domain::Evaluation, opts.index);
    let c = Condition::Class(class);
    let traj = match &tpm {
        Some((t, _)) => sample_async(
            field.as_dyn(),
            RatioSource::Policy { policy: t, stochastic: opts.stochastic },
            &grid,
            c,
            &sampler,
            &mut rng,
        )?,
        None => sample_sync(field.as_dyn(), &grid, c, &sampler, &mut rng)?,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join("trajectory.jsonl"))?);
    write_trajectory_jsonl(&traj, &sampler, &grid, &mut f)?;
    f.flush()?;
    let pts = traj.steps.iter().map(|s| (s.k as f64, s.deviation)).collect();
    write_chart(&dir.join("deviation.svg"), "Per-step deviation", "step", "deviation", &[Series::new("deviation", pts)])?;
    Ok(dir)
}
