use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};

use retarget_core::config::{ClipManifest, ExperimentConfig, ManifestEntry, Paths, PolicyConfig, RewardSpec};
use retarget_core::metrics::{aggregate, estimate_reference_contacts, evaluate_motion, write_report, MotionMetrics};
use retarget_core::morphology::{Correspondences, Morphology};
use retarget_core::refmap::{precompute_z_nom, SourceMotionClip};
use retarget_core::toy;
use retarget_core::trainer::{Checkpoint, LogRow, Trainer};
use retarget_core::Frame;

use crate::{plot, Cli, Command};

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PARAMS_FILE: &str = "params.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const PREPROCESSED_DIR: &str = "clips";
pub const RETARGETED_DIR: &str = "retargeted";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const PLOT_FILE: &str = "training.svg";

pub fn run(cli: &Cli) -> Result<()> {
    if let Command::MakeToy { dir } = &cli.command {
        return make_toy(dir);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::MakeToy { .. } => unreachable!(),
        Command::Calibrate => calibrate(&cfg),
        Command::Preprocess => preprocess(&cfg),
        Command::Train { no_bilevel } => train(&cfg, *no_bilevel, cli.checkpoint.as_deref()),
        Command::Retarget => retarget(&cfg, cli.checkpoint.as_deref()),
        Command::Eval { trajectories } => eval(&cfg, trajectories.as_deref()),
        Command::Plot { log } => {
            let log = log.clone().unwrap_or_else(|| cfg.out_dir().join(LOG_FILE));
            plot_log(&log, &cfg.out_dir().join(PLOT_FILE))
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::read(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = std::path::absolute(out).with_context(|| format!("resolving {}", out.display()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Toy experiment: the clips are written position-only so `preprocess` has
/// velocities to fill.
fn make_toy(dir: &Path) -> Result<()> {
    let clips_dir = dir.join("clips");
    create_dir(&clips_dir)?;
    let source = toy::source();
    write(&dir.join("source.json"), source.to_json())?;
    write(&dir.join("target.json"), toy::target().to_json())?;
    write(&dir.join("pairs.json"), serde_json::to_string_pretty(&toy::correspondence_pairs())?)?;
    let mut manifest = ClipManifest::default();
    for clip in toy::clips(&source)? {
        let mut file = clip.to_file();
        file.z_nom = None;
        for rec in file.frames.iter_mut().flat_map(|f| f.values_mut()) {
            rec.linvel = None;
            rec.angvel = None;
        }
        let name = format!("{}.json", clip.id);
        write(&clips_dir.join(&name), serde_json::to_string(&file)?)?;
        manifest.clips.push(ManifestEntry { path: name.into(), z_nom: None });
    }
    manifest.write(clips_dir.join(MANIFEST_FILE))?;
    toy_config().write(dir.join("retarget.toml"))?;
    println!("toy experiment written to {}", dir.display());
    Ok(())
}

pub fn toy_config() -> ExperimentConfig {
    let t = toy::train_config();
    ExperimentConfig {
        seed: t.seed,
        bilevel: t.bilevel,
        checkpoint_every: 50,
        paths: Paths {
            source: "source.json".into(),
            target: "target.json".into(),
            correspondences: "pairs.json".into(),
            clips: PathBuf::from("clips").join(MANIFEST_FILE),
            out: "out".into(),
        },
        sim: toy::sim_config(),
        ppo: t.ppo,
        env: t.env,
        update: t.update,
        bounds: t.bounds,
        loss: t.loss,
        policy: PolicyConfig {
            hidden: t.hidden,
            init_log_std: t.init_log_std,
            sampler_epsilon: t.sampler_epsilon,
        },
        reward: RewardSpec::default(),
        metrics: Default::default(),
        base_dir: PathBuf::new(),
    }
}

fn calibrate(cfg: &ExperimentConfig) -> Result<()> {
    let (source, target, pairs, cal) = cfg.load_calibration()?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    let path = out.join(CALIBRATION_FILE);
    write(&path, cal.to_json())?;
    println!("scale {:.6}", cal.scale);
    for (p, c) in pairs.resolved.iter().zip(&cal.pairs) {
        let r = retarget_core::rotmath::log_unchecked(&c.r_nom);
        println!(
            "{:>12} -> {:<12} offset [{:+.4}, {:+.4}, {:+.4}] m  rotation [{:+.4}, {:+.4}, {:+.4}] rad",
            source.body_name(p.source),
            target.body_name(p.target),
            c.x_nom.x,
            c.x_nom.y,
            c.x_nom.z,
            r.x,
            r.y,
            r.z
        );
    }
    println!("calibration written to {}", path.display());
    Ok(())
}

/// Writes each parseable clip, with velocities and its vertical offset,
/// next to a new manifest. Unreadable clips are reported and skipped.
fn preprocess(cfg: &ExperimentConfig) -> Result<()> {
    let (source, _, _, cal) = cfg.load_calibration()?;
    let manifest_path = cfg.resolve(&cfg.paths.clips);
    let manifest = ClipManifest::read(&manifest_path)?;
    let out = cfg.out_dir().join(PREPROCESSED_DIR);
    create_dir(&out)?;
    let mut written = ClipManifest::default();
    let mut failed = 0;
    for (path, clip) in manifest.load(&manifest_path)? {
        let clip = match clip.and_then(|c| precompute_z_nom(&c, &source, &cal).map(|z| (c, z))) {
            Ok((mut c, z)) => {
                c.z_nom = z;
                c
            }
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
                failed += 1;
                continue;
            }
        };
        let name = format!("{}.json", clip.id);
        clip.write_json_file(out.join(&name))?;
        println!("{:<16} {:>5} frames  z_nom {:+.4} m", clip.id, clip.len(), clip.z_nom);
        written.clips.push(ManifestEntry {
            path: name.into(),
            z_nom: Some(clip.z_nom),
        });
    }
    if written.clips.is_empty() {
        bail!("no clip of {} could be preprocessed", manifest_path.display());
    }
    let path = out.join(MANIFEST_FILE);
    written.write(&path)?;
    println!(
        "{} of {} clips written to {}",
        written.clips.len(),
        written.clips.len() + failed,
        path.display()
    );
    Ok(())
}

/// Keeps the rows of an existing log that precede `iteration`.
fn truncated_log(path: &Path, iteration: usize) -> Result<Vec<LogRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let rows = read_log(path)?;
    Ok(rows.into_iter().filter(|r| r.iteration < iteration).collect())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize().collect::<std::result::Result<_, _>>().with_context(|| format!("parsing {}", path.display()))
}

fn train(cfg: &ExperimentConfig, no_bilevel: bool, resume: Option<&Path>) -> Result<()> {
    let mut train_cfg = cfg.train_config()?;
    if no_bilevel {
        train_cfg.bilevel = false;
    }
    train_cfg.validate()?;
    let task = cfg.load_task()?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    let log_path = out.join(LOG_FILE);
    let (mut trainer, previous) = match resume {
        Some(path) => {
            // Only the iteration budget is taken from the config file.
            let mut ck = Checkpoint::read_json(path)?;
            ck.config.ppo.iterations = train_cfg.ppo.iterations;
            if ck.config != train_cfg {
                warn!("resuming with the configuration stored in {}, which differs from the config file", path.display());
            }
            let previous = truncated_log(&log_path, ck.state.iteration)?;
            (Trainer::from_checkpoint(&task, ck)?, previous)
        }
        None => (Trainer::new(&task, train_cfg)?, Vec::new()),
    };
    let mut log = csv::Writer::from_path(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    for row in &previous {
        log.serialize(row)?;
    }
    let ck_path = out.join(CHECKPOINT_FILE);
    let every = cfg.checkpoint_every;
    let total = trainer.cfg.ppo.iterations;
    info!(
        "training {} clips, {} envs, iterations {}..{}, bilevel {}",
        task.clips.len(),
        trainer.cfg.ppo.num_envs,
        trainer.state.iteration,
        total,
        trainer.cfg.bilevel
    );
    trainer.run(Some(&mut log), |tr, row| {
        let done = tr.state.iteration;
        if every > 0 && done % every == 0 && done < total {
            tr.checkpoint().write_json(&ck_path)?;
        }
        if done % 10 == 0 || done == total {
            info!(
                "iter {:>5}  reward {:8.3}  upper loss {:.4}  update {:.2e}  failures {:.2}",
                row.iteration, row.mean_reward, row.upper_loss, row.update_rate, row.failure_rate
            );
        }
        Ok(())
    })?;
    trainer.checkpoint().write_json(&ck_path)?;
    write(&out.join(PARAMS_FILE), serde_json::to_string_pretty(&trainer.state.params)?)?;
    println!("trained to iteration {}; outputs in {}", trainer.state.iteration, out.display());
    Ok(())
}

fn retarget(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<()> {
    let ck_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir().join(CHECKPOINT_FILE));
    if !ck_path.is_file() {
        bail!("checkpoint {} does not exist; run `train` first", ck_path.display());
    }
    let task = cfg.load_task()?;
    let trainer = Trainer::from_checkpoint(&task, Checkpoint::read_json(&ck_path)?)?;
    let out = cfg.out_dir().join(RETARGETED_DIR);
    create_dir(&out)?;
    let mut manifest = ClipManifest::default();
    let mut summary = csv::Writer::from_path(out.join(SUMMARY_FILE))?;
    summary.write_record(["motion", "frames", "success", "max_root_force_n"])?;
    let motions = trainer.export()?;
    for m in &motions {
        let name = format!("{}.json", m.id);
        write(&out.join(&name), serde_json::to_string(&m.to_clip_file(&task.model.morph))?)?;
        manifest.clips.push(ManifestEntry { path: name.into(), z_nom: None });
        summary.write_record([
            m.id.clone(),
            m.frames.len().to_string(),
            (!m.failed).to_string(),
            m.max_root_force().to_string(),
        ])?;
        println!(
            "{:<16} {:>5} frames  {}",
            m.id,
            m.frames.len(),
            if m.failed { "FAILED" } else { "ok" }
        );
    }
    summary.flush()?;
    manifest.write(out.join(MANIFEST_FILE))?;
    let ok = motions.iter().filter(|m| !m.failed).count();
    println!("{ok} of {} clips tracked to the end; written to {}", motions.len(), out.display());
    Ok(())
}

/// Target frames of a retargeted clip in target body order.
pub fn target_trajectory(clip: &SourceMotionClip, target: &Morphology) -> Result<Vec<Vec<Frame>>> {
    if clip.bodies.len() != target.n_bodies() {
        bail!(
            "trajectory `{}` has {} bodies, target morphology `{}` has {}",
            clip.id,
            clip.bodies.len(),
            target.name(),
            target.n_bodies()
        );
    }
    let slots = target.body_names().map(|b| clip.slot(b)).collect::<retarget_core::Result<Vec<_>>>()?;
    Ok(clip.frames.iter().map(|f| slots.iter().map(|&s| f[s]).collect()).collect())
}

/// Metrics of every trajectory, each paired with the source clip of the same id.
pub fn evaluate(cfg: &ExperimentConfig, source: &Morphology, target: &Morphology, pairs: &Correspondences, sources: &[SourceMotionClip], trajectories: &[SourceMotionClip]) -> Result<Vec<MotionMetrics>> {
    if trajectories.is_empty() {
        bail!("no trajectories to evaluate");
    }
    trajectories
        .iter()
        .map(|traj| {
            let Some(src) = sources.iter().find(|c| c.id == traj.id) else {
                bail!("trajectory `{}` has no source clip with the same id", traj.id);
            };
            let contacts = estimate_reference_contacts(src, source, &cfg.metrics)?.to_target(pairs, target);
            let frames = target_trajectory(traj, target)?;
            Ok(evaluate_motion(&traj.id, &frames, traj.fps, target, &contacts, &cfg.metrics))
        })
        .collect()
}

fn eval(cfg: &ExperimentConfig, trajectories: Option<&Path>) -> Result<()> {
    let manifest_path = trajectories
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir().join(RETARGETED_DIR).join(MANIFEST_FILE));
    let (source, target, pairs) = cfg.load_morphologies()?;
    let sources = cfg.load_clips()?;
    let trajs = ClipManifest::read(&manifest_path)?
        .load(&manifest_path)?
        .into_iter()
        .map(|(_, c)| c)
        .collect::<retarget_core::Result<Vec<_>>>()?;
    let reports = evaluate(cfg, &source, &target, &pairs, &sources, &trajs)?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    let mut csv_text = Vec::new();
    write_report(&mut csv_text, &reports)?;
    write(&out.join(METRICS_CSV), &csv_text)?;
    let stats = aggregate(&reports)?;
    let summary = serde_json::json!({
        "motions": reports,
        "aggregate": MotionMetrics::COLUMNS.iter().zip(stats).map(|(c, s)| (c.to_string(), s)).collect::<std::collections::BTreeMap<_, _>>(),
    });
    write(&out.join(METRICS_JSON), serde_json::to_string_pretty(&summary)?)?;
    print!("{}", String::from_utf8_lossy(&csv_text));
    Ok(())
}

fn plot_log(log: &Path, out: &Path) -> Result<()> {
    let rows = read_log(log)?;
    if rows.is_empty() {
        bail!("training log {} has no rows", log.display());
    }
    if let Some(dir) = out.parent() {
        create_dir(dir)?;
    }
    plot::training_curves(&rows, out)?;
    println!("plot written to {}", out.display());
    Ok(())
}
