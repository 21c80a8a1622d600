//! Experiment commands. Every CSV starts with a `# config_hash=... seed=...`
//! line and every JSON summary carries the same two fields.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use driftlab::ablation::{ablation_suite, train_preset_fields, AblationTable, Preset, PresetFields};
use driftlab::field::{Checkpoint, CheckpointMeta, VectorField};
use driftlab::metrics::{drift_report, DriftReport, Slopes};
use driftlab::sampler::{restoration_probe, rollout as run_rollout};
use driftlab::trainer::{train as run_train, TrainOutcome};
use serde::Serialize;

use crate::check::{run_checks, CheckResult, ScheduleFn};
use crate::{CliError, ExperimentConfig};

fn header(cfg: &ExperimentConfig) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), cfg.seed)
}

fn write(out: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out)?;
    let path = out.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

/// Runs the invariant suite, printing one line per check.
pub fn check(schedule: ScheduleFn) -> Result<Vec<CheckResult>, CliError> {
    let results = run_checks(schedule);
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    println!("{} checks, {} failed", results.len(), failed.len());
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::CheckFailed(failed.join(", ")))
    }
}

/// Reconstruction error over repeated round trips of the first frame of the
/// first held-out scene, next to the noiseless closed form.
pub fn roundtrip_bench(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, CliError> {
    let codec = cfg.codec()?;
    let renderer = cfg.renderer()?;
    let scene = cfg.eval_scenes(&renderer)?.swap_remove(0);
    let x = scene.render_frame(0)?;
    let curve = codec.roundtrip_error_curve(&x, cfg.bench.roundtrips)?;
    let mut csv = header(cfg);
    csv.push_str("k,error,closed_form\n");
    for (i, e) in curve.iter().enumerate() {
        let k = i + 1;
        let _ = writeln!(csv, "{k},{e},{}", codec.closed_form_error(&x, k)?);
    }
    write(out, "roundtrip.csv", &csv)
}

/// Trains one field with the configured objective and writes
/// `checkpoint.txt` and `loss.csv`.
pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome, CliError> {
    let codec = cfg.codec()?;
    let renderer = cfg.renderer()?;
    let scenes = cfg.train_scenes(&renderer)?;
    let mut field = VectorField::<f64>::new(cfg.field_shape(), cfg.field_seed())?;
    let outcome = run_train(&mut field, &scenes, &codec, &cfg.train_config())?;
    save_checkpoint(cfg, &field, out, "checkpoint.txt")?;
    write(out, "loss.csv", &loss_csv(cfg, &outcome))?;
    if let Some((first, last)) = outcome.stage_deciles(1) {
        println!("stage 1: loss {first:.5} -> {last:.5}");
    }
    if let Some((first, last)) = outcome.stage_deciles(2) {
        println!("stage 2: loss {first:.5} -> {last:.5}");
    }
    Ok(outcome)
}

fn loss_csv(cfg: &ExperimentConfig, outcome: &TrainOutcome) -> String {
    let mut csv = header(cfg);
    csv.push_str("iteration,stage,loss\n");
    for p in &outcome.loss_curve {
        let _ = writeln!(csv, "{},{},{}", p.iteration, p.stage, p.loss);
    }
    csv
}

fn save_checkpoint(cfg: &ExperimentConfig, field: &VectorField<f64>, out: &Path, name: &str) -> Result<PathBuf, CliError> {
    let meta = CheckpointMeta {
        seed: cfg.seed,
        iterations: (cfg.train.stage1_iters + cfg.train.stage2_iters) as u64,
        config_hash: cfg.hash(),
    };
    write(out, name, &field.to_checkpoint(meta).to_text())
}

/// Loads a checkpoint and checks it against the configured field shape.
pub fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<(VectorField<f64>, CheckpointMeta), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let ck = Checkpoint::from_text(&text)?;
    if ck.shape != cfg.field_shape() {
        return Err(CliError::Config(format!(
            "checkpoint shape {:?} does not match config shape {:?}",
            ck.shape,
            cfg.field_shape()
        )));
    }
    Ok((VectorField::from_checkpoint(&ck)?, ck.meta))
}

#[derive(Debug, Serialize)]
struct RunSummary {
    run_id: String,
    slopes: Slopes,
}

#[derive(Debug, Serialize)]
struct RolloutSummary {
    config_hash: String,
    seed: u64,
    checkpoint_config_hash: String,
    mode: String,
    runs: Vec<RunSummary>,
    mean_slopes: Slopes,
}

fn mean_slopes<'a>(all: impl Iterator<Item = &'a Slopes>) -> Slopes {
    let mut acc = Slopes { background_mse: 0.0, character_mse: 0.0, identity_mse: 0.0, psnr_analog: 0.0 };
    let mut n = 0usize;
    for s in all {
        acc.background_mse += s.background_mse;
        acc.character_mse += s.character_mse;
        acc.identity_mse += s.identity_mse;
        acc.psnr_analog += s.psnr_analog;
        n += 1;
    }
    let n = n.max(1) as f64;
    Slopes {
        background_mse: acc.background_mse / n,
        character_mse: acc.character_mse / n,
        identity_mse: acc.identity_mse / n,
        psnr_analog: acc.psnr_analog / n,
    }
}

fn metric_rows(csv: &mut String, run_id: &str, mode: &str, report: &DriftReport) {
    for c in &report.chunks {
        let _ = writeln!(
            csv,
            "{run_id},{mode},{},{},{},{},{}",
            c.index, c.background_mse, c.character_mse, c.identity_mse, c.psnr_analog
        );
    }
}

const METRIC_COLUMNS: &str = "run_id,mode,chunk_index,background_mse,character_mse,identity_mse,psnr_analog\n";

/// Rolls out the configured mode on every held-out scene and writes
/// `metrics.csv`, `frames.csv` and `summary.json`.
pub fn rollout(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<Vec<DriftReport>, CliError> {
    let (field, meta) = load_checkpoint(cfg, checkpoint)?;
    let codec = cfg.codec()?;
    let renderer = cfg.renderer()?;
    let scenes = cfg.eval_scenes(&renderer)?;
    let (rcfg, scfg) = (cfg.rollout_config(), cfg.sampler_config());
    let mode = rcfg.mode.name();

    let mut metrics = header(cfg);
    metrics.push_str(METRIC_COLUMNS);
    let mut frames = header(cfg);
    frames.push_str("run_id,chunk_index,frame");
    for c in 0..cfg.world.d {
        let _ = write!(frames, ",v{c}");
    }
    frames.push('\n');

    let mut reports = Vec::new();
    let mut runs = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let run_id = format!("scene{i}");
        let out = run_rollout(&field, scene, &codec, &rcfg, &scfg)?;
        let report = drift_report(&out.frames, scene)?;
        metric_rows(&mut metrics, &run_id, mode, &report);
        for (n, chunk) in out.frames.iter().enumerate() {
            for (j, f) in chunk.frames().enumerate() {
                let _ = write!(frames, "{run_id},{},{j}", n + 1);
                for v in f {
                    let _ = write!(frames, ",{v}");
                }
                frames.push('\n');
            }
        }
        runs.push(RunSummary { run_id, slopes: report.slopes.clone() });
        reports.push(report);
    }
    let summary = RolloutSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        checkpoint_config_hash: meta.config_hash,
        mode: mode.to_string(),
        mean_slopes: mean_slopes(runs.iter().map(|r| &r.slopes)),
        runs,
    };
    write(out, "metrics.csv", &metrics)?;
    write(out, "frames.csv", &frames)?;
    write(out, "summary.json", &to_json(&summary)?)?;
    println!("{mode}: mean background slope {:.6}", summary.mean_slopes.background_mse);
    Ok(reports)
}

fn to_json<S: Serialize>(v: &S) -> Result<String, CliError> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| CliError::Numeric(format!("cannot serialize summary: {e}")))
}

#[derive(Debug, Serialize)]
struct PresetSummary {
    preset: &'static str,
    mode: &'static str,
    mean_slopes: Slopes,
}

#[derive(Debug, Serialize)]
struct ProbeRow {
    scene: usize,
    fm: f64,
    rfm: f64,
}

#[derive(Debug, Serialize)]
struct AblationSummary {
    config_hash: String,
    seed: u64,
    presets: Vec<PresetSummary>,
    /// Scenes on which the full preset's background slope is at most every other preset's.
    full_leads: usize,
    probe: Vec<ProbeRow>,
    /// Scenes on which the RFM field restores perturbed states better than the FM field.
    rfm_wins: usize,
    scenes: usize,
}

/// Result of [`ablate`].
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub table: AblationTable,
    /// Per scene `(fm, rfm)` restoration-probe error.
    pub probe: Vec<(f64, f64)>,
}

impl AblationRun {
    pub fn full_leads(&self) -> usize {
        (0..self.table.scene_count()).filter(|&i| self.table.full_leads(i)).count()
    }

    pub fn rfm_wins(&self) -> usize {
        self.probe.iter().filter(|(fm, rfm)| rfm < fm).count()
    }
}

/// Compares the four presets on the held-out scenes. Without checkpoints,
/// trains the FM and RFM fields first and saves them as `fm.ckpt` and
/// `rfm.ckpt`; with only one of them given, fails with a config error.
pub fn ablate(
    cfg: &ExperimentConfig,
    fm: Option<&Path>,
    rfm: Option<&Path>,
    out: &Path,
    parallel: bool,
) -> Result<AblationRun, CliError> {
    let codec = cfg.codec()?;
    let renderer = cfg.renderer()?;
    let (fm, rfm) = match (fm, rfm) {
        (None, None) => {
            let scenes = cfg.train_scenes(&renderer)?;
            let ((fm, fm_out), (rfm, rfm_out)) =
                train_preset_fields(cfg.field_shape(), cfg.field_seed(), &scenes, &codec, &cfg.train_config())?;
            save_checkpoint(cfg, &fm, out, "fm.ckpt")?;
            save_checkpoint(cfg, &rfm, out, "rfm.ckpt")?;
            write(out, "fm_loss.csv", &loss_csv(cfg, &fm_out))?;
            write(out, "rfm_loss.csv", &loss_csv(cfg, &rfm_out))?;
            (Some(fm), Some(rfm))
        }
        (a, b) => {
            let load = |p: Option<&Path>| p.map(|p| load_checkpoint(cfg, p).map(|(f, _)| f)).transpose();
            (load(a)?, load(b)?)
        }
    };
    let fields = PresetFields { fm: fm.as_ref(), rfm: rfm.as_ref() };
    let scenes = cfg.eval_scenes(&renderer)?;
    let table = ablation_suite(fields, &scenes, &codec, &cfg.rollout_config(), &cfg.sampler_config(), parallel)?;

    let pcfg = cfg.probe_config();
    let (fm, rfm) = (fields.for_preset(Preset::Baseline)?, fields.for_preset(Preset::Full)?);
    let probe = scenes
        .iter()
        .map(|s| Ok((restoration_probe(fm, s, &codec, &pcfg)?, restoration_probe(rfm, s, &codec, &pcfg)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let run = AblationRun { table, probe };

    let mut csv = header(cfg);
    csv.push_str(&METRIC_COLUMNS.replacen("run_id", "preset,run_id", 1));
    for row in &run.table.rows {
        let mut line = String::new();
        metric_rows(&mut line, &format!("scene{}", row.scene_index), row.preset.mode().name(), &row.report);
        for l in line.lines() {
            let _ = writeln!(csv, "{},{l}", row.preset.name());
        }
    }
    let summary = AblationSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        presets: Preset::ALL
            .iter()
            .map(|&p| PresetSummary {
                preset: p.name(),
                mode: p.mode().name(),
                mean_slopes: mean_slopes(run.table.rows.iter().filter(|r| r.preset == p).map(|r| &r.report.slopes)),
            })
            .collect(),
        full_leads: run.full_leads(),
        probe: run
            .probe
            .iter()
            .enumerate()
            .map(|(scene, &(fm, rfm))| ProbeRow { scene, fm, rfm })
            .collect(),
        rfm_wins: run.rfm_wins(),
        scenes: scenes.len(),
    };
    write(out, "ablation.csv", &csv)?;
    write(out, "ablation.json", &to_json(&summary)?)?;
    for p in &summary.presets {
        println!("{:<9} background slope {:.6}", p.preset, p.mean_slopes.background_mse);
    }
    println!(
        "full leads on {}/{} scenes; rfm restores better on {}/{}",
        summary.full_leads, summary.scenes, summary.rfm_wins, summary.scenes
    );
    Ok(run)
}
