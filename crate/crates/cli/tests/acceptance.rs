//! Acceptance suite. Runs each criterion in order on one thread, prints one
//! PASS/FAIL line per criterion, and exits nonzero if any failed.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use driftlab::ablation::{ablation_suite, train_preset_fields, PresetFields};
use driftlab::codec::{CodecParams, LossyCodec};
use driftlab::field::{gradient_check, FieldExample, VectorField};
use driftlab::flow::{
    decomposition_residual, exact_restorative_velocity, fm_velocity, interpolate, lambda_weight, restorative_target,
    restorative_velocity, RestorationCoefficient, RestorationSchedule,
};
use driftlab::memory::AugmentSpec;
use driftlab::oracle::ExactOracle;
use driftlab::rng;
use driftlab::sampler::{context_bias, restoration_probe, rollout, RolloutConfig, RolloutMode, SamplerConfig};
use driftlab::trainer::{make_stage1_sample, make_stage2_sample, train, TrainConfig};
use driftlab::world::{perturb, PerturbationKind, PerturbationSpec, Renderer, Scene, WorldConfig};
use driftlab::{Chunk, Scene64};
use driftlab_cli::ExperimentConfig;
use rand::Rng;

const DECOMPOSITION_TOL: f64 = 1e-10;
const IDENTITY_TOL: f64 = 1e-12;
const SCHEDULE_TOL: f64 = 1e-12;
const GRADIENT_TOL: f64 = 1e-4;
const CLOSED_FORM_TOL: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-8;
const NORM_RATIO: f64 = 100.0;
const MAJORITY: usize = 5;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

/// Fields and scenes shared by criteria 7 and 8.
struct Trained {
    cfg: ExperimentConfig,
    codec: LossyCodec<f64>,
    train_scenes: Vec<Scene64>,
    eval_scenes: Vec<Scene64>,
    fm: VectorField<f64>,
    rfm: VectorField<f64>,
}

#[derive(Default)]
struct Shared {
    trained: Option<Trained>,
}

impl Shared {
    fn trained(&mut self) -> Result<&Trained, String> {
        if self.trained.is_none() {
            let cfg = ExperimentConfig::default();
            let codec = cfg.codec().map_err(e)?;
            let renderer = cfg.renderer().map_err(e)?;
            let train_scenes = cfg.train_scenes(&renderer).map_err(e)?;
            let eval_scenes = cfg.eval_scenes(&renderer).map_err(e)?;
            let ((fm, _), (rfm, _)) =
                train_preset_fields(cfg.field_shape(), cfg.field_seed(), &train_scenes, &codec, &cfg.train_config())
                    .map_err(e)?;
            self.trained = Some(Trained { cfg, codec, train_scenes, eval_scenes, fm, rfm });
        }
        Ok(self.trained.as_ref().expect("just set"))
    }
}

fn chunk(s: &mut rng::Stream, len: usize) -> Chunk<f64> {
    rng::normal_chunk(s, len, 8)
}

fn flow_identities(_: &mut Shared) -> Outcome {
    let mut s = rng::stream(1, "acceptance", "flow");
    let (mut residual, mut subsume, mut one_step) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let (x0, x1, x1t) = (chunk(&mut s, 1), chunk(&mut s, 1), chunk(&mut s, 1));
        let t: f64 = s.random_range(0.0..0.999);
        residual = residual.max(decomposition_residual(&x0, &x1, &x1t, t, 1e-3).map_err(e)?);
        let u = fm_velocity(&x0, &x1).map_err(e)?;
        let v = restorative_velocity(&x0, &x1, &x1, t, 16.0).map_err(e)?;
        subsume = subsume.max(v.sub(&u).map_err(e)?.max_abs());
        let xs = interpolate(&x0, &x1t, t).map_err(e)?;
        let mut end = xs.clone();
        end.axpy(1.0 - t, &exact_restorative_velocity(&x1, &xs, t, 1e-3).map_err(e)?).map_err(e)?;
        one_step = one_step.max(end.sub(&x1).map_err(e)?.max_abs());
    }
    ensure(
        residual <= DECOMPOSITION_TOL && subsume <= IDENTITY_TOL && one_step <= IDENTITY_TOL,
        format!("decomposition {residual:.2e}, fm subsumption {subsume:.2e}, one step {one_step:.2e}"),
    )
}

fn schedule_suite(_: &mut Shared) -> Outcome {
    let mut worst = 0.0f64;
    for beta in [4.0, 16.0, 64.0] {
        let l = |t: f64| lambda_weight(t, beta).map_err(e);
        worst = worst.max(l(0.0)?.abs()).max(l(1.0)?.abs()).max((l(0.5)? - 1.0).abs());
        let mut prev = l(0.0)?;
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let v = l(t)?;
            worst = worst.max((v - l(1.0 - t)?).abs()).max(-v).max(v - 1.0);
            if t <= 0.5 {
                worst = worst.max(prev - v);
                prev = v;
            }
        }
    }
    ensure(worst <= SCHEDULE_TOL, format!("largest violation {worst:.2e} over β in {{4, 16, 64}}"))
}

fn gradients(_: &mut Shared) -> Outcome {
    let cfg = ExperimentConfig::default();
    let codec = cfg.codec().map_err(e)?;
    let renderer = cfg.renderer().map_err(e)?;
    let scene = cfg.eval_scenes(&renderer).map_err(e)?.swap_remove(0);
    let tcfg = cfg.train_config();
    let mut s = rng::stream(3, "acceptance", "gradient");
    let mut field = VectorField::<f64>::new(cfg.field_shape(), cfg.field_seed()).map_err(e)?;
    // move off the initialization so no parameter block sits at exactly zero
    let theta: Vec<f64> = field.to_flat().iter().map(|v| v + 0.05 * rng::normal::<f64>(&mut s)).collect();
    field.set_flat(&theta).map_err(e)?;
    let n = cfg.field_shape().param_count();
    let mut report = Vec::new();
    let mut ok = true;
    for stage in [1u8, 2] {
        let batch: Vec<FieldExample<f64>> = (0..4)
            .map(|_| {
                let x = if stage == 1 {
                    make_stage1_sample(&scene, &codec, &tcfg, &mut s)
                } else {
                    make_stage2_sample(&scene, &codec, &tcfg, &mut s)
                };
                x.map(|x| x.example()).map_err(e)
            })
            .collect::<Result<_, _>>()?;
        let coords: Vec<usize> = (0..64).map(|_| s.random_range(0..n)).collect();
        let worst = gradient_check(&field, &batch, &coords, 1e-5, 1e-9).map_err(e)?;
        ok &= worst < GRADIENT_TOL;
        report.push(format!("{} {worst:.2e}", if stage == 1 { "fm" } else { "rfm" }));
    }
    ensure(ok, format!("max relative error on 64 coordinates: {}", report.join(", ")))
}

fn codec_drift(_: &mut Shared) -> Outcome {
    let codec = LossyCodec::<f64>::new(CodecParams::new(32, 0.97, 0.0, 4)).map_err(e)?;
    let x = rng::normal_frame::<f64>(&mut rng::stream(4, "acceptance", "codec"), 32);
    let curve = codec.roundtrip_error_curve(&x, 20).map_err(e)?;
    let dev = x.sub(codec.mu()).map_err(e)?.norm();
    let gap = curve
        .iter()
        .enumerate()
        .map(|(k, err)| (err - (1.0 - 0.97f64.powi(k as i32 + 1)) * dev).abs())
        .fold(0.0, f64::max);
    let increasing = curve.windows(2).all(|w| w[1] > w[0]);

    let wc = WorldConfig::default();
    let n = wc.chunks;
    let r = Arc::new(Renderer::<f64>::new(&wc, 5).map_err(e)?);
    let scene = Scene::generate(r, &wc, 6).map_err(e)?;
    let lossy = LossyCodec::<f64>::new(CodecParams::new(32, 0.97, 0.005, 7)).map_err(e)?;
    let field = VectorField::<f64>::new(ExperimentConfig::default().field_shape(), 8).map_err(e)?;
    let scfg = SamplerConfig { steps: 4, seed: 9 };
    let trips = |mode| -> Result<usize, String> {
        Ok(rollout(&field, &scene, &lossy, &RolloutConfig::new(mode, n), &scfg)
            .map_err(e)?
            .trace
            .inter_chunk_roundtrips())
    };
    let image = trips(RolloutMode::ImageCarryover)?;
    let latent = trips(RolloutMode::LatentPlp)? + trips(RolloutMode::LatentPlpRfm)?;
    ensure(
        gap <= CLOSED_FORM_TOL && increasing && image == n - 1 && latent == 0,
        format!("closed-form gap {gap:.2e}, increasing {increasing}, round trips image {image} (N = {n}), latent {latent}"),
    )
}

fn oracle_end_to_end(_: &mut Shared) -> Outcome {
    let wc = WorldConfig { chunks: 4, ..WorldConfig::default() };
    let r = Arc::new(Renderer::<f64>::new(&wc, 10).map_err(e)?);
    let scene = Arc::new(Scene::generate(r, &wc, 11).map_err(e)?);
    let codec = LossyCodec::<f64>::new(CodecParams::lossless(wc.pixel_dim, 12)).map_err(e)?;
    let oracle = ExactOracle::new(scene.clone(), codec.clone());
    let l = wc.frames_per_chunk;
    let mut worst = 0.0f64;
    for mode in RolloutMode::ALL {
        let out = rollout(&oracle, &scene, &codec, &RolloutConfig::new(mode, 4), &SamplerConfig::default()).map_err(e)?;
        for (i, x) in out.latents.iter().enumerate() {
            let truth = codec.encode_chunk(&scene.render_range(i * l, (i + 1) * l).map_err(e)?).map_err(e)?;
            worst = worst.max(x.sub(&truth).map_err(e)?.max_abs());
        }
    }
    ensure(worst <= ORACLE_TOL, format!("max latent error {worst:.2e} over 4 modes, N = 4"))
}

fn training_stability(_: &mut Shared) -> Outcome {
    let cfg = ExperimentConfig::default();
    let codec = cfg.codec().map_err(e)?;
    let renderer = cfg.renderer().map_err(e)?;
    let scenes = cfg.train_scenes(&renderer).map_err(e)?;
    let tcfg = TrainConfig { stage1_iters: 0, stage2_iters: 100, ..cfg.train_config() };
    let mut field = VectorField::<f64>::new(cfg.field_shape(), cfg.field_seed()).map_err(e)?;
    let out = train(&mut field, &scenes, &codec, &tcfg).map_err(e)?;
    let (first, last) = out.stage_deciles(2).ok_or("no stage-2 losses")?;
    let finite = out.loss_curve.iter().all(|p| p.loss.is_finite());

    // The total-norm ratio is about 1 + 1000 |X_t - X̃_t| / |U|, so it depends on
    // how far the draw moves the endpoint. Scored on a gain draw at the largest
    // training magnitude; the weaker families are reported alongside.
    let v2 = scenes[0].render_range(6, 12).map_err(e)?;
    let mut s = rng::stream(13, "acceptance", "norms");
    let sched = RestorationCoefficient::Rescheduled(RestorationSchedule::new(tcfg.beta).map_err(e)?);
    let mut ratios = Vec::new();
    for kind in [PerturbationKind::Gain, PerturbationKind::Offset, PerturbationKind::Smooth] {
        let xi = PerturbationSpec { kind, magnitude: tcfg.endpoint_perturb_max, seed: 14 };
        let x1 = codec.encode_chunk(&v2).map_err(e)?;
        let x1t = codec.encode_chunk(&perturb(&v2, &xi).map_err(e)?).map_err(e)?;
        let x0 = rng::normal_chunk::<f64>(&mut s, v2.len(), codec.dim());
        let t = 0.999;
        let exact = restorative_target(&x0, &x1, &x1t, t, &RestorationCoefficient::Exact { eps: 1e-4 }).map_err(e)?;
        let bounded = restorative_target(&x0, &x1, &x1t, t, &sched).map_err(e)?;
        ratios.push((kind, exact.norm() / bounded.norm()));
    }
    let gain_ratio = ratios[0].1;
    let shown: Vec<String> = ratios.iter().map(|(k, r)| format!("{k:?} {r:.0}x")).collect();
    ensure(
        finite && last < first && gain_ratio >= NORM_RATIO,
        format!(
            "stage-2 loss first decile {first:.4}, last {last:.4}; exact/rescheduled target norm at t = 0.999: {}",
            shown.join(", ")
        ),
    )
}

fn ablation_trend(shared: &mut Shared) -> Outcome {
    let t = shared.trained()?;
    let fields = PresetFields { fm: Some(&t.fm), rfm: Some(&t.rfm) };
    let (rcfg, scfg) = (t.cfg.rollout_config(), t.cfg.sampler_config());
    let table = ablation_suite(fields, &t.eval_scenes, &t.codec, &rcfg, &scfg, false).map_err(e)?;
    let scenes = t.eval_scenes.len();
    let leads = (0..scenes).filter(|&i| table.full_leads(i)).count();
    let pcfg = t.cfg.probe_config();
    let mut wins = 0;
    for scene in &t.eval_scenes {
        let fm = restoration_probe(&t.fm, scene, &t.codec, &pcfg).map_err(e)?;
        let rfm = restoration_probe(&t.rfm, scene, &t.codec, &pcfg).map_err(e)?;
        wins += usize::from(rfm < fm);
    }
    let slopes: Vec<String> = driftlab::ablation::Preset::ALL
        .iter()
        .map(|&p| format!("{} {:.4}", p.name(), table.mean_background_slope(p)))
        .collect();
    ensure(
        leads >= MAJORITY && wins >= MAJORITY,
        format!(
            "full preset lowest background slope on {leads}/{scenes} scenes (mean slopes: {}); rfm restores better on {wins}/{scenes}",
            slopes.join(", ")
        ),
    )
}

fn augmentation(shared: &mut Shared) -> Outcome {
    let t = shared.trained()?;
    let tcfg = TrainConfig { augment: AugmentSpec::OFF, ..t.cfg.train_config() };
    let mut off = VectorField::<f64>::new(t.cfg.field_shape(), t.cfg.field_seed()).map_err(e)?;
    train(&mut off, &t.train_scenes, &t.codec, &tcfg).map_err(e)?;
    let scfg = t.cfg.sampler_config();
    let (r, k) = (t.cfg.rollout.r, t.cfg.rollout.k);
    let with = context_bias(&t.rfm, &t.eval_scenes, &t.codec, r, k, &scfg).map_err(e)?;
    let without = context_bias(&off, &t.eval_scenes, &t.codec, r, k, &scfg).map_err(e)?;
    ensure(with < without, format!("context-bias correlation on {with:.4}, off {without:.4}"))
}

fn reproducibility(_: &mut Shared) -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let mut cfg = ExperimentConfig::default();
    cfg.train.scenes = 8;
    cfg.train.stage1_iters = 40;
    cfg.train.stage2_iters = 10;
    let config = dir.path().join("config.toml");
    fs::write(&config, cfg.to_toml()).map_err(e)?;
    let run = |args: &[&str]| -> Result<(), String> {
        let o = Command::new(env!("CARGO_BIN_EXE_driftlab")).args(args).output().map_err(e)?;
        ensure(o.status.success(), String::from_utf8_lossy(&o.stderr).into_owned()).map(|_| ())
    };
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let c = config.to_string_lossy().into_owned();
    run(&["train", "--config", &c, "--out", &p("t")])?;
    let ck = p("t/checkpoint.txt");
    run(&["rollout", "--config", &c, "--checkpoint", &ck, "--out", &p("a")])?;
    run(&["rollout", "--config", &c, "--checkpoint", &ck, "--out", &p("b")])?;
    let read = |d: &str, f: &str| fs::read(Path::new(&p(d)).join(f)).map_err(e);
    let mut same = true;
    for f in ["metrics.csv", "frames.csv"] {
        same &= read("a", f)? == read("b", f)?;
    }
    ensure(same, format!("two rollouts of {} scenes, metrics.csv and frames.csv byte-identical: {same}", cfg.eval.scenes))
}

type Criterion = (u8, &'static str, Duration, fn(&mut Shared) -> Outcome);

fn main() -> ExitCode {
    // libtest arguments such as --nocapture are accepted and ignored
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 9] = [
        (1, "flow identities", Duration::from_secs(5), flow_identities),
        (2, "schedule suite", Duration::from_secs(1), schedule_suite),
        (3, "gradient check", Duration::from_secs(10), gradients),
        (4, "codec drift and round-trip counts", Duration::from_secs(5), codec_drift),
        (5, "oracle end-to-end", Duration::from_secs(10), oracle_end_to_end),
        (6, "training stability", Duration::from_secs(300), training_stability),
        (7, "ablation trend", Duration::from_secs(900), ablation_trend),
        (8, "memory augmentation", Duration::from_secs(600), augmentation),
        (9, "reproducibility", Duration::from_secs(120), reproducibility),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || id.to_string() == *f) {
            continue;
        }
        let start = Instant::now();
        let outcome = run(&mut shared);
        let took = start.elapsed();
        let (passed, mut detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        let in_time = took <= budget;
        if !in_time {
            detail.push_str(&format!("; over the {}s budget", budget.as_secs()));
        }
        let tag = if passed && in_time { "PASS" } else { "FAIL" };
        failed += usize::from(tag == "FAIL");
        println!("{tag} criterion {id} ({name}, {:.1}s): {detail}", took.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
