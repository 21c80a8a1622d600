//! The invariant suite behind `driftlab check`.
//!
//! The restoration schedule is passed in rather than hard-wired so a broken
//! schedule can be fed through the same checks.

use std::sync::Arc;

use driftlab::codec::{CodecParams, LossyCodec, NoiseKey};
use driftlab::field::{gradient_check, FieldExample, FieldShape, VectorField};
use driftlab::flow::{decomposition_residual, exact_restorative_velocity, fm_velocity, interpolate, lambda_weight};
use driftlab::memory::build_motion_memory;
use driftlab::metrics::ols_slope;
use driftlab::oracle::ExactOracle;
use driftlab::rng::{self, Stream};
use driftlab::sampler::{rollout, RolloutConfig, RolloutMode, SamplerConfig};
use driftlab::tensor::Chunk;
use driftlab::world::{Renderer, Scene, WorldConfig};
use rand::Rng;

/// `λ(t; β)`.
pub type ScheduleFn<'a> = &'a dyn Fn(f64, f64) -> driftlab::Result<f64>;

pub fn library_schedule(t: f64, beta: f64) -> driftlab::Result<f64> {
    lambda_weight(t, beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<24} {}", self.name, self.detail)
    }
}

type Outcome = Result<String, String>;
type NamedCheck<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

const BETAS: [f64; 3] = [4.0, 16.0, 64.0];
const GRID: usize = 1000;
const D: usize = 8;

fn grid() -> impl Iterator<Item = f64> {
    (0..=GRID).map(|i| i as f64 / GRID as f64)
}

fn draw(s: &mut Stream, len: usize) -> Chunk<f64> {
    rng::normal_chunk(s, len, D)
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lam(schedule: ScheduleFn, t: f64, beta: f64) -> Result<f64, String> {
    schedule(t, beta).map_err(|e| e.to_string())
}

fn interpolant_endpoints() -> Outcome {
    let mut s = rng::stream(1, "check", "interp");
    for _ in 0..100 {
        let (x0, x1) = (draw(&mut s, 3), draw(&mut s, 3));
        let a = interpolate(&x0, &x1, 0.0).map_err(|e| e.to_string())?;
        let b = interpolate(&x0, &x1, 1.0).map_err(|e| e.to_string())?;
        if a != x0 || b != x1 {
            return Err("endpoint not reproduced bit-exactly".into());
        }
    }
    Ok("100 draws exact".into())
}

fn schedule_endpoints(schedule: ScheduleFn) -> Outcome {
    let mut worst = 0.0f64;
    for beta in BETAS {
        worst = worst
            .max(lam(schedule, 0.0, beta)?.abs())
            .max(lam(schedule, 1.0, beta)?.abs())
            .max((lam(schedule, 0.5, beta)? - 1.0).abs());
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:.3e}"))
}

fn schedule_symmetry(schedule: ScheduleFn) -> Outcome {
    let mut worst = 0.0f64;
    for beta in BETAS {
        for t in grid() {
            worst = worst.max((lam(schedule, t, beta)? - lam(schedule, 1.0 - t, beta)?).abs());
        }
    }
    ensure(worst <= 1e-12, format!("max |λ(t) - λ(1-t)| {worst:.3e}"))
}

fn schedule_monotone(schedule: ScheduleFn) -> Outcome {
    for beta in BETAS {
        let half: Vec<f64> = grid().filter(|t| *t <= 0.5).collect();
        for w in half.windows(2) {
            if lam(schedule, w[1], beta)? < lam(schedule, w[0], beta)? - 1e-12 {
                return Err(format!("decreases between t = {} and {} at β = {beta}", w[0], w[1]));
            }
        }
    }
    Ok("nondecreasing on [0, 1/2]".into())
}

fn schedule_range(schedule: ScheduleFn) -> Outcome {
    for beta in BETAS {
        for t in grid() {
            let l = lam(schedule, t, beta)?;
            if !(-1e-12..=1.0 + 1e-12).contains(&l) {
                return Err(format!("λ({t}; {beta}) = {l}"));
            }
        }
    }
    Ok("within [0, 1]".into())
}

fn restorative(u: &Chunk<f64>, gap: &Chunk<f64>, c: f64) -> Chunk<f64> {
    let mut v = u.clone();
    v.axpy(c, gap).expect("same shape");
    v
}

/// Clean state minus perturbed state, `X_t - X̃_t`.
fn gap(x0: &Chunk<f64>, x1: &Chunk<f64>, x1t: &Chunk<f64>, t: f64) -> Chunk<f64> {
    let a = interpolate(x0, x1, t).expect("valid t");
    a.sub(&interpolate(x0, x1t, t).expect("valid t")).expect("same shape")
}

fn rfm_reduces_to_fm(schedule: ScheduleFn) -> Outcome {
    let mut s = rng::stream(2, "check", "subsume");
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let (x0, x1) = (draw(&mut s, 2), draw(&mut s, 2));
        let t = i as f64 / 999.0;
        let u = fm_velocity(&x0, &x1).map_err(|e| e.to_string())?;
        let v = restorative(&u, &gap(&x0, &x1, &x1, t), lam(schedule, t, 16.0)?);
        worst = worst.max(v.sub(&u).map_err(|e| e.to_string())?.max_abs());
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:.3e}"))
}

fn additive_decomposition() -> Outcome {
    let mut s = rng::stream(3, "check", "decomp");
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let (x0, x1, x1t) = (draw(&mut s, 1), draw(&mut s, 1), draw(&mut s, 1));
        let t = s.random_range(0.0..0.999);
        worst = worst.max(decomposition_residual(&x0, &x1, &x1t, t, 1e-3).map_err(|e| e.to_string())?);
    }
    ensure(worst <= 1e-10, format!("10^4 draws, max residual {worst:.3e}"))
}

fn one_step_exactness() -> Outcome {
    let mut s = rng::stream(4, "check", "onestep");
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (x0, x1, x1t) = (draw(&mut s, 2), draw(&mut s, 2), draw(&mut s, 2));
        let t = s.random_range(0.0..0.99);
        let xs = interpolate(&x0, &x1t, t).map_err(|e| e.to_string())?;
        let v = exact_restorative_velocity(&x1, &xs, t, 1e-3).map_err(|e| e.to_string())?;
        let mut end = xs;
        end.axpy(1.0 - t, &v).map_err(|e| e.to_string())?;
        worst = worst.max(end.sub(&x1).map_err(|e| e.to_string())?.max_abs());
    }
    ensure(worst <= 1e-12, format!("max endpoint error {worst:.3e}"))
}

fn restoration_direction(schedule: ScheduleFn) -> Outcome {
    let mut s = rng::stream(5, "check", "direction");
    for i in 0..1000 {
        let (x0, x1, x1t) = (draw(&mut s, 2), draw(&mut s, 2), draw(&mut s, 2));
        let t = i as f64 / 999.0;
        let g = gap(&x0, &x1, &x1t, t);
        let u = fm_velocity(&x0, &x1).map_err(|e| e.to_string())?;
        let v = restorative(&u, &g, lam(schedule, t, 16.0)?);
        let inner = v.sub(&u).and_then(|d| d.dot(&g)).map_err(|e| e.to_string())?;
        if inner < -1e-12 {
            return Err(format!("correction points away from the clean path at t = {t}: {inner:.3e}"));
        }
    }
    Ok("1000 draws nonnegative".into())
}

fn target_boundedness(schedule: ScheduleFn) -> Outcome {
    let mut s = rng::stream(6, "check", "bounded");
    for i in 0..1000 {
        let (x0, x1, x1t) = (draw(&mut s, 2), draw(&mut s, 2), draw(&mut s, 2));
        let t = i as f64 / 999.0;
        let g = gap(&x0, &x1, &x1t, t);
        let u = fm_velocity(&x0, &x1).map_err(|e| e.to_string())?;
        let v = restorative(&u, &g, lam(schedule, t, 16.0)?);
        if v.norm() > u.norm() + g.norm() + 1e-12 {
            return Err(format!("rescheduled target exceeds the bound at t = {t}"));
        }
    }
    // the singular coefficient must break the same bound near t = 1
    let (x0, x1, x1t) = (draw(&mut s, 2), draw(&mut s, 2), draw(&mut s, 2));
    let t = 1.0 - 1e-3;
    let g = gap(&x0, &x1, &x1t, t);
    let u = fm_velocity(&x0, &x1).map_err(|e| e.to_string())?;
    let exact = restorative(&u, &g, 1.0 / (1.0 - t));
    ensure(
        exact.norm() > u.norm() + g.norm(),
        format!("bound holds for λ; exact coefficient at t = 0.999 gives {:.1} vs {:.1}", exact.norm(), u.norm() + g.norm()),
    )
}

fn gradient(restorative_targets: bool, schedule: ScheduleFn) -> Outcome {
    let shape = FieldShape { latent_dim: D, pose_dim: 2, context_len: 4, hidden: 6 };
    let mut f = VectorField::<f64>::new(shape, 11).map_err(|e| e.to_string())?;
    let mut s = rng::stream(7, "check", if restorative_targets { "grad_rfm" } else { "grad_fm" });
    let theta: Vec<f64> = f.to_flat().iter().map(|v| v + 0.1 * rng::normal::<f64>(&mut s)).collect();
    f.set_flat(&theta).map_err(|e| e.to_string())?;
    let mut batch = Vec::new();
    for _ in 0..2 {
        let (x0, x1, x1t) = (draw(&mut s, 4), draw(&mut s, 4), draw(&mut s, 4));
        let t: f64 = s.random_range(0.05..0.95);
        let u = fm_velocity(&x0, &x1).map_err(|e| e.to_string())?;
        let (xt, target) = if restorative_targets {
            let xs = interpolate(&x0, &x1t, t).map_err(|e| e.to_string())?;
            (xs, restorative(&u, &gap(&x0, &x1, &x1t, t), lam(schedule, t, 16.0)?))
        } else {
            (interpolate(&x0, &x1, t).map_err(|e| e.to_string())?, u)
        };
        batch.push(FieldExample {
            xt,
            poses: rng::normal_chunk(&mut s, 4, 2),
            context: draw(&mut s, 4),
            t,
            target,
        });
    }
    let n = shape.param_count();
    let coords: Vec<usize> = (0..64).map(|_| s.random_range(0..n)).collect();
    let worst = gradient_check(&f, &batch, &coords, 1e-5, 1e-9).map_err(|e| e.to_string())?;
    ensure(worst < 1e-4, format!("64 coordinates, max relative error {worst:.3e}"))
}

fn codec_lossless() -> Outcome {
    let codec = LossyCodec::<f64>::new(CodecParams::lossless(D, 3)).map_err(|e| e.to_string())?;
    let mut s = rng::stream(8, "check", "lossless");
    let mut worst = 0.0f64;
    for k in 0..100 {
        let x = rng::normal_frame::<f64>(&mut s, D);
        let back = codec.decode(&codec.encode(&x).map_err(|e| e.to_string())?, NoiseKey(k)).map_err(|e| e.to_string())?;
        worst = worst.max(back.sub(&x).map_err(|e| e.to_string())?.norm());
    }
    ensure(worst <= 1e-10, format!("max reconstruction error {worst:.3e}"))
}

fn codec_closed_form() -> Outcome {
    let codec = LossyCodec::<f64>::new(CodecParams::new(D, 0.9, 0.0, 4)).map_err(|e| e.to_string())?;
    let mut s = rng::stream(9, "check", "closed_form");
    let x = rng::normal_frame::<f64>(&mut s, D);
    let curve = codec.roundtrip_error_curve(&x, 20).map_err(|e| e.to_string())?;
    let dev = x.sub(codec.mu()).map_err(|e| e.to_string())?.norm();
    let worst = curve
        .iter()
        .enumerate()
        .map(|(k, e)| (e - (1.0 - 0.9f64.powi(k as i32 + 1)) * dev).abs())
        .fold(0.0, f64::max);
    if !curve.windows(2).all(|w| w[1] > w[0]) {
        return Err("error curve not strictly increasing".into());
    }
    ensure(worst <= 1e-9, format!("γ = 0.9, 20 round trips, max gap {worst:.3e}"))
}

fn codec_determinism() -> Outcome {
    let make = || LossyCodec::<f64>::new(CodecParams::new(D, 0.97, 0.005, 5));
    let (a, b) = (make().map_err(|e| e.to_string())?, make().map_err(|e| e.to_string())?);
    let x = rng::normal_frame::<f64>(&mut rng::stream(10, "check", "det"), D);
    let za = a.decode(&a.encode(&x).map_err(|e| e.to_string())?, NoiseKey(3)).map_err(|e| e.to_string())?;
    let zb = b.decode(&b.encode(&x).map_err(|e| e.to_string())?, NoiseKey(3)).map_err(|e| e.to_string())?;
    ensure(za == zb, "same seed and key give identical bits".into())
}

fn motion_memory_bypasses_codec() -> Outcome {
    let codec = LossyCodec::<f64>::new(CodecParams::new(D, 0.97, 0.005, 6)).map_err(|e| e.to_string())?;
    let prev = draw(&mut rng::stream(11, "check", "motion"), 6);
    let _ = build_motion_memory(&prev, 2).map_err(|e| e.to_string())?;
    ensure(
        codec.encode_calls() == 0 && codec.decode_calls() == 0,
        "zero codec calls".into(),
    )
}

fn oracle_rollout() -> Outcome {
    let wc = WorldConfig { chunks: 3, ..WorldConfig::default() };
    let r = Arc::new(Renderer::<f64>::new(&wc, 12).map_err(|e| e.to_string())?);
    let scene = Arc::new(Scene::generate(r, &wc, 13).map_err(|e| e.to_string())?);
    let codec = LossyCodec::<f64>::new(CodecParams::lossless(wc.pixel_dim, 14)).map_err(|e| e.to_string())?;
    let oracle = ExactOracle::new(scene.clone(), codec.clone());
    let l = wc.frames_per_chunk;
    let mut worst = 0.0f64;
    for mode in RolloutMode::ALL {
        let out = rollout(&oracle, &scene, &codec, &RolloutConfig::new(mode, 3), &SamplerConfig::default())
            .map_err(|e| e.to_string())?;
        for (n, x) in out.latents.iter().enumerate() {
            let truth = codec
                .encode_chunk(&scene.render_range(n * l, (n + 1) * l).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            worst = worst.max(x.sub(&truth).map_err(|e| e.to_string())?.max_abs());
        }
    }
    ensure(worst <= 1e-8, format!("4 modes, max latent error {worst:.3e}"))
}

fn slope_closed_form() -> Outcome {
    let ys: Vec<f64> = (1..=9).map(|x| 0.37 * x as f64 - 2.0).collect();
    let err = (ols_slope(&ys) - 0.37).abs();
    ensure(err <= 1e-9, format!("slope error {err:.3e}"))
}

/// Runs every check with the given schedule.
pub fn run_checks(schedule: ScheduleFn) -> Vec<CheckResult> {
    let checks: Vec<NamedCheck<'_>> = vec![
        ("interpolant_endpoints", Box::new(interpolant_endpoints)),
        ("schedule_endpoints", Box::new(|| schedule_endpoints(schedule))),
        ("schedule_symmetry", Box::new(|| schedule_symmetry(schedule))),
        ("schedule_monotone", Box::new(|| schedule_monotone(schedule))),
        ("schedule_range", Box::new(|| schedule_range(schedule))),
        ("rfm_reduces_to_fm", Box::new(|| rfm_reduces_to_fm(schedule))),
        ("additive_decomposition", Box::new(additive_decomposition)),
        ("one_step_exactness", Box::new(one_step_exactness)),
        ("restoration_direction", Box::new(|| restoration_direction(schedule))),
        ("target_boundedness", Box::new(|| target_boundedness(schedule))),
        ("gradient_fm", Box::new(|| gradient(false, schedule))),
        ("gradient_rfm", Box::new(|| gradient(true, schedule))),
        ("codec_lossless", Box::new(codec_lossless)),
        ("codec_closed_form", Box::new(codec_closed_form)),
        ("codec_determinism", Box::new(codec_determinism)),
        ("motion_memory_no_codec", Box::new(motion_memory_bypasses_codec)),
        ("oracle_rollout", Box::new(oracle_rollout)),
        ("slope_closed_form", Box::new(slope_closed_form)),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult { name, passed, detail }
        })
        .collect()
}
