//! Two-stage training on adjacent chunk pairs.
//!
//! Stage 1 adapts the field to the memory layout with the plain flow-matching
//! target and input-side perturbation of the motion memory. Stage 2 keeps the
//! motion memory clean, perturbs the target endpoint, and trains on the
//! restorative target.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LossyCodec;
use crate::error::{Error, Result};
use crate::field::{step, AdamState, FieldExample, VectorField};
use crate::flow::{fm_velocity, interpolate, restorative_target, RestorationCoefficient, RestorationSchedule};
use crate::memory::{assemble_context, build_identity_memory, build_motion_memory, AugmentSpec, ContextMemory, IdentityDraw};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Chunk, Frame};
use crate::world::{perturb, PerturbationKind, PerturbationSpec, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientKind {
    /// Bounded `λ(t; β)`.
    Rescheduled,
    /// The singular `1 / (1 - t)`; times are clamped below `1 - exact_eps`.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate follows a cosine from `lr` down to `lr * lr_floor` over the whole run.
    pub lr_floor: f64,
    pub beta: f64,
    pub coefficient: CoefficientKind,
    pub exact_eps: f64,
    pub perturb_kind: PerturbationKind,
    /// Largest stage-2 endpoint perturbation; zero trains stage 2 with plain FM targets.
    pub endpoint_perturb_max: f64,
    /// Largest stage-1 motion-memory perturbation.
    pub motion_perturb_max: f64,
    /// Probability that a sample of either stage has all-zero motion memory, as in chunk 1.
    pub p_zero_motion: f64,
    pub augment: AugmentSpec,
    pub r: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 4000,
            stage2_iters: 1000,
            batch_size: 16,
            lr: 3e-3,
            lr_floor: 0.02,
            beta: crate::flow::DEFAULT_BETA,
            coefficient: CoefficientKind::Rescheduled,
            exact_eps: crate::flow::SINGULARITY_EPS,
            perturb_kind: PerturbationKind::Compose,
            endpoint_perturb_max: 0.15,
            motion_perturb_max: 0.15,
            p_zero_motion: 0.25,
            augment: AugmentSpec::default(),
            r: 1,
            k: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config("lr_floor must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config("beta must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_zero_motion) {
            return Err(Error::Config("p_zero_motion must lie in [0, 1]".into()));
        }
        for (name, v) in [
            ("endpoint_perturb_max", self.endpoint_perturb_max),
            ("motion_perturb_max", self.motion_perturb_max),
            ("augment.magnitude", self.augment.magnitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.exact_eps > 0.0 && self.exact_eps < 1.0) {
            return Err(Error::Config("exact_eps must lie in (0, 1)".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        Ok(())
    }

    fn coefficient<T: Scalar>(&self) -> Result<RestorationCoefficient<T>> {
        Ok(match self.coefficient {
            CoefficientKind::Rescheduled => RestorationCoefficient::Rescheduled(RestorationSchedule::new(T::of(self.beta))?),
            CoefficientKind::Exact => RestorationCoefficient::Exact { eps: T::of(self.exact_eps) },
        })
    }
}

/// Which mechanisms touched a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: u8,
    pub motion_perturbed: bool,
    pub motion_zeroed: bool,
    pub restorative_target: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatchSample<T> {
    /// Pixel chunks `V¹` (context) and `V²` (target), adjacent in the scene.
    pub v1: Chunk<T>,
    pub v2: Chunk<T>,
    pub poses: Chunk<T>,
    /// Index of the first frame of `V²` in the scene.
    pub v2_start: usize,
    pub t: T,
    pub x0: Chunk<T>,
    pub x1: Chunk<T>,
    pub x1_tilde: Option<Chunk<T>>,
    pub xi: Option<PerturbationSpec>,
    /// Clean last-`r` latents of `V¹`.
    pub clean_motion: Vec<Frame<T>>,
    pub context: ContextMemory<T>,
    pub identity_draw: IdentityDraw,
    /// State fed to the field (before pose injection).
    pub state: Chunk<T>,
    pub target_velocity: Chunk<T>,
    pub provenance: Provenance,
}

impl<T: Scalar> TrainBatchSample<T> {
    pub fn example(&self) -> FieldExample<T> {
        FieldExample {
            xt: self.state.clone(),
            poses: self.poses.clone(),
            context: self.context.to_chunk(),
            t: self.t,
            target: self.target_velocity.clone(),
        }
    }
}

struct Pair<T> {
    v1: Chunk<T>,
    v2: Chunk<T>,
    poses: Chunk<T>,
    v2_start: usize,
}

fn draw_pair<T: Scalar>(scene: &Scene<T>, rng: &mut Stream) -> Result<Pair<T>> {
    let n = scene.chunk_count();
    if n < 2 {
        return Err(Error::Config("training scenes need at least two chunks".into()));
    }
    let l = scene.frames_per_chunk();
    let i = rng.random_range(0..n - 1);
    let (a, b, c) = (i * l, (i + 1) * l, (i + 2) * l);
    Ok(Pair {
        v1: scene.render_range(a, b)?,
        v2: scene.render_range(b, c)?,
        poses: scene.poses_range(b, c)?,
        v2_start: b,
    })
}

fn draw_time<T: Scalar>(cfg: &TrainConfig, rng: &mut Stream) -> T {
    let t: f64 = rng.random_range(0.0..=1.0);
    match cfg.coefficient {
        CoefficientKind::Exact => T::of(t.min(1.0 - cfg.exact_eps)),
        CoefficientKind::Rescheduled => T::of(t),
    }
}

/// Stage-1 sample: perturbed (or zeroed) motion memory, clean endpoint, FM target.
pub fn make_stage1_sample<T: Scalar>(
    scene: &Scene<T>,
    codec: &LossyCodec<T>,
    cfg: &TrainConfig,
    rng: &mut Stream,
) -> Result<TrainBatchSample<T>> {
    let Pair { v1, v2, poses, v2_start } = draw_pair(scene, rng)?;
    let clean_motion = build_motion_memory(&codec.encode_chunk(&v1)?, cfg.r)?;
    let zeroed = rng.random_bool(cfg.p_zero_motion);
    let xi = PerturbationSpec::draw(cfg.perturb_kind, cfg.motion_perturb_max, rng);
    let motion = if zeroed {
        vec![Frame::zeros(codec.dim()); cfg.r]
    } else if xi.magnitude == 0.0 {
        clean_motion.clone()
    } else {
        build_motion_memory(&codec.encode_chunk(&perturb(&v1, &xi)?)?, cfg.r)?
    };
    let (identity, identity_draw) = build_identity_memory(&v1, cfg.k, codec, Some(cfg.augment), rng)?;
    let context = assemble_context(motion, identity, v2.len())?;
    let x1 = codec.encode_chunk(&v2)?;
    let x0 = rng::normal_chunk(rng, v2.len(), codec.dim());
    let t = draw_time(cfg, rng);
    let state = interpolate(&x0, &x1, t)?;
    let target_velocity = fm_velocity(&x0, &x1)?;
    Ok(TrainBatchSample {
        v1,
        v2,
        poses,
        v2_start,
        t,
        x0,
        x1,
        x1_tilde: None,
        xi: if zeroed { None } else { Some(xi) },
        clean_motion,
        context,
        identity_draw,
        state,
        target_velocity,
        provenance: Provenance {
            stage: 1,
            motion_perturbed: !zeroed && xi.magnitude > 0.0,
            motion_zeroed: zeroed,
            restorative_target: false,
        },
    })
}

/// Stage-2 sample: clean (or, as in chunk 1, zeroed) motion memory, perturbed
/// endpoint, restorative target.
pub fn make_stage2_sample<T: Scalar>(
    scene: &Scene<T>,
    codec: &LossyCodec<T>,
    cfg: &TrainConfig,
    rng: &mut Stream,
) -> Result<TrainBatchSample<T>> {
    let Pair { v1, v2, poses, v2_start } = draw_pair(scene, rng)?;
    let clean_motion = build_motion_memory(&codec.encode_chunk(&v1)?, cfg.r)?;
    let zeroed = rng.random_bool(cfg.p_zero_motion);
    let motion = if zeroed {
        vec![Frame::zeros(codec.dim()); cfg.r]
    } else {
        clean_motion.clone()
    };
    let (identity, identity_draw) = build_identity_memory(&v1, cfg.k, codec, Some(cfg.augment), rng)?;
    let context = assemble_context(motion, identity, v2.len())?;
    let xi = PerturbationSpec::draw(cfg.perturb_kind, cfg.endpoint_perturb_max, rng);
    let x1 = codec.encode_chunk(&v2)?;
    let x1_tilde = if xi.magnitude == 0.0 {
        x1.clone()
    } else {
        codec.encode_chunk(&perturb(&v2, &xi)?)?
    };
    let x0 = rng::normal_chunk(rng, v2.len(), codec.dim());
    let t = draw_time(cfg, rng);
    let state = interpolate(&x0, &x1_tilde, t)?;
    let target_velocity = restorative_target(&x0, &x1, &x1_tilde, t, &cfg.coefficient()?)?;
    Ok(TrainBatchSample {
        v1,
        v2,
        poses,
        v2_start,
        t,
        x0,
        x1,
        x1_tilde: Some(x1_tilde),
        xi: Some(xi),
        clean_motion,
        context,
        identity_draw,
        state,
        target_velocity,
        provenance: Provenance {
            stage: 2,
            motion_perturbed: false,
            motion_zeroed: zeroed,
            restorative_target: xi.magnitude > 0.0,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub stage: u8,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub loss_curve: Vec<LossPoint>,
}

impl TrainOutcome {
    /// Mean loss over the first and last tenth (at least one point each) of a stage.
    pub fn stage_deciles(&self, stage: u8) -> Option<(f64, f64)> {
        let losses: Vec<f64> = self.loss_curve.iter().filter(|p| p.stage == stage).map(|p| p.loss).collect();
        if losses.is_empty() {
            return None;
        }
        let w = (losses.len() / 10).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
    }

    /// Finite throughout, and the last tenth below the first, for every stage that ran.
    pub fn is_stable(&self) -> bool {
        self.loss_curve.iter().all(|p| p.loss.is_finite())
            && [1u8, 2].iter().all(|&s| match self.stage_deciles(s) {
                Some((first, last)) => last < first,
                None => true,
            })
    }
}

/// Runs both stages and returns the per-iteration batch loss, measured before each update.
pub fn train<T: Scalar>(
    field: &mut VectorField<T>,
    scenes: &[Scene<T>],
    codec: &LossyCodec<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let mut state = AdamState::new(field.shape().param_count(), T::of(cfg.lr));
    let mut rng = rng::stream(cfg.seed, "trainer", "batches");
    let mut loss_curve = Vec::with_capacity(cfg.stage1_iters + cfg.stage2_iters);
    let total = cfg.stage1_iters + cfg.stage2_iters;
    let schedule = std::iter::repeat_n(1u8, cfg.stage1_iters).chain(std::iter::repeat_n(2u8, cfg.stage2_iters));
    for (iteration, stage) in schedule.enumerate() {
        let progress = iteration as f64 / total.max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        state.lr = T::of(cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * cosine));
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let scene = &scenes[rng.random_range(0..scenes.len())];
                let s = if stage == 1 {
                    make_stage1_sample(scene, codec, cfg, &mut rng)?
                } else {
                    make_stage2_sample(scene, codec, cfg, &mut rng)?
                };
                Ok(s.example())
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = field.batch_loss_and_grad(&batch).map_err(|e| match e {
            Error::Numeric { .. } => Error::Training {
                stage,
                iteration,
                loss: f64::NAN,
            },
            other => other,
        })?;
        let loss = rec.loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::Training { stage, iteration, loss });
        }
        loss_curve.push(LossPoint { iteration, stage, loss });
        step(field, &rec, &mut state).map_err(|_| Error::Training { stage, iteration, loss })?;
    }
    Ok(TrainOutcome { loss_curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecParams;
    use crate::field::FieldShape;
    use crate::world::{Renderer, WorldConfig};
    use std::sync::Arc;

    fn setup() -> (Vec<Scene<f64>>, LossyCodec<f64>) {
        let cfg = WorldConfig { chunks: 3, ..WorldConfig::default() };
        let r = Arc::new(Renderer::new(&cfg, 1).unwrap());
        let scenes = (0..2).map(|s| Scene::generate(r.clone(), &cfg, s).unwrap()).collect();
        (scenes, LossyCodec::new(CodecParams::new(32, 0.97, 0.005, 4)).unwrap())
    }

    fn shape() -> FieldShape {
        FieldShape { latent_dim: 32, pose_dim: 4, context_len: 6, hidden: 16 }
    }

    #[test]
    fn stage1_contracts() {
        let (scenes, codec) = setup();
        let cfg = TrainConfig { motion_perturb_max: 0.0, p_zero_motion: 0.0, ..TrainConfig::default() };
        let mut s = rng::stream(1, "t", "s1");
        for _ in 0..10 {
            let x = make_stage1_sample(&scenes[0], &codec, &cfg, &mut s).unwrap();
            assert_eq!(x.context.motion(), x.clean_motion.as_slice());
            assert_eq!(x.target_velocity, x.x1.sub(&x.x0).unwrap());
            assert!(!x.provenance.restorative_target);
            let last = x.v2_start - 1;
            assert_eq!(x.v1.frame_owned(x.v1.len() - 1), scenes[0].render_frame(last).unwrap());
            assert_eq!(x.v2.frame_owned(0), scenes[0].render_frame(last + 1).unwrap());
        }
    }

    #[test]
    fn stage2_contracts() {
        let (scenes, codec) = setup();
        let cfg = TrainConfig::default();
        let mut s = rng::stream(2, "t", "s2");
        for _ in 0..10 {
            let x = make_stage2_sample(&scenes[1], &codec, &cfg, &mut s).unwrap();
            if x.provenance.motion_zeroed {
                assert!(x.context.motion().iter().all(|f| f.values().iter().all(|v| *v == 0.0)));
            } else {
                assert_eq!(x.context.motion(), x.clean_motion.as_slice());
            }
            assert!(!x.provenance.motion_perturbed);
        }
        let clean = TrainConfig { endpoint_perturb_max: 0.0, ..cfg };
        let x = make_stage2_sample(&scenes[1], &codec, &clean, &mut s).unwrap();
        assert_eq!(x.target_velocity, x.x1.sub(&x.x0).unwrap());
        assert_eq!(x.state, interpolate(&x.x0, &x.x1, x.t).unwrap());
    }

    #[test]
    fn zero_iterations_leave_field_unchanged() {
        let (scenes, codec) = setup();
        let mut f = VectorField::<f64>::new(shape(), 3).unwrap();
        let before = f.clone();
        let cfg = TrainConfig { stage1_iters: 0, stage2_iters: 0, ..TrainConfig::default() };
        let out = train(&mut f, &scenes, &codec, &cfg).unwrap();
        assert!(out.loss_curve.is_empty());
        assert_eq!(f, before);
    }

    #[test]
    fn training_is_deterministic() {
        let (scenes, codec) = setup();
        let cfg = TrainConfig { stage1_iters: 3, stage2_iters: 2, batch_size: 2, ..TrainConfig::default() };
        let run = || {
            let mut f = VectorField::<f64>::new(shape(), 3).unwrap();
            let out = train(&mut f, &scenes, &codec, &cfg).unwrap();
            (f, out)
        };
        let (fa, a) = run();
        let (fb, b) = run();
        assert_eq!(a, b);
        assert_eq!(fa, fb);
        assert_eq!(a.loss_curve.iter().filter(|p| p.stage == 2).count(), 2);
    }

    #[test]
    fn cosine_floor_keeps_training_finite() {
        let (scenes, codec) = setup();
        let cfg = TrainConfig { stage1_iters: 20, stage2_iters: 10, lr_floor: 0.0, ..TrainConfig::default() };
        let mut f = VectorField::<f64>::new(shape(), 4).unwrap();
        let out = train(&mut f, &scenes, &codec, &cfg).unwrap();
        assert!(out.loss_curve.iter().all(|p| p.loss.is_finite()));
        assert!(TrainConfig { lr_floor: 1.5, ..cfg }.validate().is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let (scenes, codec) = setup();
        let mut f = VectorField::<f64>::new(shape(), 3).unwrap();
        let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(matches!(train(&mut f, &scenes, &codec, &cfg), Err(Error::Config(_))));
        assert!(matches!(train(&mut f, &[], &codec, &TrainConfig::default()), Err(Error::Config(_))));
    }
}
