//! The experiment document: one TOML file holding every module parameter.

use std::path::Path;
use std::sync::Arc;

use driftlab::codec::{CodecParams, LossyCodec};
use driftlab::field::FieldShape;
use driftlab::memory::AugmentSpec;
use driftlab::rng;
use driftlab::sampler::{ProbeConfig, RolloutConfig, RolloutMode, SamplerConfig};
use driftlab::trainer::{CoefficientKind, TrainConfig};
use driftlab::world::{PerturbationKind, Renderer, Scene, WorldConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Master seed. Every stream is derived from it by hashing (seed, module, purpose).
    pub seed: u64,
    pub world: WorldSection,
    pub codec: CodecSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub rollout: RolloutSection,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
    pub probe: ProbeSection,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    /// Pixel and latent dimension.
    pub d: usize,
    pub character_dim: usize,
    /// Pose dimension.
    pub p: usize,
    pub identity_dim: usize,
    /// Frames per chunk; also the latent chunk length.
    #[serde(rename = "L")]
    pub l: usize,
    /// Chunks per scene and per rollout.
    #[serde(rename = "N")]
    pub n: usize,
    pub pose_step: f64,
    pub pose_clip: f64,
    pub background_frequencies: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSection {
    pub gamma: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Number of training scenes.
    pub scenes: usize,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub beta: f64,
    pub coefficient: CoefficientKind,
    pub exact_eps: f64,
    pub perturb_kind: PerturbationKind,
    pub endpoint_perturb_max: f64,
    pub motion_perturb_max: f64,
    pub p_zero_motion: f64,
    pub augment_magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSection {
    pub mode: RolloutMode,
    pub r: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    /// Euler steps per chunk.
    #[serde(rename = "S")]
    pub s: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Held-out scenes for rollout and ablation.
    pub scenes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub t_start: f64,
    pub steps: usize,
    pub kind: PerturbationKind,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    /// Round trips in the codec benchmark.
    pub roundtrips: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let w = WorldConfig::default();
        let t = TrainConfig::default();
        let r = RolloutConfig::new(RolloutMode::LatentPlpRfm, w.chunks);
        let p = ProbeConfig::default();
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            world: WorldSection {
                d: w.pixel_dim,
                character_dim: w.character_dim,
                p: w.pose_dim,
                identity_dim: w.identity_dim,
                l: w.frames_per_chunk,
                n: w.chunks,
                pose_step: w.pose_step,
                pose_clip: w.pose_clip,
                background_frequencies: w.background_frequencies,
            },
            codec: CodecSection {
                gamma: driftlab::codec::DEFAULT_GAMMA,
                noise_sigma: driftlab::codec::DEFAULT_NOISE_SIGMA,
            },
            model: ModelSection { hidden: 64 },
            train: TrainSection {
                scenes: 512,
                stage1_iters: t.stage1_iters,
                stage2_iters: t.stage2_iters,
                batch_size: t.batch_size,
                lr: t.lr,
                lr_floor: t.lr_floor,
                beta: t.beta,
                coefficient: t.coefficient,
                exact_eps: t.exact_eps,
                perturb_kind: t.perturb_kind,
                endpoint_perturb_max: t.endpoint_perturb_max,
                motion_perturb_max: t.motion_perturb_max,
                p_zero_motion: t.p_zero_motion,
                augment_magnitude: t.augment.magnitude,
            },
            rollout: RolloutSection {
                mode: r.mode,
                r: r.r,
                k: r.k,
                m: r.m,
            },
            sampler: SamplerSection {
                s: SamplerConfig::default().steps,
            },
            eval: EvalSection { scenes: 8 },
            probe: ProbeSection {
                t_start: p.t_start,
                steps: p.steps,
                kind: p.kind,
                magnitude: p.magnitude,
            },
            bench: BenchSection { roundtrips: 20 },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(format!("cannot parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical serialization; parsing it back gives the same document.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.world_config().validate()?;
        self.codec_params().validate()?;
        self.field_shape().validate()?;
        self.train_config().validate()?;
        self.rollout_config().validate()?;
        self.sampler_config().validate()?;
        if self.world.n < 2 && self.train.stage1_iters + self.train.stage2_iters > 0 {
            return Err(CliError::Config("training needs scenes of at least 2 chunks (world.N >= 2) unless both stages have 0 iterations".into()));
        }
        if self.train.scenes == 0 || self.eval.scenes == 0 {
            return Err(CliError::Config("train.scenes and eval.scenes must be at least 1".into()));
        }
        if !(self.probe.t_start >= 0.0 && self.probe.t_start < 1.0) || self.probe.steps == 0 {
            return Err(CliError::Config("probe needs t_start in [0, 1) and at least one step".into()));
        }
        if !(self.probe.magnitude >= 0.0 && self.probe.magnitude.is_finite()) {
            return Err(CliError::Config("probe magnitude must be finite and non-negative".into()));
        }
        if self.bench.roundtrips == 0 {
            return Err(CliError::Config("bench.roundtrips must be at least 1".into()));
        }
        Ok(())
    }

    pub fn world_config(&self) -> WorldConfig {
        let w = &self.world;
        WorldConfig {
            pixel_dim: w.d,
            character_dim: w.character_dim,
            pose_dim: w.p,
            identity_dim: w.identity_dim,
            frames_per_chunk: w.l,
            chunks: w.n,
            pose_step: w.pose_step,
            pose_clip: w.pose_clip,
            background_frequencies: w.background_frequencies,
        }
    }

    pub fn codec_params(&self) -> CodecParams {
        CodecParams::new(
            self.world.d,
            self.codec.gamma,
            self.codec.noise_sigma,
            rng::derive_seed(self.seed, "codec", "params"),
        )
    }

    pub fn codec(&self) -> Result<LossyCodec<f64>, CliError> {
        Ok(LossyCodec::new(self.codec_params())?)
    }

    pub fn field_shape(&self) -> FieldShape {
        FieldShape {
            latent_dim: self.world.d,
            pose_dim: self.world.p,
            context_len: self.world.l,
            hidden: self.model.hidden,
        }
    }

    pub fn field_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "field", "init")
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            stage1_iters: t.stage1_iters,
            stage2_iters: t.stage2_iters,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_floor: t.lr_floor,
            beta: t.beta,
            coefficient: t.coefficient,
            exact_eps: t.exact_eps,
            perturb_kind: t.perturb_kind,
            endpoint_perturb_max: t.endpoint_perturb_max,
            motion_perturb_max: t.motion_perturb_max,
            p_zero_motion: t.p_zero_motion,
            augment: AugmentSpec {
                magnitude: t.augment_magnitude,
            },
            r: self.rollout.r,
            k: self.rollout.k,
            seed: rng::derive_seed(self.seed, "trainer", "batches"),
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            mode: self.rollout.mode,
            chunks: self.world.n,
            frames_per_chunk: self.world.l,
            r: self.rollout.r,
            k: self.rollout.k,
            m: self.rollout.m,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler.s,
            seed: rng::derive_seed(self.seed, "sampler", "rollout"),
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            t_start: self.probe.t_start,
            steps: self.probe.steps,
            kind: self.probe.kind,
            magnitude: self.probe.magnitude,
            r: self.rollout.r,
            k: self.rollout.k,
            seed: rng::derive_seed(self.seed, "sampler", "probe"),
        }
    }

    pub fn renderer(&self) -> Result<Arc<Renderer<f64>>, CliError> {
        Ok(Arc::new(Renderer::new(
            &self.world_config(),
            rng::derive_seed(self.seed, "world", "renderer"),
        )?))
    }

    fn scenes(&self, renderer: &Arc<Renderer<f64>>, purpose: &str, count: usize) -> Result<Vec<Scene<f64>>, CliError> {
        let wc = self.world_config();
        (0..count as u64)
            .map(|i| Ok(Scene::generate(renderer.clone(), &wc, rng::derive_indexed(self.seed, "world", purpose, i))?))
            .collect()
    }

    pub fn train_scenes(&self, renderer: &Arc<Renderer<f64>>) -> Result<Vec<Scene<f64>>, CliError> {
        self.scenes(renderer, "train_scene", self.train.scenes)
    }

    /// Held out: drawn from a stream disjoint from the training scenes.
    pub fn eval_scenes(&self, renderer: &Arc<Renderer<f64>>) -> Result<Vec<Scene<f64>>, CliError> {
        self.scenes(renderer, "eval_scene", self.eval.scenes)
    }
}
