//! Euler sampling of one chunk and chunk-wise rollout.

use serde::{Deserialize, Serialize};

use crate::codec::LossyCodec;
use crate::error::{check_dim, Error, Result};
use crate::field::VelocityField;
use crate::memory::{
    assemble_context, build_identity_memory, build_motion_memory, concat_channels, inject_pose, ContextMemory,
    IdentityDraw,
};
use crate::metrics::{chunk_metrics, pearson};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Chunk, Frame};
use crate::world::{perturb, PerturbationKind, PerturbationSpec, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 20, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        Ok(())
    }
}

/// Integrates from `x_start` at `t_start` to `t = 1` in `steps` uniform Euler
/// steps, re-injecting pose before every evaluation.
pub fn integrate<T: Scalar, F: VelocityField<T> + ?Sized>(
    field: &F,
    ctx: &ContextMemory<T>,
    poses: &Chunk<T>,
    x_start: Chunk<T>,
    t_start: T,
    steps: usize,
) -> Result<Chunk<T>> {
    if steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    if !(t_start >= T::zero() && t_start < T::one()) {
        return Err(Error::Domain(format!("start time {t_start} outside [0, 1)")));
    }
    let h = (T::one() - t_start) / T::count(steps);
    let mut x = x_start;
    for k in 0..steps {
        let t = t_start + T::count(k) * h;
        let target = inject_pose(&x, poses, field.pose_adapter())?;
        let input = concat_channels(target, ctx, t)?;
        let v = field.velocity(&input, poses)?;
        x.axpy(h, &v)?;
        if !x.is_finite() {
            return Err(Error::Numeric {
                context: "sampler",
                step: Some(k),
                detail: format!("state became non-finite at t = {t}"),
            });
        }
    }
    Ok(x)
}

/// Draws `X₀ ~ N(0, I)` from the seeded stream and integrates it to `t = 1`.
pub fn sample_chunk<T: Scalar, F: VelocityField<T> + ?Sized>(
    field: &F,
    ctx: &ContextMemory<T>,
    poses: &Chunk<T>,
    cfg: &SamplerConfig,
) -> Result<Chunk<T>> {
    cfg.validate()?;
    let mut s = rng::stream(cfg.seed, "sampler", "x0");
    let x0 = rng::normal_chunk(&mut s, poses.len(), ctx.dim());
    integrate(field, ctx, poses, x0, T::zero(), cfg.steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    ImageCarryover,
    Sink,
    LatentPlp,
    LatentPlpRfm,
}

impl RolloutMode {
    pub const ALL: [RolloutMode; 4] = [Self::ImageCarryover, Self::Sink, Self::LatentPlp, Self::LatentPlpRfm];

    pub fn name(&self) -> &'static str {
        match self {
            Self::ImageCarryover => "image_carryover",
            Self::Sink => "sink",
            Self::LatentPlp => "latent_plp",
            Self::LatentPlpRfm => "latent_plp_rfm",
        }
    }

    /// Whether motion memory is carried as raw latents.
    pub fn propagates_latents(&self) -> bool {
        matches!(self, Self::LatentPlp | Self::LatentPlpRfm)
    }
}

impl std::fmt::Display for RolloutMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RolloutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown rollout mode '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub mode: RolloutMode,
    pub chunks: usize,
    pub frames_per_chunk: usize,
    pub r: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub m: usize,
}

impl RolloutConfig {
    pub fn new(mode: RolloutMode, chunks: usize) -> Self {
        Self {
            mode,
            chunks,
            frames_per_chunk: 6,
            r: 1,
            k: 4,
            m: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunks == 0 {
            return Err(Error::Config("rollout needs at least one chunk".into()));
        }
        if self.m == 0 || self.m > self.k {
            return Err(Error::Config(format!(
                "reference count m = {} must satisfy 1 <= m <= K = {}",
                self.m, self.k
            )));
        }
        if self.r + self.k > self.frames_per_chunk {
            return Err(Error::Config(format!(
                "r + K = {} exceeds chunk length {}",
                self.r + self.k,
                self.frames_per_chunk
            )));
        }
        if self.mode == RolloutMode::Sink && self.r + self.k == self.frames_per_chunk {
            return Err(Error::Config("sink mode needs a free pad slot (r + K < L)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkTrace {
    /// 1-based.
    pub index: usize,
    /// Codec round trips on the carry-over path into this chunk.
    pub codec_roundtrips: usize,
    pub background_mse: f64,
    pub character_mse: f64,
    pub identity_mse: f64,
    pub psnr_analog: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub mode: RolloutMode,
    pub chunks: Vec<ChunkTrace>,
    pub user_ref_indices: Vec<usize>,
    pub identity_draw: IdentityDraw,
    pub encode_calls: u64,
    pub decode_calls: u64,
}

impl RolloutTrace {
    pub fn inter_chunk_roundtrips(&self) -> usize {
        self.chunks.iter().map(|c| c.codec_roundtrips).sum()
    }
}

#[derive(Debug, Clone)]
pub struct RolloutOutput<T> {
    pub frames: Vec<Chunk<T>>,
    pub latents: Vec<Chunk<T>>,
    pub contexts: Vec<ContextMemory<T>>,
    pub trace: RolloutTrace,
}

/// `m` user latents followed by `K - m` latents sampled from the first chunk.
pub fn complete_identity_memory<T: Scalar>(
    user_refs: &[Frame<T>],
    first_chunk: Option<&Chunk<T>>,
    k: usize,
    m: usize,
    codec: &LossyCodec<T>,
    seed: u64,
) -> Result<(Vec<Frame<T>>, IdentityDraw)> {
    if m == 0 || m > k {
        return Err(Error::Config(format!("need 1 <= m <= K, got m = {m}, K = {k}")));
    }
    check_dim("complete_identity_memory: user references", m, user_refs.len())?;
    let mut out = user_refs.iter().map(|f| codec.encode(f)).collect::<Result<Vec<_>>>()?;
    if m == k {
        return Ok((out, IdentityDraw::default()));
    }
    let chunk = first_chunk
        .ok_or_else(|| Error::Config("first chunk required to complete identity memory when m < K".into()))?;
    let mut s = rng::stream(seed, "sampler", "identity");
    let (sampled, draw) = build_identity_memory(chunk, k - m, codec, None, &mut s)?;
    out.extend(sampled);
    Ok((out, draw))
}

/// Evenly spaced ground-truth frames standing in for user-provided references.
pub fn user_reference_indices(total_frames: usize, m: usize) -> Vec<usize> {
    (0..m).map(|i| i * total_frames / m.max(1)).collect()
}

fn cycled<T: Clone>(items: &[T], k: usize) -> Vec<T> {
    (0..k).map(|i| items[i % items.len()].clone()).collect()
}

/// Generates `N` chunks. Chunk 1 sees zero motion memory and the user
/// references cycled to `K` slots; afterwards the identity memory is completed
/// from the decoded first chunk in every mode and stays fixed. Modes differ
/// only in how motion memory is carried and whether a sink is added.
pub fn rollout<T: Scalar, F: VelocityField<T> + ?Sized>(
    field: &F,
    scene: &Scene<T>,
    codec: &LossyCodec<T>,
    rcfg: &RolloutConfig,
    scfg: &SamplerConfig,
) -> Result<RolloutOutput<T>> {
    rcfg.validate()?;
    scfg.validate()?;
    let l = rcfg.frames_per_chunk;
    if scene.frames_per_chunk() != l {
        return Err(Error::Config(format!(
            "scene chunks have {} frames, rollout expects {l}",
            scene.frames_per_chunk()
        )));
    }
    let total = rcfg.chunks * l;
    if scene.total_frames() < total {
        return Err(Error::Config(format!(
            "scene has {} frames, rollout needs {total}",
            scene.total_frames()
        )));
    }
    let (enc0, dec0) = (codec.encode_calls(), codec.decode_calls());
    let dim = codec.dim();

    let ref_indices = user_reference_indices(total, rcfg.m);
    let user_refs = ref_indices
        .iter()
        .map(|&i| scene.render_frame(i))
        .collect::<Result<Vec<_>>>()?;
    let ref_latents = user_refs.iter().map(|f| codec.encode(f)).collect::<Result<Vec<_>>>()?;

    let chunk_cfg = |n: usize| SamplerConfig {
        steps: scfg.steps,
        seed: rng::derive_indexed(scfg.seed, "rollout", "chunk", n as u64),
    };

    let mut frames = Vec::with_capacity(rcfg.chunks);
    let mut latents = Vec::with_capacity(rcfg.chunks);
    let mut contexts = Vec::with_capacity(rcfg.chunks);
    let mut chunks = Vec::with_capacity(rcfg.chunks);
    let mut identity: Vec<Frame<T>> = cycled(&ref_latents, rcfg.k);
    let mut identity_draw = IdentityDraw::default();

    for n in 1..=rcfg.chunks {
        let start = (n - 1) * l;
        let poses = scene.poses_range(start, start + l)?;
        let mut roundtrips = 0;
        let ctx = if n == 1 {
            assemble_context(vec![Frame::zeros(dim); rcfg.r], identity.clone(), l)?
        } else {
            let motion = if rcfg.mode.propagates_latents() {
                build_motion_memory(&latents[n - 2], rcfg.r)?
            } else {
                roundtrips = 1;
                let prev: &Chunk<T> = &frames[n - 2];
                (l - rcfg.r..l)
                    .map(|i| codec.encode(&prev.frame_owned(i)))
                    .collect::<Result<Vec<_>>>()?
            };
            let ctx = assemble_context(motion, identity.clone(), l)?;
            if rcfg.mode == RolloutMode::Sink {
                ctx.with_sink(ref_latents[0].clone())?
            } else {
                ctx
            }
        };
        let x = sample_chunk(field, &ctx, &poses, &chunk_cfg(n))?;
        let px = codec.decode_chunk(&x, start as u64)?;
        let m = chunk_metrics(&px, scene, start, n)?;
        chunks.push(ChunkTrace {
            index: n,
            codec_roundtrips: roundtrips,
            background_mse: m.background_mse,
            character_mse: m.character_mse,
            identity_mse: m.identity_mse,
            psnr_analog: m.psnr_analog,
        });
        if n == 1 {
            let (completed, draw) = complete_from_first_chunk(&user_refs, &ref_latents, &px, rcfg, codec, scfg.seed)?;
            identity = completed;
            identity_draw = draw;
        }
        frames.push(px);
        latents.push(x);
        contexts.push(ctx);
    }

    let trace = RolloutTrace {
        mode: rcfg.mode,
        chunks,
        user_ref_indices: ref_indices,
        identity_draw,
        encode_calls: codec.encode_calls() - enc0,
        decode_calls: codec.decode_calls() - dec0,
    };
    Ok(RolloutOutput {
        frames,
        latents,
        contexts,
        trace,
    })
}

/// Reuses the already-encoded user references and samples the rest from chunk 1.
fn complete_from_first_chunk<T: Scalar>(
    user_refs: &[Frame<T>],
    ref_latents: &[Frame<T>],
    first_chunk: &Chunk<T>,
    rcfg: &RolloutConfig,
    codec: &LossyCodec<T>,
    seed: u64,
) -> Result<(Vec<Frame<T>>, IdentityDraw)> {
    check_dim("identity completion", user_refs.len(), ref_latents.len())?;
    let mut out = ref_latents.to_vec();
    if rcfg.m == rcfg.k {
        return Ok((out, IdentityDraw::default()));
    }
    let mut s = rng::stream(seed, "sampler", "identity");
    let (sampled, draw) = build_identity_memory(first_chunk, rcfg.k - rcfg.m, codec, None, &mut s)?;
    out.extend(sampled);
    Ok((out, draw))
}

/// Settings for sampling from a perturbed mid-trajectory state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub t_start: f64,
    pub steps: usize,
    pub kind: PerturbationKind,
    pub magnitude: f64,
    pub r: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            t_start: 0.5,
            steps: 10,
            kind: PerturbationKind::Compose,
            magnitude: 0.15,
            r: 1,
            k: 4,
            seed: 0,
        }
    }
}

/// Mean endpoint error when sampling starts at `t_start` on the interpolant
/// toward a perturbed endpoint, with clean context, over all adjacent chunk
/// pairs of the scene. Measured against the clean encoded target chunk.
pub fn restoration_probe<T: Scalar, F: VelocityField<T> + ?Sized>(
    field: &F,
    scene: &Scene<T>,
    codec: &LossyCodec<T>,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let pairs = scene.split_chunks(scene.frames_per_chunk())?;
    if pairs.len() < 2 {
        return Err(Error::Config("restoration probe needs at least two chunks".into()));
    }
    let t0 = T::of(cfg.t_start);
    let mut s = rng::stream(cfg.seed, "sampler", "probe");
    let mut total = 0.0;
    for w in pairs.windows(2) {
        let ((v1, _), (v2, poses)) = (&w[0], &w[1]);
        let prev = codec.encode_chunk(v1)?;
        let x1 = codec.encode_chunk(v2)?;
        let (identity, _) = build_identity_memory(v1, cfg.k, codec, None, &mut s)?;
        let ctx = assemble_context(build_motion_memory(&prev, cfg.r)?, identity, v2.len())?;
        let xi = PerturbationSpec {
            kind: cfg.kind,
            magnitude: cfg.magnitude,
            seed: rand::Rng::random(&mut s),
        };
        let x1_tilde = codec.encode_chunk(&perturb(v2, &xi)?)?;
        let x0 = rng::normal_chunk::<T>(&mut s, v2.len(), codec.dim());
        let start = crate::flow::interpolate(&x0, &x1_tilde, t0)?;
        let end = integrate(field, &ctx, poses, start, t0, cfg.steps)?;
        total += end.sub(&x1)?.mean_square().as_f64();
    }
    Ok(total / (pairs.len() - 1) as f64)
}

/// Correlation between identity-memory slot content and generated content at
/// the same positions, after removing each chunk's across-slot mean. Measures
/// how much the field copies slot-specific detail from the memory.
pub fn context_bias<T: Scalar, F: VelocityField<T> + ?Sized>(
    field: &F,
    scenes: &[Scene<T>],
    codec: &LossyCodec<T>,
    r: usize,
    k: usize,
    scfg: &SamplerConfig,
) -> Result<f64> {
    let mut mem = Vec::new();
    let mut gen = Vec::new();
    let mut s = rng::stream(scfg.seed, "sampler", "context_bias");
    for (si, scene) in scenes.iter().enumerate() {
        let pairs = scene.split_chunks(scene.frames_per_chunk())?;
        for (n, w) in pairs.windows(2).enumerate() {
            let ((v1, _), (_, poses)) = (&w[0], &w[1]);
            let prev = codec.encode_chunk(v1)?;
            let (identity, _) = build_identity_memory(v1, k, codec, None, &mut s)?;
            let ctx = assemble_context(build_motion_memory(&prev, r)?, identity.clone(), poses.len())?;
            let cfg = SamplerConfig {
                steps: scfg.steps,
                seed: rng::derive_indexed(scfg.seed, "context_bias", "chunk", (si * 1000 + n) as u64),
            };
            let x = sample_chunk(field, &ctx, poses, &cfg)?;
            let d = codec.dim();
            for c in 0..d {
                let mm = identity.iter().map(|f| f.values()[c].as_f64()).sum::<f64>() / k as f64;
                let gm = (r..r + k).map(|p| x.frame(p)[c].as_f64()).sum::<f64>() / k as f64;
                for (j, slot) in identity.iter().enumerate() {
                    mem.push(slot.values()[c].as_f64() - mm);
                    gen.push(x.frame(r + j)[c].as_f64() - gm);
                }
            }
        }
    }
    Ok(pearson(&mem, &gen))
}
