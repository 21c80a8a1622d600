//! Persistent latent memory: motion and identity memories, the assembled
//! context block, and pose injection into the target latent.
//!
//! Context layout along time: `[motion (r) | identity (K) | pad (T_z - r - K)]`.
//! An optional sink slot replaces the first pad slot.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LossyCodec;
use crate::error::{check_dim, Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Chunk, Frame};

/// The last `r` latent slices of the previous chunk. No codec involvement.
pub fn build_motion_memory<T: Scalar>(prev_latents: &Chunk<T>, r: usize) -> Result<Vec<Frame<T>>> {
    let tz = prev_latents.len();
    if r > tz {
        return Err(Error::Config(format!("motion memory r = {r} exceeds chunk length {tz}")));
    }
    Ok((tz - r..tz).map(|i| prev_latents.frame_owned(i)).collect())
}

/// Identity-preserving augmentation strength. `magnitude = 1` allows cyclic
/// shifts of up to `⌊d/16⌋` coordinates and rescaling of the deviation from the
/// frame mean by a factor in `[0.9, 1.1]`; both ranges scale linearly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub magnitude: f64,
}

impl AugmentSpec {
    pub const OFF: Self = Self { magnitude: 0.0 };

    pub fn max_shift(&self, dim: usize) -> i64 {
        (self.magnitude * (dim / 16) as f64).floor() as i64
    }

    pub fn max_rescale(&self) -> f64 {
        0.1 * self.magnitude
    }
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { magnitude: 1.0 }
    }
}

/// What was drawn while building an identity memory, for the experiment record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityDraw {
    pub indices: Vec<usize>,
    pub shifts: Vec<i64>,
    pub scales: Vec<f64>,
}

/// Cyclic coordinate shift followed by rescaling the deviation from the mean.
pub fn augment_frame<T: Scalar>(frame: &[T], shift: i64, scale: T) -> Frame<T> {
    let d = frame.len() as i64;
    let shifted: Vec<T> = (0..d)
        .map(|i| frame[((i - shift).rem_euclid(d)) as usize])
        .collect();
    let mean = shifted.iter().copied().sum::<T>() / T::count(shifted.len());
    Frame::from_vec_unchecked(shifted.iter().map(|v| mean + scale * (*v - mean)).collect())
}

/// Samples `k` distinct frames, optionally augments them, and encodes them.
pub fn build_identity_memory<T: Scalar>(
    chunk_frames: &Chunk<T>,
    k: usize,
    codec: &LossyCodec<T>,
    augment: Option<AugmentSpec>,
    rng: &mut Stream,
) -> Result<(Vec<Frame<T>>, IdentityDraw)> {
    if k > chunk_frames.len() {
        return Err(Error::Config(format!(
            "identity memory K = {k} exceeds chunk length {}",
            chunk_frames.len()
        )));
    }
    let indices = rand::seq::index::sample(rng, chunk_frames.len(), k).into_vec();
    let mut draw = IdentityDraw {
        indices: indices.clone(),
        ..IdentityDraw::default()
    };
    let mut out = Vec::with_capacity(k);
    for &i in &indices {
        let frame = chunk_frames.frame(i);
        let pixels = match augment {
            Some(spec) if spec.magnitude > 0.0 => {
                let max_shift = spec.max_shift(frame.len());
                let shift = if max_shift > 0 {
                    rng.random_range(-max_shift..=max_shift)
                } else {
                    0
                };
                let r = spec.max_rescale();
                let scale = rng.random_range(1.0 - r..=1.0 + r);
                draw.shifts.push(shift);
                draw.scales.push(scale);
                augment_frame(frame, shift, T::of(scale))
            }
            _ => Frame::from_vec_unchecked(frame.to_vec()),
        };
        out.push(codec.encode(&pixels)?);
    }
    Ok((out, draw))
}

/// Assembled context tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextMemory<T> {
    motion: Vec<Frame<T>>,
    identity: Vec<Frame<T>>,
    sink: Option<Frame<T>>,
    pad: usize,
    dim: usize,
}

impl<T: Scalar> ContextMemory<T> {
    pub fn motion(&self) -> &[Frame<T>] {
        &self.motion
    }

    pub fn identity(&self) -> &[Frame<T>] {
        &self.identity
    }

    pub fn sink(&self) -> Option<&Frame<T>> {
        self.sink.as_ref()
    }

    /// Number of zero slots after the sink (if any) is placed.
    pub fn pad_len(&self) -> usize {
        self.pad - usize::from(self.sink.is_some())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Temporal length `T_z`.
    pub fn len(&self) -> usize {
        self.motion.len() + self.identity.len() + self.pad
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Places a persistent reference latent in the first pad slot.
    pub fn with_sink(mut self, sink: Frame<T>) -> Result<Self> {
        check_dim("ContextMemory::with_sink", self.dim, sink.dim())?;
        if self.pad == 0 {
            return Err(Error::Config("sink slot needs at least one pad slot (r + K < T_z)".into()));
        }
        self.sink = Some(sink);
        Ok(self)
    }

    pub fn to_chunk(&self) -> Chunk<T> {
        let mut out = Chunk::zeros(self.len(), self.dim);
        let slots = self
            .motion
            .iter()
            .chain(&self.identity)
            .chain(self.sink.as_ref());
        for (i, f) in slots.enumerate() {
            out.frame_mut(i).copy_from_slice(f.values());
        }
        out
    }
}

/// `Concat_t(motion, identity, zero pad)` with total length `t_z`.
pub fn assemble_context<T: Scalar>(
    motion: Vec<Frame<T>>,
    identity: Vec<Frame<T>>,
    t_z: usize,
) -> Result<ContextMemory<T>> {
    if identity.is_empty() {
        return Err(Error::Config("identity memory needs K >= 1".into()));
    }
    let used = motion.len() + identity.len();
    if used > t_z {
        return Err(Error::Config(format!(
            "r + K = {used} exceeds context length T_z = {t_z}"
        )));
    }
    let dim = identity[0].dim();
    for f in motion.iter().chain(&identity) {
        check_dim("assemble_context", dim, f.dim())?;
    }
    Ok(ContextMemory {
        motion,
        identity,
        sink: None,
        pad: t_z - used,
        dim,
    })
}

/// Linear per-frame pose encoder `pose → W pose + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseAdapter<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> PoseAdapter<T> {
    pub fn zeros(latent_dim: usize, pose_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(latent_dim, pose_dim),
            bias: vec![T::zero(); latent_dim],
        }
    }

    pub fn random(latent_dim: usize, pose_dim: usize, scale: T, rng: &mut Stream) -> Self {
        let w = rng::normal_vec::<T>(rng, latent_dim * pose_dim)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        Self {
            weight: Matrix::from_rows(latent_dim, pose_dim, w).expect("sizes agree"),
            bias: vec![T::zero(); latent_dim],
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn pose_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn apply(&self, pose: &[T]) -> Result<Vec<T>> {
        let mut y = self.weight.matvec(pose)?;
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += *b;
        }
        Ok(y)
    }
}

/// `X̂_t = X_t + E_pose(poses)`, slice by slice.
pub fn inject_pose<T: Scalar>(xt: &Chunk<T>, poses: &Chunk<T>, adapter: &PoseAdapter<T>) -> Result<Chunk<T>> {
    check_dim("inject_pose: frames", xt.len(), poses.len())?;
    check_dim("inject_pose: latent dim", adapter.latent_dim(), xt.dim())?;
    check_dim("inject_pose: pose dim", adapter.pose_dim(), poses.dim())?;
    let mut out = xt.clone();
    for i in 0..out.len() {
        let e = adapter.apply(poses.frame(i))?;
        for (v, p) in out.frame_mut(i).iter_mut().zip(&e) {
            *v += *p;
        }
    }
    Ok(out)
}

/// Network input `H_t`: the pose-injected target and the context, aligned per position.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<T> {
    pub target: Chunk<T>,
    pub context: Chunk<T>,
    pub t: T,
}

impl<T: Scalar> ModelInput<T> {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    /// Channel-concatenated features at position `i`: target in `0..d`, context in `d..2d`.
    pub fn channels(&self, i: usize) -> Vec<T> {
        let mut v = self.target.frame(i).to_vec();
        v.extend_from_slice(self.context.frame(i));
        v
    }

    /// Inverse of [`concat_channels`].
    pub fn split(&self) -> (Chunk<T>, Chunk<T>) {
        (self.target.clone(), self.context.clone())
    }
}

/// `H_t = Concat_ch(X̂_t, M_ctx)`.
pub fn concat_channels<T: Scalar>(target: Chunk<T>, ctx: &ContextMemory<T>, t: T) -> Result<ModelInput<T>> {
    check_dim("concat_channels: length", ctx.len(), target.len())?;
    check_dim("concat_channels: dim", ctx.dim(), target.dim())?;
    Ok(ModelInput {
        target,
        context: ctx.to_chunk(),
        t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecParams;

    fn ramp(len: usize, dim: usize) -> Chunk<f64> {
        Chunk::from_flat(dim, (0..len * dim).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn motion_memory_examples() {
        let x = ramp(6, 3);
        let m = build_motion_memory(&x, 2).unwrap();
        assert_eq!(m[0].values(), x.frame(4));
        assert_eq!(m[1].values(), x.frame(5));
        assert!(build_motion_memory(&x, 0).unwrap().is_empty());
        assert_eq!(Chunk::from_frames(&build_motion_memory(&x, 6).unwrap()).unwrap(), x);
        assert!(matches!(build_motion_memory(&x, 7), Err(Error::Config(_))));
    }

    #[test]
    fn identity_memory_examples() {
        let codec = LossyCodec::<f64>::new(CodecParams::new(32, 0.9, 0.1, 1)).unwrap();
        let frames = ramp(6, 32);
        let mut s = rng::stream(1, "t", "id");
        let (mem, draw) = build_identity_memory(&frames, 6, &codec, None, &mut s).unwrap();
        assert_eq!(mem.len(), 6);
        let mut idx = draw.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());

        let constant = Chunk::from_flat(32, vec![0.4; 6 * 32]).unwrap();
        let (mem, _) = build_identity_memory(&constant, 4, &codec, None, &mut s).unwrap();
        assert!(mem.windows(2).all(|w| w[0] == w[1]));

        let (a, da) = build_identity_memory(&frames, 4, &codec, None, &mut rng::stream(2, "t", "id")).unwrap();
        let (b, db) =
            build_identity_memory(&frames, 4, &codec, Some(AugmentSpec::OFF), &mut rng::stream(2, "t", "id")).unwrap();
        assert_eq!((a, da.indices), (b, db.indices));

        assert!(matches!(
            build_identity_memory(&frames, 7, &codec, None, &mut s),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn augmentation_draws_are_within_range() {
        let codec = LossyCodec::<f64>::new(CodecParams::lossless(32, 1)).unwrap();
        let frames = ramp(6, 32);
        let mut s = rng::stream(3, "t", "aug");
        let (_, draw) = build_identity_memory(&frames, 4, &codec, Some(AugmentSpec::default()), &mut s).unwrap();
        assert!(draw.shifts.iter().all(|s| s.abs() <= 2));
        assert!(draw.scales.iter().all(|s| (0.9..=1.1).contains(s)));
    }

    #[test]
    fn augment_frame_shifts_cyclically() {
        let f = augment_frame(&[1.0, 2.0, 3.0, 4.0], 1, 1.0);
        assert_eq!(f.values(), &[4.0, 1.0, 2.0, 3.0]);
        let g = augment_frame(&[1.0, 3.0], 0, 2.0);
        assert_eq!(g.values(), &[0.0, 4.0]);
    }

    #[test]
    fn context_examples() {
        let f = |v: f64| Frame::new(vec![v, v]).unwrap();
        let ctx = assemble_context(vec![f(1.0)], vec![f(2.0), f(3.0), f(4.0), f(5.0)], 6).unwrap();
        assert_eq!(ctx.pad_len(), 1);
        let chunk = ctx.to_chunk();
        assert_eq!(chunk.len(), 6);
        assert_eq!(chunk.frame(0), &[1.0, 1.0]);
        assert_eq!(chunk.frame(5), &[0.0, 0.0]);

        let full = assemble_context(vec![], (0..6).map(|i| f(i as f64)).collect(), 6).unwrap();
        assert_eq!(full.pad_len(), 0);
        assert!(full.clone().with_sink(f(9.0)).is_err());
        assert!(matches!(
            assemble_context(vec![f(0.0); 3], vec![f(0.0); 4], 6),
            Err(Error::Config(_))
        ));

        let sunk = ctx.with_sink(f(9.0)).unwrap();
        assert_eq!(sunk.pad_len(), 0);
        assert_eq!(sunk.to_chunk().frame(5), &[9.0, 9.0]);
    }

    #[test]
    fn pose_injection_examples() {
        let xt = ramp(3, 4);
        let poses = Chunk::from_flat(2, vec![0.5, -1.0, 0.0, 2.0, 1.0, 1.0]).unwrap();
        assert_eq!(inject_pose(&xt, &poses, &PoseAdapter::zeros(4, 2)).unwrap(), xt);

        let adapter = PoseAdapter::random(4, 2, 1.0, &mut rng::stream(1, "t", "pose"));
        let zero = Chunk::zeros(3, 4);
        let only = inject_pose(&zero, &poses, &adapter).unwrap();
        for i in 0..3 {
            assert_eq!(only.frame(i), adapter.apply(poses.frame(i)).unwrap().as_slice());
        }
        let both = inject_pose(&xt, &poses, &adapter).unwrap();
        assert!(both.sub(&only).unwrap().sub(&xt).unwrap().max_abs() < 1e-12);
        assert!(matches!(
            inject_pose(&xt, &poses.slice(0, 2), &adapter),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn channel_concat_examples() {
        let f = |v: f64| Frame::new(vec![v, -v]).unwrap();
        let target = ramp(3, 2);
        let zero_ctx = assemble_context(vec![], vec![Frame::zeros(2)], 3).unwrap();
        let input = concat_channels(target.clone(), &zero_ctx, 0.3).unwrap();
        assert_eq!(input.context.max_abs(), 0.0);
        assert_eq!(input.channels(1), vec![2.0, 3.0, 0.0, 0.0]);

        let ctx = assemble_context(vec![f(1.0)], vec![f(2.0), f(3.0)], 3).unwrap();
        let input = concat_channels(target.clone(), &ctx, 0.3).unwrap();
        assert_eq!(input.split(), (target.clone(), ctx.to_chunk()));

        let swapped = assemble_context(vec![f(2.0)], vec![f(1.0), f(3.0)], 3).unwrap();
        let other = concat_channels(target.clone(), &swapped, 0.3).unwrap();
        let changed: Vec<usize> = (0..3).filter(|&i| input.channels(i) != other.channels(i)).collect();
        assert_eq!(changed, vec![0, 1]);

        assert!(concat_channels(ramp(4, 2), &ctx, 0.3).is_err());
    }
}
