//! Synthetic ground-truth sequences and the perturbation operators used for
//! restorative training.
//!
//! A pixel frame is `background + character(identity, pose)`. The background is
//! static per scene. The character only touches the first `character_dim`
//! coordinates (the "character region") and is linear in the identity code:
//! `character(id, pose) = Φ(pose) id` with `Φ_ij(pose) = sin(ω_ij · pose + φ_ij) / √k`.
//! Linearity in `id` is what lets the metrics recover the identity by least
//! squares.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Chunk, Frame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub pixel_dim: usize,
    /// Leading coordinates the character renders into.
    pub character_dim: usize,
    pub pose_dim: usize,
    pub identity_dim: usize,
    pub frames_per_chunk: usize,
    pub chunks: usize,
    /// Standard deviation of the pose random-walk increments.
    pub pose_step: f64,
    /// Poses are clipped to `[-pose_clip, pose_clip]`.
    pub pose_clip: f64,
    /// Highest spatial frequency of the periodic background. Zero gives white noise.
    #[serde(default = "default_background_frequencies")]
    pub background_frequencies: usize,
}

fn default_background_frequencies() -> usize {
    4
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            pixel_dim: 32,
            character_dim: 16,
            pose_dim: 4,
            identity_dim: 8,
            frames_per_chunk: 6,
            chunks: 8,
            pose_step: 0.25,
            pose_clip: 2.0,
            background_frequencies: default_background_frequencies(),
        }
    }
}

impl WorldConfig {
    pub fn total_frames(&self) -> usize {
        self.frames_per_chunk * self.chunks
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pixel_dim", self.pixel_dim),
            ("character_dim", self.character_dim),
            ("pose_dim", self.pose_dim),
            ("identity_dim", self.identity_dim),
            ("frames_per_chunk", self.frames_per_chunk),
            ("chunks", self.chunks),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("world {name} must be at least 1")));
        }
        if self.character_dim > self.pixel_dim {
            return Err(Error::Config("character_dim exceeds pixel_dim".into()));
        }
        if self.identity_dim > self.character_dim {
            return Err(Error::Config(
                "identity_dim exceeds character_dim; identity would not be recoverable".into(),
            ));
        }
        if !(self.pose_step >= 0.0 && self.pose_clip > 0.0) {
            return Err(Error::Config("pose_step must be >= 0 and pose_clip > 0".into()));
        }
        Ok(())
    }
}

/// The fixed nonlinear character render shared by every scene of a world.
#[derive(Debug, Clone, PartialEq)]
pub struct Renderer<T> {
    pixel_dim: usize,
    character_dim: usize,
    pose_dim: usize,
    identity_dim: usize,
    freq: Vec<T>,
    phase: Vec<T>,
    scale: T,
}

impl<T: Scalar> Renderer<T> {
    pub fn new(cfg: &WorldConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut s = rng::stream(seed, "world", "renderer");
        let n = cfg.character_dim * cfg.identity_dim;
        let freq = rng::normal_vec(&mut s, n * cfg.pose_dim);
        let phase = (0..n)
            .map(|_| T::of(s.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        Ok(Self {
            pixel_dim: cfg.pixel_dim,
            character_dim: cfg.character_dim,
            pose_dim: cfg.pose_dim,
            identity_dim: cfg.identity_dim,
            freq,
            phase,
            scale: T::one() / T::count(cfg.identity_dim).sqrt(),
        })
    }

    pub fn pixel_dim(&self) -> usize {
        self.pixel_dim
    }

    pub fn character_dim(&self) -> usize {
        self.character_dim
    }

    pub fn pose_dim(&self) -> usize {
        self.pose_dim
    }

    pub fn identity_dim(&self) -> usize {
        self.identity_dim
    }

    /// `Φ(pose)`: `character_dim × identity_dim`.
    pub fn basis(&self, pose: &[T]) -> Result<Matrix<T>> {
        crate::error::check_dim("Renderer::basis", self.pose_dim, pose.len())?;
        let mut m = Matrix::zeros(self.character_dim, self.identity_dim);
        for i in 0..self.character_dim {
            for j in 0..self.identity_dim {
                let k = i * self.identity_dim + j;
                let w = &self.freq[k * self.pose_dim..(k + 1) * self.pose_dim];
                let arg = crate::linalg::dot(w, pose) + self.phase[k];
                m[(i, j)] = self.scale * arg.sin();
            }
        }
        Ok(m)
    }

    /// Character contribution over the full pixel frame (zero outside the region).
    pub fn character(&self, identity: &[T], pose: &[T]) -> Result<Frame<T>> {
        crate::error::check_dim("Renderer::character", self.identity_dim, identity.len())?;
        let mut out = self.basis(pose)?.matvec(identity)?;
        out.resize(self.pixel_dim, T::zero());
        Ok(Frame::from_vec_unchecked(out))
    }
}

/// Random trigonometric polynomial over the cyclic coordinate index, unit
/// variance per coordinate. Small cyclic shifts barely change it.
fn smooth_background<T: Scalar>(s: &mut Stream, dim: usize, freqs: usize) -> Frame<T> {
    if freqs == 0 {
        return rng::normal_frame(s, dim);
    }
    let coef: Vec<f64> = rng::normal_vec(s, 2 * freqs + 1);
    let norm = 1.0 / ((freqs + 1) as f64).sqrt();
    let vals = (0..dim)
        .map(|k| {
            let mut v = coef[0];
            for f in 1..=freqs {
                let a = std::f64::consts::TAU * (f * k) as f64 / dim as f64;
                v += coef[2 * f - 1] * a.cos() + coef[2 * f] * a.sin();
            }
            T::of(v * norm)
        })
        .collect();
    Frame::from_vec_unchecked(vals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T> {
    pub background: Frame<T>,
    pub identity: Vec<T>,
    pub pose_track: Vec<Frame<T>>,
    renderer: Arc<Renderer<T>>,
    frames_per_chunk: usize,
    seed: u64,
}

impl<T: Scalar> Scene<T> {
    pub fn generate(renderer: Arc<Renderer<T>>, cfg: &WorldConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut s = rng::stream(seed, "world", "scene");
        let background = smooth_background(&mut s, cfg.pixel_dim, cfg.background_frequencies);
        let identity = rng::normal_vec(&mut s, cfg.identity_dim);
        let pose_track = pose_walk(&mut s, cfg);
        Ok(Self {
            background,
            identity,
            pose_track,
            renderer,
            frames_per_chunk: cfg.frames_per_chunk,
            seed,
        })
    }

    /// Assembles a scene from explicit parts.
    pub fn from_parts(
        renderer: Arc<Renderer<T>>,
        background: Frame<T>,
        identity: Vec<T>,
        pose_track: Vec<Frame<T>>,
        frames_per_chunk: usize,
    ) -> Result<Self> {
        crate::error::check_dim("Scene::background", renderer.pixel_dim, background.dim())?;
        crate::error::check_dim("Scene::identity", renderer.identity_dim, identity.len())?;
        for p in &pose_track {
            crate::error::check_dim("Scene::pose", renderer.pose_dim, p.dim())?;
        }
        if frames_per_chunk == 0 || !pose_track.len().is_multiple_of(frames_per_chunk) {
            return Err(Error::Config(format!(
                "pose track of length {} is not a whole number of {}-frame chunks",
                pose_track.len(),
                frames_per_chunk
            )));
        }
        Ok(Self {
            background,
            identity,
            pose_track,
            renderer,
            frames_per_chunk,
            seed: 0,
        })
    }

    pub fn renderer(&self) -> &Renderer<T> {
        &self.renderer
    }

    pub fn shared_renderer(&self) -> Arc<Renderer<T>> {
        Arc::clone(&self.renderer)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn total_frames(&self) -> usize {
        self.pose_track.len()
    }

    pub fn frames_per_chunk(&self) -> usize {
        self.frames_per_chunk
    }

    pub fn chunk_count(&self) -> usize {
        self.pose_track.len() / self.frames_per_chunk
    }

    pub fn character(&self, index: usize) -> Result<Frame<T>> {
        let pose = self.pose_track.get(index).ok_or_else(|| {
            Error::Domain(format!(
                "frame index {index} out of range 0..{}",
                self.pose_track.len()
            ))
        })?;
        self.renderer.character(&self.identity, pose.values())
    }

    /// Ground-truth frame at 0-based `index`.
    pub fn render_frame(&self, index: usize) -> Result<Frame<T>> {
        let c = self.character(index)?;
        Ok(Frame::from_vec_unchecked(
            self.background
                .values()
                .iter()
                .zip(c.values())
                .map(|(b, c)| *b + *c)
                .collect(),
        ))
    }

    pub fn render_range(&self, start: usize, end: usize) -> Result<Chunk<T>> {
        let frames = (start..end)
            .map(|i| self.render_frame(i))
            .collect::<Result<Vec<_>>>()?;
        Chunk::from_frames(&frames)
    }

    pub fn poses_range(&self, start: usize, end: usize) -> Result<Chunk<T>> {
        if end > self.pose_track.len() || start >= end {
            return Err(Error::Domain(format!("pose range {start}..{end} invalid")));
        }
        Chunk::from_frames(&self.pose_track[start..end])
    }

    /// Splits the scene into `len`-frame chunks of (frames, poses).
    pub fn split_chunks(&self, len: usize) -> Result<Vec<(Chunk<T>, Chunk<T>)>> {
        if len == 0 || !self.total_frames().is_multiple_of(len) {
            return Err(Error::Config(format!(
                "{} frames do not divide into chunks of {len}",
                self.total_frames()
            )));
        }
        (0..self.total_frames() / len)
            .map(|n| {
                let (a, b) = (n * len, (n + 1) * len);
                Ok((self.render_range(a, b)?, self.poses_range(a, b)?))
            })
            .collect()
    }

    /// Plain-text record for inspection; regenerate from the seed for real use.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let join = |v: &[T]| {
            v.iter()
                .map(|x| format!("{}", x.as_f64()))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "# driftlab scene v1");
        let _ = writeln!(
            out,
            "# lines: header, background, identity, then one pose per frame"
        );
        let _ = writeln!(
            out,
            "seed={} pixel_dim={} character_dim={} identity_dim={} pose_dim={} frames={} frames_per_chunk={}",
            self.seed,
            self.renderer.pixel_dim,
            self.renderer.character_dim,
            self.renderer.identity_dim,
            self.renderer.pose_dim,
            self.total_frames(),
            self.frames_per_chunk
        );
        let _ = writeln!(out, "background {}", join(self.background.values()));
        let _ = writeln!(out, "identity {}", join(&self.identity));
        for (i, p) in self.pose_track.iter().enumerate() {
            let _ = writeln!(out, "pose {i} {}", join(p.values()));
        }
        out
    }
}

fn pose_walk<T: Scalar>(s: &mut Stream, cfg: &WorldConfig) -> Vec<Frame<T>> {
    let clip = cfg.pose_clip;
    let mut pose: Vec<f64> = (0..cfg.pose_dim).map(|_| s.random_range(-clip..clip) * 0.5).collect();
    (0..cfg.total_frames())
        .map(|_| {
            for p in &mut pose {
                let z: f64 = rng::normal(s);
                *p = (*p + cfg.pose_step * z).clamp(-clip, clip);
            }
            Frame::from_vec_unchecked(pose.iter().map(|v| T::of(*v)).collect())
        })
        .collect()
}

/// Perturbation families: saturation, color shift, sharpness, and a random pick among them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    /// `x → (1+m)(x - mean) + mean`, per frame.
    Gain,
    /// `x → x + m u` for a fixed random unit vector `u`.
    Offset,
    /// Temporal three-tap moving average, blended in with weight `m`.
    Smooth,
    /// One of the three above, chosen from the seed.
    Compose,
}

impl std::str::FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gain" => Ok(Self::Gain),
            "offset" => Ok(Self::Offset),
            "smooth" => Ok(Self::Smooth),
            "compose" => Ok(Self::Compose),
            other => Err(Error::Config(format!("unknown perturbation kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub magnitude: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn identity() -> Self {
        Self {
            kind: PerturbationKind::Compose,
            magnitude: 0.0,
            seed: 0,
        }
    }

    /// Draws a magnitude uniformly in `[0, max_magnitude]` and a fresh seed.
    pub fn draw(kind: PerturbationKind, max_magnitude: f64, rng: &mut Stream) -> Self {
        let magnitude = if max_magnitude > 0.0 {
            rng.random_range(0.0..=max_magnitude)
        } else {
            0.0
        };
        Self {
            kind,
            magnitude,
            seed: rng.random(),
        }
    }

    /// The concrete family applied for this spec.
    pub fn resolved_kind(&self) -> PerturbationKind {
        match self.kind {
            PerturbationKind::Compose => {
                match rng::stream(self.seed, "perturb", "compose").random_range(0..3) {
                    0 => PerturbationKind::Gain,
                    1 => PerturbationKind::Offset,
                    _ => PerturbationKind::Smooth,
                }
            }
            k => k,
        }
    }
}

/// Applies `T_ξ` to a pixel chunk. Magnitude zero is the identity map.
pub fn perturb<T: Scalar>(chunk: &Chunk<T>, spec: &PerturbationSpec) -> Result<Chunk<T>> {
    if !spec.magnitude.is_finite() {
        return Err(Error::Config("perturbation magnitude must be finite".into()));
    }
    if spec.magnitude == 0.0 {
        return Ok(chunk.clone());
    }
    let m = T::of(spec.magnitude);
    Ok(match spec.resolved_kind() {
        PerturbationKind::Gain => gain(chunk, m),
        PerturbationKind::Offset => {
            let u = offset_direction::<T>(chunk.dim(), spec.seed);
            offset(chunk, m, &u)?
        }
        PerturbationKind::Smooth => smooth(chunk, m),
        PerturbationKind::Compose => unreachable!("resolved_kind never returns Compose"),
    })
}

pub fn gain<T: Scalar>(chunk: &Chunk<T>, m: T) -> Chunk<T> {
    let mut out = chunk.clone();
    for i in 0..out.len() {
        let f = out.frame_mut(i);
        let mean = f.iter().copied().sum::<T>() / T::count(f.len());
        for v in f.iter_mut() {
            *v = (T::one() + m) * (*v - mean) + mean;
        }
    }
    out
}

pub fn offset<T: Scalar>(chunk: &Chunk<T>, m: T, direction: &Frame<T>) -> Result<Chunk<T>> {
    crate::error::check_dim("offset", chunk.dim(), direction.dim())?;
    let mut out = chunk.clone();
    for i in 0..out.len() {
        for (v, u) in out.frame_mut(i).iter_mut().zip(direction.values()) {
            *v += m * *u;
        }
    }
    Ok(out)
}

pub fn smooth<T: Scalar>(chunk: &Chunk<T>, m: T) -> Chunk<T> {
    let n = chunk.len();
    let third = T::one() / T::of(3.0);
    let mut out = chunk.clone();
    for i in 0..n {
        let prev = chunk.frame(i.saturating_sub(1));
        let next = chunk.frame((i + 1).min(n - 1));
        let cur = chunk.frame(i);
        for (k, v) in out.frame_mut(i).iter_mut().enumerate() {
            let avg = (prev[k] + cur[k] + next[k]) * third;
            *v = (T::one() - m) * cur[k] + m * avg;
        }
    }
    out
}

pub fn offset_direction<T: Scalar>(dim: usize, seed: u64) -> Frame<T> {
    let mut s = rng::stream(seed, "perturb", "offset");
    let v = rng::normal_frame::<T>(&mut s, dim);
    let n = v.norm();
    Frame::from_vec_unchecked(v.values().iter().map(|x| *x / n).collect())
}
