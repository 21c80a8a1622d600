//! Lossy encode/decode surrogate for a video autoencoder.
//!
//! `encode(x) = A x + b` with a fixed well-conditioned `A`. `decode` inverts the
//! affine map and then applies the round-trip loss
//! `x' = μ + γ (x - μ) + η`, `η ~ N(0, σ² I)`. With `σ = 0`, `k` round trips give
//! `x_k - μ = γᵏ (x - μ)`, so the error is `(1 - γᵏ) ‖x - μ‖`.
//!
//! Noise is counter-based: every decode takes an explicit key and draws from a
//! stream seeded by `(seed, key)`, so results do not depend on call order.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::Matrix;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Chunk, Frame};

pub const DEFAULT_GAMMA: f64 = 0.97;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.005;

/// Scale of the random part of the encoder matrix relative to the identity.
const MIXING_SCALE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecParams {
    pub dim: usize,
    pub gamma: f64,
    pub noise_sigma: f64,
    /// Codec mean in pixel space; zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    pub seed: u64,
}

impl CodecParams {
    pub fn new(dim: usize, gamma: f64, noise_sigma: f64, seed: u64) -> Self {
        Self {
            dim,
            gamma,
            noise_sigma,
            mu: None,
            seed,
        }
    }

    pub fn lossless(dim: usize, seed: u64) -> Self {
        Self::new(dim, 1.0, 0.0, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("codec dimension must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("codec gamma = {} outside (0, 1]", self.gamma)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "codec noise_sigma = {} must be >= 0",
                self.noise_sigma
            )));
        }
        if let Some(mu) = &self.mu {
            if mu.len() != self.dim {
                return Err(Error::Config(format!(
                    "codec mu has {} entries, expected {}",
                    mu.len(),
                    self.dim
                )));
            }
        }
        Ok(())
    }
}

/// Identifies one decode's noise draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseKey(pub u64);

#[derive(Debug)]
pub struct LossyCodec<T> {
    params: CodecParams,
    gamma: T,
    sigma: T,
    mu: Frame<T>,
    enc: Matrix<T>,
    dec: Matrix<T>,
    offset: Vec<T>,
    encodes: AtomicU64,
    decodes: AtomicU64,
}

impl<T: Scalar> LossyCodec<T> {
    pub fn new(params: CodecParams) -> Result<Self> {
        params.validate()?;
        let d = params.dim;
        let mut s = rng::stream(params.seed, "codec", "matrix");
        let scale = T::of(MIXING_SCALE / (d as f64).sqrt());
        let mut enc = Matrix::identity(d);
        for v in enc.as_mut_slice() {
            *v += scale * rng::normal::<T>(&mut s);
        }
        let dec = enc.inverse()?;
        let offset = rng::normal_vec(&mut rng::stream(params.seed, "codec", "offset"), d);
        let mu = match &params.mu {
            Some(m) => Frame::new(m.iter().map(|v| T::of(*v)).collect())?,
            None => Frame::zeros(d),
        };
        Ok(Self {
            gamma: T::of(params.gamma),
            sigma: T::of(params.noise_sigma),
            mu,
            enc,
            dec,
            offset,
            params,
            encodes: AtomicU64::new(0),
            decodes: AtomicU64::new(0),
        })
    }

    pub fn params(&self) -> &CodecParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn mu(&self) -> &Frame<T> {
        &self.mu
    }

    pub fn encoder_matrix(&self) -> &Matrix<T> {
        &self.enc
    }

    pub fn offset(&self) -> &[T] {
        &self.offset
    }

    pub fn is_lossless(&self) -> bool {
        self.params.gamma == 1.0 && self.params.noise_sigma == 0.0
    }

    pub fn encode(&self, frame: &Frame<T>) -> Result<Frame<T>> {
        self.encodes.fetch_add(1, Ordering::Relaxed);
        self.encode_uncounted(frame.values())
    }

    /// Pure inverse of the affine map, without round-trip loss and without
    /// touching the call counters. Used by analysis code and oracles.
    pub fn invert(&self, latent: &[T]) -> Result<Frame<T>> {
        check_dim("LossyCodec::invert", self.dim(), latent.len())?;
        let shifted: Vec<T> = latent.iter().zip(&self.offset).map(|(x, b)| *x - *b).collect();
        Ok(Frame::from_vec_unchecked(self.dec.matvec(&shifted)?))
    }

    pub(crate) fn encode_uncounted(&self, pixels: &[T]) -> Result<Frame<T>> {
        check_dim("LossyCodec::encode", self.dim(), pixels.len())?;
        let mut z = self.enc.matvec(pixels)?;
        for (v, b) in z.iter_mut().zip(&self.offset) {
            *v += *b;
        }
        Ok(Frame::from_vec_unchecked(z))
    }

    pub fn decode(&self, latent: &Frame<T>, key: NoiseKey) -> Result<Frame<T>> {
        self.decodes.fetch_add(1, Ordering::Relaxed);
        let x = self.invert(latent.values())?;
        let mut out: Vec<T> = x
            .values()
            .iter()
            .zip(self.mu.values())
            .map(|(v, m)| *m + self.gamma * (*v - *m))
            .collect();
        if self.sigma > T::zero() {
            let mut s = rng::indexed_stream(self.params.seed, "codec", "noise", key.0);
            for v in &mut out {
                *v += self.sigma * rng::normal::<T>(&mut s);
            }
        }
        Ok(Frame::from_vec_unchecked(out))
    }

    pub fn encode_chunk(&self, chunk: &Chunk<T>) -> Result<Chunk<T>> {
        let frames = chunk
            .frames()
            .map(|f| {
                self.encodes.fetch_add(1, Ordering::Relaxed);
                self.encode_uncounted(f)
            })
            .collect::<Result<Vec<_>>>()?;
        Chunk::from_frames(&frames)
    }

    /// Decodes every frame; frame `i` uses key `first_key + i`.
    pub fn decode_chunk(&self, chunk: &Chunk<T>, first_key: u64) -> Result<Chunk<T>> {
        let frames = chunk
            .frames()
            .enumerate()
            .map(|(i, f)| self.decode(&Frame::from_vec_unchecked(f.to_vec()), NoiseKey(first_key + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Chunk::from_frames(&frames)
    }

    /// One decode-then-encode cycle on a latent.
    pub fn latent_round_trip(&self, latent: &Frame<T>, key: NoiseKey) -> Result<Frame<T>> {
        self.encode(&self.decode(latent, key)?)
    }

    /// `‖(D∘E)ᵏ(frame) - frame‖₂` for `k = 1..=n`; round trip `k` uses key `k`.
    pub fn roundtrip_error_curve(&self, frame: &Frame<T>, n: usize) -> Result<Vec<T>> {
        if n == 0 {
            return Err(Error::Domain("round-trip count must be at least 1".into()));
        }
        let mut x = frame.clone();
        let mut curve = Vec::with_capacity(n);
        for k in 1..=n {
            x = self.decode(&self.encode(&x)?, NoiseKey(k as u64))?;
            curve.push(x.sub(frame)?.norm());
        }
        Ok(curve)
    }

    /// Noise-free prediction `(1 - γᵏ) ‖frame - μ‖` for the curve above.
    pub fn closed_form_error(&self, frame: &Frame<T>, k: usize) -> Result<T> {
        let dev = frame.sub(&self.mu)?.norm();
        Ok((T::one() - self.gamma.powi(k as i32)) * dev)
    }

    pub fn encode_calls(&self) -> u64 {
        self.encodes.load(Ordering::Relaxed)
    }

    pub fn decode_calls(&self) -> u64 {
        self.decodes.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.encodes.store(0, Ordering::Relaxed);
        self.decodes.store(0, Ordering::Relaxed);
    }
}

impl<T: Scalar> Clone for LossyCodec<T> {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            gamma: self.gamma,
            sigma: self.sigma,
            mu: self.mu.clone(),
            enc: self.enc.clone(),
            dec: self.dec.clone(),
            offset: self.offset.clone(),
            encodes: AtomicU64::new(0),
            decodes: AtomicU64::new(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_codec(gamma: f64) -> LossyCodec<f64> {
        LossyCodec::new(CodecParams::new(1, gamma, 0.0, 1)).unwrap()
    }

    #[test]
    fn zero_frame_encodes_to_offset() {
        let codec = LossyCodec::<f64>::new(CodecParams::new(6, 0.9, 0.01, 4)).unwrap();
        let z = codec.encode(&Frame::zeros(6)).unwrap();
        assert_eq!(z.values(), codec.offset());
    }

    #[test]
    fn lossless_configuration_inverts_exactly() {
        let codec = LossyCodec::<f64>::new(CodecParams::lossless(16, 9)).unwrap();
        let mut s = rng::stream(2, "t", "x");
        let x = rng::normal_frame::<f64>(&mut s, 16);
        let back = codec.decode(&codec.encode(&x).unwrap(), NoiseKey(0)).unwrap();
        assert!(back.sub(&x).unwrap().values().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn scalar_contraction_follows_gamma_powers() {
        let codec = scalar_codec(0.9);
        let x = Frame::new(vec![1.0]).unwrap();
        let mut y = x.clone();
        y = codec.decode(&codec.encode(&y).unwrap(), NoiseKey(1)).unwrap();
        assert!((y.values()[0] - 0.9).abs() < 1e-12);
        for k in 2..=3 {
            y = codec.decode(&codec.encode(&y).unwrap(), NoiseKey(k)).unwrap();
        }
        assert!((y.values()[0] - 0.729).abs() < 1e-12);
    }

    #[test]
    fn error_curve_examples() {
        let x = Frame::new(vec![1.0]).unwrap();
        let flat = scalar_codec(1.0).roundtrip_error_curve(&x, 5).unwrap();
        assert!(flat.iter().all(|e| e.abs() < 1e-12));
        let curve = scalar_codec(0.9).roundtrip_error_curve(&x, 4).unwrap();
        for (got, want) in curve.iter().zip([0.1, 0.19, 0.271, 0.3439]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!(curve.windows(2).all(|w| w[1] > w[0]));
        assert!(scalar_codec(0.9).roundtrip_error_curve(&x, 0).is_err());
    }

    #[test]
    fn noise_is_keyed_not_ordered() {
        let codec = LossyCodec::<f64>::new(CodecParams::new(8, 0.97, 0.05, 3)).unwrap();
        let z = codec.encode(&Frame::new(vec![0.5; 8]).unwrap()).unwrap();
        let a = codec.decode(&z, NoiseKey(4)).unwrap();
        let _ = codec.decode(&z, NoiseKey(5)).unwrap();
        let b = codec.decode(&z, NoiseKey(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, codec.decode(&z, NoiseKey(5)).unwrap());
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(LossyCodec::<f64>::new(CodecParams::new(4, 0.0, 0.0, 0)).is_err());
        assert!(LossyCodec::<f64>::new(CodecParams::new(4, 1.1, 0.0, 0)).is_err());
        assert!(LossyCodec::<f64>::new(CodecParams::new(4, 0.9, -0.1, 0)).is_err());
    }

    #[test]
    fn counters_track_calls() {
        let codec = scalar_codec(0.9);
        let x = Frame::new(vec![1.0]).unwrap();
        codec.roundtrip_error_curve(&x, 3).unwrap();
        assert_eq!((codec.encode_calls(), codec.decode_calls()), (3, 3));
        codec.invert(&[0.0]).unwrap();
        assert_eq!(codec.decode_calls(), 3);
    }
}
