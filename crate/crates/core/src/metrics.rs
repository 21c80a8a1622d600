//! Drift metrics against the known scene decomposition.
//!
//! The pixel vector splits into a character region `[0, c)` and a pure
//! background region `[c, d)`. Background error is measured on the latter;
//! character error and identity recovery use the former with the known
//! background subtracted.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{least_squares, Matrix};
use crate::scalar::Scalar;
use crate::tensor::Chunk;
use crate::world::Scene;

/// Reported in place of an infinite PSNR when the frame error is exactly zero.
pub const PSNR_CEILING: f64 = 300.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkMetrics {
    /// 1-based chunk index.
    pub index: usize,
    pub background_mse: f64,
    pub character_mse: f64,
    pub identity_mse: f64,
    pub frame_mse: f64,
    pub psnr_analog: f64,
    /// Set when `frame_mse == 0` and `psnr_analog` holds [`PSNR_CEILING`].
    pub psnr_saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slopes {
    pub background_mse: f64,
    pub character_mse: f64,
    pub identity_mse: f64,
    pub psnr_analog: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub chunks: Vec<ChunkMetrics>,
    pub slopes: Slopes,
}

/// Ordinary least-squares slope of `ys` against `x = 1, 2, ...`. Zero for fewer than two points.
pub fn ols_slope(ys: &[f64]) -> f64 {
    let n = ys.len();
    if n < 2 {
        return 0.0;
    }
    let x_mean = (n as f64 + 1.0) / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = (i + 1) as f64 - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Metrics for one generated pixel chunk covering scene frames `first..first + len`.
pub fn chunk_metrics<T: Scalar>(generated: &Chunk<T>, scene: &Scene<T>, first: usize, index: usize) -> Result<ChunkMetrics> {
    let r = scene.renderer();
    let (d, c) = (r.pixel_dim(), r.character_dim());
    check_dim("chunk_metrics: pixel dim", d, generated.dim())?;
    if first + generated.len() > scene.total_frames() {
        return Err(Error::Dimension {
            context: "chunk_metrics: frames",
            expected: scene.total_frames(),
            found: first + generated.len(),
        });
    }
    if !generated.is_finite() {
        return Err(Error::Numeric {
            context: "chunk_metrics",
            step: Some(index),
            detail: "generated frames contain non-finite values".into(),
        });
    }
    let bg = scene.background.values();
    let id_dim = r.identity_dim();
    let n = generated.len();
    let (mut bg_se, mut ch_se, mut frame_se) = (0.0, 0.0, 0.0);
    let mut design = Vec::with_capacity(n * c * id_dim);
    let mut rhs = Vec::with_capacity(n * c);
    for (i, g) in generated.frames().enumerate() {
        let frame = first + i;
        let truth = scene.character(frame)?;
        for k in 0..d {
            let resid = g[k].as_f64() - bg[k].as_f64();
            let e = resid - truth.values()[k].as_f64();
            frame_se += e * e;
            if k < c {
                ch_se += e * e;
                rhs.push(T::of(resid));
            } else {
                bg_se += resid * resid;
            }
        }
        design.extend_from_slice(r.basis(scene.pose_track[frame].values())?.as_slice());
    }
    let phi = Matrix::from_rows(n * c, id_dim, design)?;
    let id_hat = least_squares(&phi, &rhs)?;
    let identity_mse = id_hat
        .iter()
        .zip(&scene.identity)
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / id_dim as f64;
    let frame_mse = frame_se / (n * d) as f64;
    let (psnr_analog, psnr_saturated) = if frame_mse > 0.0 {
        (-10.0 * frame_mse.log10(), false)
    } else {
        (PSNR_CEILING, true)
    };
    Ok(ChunkMetrics {
        index,
        background_mse: if d > c { bg_se / (n * (d - c)) as f64 } else { 0.0 },
        character_mse: ch_se / (n * c) as f64,
        identity_mse,
        frame_mse,
        psnr_analog,
        psnr_saturated,
    })
}

pub fn slopes(chunks: &[ChunkMetrics]) -> Slopes {
    let col = |f: fn(&ChunkMetrics) -> f64| ols_slope(&chunks.iter().map(f).collect::<Vec<_>>());
    Slopes {
        background_mse: col(|c| c.background_mse),
        character_mse: col(|c| c.character_mse),
        identity_mse: col(|c| c.identity_mse),
        psnr_analog: col(|c| c.psnr_analog),
    }
}

pub fn drift_report<T: Scalar>(generated: &[Chunk<T>], scene: &Scene<T>) -> Result<DriftReport> {
    check_dim("drift_report: chunks", scene.chunk_count(), generated.len())?;
    let l = scene.frames_per_chunk();
    let chunks = generated
        .iter()
        .enumerate()
        .map(|(n, g)| {
            check_dim("drift_report: frames per chunk", l, g.len())?;
            chunk_metrics(g, scene, n * l, n + 1)
        })
        .collect::<Result<Vec<_>>>()?;
    let slopes = slopes(&chunks);
    Ok(DriftReport { chunks, slopes })
}

/// Pearson correlation of two equally long samples; zero if either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
