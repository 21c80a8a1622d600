//! Hand-built velocity fields with known behavior, used as test oracles.

use std::sync::Arc;

use crate::codec::LossyCodec;
use crate::error::{check_dim, Result};
use crate::field::VelocityField;
use crate::flow::exact_restorative_velocity;
use crate::memory::{ModelInput, PoseAdapter};
use crate::scalar::Scalar;
use crate::tensor::Chunk;
use crate::world::Scene;

/// Returns the same chunk regardless of input.
#[derive(Debug, Clone)]
pub struct ConstantField<T> {
    pub velocity: Chunk<T>,
    adapter: PoseAdapter<T>,
}

impl<T: Scalar> ConstantField<T> {
    pub fn new(velocity: Chunk<T>, pose_dim: usize) -> Self {
        let adapter = PoseAdapter::zeros(velocity.dim(), pose_dim);
        Self { velocity, adapter }
    }
}

impl<T: Scalar> VelocityField<T> for ConstantField<T> {
    fn pose_adapter(&self) -> &PoseAdapter<T> {
        &self.adapter
    }

    fn velocity(&self, input: &ModelInput<T>, _poses: &Chunk<T>) -> Result<Chunk<T>> {
        input.target.check_shape(&self.velocity, "ConstantField")?;
        Ok(self.velocity.clone())
    }
}

fn to_endpoint<T: Scalar>(input: &ModelInput<T>, x1: &Chunk<T>) -> Result<Chunk<T>> {
    exact_restorative_velocity(x1, &input.target, input.t, T::of(1e-12))
}

/// Knows the scene: returns `(x1 - x_t) / (1 - t)` toward the encoded
/// ground-truth frame for each pose, so one Euler step from any state lands on it.
pub struct ExactOracle<T> {
    scene: Arc<Scene<T>>,
    codec: LossyCodec<T>,
    adapter: PoseAdapter<T>,
}

impl<T: Scalar> ExactOracle<T> {
    pub fn new(scene: Arc<Scene<T>>, codec: LossyCodec<T>) -> Self {
        let adapter = PoseAdapter::zeros(codec.dim(), scene.renderer().pose_dim());
        Self { scene, codec, adapter }
    }

    fn endpoint(&self, poses: &Chunk<T>) -> Result<Chunk<T>> {
        let r = self.scene.renderer();
        let frames = poses
            .frames()
            .map(|p| {
                let c = r.character(&self.scene.identity, p)?;
                let px: Vec<T> = self
                    .scene
                    .background
                    .values()
                    .iter()
                    .zip(c.values())
                    .map(|(b, c)| *b + *c)
                    .collect();
                self.codec.encode_uncounted(&px)
            })
            .collect::<Result<Vec<_>>>()?;
        Chunk::from_frames(&frames)
    }
}

impl<T: Scalar> VelocityField<T> for ExactOracle<T> {
    fn pose_adapter(&self) -> &PoseAdapter<T> {
        &self.adapter
    }

    fn velocity(&self, input: &ModelInput<T>, poses: &Chunk<T>) -> Result<Chunk<T>> {
        to_endpoint(input, &self.endpoint(poses)?)
    }
}

/// Like [`ExactOracle`], but the background region is copied from the context:
/// from the newest motion slot when it is nonzero, otherwise from the first
/// identity slot. Whatever degradation the carried-over latent has, the
/// generated chunk inherits it. The character region stays exact.
pub struct CarryOverOracle<T> {
    scene: Arc<Scene<T>>,
    codec: LossyCodec<T>,
    motion_slots: usize,
    adapter: PoseAdapter<T>,
}

impl<T: Scalar> CarryOverOracle<T> {
    pub fn new(scene: Arc<Scene<T>>, codec: LossyCodec<T>, motion_slots: usize) -> Self {
        let adapter = PoseAdapter::zeros(codec.dim(), scene.renderer().pose_dim());
        Self {
            scene,
            codec,
            motion_slots,
            adapter,
        }
    }
}

impl<T: Scalar> VelocityField<T> for CarryOverOracle<T> {
    fn pose_adapter(&self) -> &PoseAdapter<T> {
        &self.adapter
    }

    fn velocity(&self, input: &ModelInput<T>, poses: &Chunk<T>) -> Result<Chunk<T>> {
        check_dim("CarryOverOracle: poses", input.len(), poses.len())?;
        let r = self.scene.renderer();
        let c = r.character_dim();
        let newest_motion = self
            .motion_slots
            .checked_sub(1)
            .map(|i| input.context.frame(i))
            .filter(|f| f.iter().any(|v| !v.is_zero()));
        let source = newest_motion.unwrap_or_else(|| input.context.frame(self.motion_slots));
        let carried = self.codec.invert(source)?;
        let bg = self.scene.background.values();
        let frames = poses
            .frames()
            .map(|p| {
                let ch = r.character(&self.scene.identity, p)?;
                let px: Vec<T> = (0..r.pixel_dim())
                    .map(|k| if k < c { bg[k] + ch.values()[k] } else { carried.values()[k] })
                    .collect();
                self.codec.encode_uncounted(&px)
            })
            .collect::<Result<Vec<_>>>()?;
        to_endpoint(input, &Chunk::from_frames(&frames)?)
    }
}
