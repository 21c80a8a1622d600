//! Four-row comparison: carry-over strategy crossed with training objective.

use serde::{Deserialize, Serialize};

use crate::codec::LossyCodec;
use crate::error::{Error, Result};
use crate::field::{FieldShape, VectorField};
use crate::metrics::{drift_report, DriftReport};
use crate::sampler::{rollout, RolloutConfig, RolloutMode, SamplerConfig};
use crate::scalar::Scalar;
use crate::trainer::{train, TrainConfig, TrainOutcome};
use crate::world::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Baseline,
    WithoutRfm,
    WithoutPlp,
    Full,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Self::Baseline, Self::WithoutRfm, Self::WithoutPlp, Self::Full];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::WithoutRfm => "wo_rfm",
            Self::WithoutPlp => "wo_plp",
            Self::Full => "full",
        }
    }

    pub fn mode(&self) -> RolloutMode {
        match self {
            Self::Baseline | Self::WithoutPlp => RolloutMode::ImageCarryover,
            Self::WithoutRfm => RolloutMode::LatentPlp,
            Self::Full => RolloutMode::LatentPlpRfm,
        }
    }

    /// Whether the preset samples with the field trained on restorative targets.
    pub fn uses_rfm(&self) -> bool {
        matches!(self, Self::WithoutPlp | Self::Full)
    }
}

/// The two trained fields the presets draw from.
#[derive(Debug, Clone, Copy)]
pub struct PresetFields<'a, T> {
    pub fm: Option<&'a VectorField<T>>,
    pub rfm: Option<&'a VectorField<T>>,
}

impl<'a, T: Scalar> PresetFields<'a, T> {
    pub fn for_preset(&self, p: Preset) -> Result<&'a VectorField<T>> {
        let (f, which) = if p.uses_rfm() { (self.rfm, "rfm") } else { (self.fm, "fm") };
        f.ok_or_else(|| Error::Config(format!("preset '{}' needs the {which} checkpoint", p.name())))
    }
}

/// A trained field and its loss curve.
pub type TrainedField<T> = (VectorField<T>, TrainOutcome);

/// Trains the FM-only and RFM fields from the same initialization and batch
/// stream. They differ only in the stage-2 endpoint perturbation.
pub fn train_preset_fields<T: Scalar>(
    shape: FieldShape,
    init_seed: u64,
    scenes: &[Scene<T>],
    codec: &LossyCodec<T>,
    cfg: &TrainConfig,
) -> Result<(TrainedField<T>, TrainedField<T>)> {
    let fm_cfg = TrainConfig { endpoint_perturb_max: 0.0, ..*cfg };
    let run = |c: &TrainConfig| -> Result<TrainedField<T>> {
        let mut f = VectorField::new(shape, init_seed)?;
        let out = train(&mut f, scenes, codec, c)?;
        Ok((f, out))
    };
    Ok((run(&fm_cfg)?, run(cfg)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub preset: Preset,
    pub scene_index: usize,
    pub report: DriftReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, preset: Preset, scene_index: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.preset == preset && r.scene_index == scene_index)
    }

    pub fn scene_count(&self) -> usize {
        self.rows.iter().map(|r| r.scene_index + 1).max().unwrap_or(0)
    }

    pub fn mean_background_slope(&self, preset: Preset) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.preset == preset)
            .map(|r| r.report.slopes.background_mse)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Whether the full preset's background slope is at most every other preset's on this scene.
    pub fn full_leads(&self, scene_index: usize) -> bool {
        let slope = |p| self.row(p, scene_index).map(|r| r.report.slopes.background_mse);
        match slope(Preset::Full) {
            Some(full) => Preset::ALL[..3].iter().all(|&p| slope(p).is_some_and(|s| full <= s)),
            None => false,
        }
    }
}

/// Rolls out every preset on every scene with identical seeds. With
/// `parallel`, presets run on separate threads; results do not depend on it.
pub fn ablation_suite<T: Scalar>(
    fields: PresetFields<'_, T>,
    scenes: &[Scene<T>],
    codec: &LossyCodec<T>,
    template: &RolloutConfig,
    scfg: &SamplerConfig,
    parallel: bool,
) -> Result<AblationTable> {
    for p in Preset::ALL {
        fields.for_preset(p)?;
    }
    let run_preset = |p: Preset| -> Result<Vec<AblationRow>> {
        let field = fields.for_preset(p)?;
        let codec = codec.clone();
        let rcfg = RolloutConfig { mode: p.mode(), ..*template };
        scenes
            .iter()
            .enumerate()
            .map(|(i, scene)| {
                let out = rollout(field, scene, &codec, &rcfg, scfg)?;
                let report = drift_report(&out.frames, scene)?;
                Ok(AblationRow {
                    preset: p,
                    scene_index: i,
                    report,
                })
            })
            .collect()
    };
    let per_preset: Vec<Result<Vec<AblationRow>>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = Preset::ALL.iter().map(|&p| s.spawn(move || run_preset(p))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("preset worker panicked".into()))))
                .collect()
        })
    } else {
        Preset::ALL.iter().map(|&p| run_preset(p)).collect()
    };
    let mut rows = Vec::new();
    for r in per_preset {
        rows.extend(r?);
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecParams;
    use crate::world::{Renderer, WorldConfig};
    use std::sync::Arc;

    #[test]
    fn table_is_reproducible_and_parallel_safe() {
        let cfg = WorldConfig { chunks: 3, ..WorldConfig::default() };
        let r = Arc::new(Renderer::new(&cfg, 1).unwrap());
        let scenes: Vec<_> = (0..2).map(|s| Scene::<f64>::generate(r.clone(), &cfg, 10 + s).unwrap()).collect();
        let codec = LossyCodec::new(CodecParams::new(32, 0.97, 0.005, 2)).unwrap();
        let shape = FieldShape { latent_dim: 32, pose_dim: 4, context_len: 6, hidden: 8 };
        let fm = VectorField::new(shape, 1).unwrap();
        let rfm = VectorField::new(shape, 2).unwrap();
        let fields = PresetFields { fm: Some(&fm), rfm: Some(&rfm) };
        let rcfg = RolloutConfig::new(RolloutMode::LatentPlp, 3);
        let scfg = SamplerConfig { steps: 4, seed: 5 };
        let a = ablation_suite(fields, &scenes, &codec, &rcfg, &scfg, false).unwrap();
        let b = ablation_suite(fields, &scenes, &codec, &rcfg, &scfg, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 8);
        assert_eq!(a.scene_count(), 2);

        let missing = PresetFields { fm: Some(&fm), rfm: None };
        assert!(matches!(
            ablation_suite(missing, &scenes, &codec, &rcfg, &scfg, false),
            Err(Error::Config(_))
        ));
    }
}
