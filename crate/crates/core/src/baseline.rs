//! One-stage ablation: a single RGB denoiser conditioned on the masked
//! image, the mask and the masked depth.

use std::path::Path;

use grlb_tensor::{Bound, CounterRng, Graph};
use serde::{Deserialize, Serialize};

use crate::data::{depth_plane, mask_plane, masked_out, rgb_planes, stack_planar, DepthNorm};
use crate::diffusion::{dsm_terms, NoiseDraw, NoiseSchedule, ScoreModel, UNetConfig};
use crate::error::{CoreError, Result};
use crate::imaging::{DepthMap, Image, Mask};
use crate::scenegen::{Manifest, PairedSample, Split};
use crate::stage1::load_split;
use crate::stage2::{sample_images, TARGET_CHANNELS};
use crate::train::{self, Checkpoint, ModelKind, StepOutput, TrainConfig, TrainOutcome, TrainSpec};

pub const COND_CHANNELS: usize = 5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OneStageConfig {
    pub train: TrainConfig,
}

/// [(1−M)·RGB, M, (1−M)·depth], normalized.
pub fn condition(image: &Image, depth: &DepthMap, mask: &Mask, norm: &DepthNorm) -> Vec<f32> {
    let mut c = masked_out(&rgb_planes(image), mask);
    c.extend(mask_plane(mask));
    c.extend(masked_out(&depth_plane(depth, norm), mask));
    c
}

pub fn train_onestage(manifest: &Manifest, cfg: &OneStageConfig, out: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.train.validate()?;
    let train_set = load_split(manifest, Split::Train)?;
    if train_set.is_empty() {
        return Err(CoreError::data(&manifest.root, "manifest has no training samples"));
    }
    let norm = DepthNorm::fit(&train_set);
    let schedule = NoiseSchedule::new(&cfg.train.schedule)?;
    let spec = TrainSpec {
        kind: ModelKind::Onestage,
        train: &cfg.train,
        unet: cfg.train.architecture.unet(TARGET_CHANNELS, COND_CHANNELS),
        depth_norm: norm,
        echo: serde_json::to_value(cfg)?,
        streams: 2,
        out,
        resume,
    };
    let batch_size = cfg.train.batch_size;
    let step = |g: &mut Graph<f32>, params: &Bound, unet: &UNetConfig, rngs: &mut [CounterRng]| -> Result<StepOutput> {
        let idx = train::draw_batch(&mut rngs[0], train_set.len(), batch_size);
        let picked: Vec<&PairedSample> = idx.iter().map(|&i| &train_set[i]).collect();
        let (h, w) = picked[0].i_minus.dims();
        let conds: Vec<Vec<f32>> = picked.iter().map(|s| condition(&s.i_minus, &s.x0_minus, &s.mask, &norm)).collect();
        let targets: Vec<Vec<f32>> = picked.iter().map(|s| rgb_planes(&s.i_plus)).collect();
        let cond = stack_planar::<f32>(&conds, COND_CHANNELS, h, w)?;
        let target = stack_planar::<f32>(&targets, TARGET_CHANNELS, h, w)?;
        let draw = NoiseDraw::draw(&schedule, target.shape(), &mut rngs[1]);
        let loss = dsm_terms(unet, g, params, &target, &cond, &draw, &schedule)?.loss;
        Ok(StepOutput {
            loss,
            components: Vec::new(),
        })
    };
    train::run(spec, step, |_, _| Ok(Vec::new()))
}

pub fn run_onestage(checkpoint: &Checkpoint, image: &Image, depth: &DepthMap, mask: &Mask, steps: usize, seed: u64) -> Result<Image> {
    let out = run_onestage_batch(checkpoint, &[(image, depth, mask)], steps, &[seed])?;
    Ok(out.into_iter().next().expect("one output per input"))
}

pub fn run_onestage_batch(
    checkpoint: &Checkpoint,
    inputs: &[(&Image, &DepthMap, &Mask)],
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<Image>> {
    if checkpoint.meta.kind != ModelKind::Onestage {
        return Err(CoreError::Config(format!("expected a onestage checkpoint, got {:?}", checkpoint.meta.kind)));
    }
    let schedule = NoiseSchedule::new(&checkpoint.meta.schedule)?;
    run_onestage_with(&checkpoint.model, &schedule, &checkpoint.meta.depth_norm, inputs, steps, seeds)
}

pub fn run_onestage_with(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    norm: &DepthNorm,
    inputs: &[(&Image, &DepthMap, &Mask)],
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<Image>> {
    let Some((first, _, _)) = inputs.first() else { return Ok(Vec::new()) };
    let dims = first.dims();
    let mut conds = Vec::with_capacity(inputs.len());
    for (img, d, m) in inputs {
        if img.dims() != dims || d.dims() != dims || m.dims() != dims {
            return Err(CoreError::Shape(format!("run_onestage: inputs must all be {}x{}", dims.0, dims.1)));
        }
        conds.push(condition(img, d, m, norm));
    }
    sample_images(model, schedule, &conds, COND_CHANNELS, dims, steps, seeds)
}
