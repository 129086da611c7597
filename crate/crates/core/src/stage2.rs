//! Appearance rendering: a denoiser over RGB conditioned on the source image
//! and the source/target depth, trained on both the removal and the
//! insertion direction of every pair.

use std::path::Path;

use grlb_tensor::{Bound, CounterRng, Elem, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{colorized_planes, image_from_planes, rgb_planes, stack_planar, DepthNorm};
use crate::diffusion::{dsm_terms, sample, NoiseDraw, NoiseSchedule, ScoreModel, UNetConfig};
use crate::error::{CoreError, Result};
use crate::imaging::{DepthMap, Image};
use crate::scenegen::{Manifest, PairedSample, Split};
use crate::stage1::load_split;
use crate::train::{self, Checkpoint, ModelKind, StepOutput, TrainConfig, TrainOutcome, TrainSpec};

pub const COND_CHANNELS: usize = 9;
pub const TARGET_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub train: TrainConfig,
    /// Also train the insertion direction.
    pub bidirectional: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            bidirectional: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Removal,
    Insertion,
}

/// One translation example: condition planes [source RGB, colorized source
/// depth, colorized target depth] and target RGB planes, all normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeExample {
    pub height: usize,
    pub width: usize,
    pub direction: Direction,
    pub condition: Vec<f32>,
    pub target: Vec<f32>,
}

impl CompositeExample {
    pub fn hw(&self) -> usize {
        self.height * self.width
    }

    /// Condition planes `k*3 .. k*3+3` (0 = RGB, 1 = source depth,
    /// 2 = target depth).
    pub fn panel(&self, k: usize) -> &[f32] {
        let n = 3 * self.hw();
        &self.condition[k * n..(k + 1) * n]
    }
}

/// Condition planes for rendering `x_tgt` from (`image`, `x_src`).
pub fn condition(image: &Image, x_src: &DepthMap, x_tgt: &DepthMap, norm: &DepthNorm) -> Vec<f32> {
    let mut c = rgb_planes(image);
    c.extend(colorized_planes(x_src, norm));
    c.extend(colorized_planes(x_tgt, norm));
    c
}

pub fn build_composite(sample: &PairedSample, direction: Direction, norm: &DepthNorm) -> CompositeExample {
    let (h, w) = sample.i_minus.dims();
    let (src_img, tgt_img, src_d, tgt_d) = match direction {
        Direction::Removal => (&sample.i_minus, &sample.i_plus, &sample.x0_minus, &sample.x0_plus),
        Direction::Insertion => (&sample.i_plus, &sample.i_minus, &sample.x0_plus, &sample.x0_minus),
    };
    CompositeExample {
        height: h,
        width: w,
        direction,
        condition: condition(src_img, src_d, tgt_d, norm),
        target: rgb_planes(tgt_img),
    }
}

/// Stacks composites into (condition, target) tensors.
pub fn stack_composites<T: Elem>(items: &[CompositeExample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = items.first().ok_or_else(|| CoreError::Shape("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let cond: Vec<Vec<f32>> = items.iter().map(|c| c.condition.clone()).collect();
    let target: Vec<Vec<f32>> = items.iter().map(|c| c.target.clone()).collect();
    Ok((stack_planar(&cond, COND_CHANNELS, h, w)?, stack_planar(&target, TARGET_CHANNELS, h, w)?))
}

/// One direction's batch and its noise.
pub struct DirectionBatch<'a, T: Elem> {
    pub cond: &'a Tensor<T>,
    pub target: &'a Tensor<T>,
    pub draw: &'a NoiseDraw<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct RenderLoss {
    pub total: Var,
    pub removal: Var,
    pub insertion: Option<Var>,
}

/// Sum of the removal and (if given) insertion denoising losses, each on
/// the 3 target channels with the condition attached un-noised.
pub fn render_loss<T: Elem>(
    unet: &UNetConfig,
    g: &mut Graph<T>,
    params: &Bound,
    removal: DirectionBatch<'_, T>,
    insertion: Option<DirectionBatch<'_, T>>,
    schedule: &NoiseSchedule,
) -> Result<RenderLoss> {
    let rem = dsm_terms(unet, g, params, removal.target, removal.cond, removal.draw, schedule)?.loss;
    let Some(ins) = insertion else {
        return Ok(RenderLoss {
            total: rem,
            removal: rem,
            insertion: None,
        });
    };
    let ins = dsm_terms(unet, g, params, ins.target, ins.cond, ins.draw, schedule)?.loss;
    let total = g.add(rem, ins)?;
    Ok(RenderLoss {
        total,
        removal: rem,
        insertion: Some(ins),
    })
}

pub fn train_stage2(manifest: &Manifest, cfg: &Stage2Config, out: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.train.validate()?;
    let train_set = load_split(manifest, Split::Train)?;
    if train_set.is_empty() {
        return Err(CoreError::data(&manifest.root, "manifest has no training samples"));
    }
    let norm = DepthNorm::fit(&train_set);
    let schedule = NoiseSchedule::new(&cfg.train.schedule)?;
    let spec = TrainSpec {
        kind: ModelKind::Stage2,
        train: &cfg.train,
        unet: cfg.train.architecture.unet(TARGET_CHANNELS, COND_CHANNELS),
        depth_norm: norm,
        echo: serde_json::to_value(cfg)?,
        streams: 3,
        out,
        resume,
    };
    let batch_size = cfg.train.batch_size;
    let bidirectional = cfg.bidirectional;
    let step = |g: &mut Graph<f32>, params: &Bound, unet: &UNetConfig, rngs: &mut [CounterRng]| -> Result<StepOutput> {
        let idx = train::draw_batch(&mut rngs[0], train_set.len(), batch_size);
        let rem: Vec<CompositeExample> = idx.iter().map(|&i| build_composite(&train_set[i], Direction::Removal, &norm)).collect();
        let (rc, rt) = stack_composites::<f32>(&rem)?;
        let rd = NoiseDraw::draw(&schedule, rt.shape(), &mut rngs[1]);
        let removal = DirectionBatch {
            cond: &rc,
            target: &rt,
            draw: &rd,
        };
        let ins_data = if bidirectional {
            let ins: Vec<CompositeExample> =
                idx.iter().map(|&i| build_composite(&train_set[i], Direction::Insertion, &norm)).collect();
            let (ic, it) = stack_composites::<f32>(&ins)?;
            let id = NoiseDraw::draw(&schedule, it.shape(), &mut rngs[2]);
            Some((ic, it, id))
        } else {
            None
        };
        let insertion = ins_data.as_ref().map(|(c, t, d)| DirectionBatch { cond: c, target: t, draw: d });
        let loss = render_loss(unet, g, params, removal, insertion, &schedule)?;
        let mut components = vec![("removal", loss.removal)];
        components.extend(loss.insertion.map(|v| ("insertion", v)));
        Ok(StepOutput {
            loss: loss.total,
            components,
        })
    };
    train::run(spec, step, |_, _| Ok(Vec::new()))
}

/// Samples RGB images for pre-built condition planes.
pub(crate) fn sample_images(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    conds: &[Vec<f32>],
    cond_channels: usize,
    (h, w): (usize, usize),
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<Image>> {
    if conds.is_empty() {
        return Ok(Vec::new());
    }
    let cond = stack_planar::<f32>(conds, cond_channels, h, w)?;
    let out = sample(model, schedule, &cond, None, steps, seeds)?;
    let per = TARGET_CHANNELS * h * w;
    (0..conds.len()).map(|i| image_from_planes(&out.data()[i * per..(i + 1) * per], h, w)).collect()
}

/// Renders the image implied by changing the scene's depth from `x_src` to
/// `x_tgt`. The whole image may change.
pub fn render_appearance(
    checkpoint: &Checkpoint,
    i_src: &Image,
    x_src: &DepthMap,
    x_tgt: &DepthMap,
    steps: usize,
    seed: u64,
) -> Result<Image> {
    let out = render_appearance_batch(checkpoint, &[(i_src, x_src, x_tgt)], steps, &[seed])?;
    Ok(out.into_iter().next().expect("one output per input"))
}

pub fn render_appearance_batch(
    checkpoint: &Checkpoint,
    inputs: &[(&Image, &DepthMap, &DepthMap)],
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<Image>> {
    if checkpoint.meta.kind != ModelKind::Stage2 {
        return Err(CoreError::Config(format!("expected a stage2 checkpoint, got {:?}", checkpoint.meta.kind)));
    }
    let schedule = NoiseSchedule::new(&checkpoint.meta.schedule)?;
    render_appearance_with(&checkpoint.model, &schedule, &checkpoint.meta.depth_norm, inputs, steps, seeds)
}

pub fn render_appearance_with(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    norm: &DepthNorm,
    inputs: &[(&Image, &DepthMap, &DepthMap)],
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<Image>> {
    let Some((first, _, _)) = inputs.first() else { return Ok(Vec::new()) };
    let dims = first.dims();
    let mut conds = Vec::with_capacity(inputs.len());
    for (img, src, tgt) in inputs {
        if img.dims() != dims || src.dims() != dims || tgt.dims() != dims {
            return Err(CoreError::Shape(format!("render_appearance: inputs must all be {}x{}", dims.0, dims.1)));
        }
        conds.push(condition(img, src, tgt, norm));
    }
    sample_images(model, schedule, &conds, COND_CHANNELS, dims, steps, seeds)
}

/// Width-wise triptych [target depth | source depth | RGB] as one image.
pub fn panel_triptych(image: &Image, x_src: &DepthMap, x_tgt: &DepthMap) -> Result<Image> {
    let (h, w) = image.dims();
    if x_src.dims() != (h, w) || x_tgt.dims() != (h, w) {
        return Err(CoreError::Shape("triptych panels differ in size".into()));
    }
    let panels = [crate::geometry::colorize_depth(x_tgt), crate::geometry::colorize_depth(x_src), image.clone()];
    let mut out = Image::filled(h, 3 * w, [0.0; 3]);
    for (k, p) in panels.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                out.set_pixel(i, k * w + j, p.pixel(i, j));
            }
        }
    }
    Ok(out)
}
