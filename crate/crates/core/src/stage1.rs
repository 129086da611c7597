//! Geometry removal in depth space: a denoiser trained on object-removed
//! depth with a flow-based preference term, and mask-aligned inference.

use std::path::Path;

use grlb_tensor::{Bound, CounterRng, Elem, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{depth_plane, mask_plane, masked_out, stack_planar, DepthNorm};
use crate::diffusion::{
    dsm_terms, predict_x0, predict_x0_graph, sample, Known, NoiseDraw, NoiseSchedule, UNetConfig,
};
use crate::error::{CoreError, Result};
use crate::geometry::{flow_loss, flow_loss_graph, mask_align_replace, masked_mae};
use crate::imaging::{DepthMap, Mask};
use crate::scenegen::{Manifest, PairedSample, Split};
use crate::diffusion::ScoreModel;
use crate::train::{self, Checkpoint, ModelKind, StepOutput, TrainConfig, TrainOutcome, TrainSpec};

/// Examples whose two depth candidates differ by less than this flow loss
/// carry no preference signal.
pub const MIN_FLOW_GAP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationConfig {
    /// Validate every this many steps (and at the end); 0 disables.
    pub every: usize,
    /// Number of validation samples used.
    pub samples: usize,
    /// Sampling steps per validation removal.
    pub steps: usize,
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            every: 500,
            samples: 16,
            steps: 25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub train: TrainConfig,
    /// Weight of the preference term.
    pub lambda: f64,
    pub validation: ValidationConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            lambda: 0.1,
            validation: ValidationConfig::default(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CoreError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        self.train.validate()
    }
}

/// Network-ready tensors for a set of pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Batch<T: Elem> {
    /// Normalized object-removed depth, [N,1,H,W].
    pub x0_plus: Tensor<T>,
    /// Object-present depth in depth units, [N,1,H,W].
    pub depth_minus: Tensor<T>,
    /// Object-removed depth in depth units, [N,1,H,W].
    pub depth_plus: Tensor<T>,
    /// [M, (1−M)·x₀⁻], [N,2,H,W].
    pub cond: Tensor<T>,
    /// Whether each example takes part in the preference term.
    pub active: Vec<bool>,
}

pub const COND_CHANNELS: usize = 2;

/// Conditioning planes for depth `depth` and mask `mask`.
pub fn condition(depth: &DepthMap, mask: &Mask, norm: &DepthNorm) -> Vec<f32> {
    let mut c = mask_plane(mask);
    c.extend(masked_out(&depth_plane(depth, norm), mask));
    c
}

pub fn build_batch<T: Elem>(samples: &[&PairedSample], norm: &DepthNorm) -> Result<Stage1Batch<T>> {
    let first = samples.first().ok_or_else(|| CoreError::Shape("empty batch".into()))?;
    let (h, w) = first.x0_plus.dims();
    let mut plus = Vec::new();
    let mut dm = Vec::new();
    let mut dp = Vec::new();
    let mut cond = Vec::new();
    let mut active = Vec::new();
    for s in samples {
        plus.push(depth_plane(&s.x0_plus, norm));
        dm.push(s.x0_minus.data().to_vec());
        dp.push(s.x0_plus.data().to_vec());
        cond.push(condition(&s.x0_minus, &s.mask, norm));
        active.push(flow_loss(&s.x0_plus, &s.x0_minus)? >= MIN_FLOW_GAP);
    }
    Ok(Stage1Batch {
        x0_plus: stack_planar(&plus, 1, h, w)?,
        depth_minus: stack_planar(&dm, 1, h, w)?,
        depth_plus: stack_planar(&dp, 1, h, w)?,
        cond: stack_planar(&cond, COND_CHANNELS, h, w)?,
        active,
    })
}

/// −ln σ(r⁺ − r⁻) with r± = −flow_loss(x̂₀, x₀±).
pub fn bt_loss(x0_hat: &DepthMap, x0_plus: &DepthMap, x0_minus: &DepthMap) -> Result<f64> {
    let gap = flow_loss(x0_hat, x0_minus)? - flow_loss(x0_hat, x0_plus)?;
    Ok(bt_from_gap(gap))
}

/// −ln σ(gap), evaluated without overflow.
pub fn bt_from_gap(gap: f64) -> f64 {
    if gap > 0.0 {
        (-gap).exp().ln_1p()
    } else {
        -gap + gap.exp().ln_1p()
    }
}

/// Batch mean of −ln σ(r⁺ − r⁻) over depth-unit maps [N,1,H,W];
/// inactive examples contribute zero.
pub fn bt_loss_graph<T: Elem>(g: &mut Graph<T>, x0_hat: Var, x0_plus: Var, x0_minus: Var, active: &[bool]) -> Result<Var> {
    let n = active.len();
    let lp = flow_loss_graph(g, x0_hat, x0_plus)?;
    let lm = flow_loss_graph(g, x0_hat, x0_minus)?;
    // r⁺ − r⁻ = L(x̂, x⁻) − L(x̂, x⁺)
    let gap = g.sub(lm, lp)?;
    let s = g.sigmoid(gap)?;
    let ls = g.log(s)?;
    let weights = Tensor::new(vec![n], active.iter().map(|&a| if a { T::ONE } else { T::ZERO }).collect())?;
    let wv = g.constant(weights);
    let masked = g.mul(ls, wv)?;
    let total = g.sum(masked)?;
    Ok(g.scale(total, T::from_f64(-1.0 / n as f64))?)
}

/// Graph nodes of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Loss {
    pub total: Var,
    pub dsm: Var,
    /// Present when λ > 0.
    pub bt: Option<Var>,
    pub x_t: Var,
    pub eps_hat: Var,
}

/// L = L_DSM + λ·L_BT, with x̂₀ for the preference term taken at the same
/// timestep as the denoising term.
pub fn total_loss<T: Elem>(
    unet: &UNetConfig,
    g: &mut Graph<T>,
    params: &Bound,
    batch: &Stage1Batch<T>,
    draw: &NoiseDraw<T>,
    schedule: &NoiseSchedule,
    norm: &DepthNorm,
    lambda: f64,
) -> Result<Stage1Loss> {
    let terms = dsm_terms(unet, g, params, &batch.x0_plus, &batch.cond, draw, schedule)?;
    if lambda == 0.0 {
        return Ok(Stage1Loss {
            total: terms.loss,
            dsm: terms.loss,
            bt: None,
            x_t: terms.x_t,
            eps_hat: terms.eps_hat,
        });
    }
    let x0_hat = predict_x0_graph(g, terms.x_t, terms.eps_hat, &draw.t, schedule)?;
    let depth_hat = denormalize_graph(g, x0_hat, norm)?;
    let plus = g.constant(batch.depth_plus.clone());
    let minus = g.constant(batch.depth_minus.clone());
    let bt = bt_loss_graph(g, depth_hat, plus, minus, &batch.active)?;
    let weighted = g.scale(bt, T::from_f64(lambda))?;
    let total = g.add(terms.loss, weighted)?;
    Ok(Stage1Loss {
        total,
        dsm: terms.loss,
        bt: Some(bt),
        x_t: terms.x_t,
        eps_hat: terms.eps_hat,
    })
}

fn denormalize_graph<T: Elem>(g: &mut Graph<T>, x: Var, norm: &DepthNorm) -> Result<Var> {
    let s = norm.scale() as f64;
    let scaled = g.scale(x, T::from_f64(s))?;
    Ok(g.add_scalar(scaled, T::from_f64(s + norm.min as f64))?)
}

/// Preference loss evaluated from forward values only (for logging).
fn bt_value(g: &Graph<f32>, x_t: Var, eps_hat: Var, batch: &Stage1Batch<f32>, draw: &NoiseDraw<f32>, schedule: &NoiseSchedule, norm: &DepthNorm) -> Result<f64> {
    let (n, _, h, w) = batch.x0_plus.dims4("bt")?;
    let hw = h * w;
    let mut sum = 0.0;
    for i in 0..n {
        if !batch.active[i] {
            continue;
        }
        let one = |t: &Tensor<f32>| Tensor::new(vec![1, 1, h, w], t.data()[i * hw..(i + 1) * hw].to_vec());
        let x0 = predict_x0(&one(g.value(x_t))?, draw.t[i], &one(g.value(eps_hat))?, schedule)?;
        let hat = DepthMap::new(h, w, x0.data().iter().map(|&v| norm.denormalize(v)).collect())?;
        let plus = DepthMap::new(h, w, batch.depth_plus.data()[i * hw..(i + 1) * hw].to_vec())?;
        let minus = DepthMap::new(h, w, batch.depth_minus.data()[i * hw..(i + 1) * hw].to_vec())?;
        sum += bt_loss(&hat, &plus, &minus)?;
    }
    Ok(sum / n as f64)
}

pub(crate) fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<PairedSample>> {
    let entries: Vec<_> = manifest.split(split).cloned().collect();
    crate::parallel::map(&entries, |e| manifest.load_sample(e)).into_iter().collect()
}

pub fn train_stage1(manifest: &Manifest, cfg: &Stage1Config, out: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = load_split(manifest, Split::Train)?;
    if train_set.is_empty() {
        return Err(CoreError::data(&manifest.root, "manifest has no training samples"));
    }
    let val_set = load_split(manifest, Split::Val)?;
    let norm = DepthNorm::fit(&train_set);
    let schedule = NoiseSchedule::new(&cfg.train.schedule)?;
    let unet = cfg.train.architecture.unet(1, COND_CHANNELS);
    let spec = TrainSpec {
        kind: ModelKind::Stage1,
        train: &cfg.train,
        unet,
        depth_norm: norm,
        echo: serde_json::to_value(cfg)?,
        streams: 2,
        out,
        resume,
    };
    let lambda = cfg.lambda;
    let batch_size = cfg.train.batch_size;
    let step = |g: &mut Graph<f32>, params: &Bound, unet: &UNetConfig, rngs: &mut [CounterRng]| -> Result<StepOutput> {
        let idx = train::draw_batch(&mut rngs[0], train_set.len(), batch_size);
        let picked: Vec<&PairedSample> = idx.iter().map(|&i| &train_set[i]).collect();
        let batch = build_batch::<f32>(&picked, &norm)?;
        let draw = NoiseDraw::draw(&schedule, batch.x0_plus.shape(), &mut rngs[1]);
        let loss = total_loss(unet, g, params, &batch, &draw, &schedule, &norm, lambda)?;
        let bt = match loss.bt {
            Some(v) => v,
            None => {
                // logged even when it does not enter the objective
                let v = bt_value(g, loss.x_t, loss.eps_hat, &batch, &draw, &schedule, &norm)?;
                g.constant(Tensor::scalar(v as f32))
            }
        };
        Ok(StepOutput {
            loss: loss.total,
            components: vec![("dsm", loss.dsm), ("bt", bt)],
        })
    };
    let val = &val_set;
    let vcfg = cfg.validation.clone();
    let total_steps = cfg.train.steps as u64;
    let validate = |model: &ScoreModel, step: u64| -> Result<Vec<(String, f64)>> {
        let due = vcfg.every > 0 && (step % vcfg.every as u64 == 0 || step == total_steps);
        if !due || val.is_empty() || vcfg.samples == 0 {
            return Ok(Vec::new());
        }
        let picked: Vec<&PairedSample> = val.iter().take(vcfg.samples).collect();
        let preds = remove_geometry_with(
            model,
            &schedule,
            &norm,
            &picked.iter().map(|s| (&s.x0_minus, &s.mask)).collect::<Vec<_>>(),
            vcfg.steps,
            &picked.iter().map(|s| vcfg.seed ^ crate::scenegen::fnv1a64(s.id.as_bytes())).collect::<Vec<_>>(),
        )?;
        let mut sum = 0.0;
        for (p, s) in preds.iter().zip(&picked) {
            sum += masked_mae(p, &s.x0_plus, &s.mask)?;
        }
        Ok(vec![("val_masked_mae".to_string(), sum / picked.len() as f64)])
    };
    train::run(spec, step, validate)
}

/// Removes the masked object from each (depth, mask) pair. Pixels outside
/// the mask are copied from the input.
pub fn remove_geometry_with(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    norm: &DepthNorm,
    inputs: &[(&DepthMap, &Mask)],
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<DepthMap>> {
    let Some((first, _)) = inputs.first() else { return Ok(Vec::new()) };
    let (h, w) = first.dims();
    let mut cond = Vec::new();
    let mut known = Vec::new();
    let mut masks = Vec::new();
    for (d, m) in inputs {
        if d.dims() != (h, w) || m.dims() != (h, w) {
            return Err(CoreError::Shape(format!("remove_geometry: inputs must all be {h}x{w}")));
        }
        if m.is_empty() {
            return Err(CoreError::EmptyMask("remove_geometry"));
        }
        cond.push(condition(d, m, norm));
        known.push(depth_plane(d, norm));
        masks.push(mask_plane(m));
    }
    let cond = stack_planar::<f32>(&cond, COND_CHANNELS, h, w)?;
    let known_x = stack_planar::<f32>(&known, 1, h, w)?;
    let known_m = stack_planar::<f32>(&masks, 1, h, w)?;
    let out = sample(
        model,
        schedule,
        &cond,
        Some(Known {
            x: &known_x,
            mask: &known_m,
        }),
        steps,
        seeds,
    )?;
    let hw = h * w;
    inputs
        .iter()
        .enumerate()
        .map(|(i, (d, m))| {
            let plane: Vec<f32> = out.data()[i * hw..(i + 1) * hw]
                .iter()
                .map(|&v| norm.denormalize(v).clamp(0.0, 1.0))
                .collect();
            mask_align_replace(&DepthMap::new(h, w, plane)?, d, m)
        })
        .collect()
}

/// Object-removed depth for one map; the output equals `depth` wherever
/// `mask` is unset.
pub fn remove_geometry(checkpoint: &Checkpoint, depth: &DepthMap, mask: &Mask, steps: usize, seed: u64) -> Result<DepthMap> {
    let batch = remove_geometry_batch(checkpoint, &[(depth, mask)], steps, &[seed])?;
    Ok(batch.into_iter().next().expect("one output per input"))
}

pub fn remove_geometry_batch(
    checkpoint: &Checkpoint,
    inputs: &[(&DepthMap, &Mask)],
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<DepthMap>> {
    if checkpoint.meta.kind != ModelKind::Stage1 {
        return Err(CoreError::Config(format!("expected a stage1 checkpoint, got {:?}", checkpoint.meta.kind)));
    }
    let schedule = NoiseSchedule::new(&checkpoint.meta.schedule)?;
    remove_geometry_with(&checkpoint.model, &schedule, &checkpoint.meta.depth_norm, inputs, steps, seeds)
}
