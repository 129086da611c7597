//! Shared training loop, checkpoints and metrics logs.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use grlb_tensor::checkpoint::{load_adam, load_params, save_adam, save_params};
use grlb_tensor::{clip_grad_norm, AdamConfig, AdamState, Bound, CounterRng, Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::data::DepthNorm;
use crate::diffusion::{ScheduleConfig, ScoreModel, UNetConfig};
use crate::error::{CoreError, Result};
use crate::io::{ensure_dir, read_json, write_json};

pub const CHECKPOINT_FORMAT: &str = "grlb-checkpoint/1";
pub const META_FILE: &str = "checkpoint.json";
pub const PARAMS_FILE: &str = "checkpoint.grlb";
pub const EMA_FILE: &str = "checkpoint.ema.grlb";
pub const OPT_FILE: &str = "checkpoint.opt.grlb";
pub const LOG_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

/// Denoiser widths and embedding sizes; channel counts come from the
/// use-site.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub base_width: usize,
    pub multipliers: Vec<usize>,
    pub groups: usize,
    pub time_features: usize,
    pub time_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let u = UNetConfig::new(1, 1);
        Self {
            base_width: u.base_width,
            multipliers: u.multipliers,
            groups: u.groups,
            time_features: u.time_features,
            time_dim: u.time_dim,
        }
    }
}

impl ArchConfig {
    pub fn unet(&self, out_channels: usize, cond_channels: usize) -> UNetConfig {
        UNetConfig {
            out_channels,
            cond_channels,
            base_width: self.base_width,
            multipliers: self.multipliers.clone(),
            groups: self.groups,
            time_features: self.time_features,
            time_dim: self.time_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm cap; 0 disables.
    pub grad_clip: f64,
    /// Decay of the weight average used for inference; 0 disables.
    pub ema_decay: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub schedule: ScheduleConfig,
    pub architecture: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 5e-4,
            warmup_steps: 100,
            grad_clip: 1.0,
            ema_decay: 0.999,
            seed: 0,
            checkpoint_every: 500,
            log_every: 50,
            schedule: ScheduleConfig::default(),
            architecture: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.grad_clip < 0.0 || !(0.0..1.0).contains(&self.ema_decay) {
            return bad("grad_clip must be >= 0 and ema_decay in [0, 1)");
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("checkpoint_every and log_every must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Stage1,
    Stage2,
    Onestage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub kind: ModelKind,
    pub architecture: UNetConfig,
    pub schedule: ScheduleConfig,
    pub depth_norm: DepthNorm,
    pub step: u64,
    pub adam: AdamConfig,
    pub rng: Vec<CounterRng>,
    pub ema: bool,
    /// Resolved training config of the run.
    pub config: serde_json::Value,
}

/// Inference view of a checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Averaged weights when available, otherwise the trained weights.
    pub model: ScoreModel,
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

/// Loads a checkpoint from its directory or its `checkpoint.json`.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let dir = checkpoint_dir(path);
    let meta_path = dir.join(META_FILE);
    if !meta_path.exists() {
        return Err(CoreError::data(&meta_path, "checkpoint metadata not found"));
    }
    let meta: CheckpointMeta = read_json(&meta_path)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(CoreError::data(&meta_path, format!("unsupported checkpoint format {:?}", meta.format)));
    }
    let file = if meta.ema { EMA_FILE } else { PARAMS_FILE };
    let params = load_tensor_file(&dir.join(file))?;
    let model = ScoreModel::from_parts(meta.architecture.clone(), params)?;
    Ok(Checkpoint { meta, model })
}

fn load_tensor_file(path: &Path) -> Result<ParamStore<f32>> {
    load_params(path).map_err(|e| CoreError::data(path, e.to_string()))
}

/// Mutable training state.
struct Session {
    params: ParamStore<f32>,
    ema: Option<ParamStore<f32>>,
    adam: AdamState<f32>,
    rngs: Vec<CounterRng>,
    step: u64,
}

fn save_session(dir: &Path, meta: &CheckpointMeta, s: &Session) -> Result<()> {
    save_params(&dir.join(PARAMS_FILE), &s.params)?;
    if let Some(ema) = &s.ema {
        save_params(&dir.join(EMA_FILE), ema)?;
    }
    save_adam(&dir.join(OPT_FILE), &s.params, &s.adam)?;
    // metadata last: it commits the checkpoint
    write_json(&dir.join(META_FILE), meta)
}

pub struct TrainSpec<'a> {
    pub kind: ModelKind,
    pub train: &'a TrainConfig,
    pub unet: UNetConfig,
    pub depth_norm: DepthNorm,
    /// Full resolved stage config, echoed to `config.json` and compared on
    /// resume.
    pub echo: serde_json::Value,
    /// Independent RNG streams handed to the step function.
    pub streams: usize,
    pub out: &'a Path,
    pub resume: bool,
}

/// Loss node plus named scalar components for logging.
pub struct StepOutput {
    pub loss: Var,
    pub components: Vec<(&'static str, Var)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean training loss over the last logging window.
    pub last_loss: Option<f64>,
}

fn rng_streams(seed: u64, n: usize) -> Vec<CounterRng> {
    let base = CounterRng::new(seed);
    (0..n as u64).map(|k| base.derive(k + 1)).collect()
}

fn init_seed(seed: u64) -> u64 {
    CounterRng::new(seed).derive(0).next_u64()
}

/// Runs (or resumes) a training loop. `step_fn` builds the loss for one
/// optimizer step; `validate` may add metrics at logging steps.
pub fn run<F, V>(spec: TrainSpec<'_>, mut step_fn: F, mut validate: V) -> Result<TrainOutcome>
where
    F: FnMut(&mut Graph<f32>, &Bound, &UNetConfig, &mut [CounterRng]) -> Result<StepOutput>,
    V: FnMut(&ScoreModel, u64) -> Result<Vec<(String, f64)>>,
{
    let cfg = spec.train;
    cfg.validate()?;
    spec.unet.validate()?;
    let dir = spec.out;
    ensure_dir(dir)?;
    let meta_path = dir.join(META_FILE);
    let log_path = dir.join(LOG_FILE);

    let mut session = None;
    if spec.resume && meta_path.exists() {
        let meta: CheckpointMeta = read_json(&meta_path)?;
        if meta.kind != spec.kind || without_steps(&meta.config) != without_steps(&spec.echo) {
            return Err(CoreError::Config(format!(
                "cannot resume {}: checkpoint was written with a different config",
                dir.display()
            )));
        }
        if meta.step as usize > cfg.steps {
            return Err(CoreError::Config(format!(
                "cannot resume {}: checkpoint is at step {}, past the budget of {}",
                dir.display(),
                meta.step,
                cfg.steps
            )));
        }
        let params = load_tensor_file(&dir.join(PARAMS_FILE))?;
        let ema = if meta.ema { Some(load_tensor_file(&dir.join(EMA_FILE))?) } else { None };
        let opt_path = dir.join(OPT_FILE);
        let adam = load_adam(&opt_path, &params, meta.adam, meta.step).map_err(|e| CoreError::data(&opt_path, e.to_string()))?;
        truncate_log(&log_path, meta.step)?;
        log::info!("resuming {} at step {}", dir.display(), meta.step);
        session = Some(Session {
            params,
            ema,
            adam,
            rngs: meta.rng.clone(),
            step: meta.step,
        });
    }
    let mut s = match session {
        Some(s) => s,
        None => {
            let model = ScoreModel::init(spec.unet.clone(), init_seed(cfg.seed))?;
            fs::write(&log_path, b"").map_err(|e| CoreError::io(&log_path, e))?;
            Session {
                ema: (cfg.ema_decay > 0.0).then(|| model.params.clone()),
                adam: AdamState::new(cfg.adam(), &model.params),
                params: model.params,
                rngs: rng_streams(cfg.seed, spec.streams),
                step: 0,
            }
        }
    };
    write_json(&dir.join(CONFIG_FILE), &spec.echo)?;

    let meta_for = |s: &Session| CheckpointMeta {
        format: CHECKPOINT_FORMAT.to_string(),
        kind: spec.kind,
        architecture: spec.unet.clone(),
        schedule: cfg.schedule,
        depth_norm: spec.depth_norm,
        step: s.step,
        adam: cfg.adam(),
        rng: s.rngs.clone(),
        ema: s.ema.is_some(),
        config: spec.echo.clone(),
    };
    if s.step == 0 {
        save_session(dir, &meta_for(&s), &s)?;
    }

    let mut window: Vec<(f64, Vec<(&'static str, f64)>)> = Vec::new();
    let mut last_loss = None;
    while (s.step as usize) < cfg.steps {
        let mut g = Graph::<f32>::new();
        let bound = s.params.bind(&mut g);
        let out = step_fn(&mut g, &bound, &spec.unet, &mut s.rngs)?;
        let loss = g.value(out.loss).item() as f64;
        let comps = out.components.iter().map(|(n, v)| (*n, g.value(*v).item() as f64)).collect();
        let mut grads = g.backward(out.loss)?;
        let mut grads = bound.collect(&g, &mut grads);
        drop(g);
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, cfg.grad_clip);
        }
        let warm = if cfg.warmup_steps > 0 {
            ((s.step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        s.adam.config.lr = cfg.lr * warm;
        s.adam.step(&mut s.params, &grads)?;
        s.adam.config.lr = cfg.lr;
        s.step += 1;
        if let Some(ema) = &mut s.ema {
            let d = cfg.ema_decay.min((1.0 + s.step as f64) / (10.0 + s.step as f64)) as f32;
            for (e, p) in ema.tensors_mut().iter_mut().zip(s.params.tensors()) {
                for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
                    *a = d * *a + (1.0 - d) * b;
                }
            }
        }
        window.push((loss, comps));

        let step = s.step;
        let done = step as usize == cfg.steps;
        if step as usize % cfg.log_every == 0 || done {
            let n = window.len() as f64;
            let mean = window.iter().map(|w| w.0).sum::<f64>() / n;
            last_loss = Some(mean);
            let mut rec = serde_json::Map::new();
            rec.insert("step".into(), step.into());
            rec.insert("loss".into(), mean.into());
            if let Some((_, first)) = window.first() {
                for (k, (name, _)) in first.iter().enumerate() {
                    let m = window.iter().map(|w| w.1[k].1).sum::<f64>() / n;
                    rec.insert((*name).into(), m.into());
                }
            }
            let inference = ScoreModel {
                config: spec.unet.clone(),
                params: s.ema.clone().unwrap_or_else(|| s.params.clone()),
            };
            for (name, v) in validate(&inference, step)? {
                rec.insert(name, v.into());
            }
            append_log(&log_path, &serde_json::Value::Object(rec))?;
            log::info!("{:?} step {step}/{} loss {mean:.5}", spec.kind, cfg.steps);
            window.clear();
        }
        if step as usize % cfg.checkpoint_every == 0 || done {
            save_session(dir, &meta_for(&s), &s)?;
        }
    }
    let checkpoint = load_checkpoint(dir)?;
    Ok(TrainOutcome { checkpoint, last_loss })
}

/// Config with the step budget removed: a run may be resumed with a larger
/// budget.
fn without_steps(config: &serde_json::Value) -> serde_json::Value {
    let mut c = config.clone();
    if let Some(train) = c.get_mut("train").and_then(|t| t.as_object_mut()) {
        train.remove("steps");
    }
    c
}

fn append_log(path: &Path, rec: &serde_json::Value) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CoreError::io(path, e))?;
    let mut line = serde_json::to_string(rec)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| CoreError::io(path, e))
}

/// Drops log records past `step` (written after the last checkpoint).
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| CoreError::data(path, e.to_string()))?;
        if v.get("step").and_then(|s| s.as_u64()).is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    crate::io::write_atomic(path, kept.as_bytes())
}

/// Reads every record of a metrics log.
pub fn read_log(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CoreError::data(path, e.to_string())))
        .collect()
}

/// Uniformly drawn batch of indices into `0..n`.
pub fn draw_batch(rng: &mut CounterRng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.below(n)).collect()
}
