//! End-to-end removal, batch prediction over a dataset split, and the
//! ablation harness.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::{run_onestage_batch, train_onestage, OneStageConfig};
use crate::error::{CoreError, Result};
use crate::eval::{compare, depth_path, eval_report, format_table, output_path, EvalOptions, EvalReport};
use crate::geometry::local_max_fill_in;
use crate::imaging::{DepthMap, Image, Mask};
use crate::io::{ensure_dir, write_atomic, write_json};
use crate::scenegen::{corrupt_depth, fnv1a64, CorruptMode, Manifest, PairedSample, Split};
use crate::stage1::{remove_geometry_batch, train_stage1, Stage1Config};
use crate::stage2::{render_appearance_batch, train_stage2, Stage2Config};
use crate::train::Checkpoint;

/// Salt separating the appearance-stage seed from the geometry-stage seed.
const RENDER_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
/// Samples processed per prediction block.
const BLOCK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemovalOptions {
    /// Reverse-diffusion steps per stage.
    pub steps: usize,
    pub seed: u64,
    /// Fall back to local-max filling when the geometry stage leaves the
    /// masked region nearly unchanged.
    pub fill_in: bool,
    pub fill_window: usize,
    /// Mean absolute masked depth change below which the fallback applies.
    pub fill_trigger: f64,
    /// Replaces the geometry-stage output with a corrupted copy of the
    /// input depth, simulating a failed edit.
    pub simulate_failure: Option<CorruptMode>,
}

impl Default for RemovalOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            seed: 0,
            fill_in: false,
            fill_window: 10,
            fill_trigger: 0.01,
            simulate_failure: None,
        }
    }
}

/// Mean |a − b| over the set pixels of `mask`.
pub fn mean_masked_change(a: &DepthMap, b: &DepthMap, mask: &Mask) -> f64 {
    let (h, w) = a.dims();
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..h {
        for j in 0..w {
            if mask.get(i, j) {
                sum += (a.get(i, j) - b.get(i, j)).abs() as f64;
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

/// Geometry stage with the optional fill-in fallback. Returns each result
/// and whether the fallback replaced it.
pub fn remove_geometry_filled(
    stage1: &Checkpoint,
    inputs: &[(&DepthMap, &Mask)],
    opts: &RemovalOptions,
    seeds: &[u64],
) -> Result<Vec<(DepthMap, bool)>> {
    let preds = match opts.simulate_failure {
        Some(mode) => inputs.iter().map(|(d, m)| corrupt_depth(d, m, mode)).collect(),
        None => remove_geometry_batch(stage1, inputs, opts.steps, seeds)?,
    };
    preds
        .into_iter()
        .zip(inputs)
        .map(|(p, (d, m))| {
            if opts.fill_in && mean_masked_change(&p, d, m) < opts.fill_trigger {
                Ok((local_max_fill_in(d, m, opts.fill_window)?, true))
            } else {
                Ok((p, false))
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Removal {
    pub depth: DepthMap,
    pub filled: bool,
    pub image: Image,
}

fn render_seed(seed: u64) -> u64 {
    seed ^ RENDER_SEED_SALT
}

/// Two-stage object removal for a batch of (image, depth, mask) inputs.
pub fn remove_objects(
    stage1: &Checkpoint,
    stage2: &Checkpoint,
    inputs: &[(&Image, &DepthMap, &Mask)],
    opts: &RemovalOptions,
    seeds: &[u64],
) -> Result<Vec<Removal>> {
    let geo_inputs: Vec<_> = inputs.iter().map(|(_, d, m)| (*d, *m)).collect();
    let geo = remove_geometry_filled(stage1, &geo_inputs, opts, seeds)?;
    let render_inputs: Vec<_> = inputs.iter().zip(&geo).map(|((img, d, _), (x, _))| (*img, *d, x)).collect();
    let render_seeds: Vec<u64> = seeds.iter().map(|&s| render_seed(s)).collect();
    let images = render_appearance_batch(stage2, &render_inputs, opts.steps, &render_seeds)?;
    Ok(geo
        .into_iter()
        .zip(images)
        .map(|((depth, filled), image)| Removal { depth, filled, image })
        .collect())
}

/// Where the depth used by the appearance stage comes from.
pub enum Geometry<'a> {
    Model(&'a Checkpoint),
    /// Depth maps written by an earlier run (`depth/<id>.png`).
    Precomputed(&'a Path),
}

pub enum Predictor<'a> {
    TwoStage { geometry: Geometry<'a>, stage2: &'a Checkpoint },
    OneStage(&'a Checkpoint),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictSummary {
    pub split: Split,
    pub count: usize,
    pub filled: usize,
    pub options: RemovalOptions,
    pub models: Vec<String>,
}

pub const PREDICT_FILE: &str = "predict.json";

/// Per-sample seed derived from the run seed and the sample id.
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    seed ^ fnv1a64(id.as_bytes())
}

fn write_png<F: FnOnce(&Path) -> Result<()>>(path: &Path, f: F) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    f(path)
}

fn predict_block(predictor: &Predictor<'_>, block: &[PairedSample], opts: &RemovalOptions, out: &Path) -> Result<usize> {
    let seeds: Vec<u64> = block.iter().map(|s| sample_seed(opts.seed, &s.id)).collect();
    let inputs: Vec<_> = block.iter().map(|s| (&s.i_minus, &s.x0_minus, &s.mask)).collect();
    let mut filled = 0;
    match predictor {
        Predictor::OneStage(ck) => {
            let images = run_onestage_batch(ck, &inputs, opts.steps, &seeds)?;
            for (s, img) in block.iter().zip(images) {
                write_png(&output_path(out, &s.id), |p| img.save_png(p))?;
            }
        }
        Predictor::TwoStage { geometry, stage2 } => {
            let depths: Vec<(DepthMap, bool)> = match geometry {
                Geometry::Model(stage1) => {
                    let geo_inputs: Vec<_> = block.iter().map(|s| (&s.x0_minus, &s.mask)).collect();
                    remove_geometry_filled(stage1, &geo_inputs, opts, &seeds)?
                }
                Geometry::Precomputed(dir) => block
                    .iter()
                    .map(|s| Ok((DepthMap::load_png(&depth_path(dir, &s.id))?, false)))
                    .collect::<Result<_>>()?,
            };
            let render_inputs: Vec<_> = block.iter().zip(&depths).map(|(s, (x, _))| (&s.i_minus, &s.x0_minus, x)).collect();
            let render_seeds: Vec<u64> = seeds.iter().map(|&s| render_seed(s)).collect();
            let images = render_appearance_batch(stage2, &render_inputs, opts.steps, &render_seeds)?;
            for ((s, (d, f)), img) in block.iter().zip(&depths).zip(images) {
                filled += *f as usize;
                write_png(&depth_path(out, &s.id), |p| d.save_png(p))?;
                write_png(&output_path(out, &s.id), |p| img.save_png(p))?;
            }
        }
    }
    Ok(filled)
}

/// Runs `predictor` on a manifest split, writing `outputs/<id>.png` (and
/// `depth/<id>.png` for two-stage runs) under `out`.
pub fn predict_split(
    manifest: &Manifest,
    split: Split,
    predictor: &Predictor<'_>,
    opts: &RemovalOptions,
    limit: Option<usize>,
    out: &Path,
) -> Result<PredictSummary> {
    ensure_dir(out)?;
    let mut entries: Vec<_> = manifest.split(split).collect();
    if let Some(n) = limit {
        entries.truncate(n);
    }
    let mut filled = 0;
    for chunk in entries.chunks(BLOCK) {
        let block = chunk.iter().map(|e| manifest.load_sample(e)).collect::<Result<Vec<_>>>()?;
        filled += predict_block(predictor, &block, opts, out)?;
    }
    let models = match predictor {
        Predictor::OneStage(ck) => vec![format!("{:?}", ck.meta.kind)],
        Predictor::TwoStage { geometry, stage2 } => {
            let g = match geometry {
                Geometry::Model(ck) => format!("{:?}", ck.meta.kind),
                Geometry::Precomputed(dir) => format!("depth from {}", dir.display()),
            };
            vec![g, format!("{:?}", stage2.meta.kind)]
        }
    };
    let summary = PredictSummary {
        split,
        count: entries.len(),
        filled,
        options: opts.clone(),
        models,
    };
    write_json(&out.join(PREDICT_FILE), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Preference weights swept for the geometry stage.
    pub lambdas: Vec<f64>,
    /// Weight used by the reference two-stage pipeline.
    pub reference_lambda: f64,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    /// One-stage step budget; defaults to the sum of both stages' steps.
    pub onestage_steps: Option<usize>,
    pub removal: RemovalOptions,
    pub eval: EvalOptions,
    pub split: Split,
    pub max_samples: Option<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.05, 0.1, 0.5],
            reference_lambda: 0.1,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            onestage_steps: None,
            removal: RemovalOptions::default(),
            eval: EvalOptions::default(),
            split: Split::Val,
            max_samples: None,
        }
    }
}

impl AblateConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambdas.contains(&self.reference_lambda) {
            return Err(CoreError::Config(format!(
                "reference_lambda {} must be one of the swept lambdas",
                self.reference_lambda
            )));
        }
        self.stage1.validate()?;
        self.stage2.train.validate()
    }

    pub fn onestage_config(&self) -> OneStageConfig {
        let mut train = self.stage2.train.clone();
        train.steps = self.onestage_steps.unwrap_or(self.stage1.train.steps + self.stage2.train.steps);
        OneStageConfig { train }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub report: PathBuf,
    pub aggregate: crate::eval::Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub config: AblateConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationSummary {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

pub fn lambda_name(lambda: f64) -> String {
    format!("two-stage-lambda-{lambda}")
}

pub const UNIDIRECTIONAL: &str = "two-stage-unidirectional";
pub const ONESTAGE: &str = "one-stage";

fn evaluate(manifest: &Manifest, cfg: &AblateConfig, run: &Path, reports: &Path, name: &str) -> Result<(EvalReport, AblationRow)> {
    let report = eval_report(run, manifest, cfg.split, cfg.max_samples, &cfg.eval)?;
    if !report.missing.is_empty() {
        return Err(CoreError::data(run, format!("{} outputs missing", report.missing.len())));
    }
    let path = reports.join(format!("{name}.json"));
    write_json(&path, &report)?;
    let row = AblationRow {
        name: name.to_string(),
        report: path,
        aggregate: report.aggregate.clone(),
    };
    Ok((report, row))
}

/// Trains every model of the ablation (skipping finished ones), predicts the
/// evaluation split with each variant and writes per-variant reports plus a
/// summary under `out`.
pub fn ablate(manifest: &Manifest, cfg: &AblateConfig, out: &Path) -> Result<AblationSummary> {
    cfg.validate()?;
    let models = out.join("models");
    let runs = out.join("runs");
    let reports = out.join("reports");
    ensure_dir(&reports)?;
    write_json(&out.join("config.json"), cfg)?;

    let mut s2_bi = cfg.stage2.clone();
    s2_bi.bidirectional = true;
    let stage2 = train_stage2(manifest, &s2_bi, &models.join("stage2"), true)?.checkpoint;
    let mut rows = Vec::new();
    let mut reference = None;
    let mut reference_run = None;
    for &lambda in &cfg.lambdas {
        let name = lambda_name(lambda);
        let mut s1 = cfg.stage1.clone();
        s1.lambda = lambda;
        let stage1 = train_stage1(manifest, &s1, &models.join(format!("stage1-lambda-{lambda}")), true)?.checkpoint;
        let run = runs.join(&name);
        let predictor = Predictor::TwoStage {
            geometry: Geometry::Model(&stage1),
            stage2: &stage2,
        };
        predict_split(manifest, cfg.split, &predictor, &cfg.removal, cfg.max_samples, &run)?;
        let (report, row) = evaluate(manifest, cfg, &run, &reports, &name)?;
        if lambda == cfg.reference_lambda {
            reference = Some(report);
            reference_run = Some(run);
        }
        rows.push(row);
    }
    let reference = reference.expect("validated");
    let reference_run = reference_run.expect("validated");

    let mut s2_uni = cfg.stage2.clone();
    s2_uni.bidirectional = false;
    let stage2_uni = train_stage2(manifest, &s2_uni, &models.join("stage2-unidirectional"), true)?.checkpoint;
    let run = runs.join(UNIDIRECTIONAL);
    let predictor = Predictor::TwoStage {
        geometry: Geometry::Precomputed(&reference_run),
        stage2: &stage2_uni,
    };
    predict_split(manifest, cfg.split, &predictor, &cfg.removal, cfg.max_samples, &run)?;
    let (uni, row) = evaluate(manifest, cfg, &run, &reports, UNIDIRECTIONAL)?;
    rows.push(row);

    let one = train_onestage(manifest, &cfg.onestage_config(), &models.join("onestage"), true)?.checkpoint;
    let run = runs.join(ONESTAGE);
    predict_split(manifest, cfg.split, &Predictor::OneStage(&one), &cfg.removal, cfg.max_samples, &run)?;
    let (onestage, row) = evaluate(manifest, cfg, &run, &reports, ONESTAGE)?;
    rows.push(row);

    let summary = AblationSummary {
        config: cfg.clone(),
        rows,
    };
    write_json(&out.join("ablation.json"), &summary)?;
    let ref_name = lambda_name(cfg.reference_lambda);
    let mut text = String::new();
    for r in &summary.rows {
        text.push_str(&format!("== {}\n", r.name));
        let report: EvalReport = crate::io::read_json(&r.report)?;
        text.push_str(&format_table(&report));
    }
    text.push_str(&format!("\n== {ref_name} vs {UNIDIRECTIONAL}\n"));
    text.push_str(&compare(&uni, &reference, UNIDIRECTIONAL, &ref_name));
    text.push_str(&format!("\n== {ref_name} vs {ONESTAGE}\n"));
    text.push_str(&compare(&onestage, &reference, ONESTAGE, &ref_name));
    write_atomic(&out.join("ablation.txt"), text.as_bytes())?;
    Ok(summary)
}

/// Loads the reports of a finished ablation.
pub fn load_ablation(out: &Path) -> Result<AblationSummary> {
    crate::io::read_json(&out.join("ablation.json"))
}
