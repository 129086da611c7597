//! Quality metrics and evaluation reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::geometry::{depth_flow, masked_mae};
use crate::imaging::{DepthMap, Image, Mask};
use crate::scenegen::{Manifest, Split};

pub const REPORT_SCHEMA: &str = "grlb-eval/1";
pub const RESIDUE_THRESHOLD: u8 = 20;
pub const INSERTION_RATIO: f64 = 3.0;
/// Floor on the reference flow energy of the insertion detector.
pub const MIN_REFERENCE_ENERGY: f64 = 1e-4;
const SSIM_WINDOW: usize = 8;

fn same_dims(a: (usize, usize), b: (usize, usize), op: &str) -> Result<()> {
    if a != b {
        return Err(CoreError::Shape(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for [0,1] images; +∞ when identical.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a.dims(), b.dims(), "psnr")?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Single-scale SSIM with an 8×8 uniform window over valid positions,
/// averaged over positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a.dims(), b.dims(), "ssim")?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        for i in 0..=h - SSIM_WINDOW {
            for j in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..SSIM_WINDOW {
                    for dj in 0..SSIM_WINDOW {
                        let x = a.pixel(i + di, j + dj)[ch] as f64;
                        let y = b.pixel(i + di, j + dj)[ch] as f64;
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Pixels whose channel-max 8-bit difference exceeds `threshold`.
pub fn change_mask(input: &Image, output: &Image, threshold: u8) -> Result<Mask> {
    same_dims(input.dims(), output.dims(), "change_mask")?;
    let (h, w) = input.dims();
    let (qa, qb) = (input.to_rgb8(), output.to_rgb8());
    let data = qa
        .chunks_exact(3)
        .zip(qb.chunks_exact(3))
        .map(|(p, q)| p.iter().zip(q).map(|(&x, &y)| x.abs_diff(y)).max().unwrap_or(0) > threshold)
        .collect();
    Mask::new(h, w, data)
}

/// IoU between the whole-image change mask and `artifact`; 1 when both are
/// empty.
pub fn residue_iou(input: &Image, output: &Image, artifact: &Mask, threshold: u8) -> Result<f64> {
    same_dims(input.dims(), artifact.dims(), "residue_iou")?;
    let p = change_mask(input, output, threshold)?;
    let inter = p.intersection(artifact).count();
    let union = p.union(artifact).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Change mask restricted to the artifact region: the fraction of artifact
/// pixels that changed; 1 when the artifact mask is empty.
pub fn residue_iou_within(input: &Image, output: &Image, artifact: &Mask, threshold: u8) -> Result<f64> {
    same_dims(input.dims(), artifact.dims(), "residue_iou")?;
    let p = change_mask(input, output, threshold)?;
    let a = artifact.count();
    Ok(if a == 0 { 1.0 } else { p.intersection(artifact).count() as f64 / a as f64 })
}

/// Mean flow magnitude over `region`.
fn flow_energy(d: &DepthMap, region: &Mask) -> Result<f64> {
    let f = depth_flow(d)?;
    let (h, w) = d.dims();
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..h {
        for j in 0..w {
            if region.get(i, j) {
                sum += f.vertical_at(i, j).unwrap_or(0.0) + f.horizontal_at(i, j).unwrap_or(0.0);
                n += 1;
            }
        }
    }
    Ok(sum / n.max(1) as f64)
}

/// Whether the prediction shows a spurious object inside the mask: its flow
/// energy over the 1-px-eroded mask exceeds `ratio` times the reference's.
/// `None` when the eroded mask is empty.
pub fn detect_insertion(pred: &DepthMap, gt_plus: &DepthMap, mask: &Mask, ratio: f64) -> Result<Option<bool>> {
    same_dims(pred.dims(), gt_plus.dims(), "insertion")?;
    same_dims(pred.dims(), mask.dims(), "insertion")?;
    let region = mask.eroded();
    if region.is_empty() {
        return Ok(None);
    }
    let e_pred = flow_energy(pred, &region)?;
    let e_gt = flow_energy(gt_plus, &region)?.max(MIN_REFERENCE_ENERGY);
    Ok(Some(e_pred / e_gt > ratio))
}

/// Fraction of samples flagged by [`detect_insertion`]; samples with an
/// empty eroded mask are skipped with a warning.
pub fn insertion_rate(preds: &[DepthMap], gts: &[DepthMap], masks: &[Mask], ratio: f64) -> Result<f64> {
    if preds.len() != gts.len() || preds.len() != masks.len() {
        return Err(CoreError::Shape("insertion_rate: input lengths differ".into()));
    }
    let mut flagged = 0usize;
    let mut counted = 0usize;
    for (k, ((p, g), m)) in preds.iter().zip(gts).zip(masks).enumerate() {
        match detect_insertion(p, g, m, ratio)? {
            Some(f) => {
                counted += 1;
                flagged += f as usize;
            }
            None => log::warn!("insertion_rate: sample {k} has an empty eroded mask; skipped"),
        }
    }
    Ok(if counted == 0 { 0.0 } else { flagged as f64 / counted as f64 })
}

/// JSON encoding for values that may be +∞ (written as "inf").
mod inf_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    /// Present when the run produced a geometry prediction.
    pub masked_mae: Option<f64>,
    #[serde(with = "inf_f64")]
    pub psnr: f64,
    #[serde(with = "inf_f64")]
    pub input_psnr: f64,
    pub ssim: f64,
    /// Present when the sample has artifact pixels.
    pub residue_iou: Option<f64>,
    /// Present with `--both-iou` and artifact pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residue_iou_within: Option<f64>,
    pub inserted: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregate {
    pub count: usize,
    pub masked_mae: Option<f64>,
    #[serde(with = "inf_f64")]
    pub psnr: f64,
    #[serde(with = "inf_f64")]
    pub input_psnr: f64,
    pub ssim: f64,
    pub residue_iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residue_iou_within: Option<f64>,
    pub insertion_rate: Option<f64>,
    /// Fraction of samples where the output is closer to the target than
    /// the input is.
    pub psnr_improved: f64,
}

/// Optional thresholds checked against the aggregate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Gates {
    pub min_psnr: Option<f64>,
    pub min_ssim: Option<f64>,
    pub max_masked_mae: Option<f64>,
    pub min_residue_iou: Option<f64>,
    pub max_insertion_rate: Option<f64>,
    pub min_psnr_improved: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateResult {
    pub name: String,
    pub threshold: f64,
    pub value: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema: String,
    pub run_id: String,
    pub split: Split,
    pub config: serde_json::Value,
    pub samples: Vec<SampleRecord>,
    pub aggregate: Aggregate,
    pub missing: Vec<String>,
    pub gates: Vec<GateResult>,
}

impl EvalReport {
    pub fn gates_passed(&self) -> bool {
        self.gates.iter().all(|g| g.passed)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Metric inputs for one sample.
pub struct SampleInputs<'a> {
    pub id: &'a str,
    pub i_minus: &'a Image,
    pub i_plus: &'a Image,
    pub x0_plus: &'a DepthMap,
    pub mask: &'a Mask,
    pub artifact_mask: &'a Mask,
    pub output: &'a Image,
    pub depth: Option<&'a DepthMap>,
}

pub fn score_sample(s: &SampleInputs<'_>, both_iou: bool, ratio: f64) -> Result<SampleRecord> {
    let has_artifact = !s.artifact_mask.is_empty();
    let masked = match s.depth {
        Some(d) => Some(masked_mae(d, s.x0_plus, s.mask)?),
        None => None,
    };
    let inserted = match s.depth {
        Some(d) => detect_insertion(d, s.x0_plus, s.mask, ratio)?,
        None => None,
    };
    Ok(SampleRecord {
        id: s.id.to_string(),
        masked_mae: masked,
        psnr: psnr(s.output, s.i_plus)?,
        input_psnr: psnr(s.i_minus, s.i_plus)?,
        ssim: ssim(s.output, s.i_plus)?,
        residue_iou: if has_artifact {
            Some(residue_iou(s.i_minus, s.output, s.artifact_mask, RESIDUE_THRESHOLD)?)
        } else {
            None
        },
        residue_iou_within: if has_artifact && both_iou {
            Some(residue_iou_within(s.i_minus, s.output, s.artifact_mask, RESIDUE_THRESHOLD)?)
        } else {
            None
        },
        inserted,
    })
}

pub fn aggregate(samples: &[SampleRecord]) -> Aggregate {
    Aggregate {
        count: samples.len(),
        masked_mae: mean(samples.iter().filter_map(|s| s.masked_mae)),
        psnr: mean(samples.iter().map(|s| s.psnr)).unwrap_or(0.0),
        input_psnr: mean(samples.iter().map(|s| s.input_psnr)).unwrap_or(0.0),
        ssim: mean(samples.iter().map(|s| s.ssim)).unwrap_or(0.0),
        residue_iou: mean(samples.iter().filter_map(|s| s.residue_iou)),
        residue_iou_within: mean(samples.iter().filter_map(|s| s.residue_iou_within)),
        insertion_rate: mean(samples.iter().filter_map(|s| s.inserted.map(|b| b as u8 as f64))),
        psnr_improved: mean(samples.iter().map(|s| (s.psnr > s.input_psnr) as u8 as f64)).unwrap_or(0.0),
    }
}

pub fn check_gates(gates: &Gates, agg: &Aggregate) -> Vec<GateResult> {
    let mut out = Vec::new();
    let mut gate = |name: &str, threshold: Option<f64>, value: Option<f64>, higher_is_better: bool| {
        if let Some(t) = threshold {
            let passed = value.is_some_and(|v| if higher_is_better { v >= t } else { v <= t });
            out.push(GateResult {
                name: name.to_string(),
                threshold: t,
                value,
                passed,
            });
        }
    };
    gate("min_psnr", gates.min_psnr, Some(agg.psnr), true);
    gate("min_ssim", gates.min_ssim, Some(agg.ssim), true);
    gate("max_masked_mae", gates.max_masked_mae, agg.masked_mae, false);
    gate("min_residue_iou", gates.min_residue_iou, agg.residue_iou, true);
    gate("max_insertion_rate", gates.max_insertion_rate, agg.insertion_rate, false);
    gate("min_psnr_improved", gates.min_psnr_improved, Some(agg.psnr_improved), true);
    out
}

/// Files a prediction run writes per sample.
pub fn output_path(run: &Path, id: &str) -> PathBuf {
    run.join("outputs").join(format!("{id}.png"))
}

pub fn depth_path(run: &Path, id: &str) -> PathBuf {
    run.join("depth").join(format!("{id}.png"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub both_iou: bool,
    pub insertion_ratio: f64,
    pub gates: Gates,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            both_iou: false,
            insertion_ratio: INSERTION_RATIO,
            gates: Gates::default(),
        }
    }
}

/// Scores the outputs of a prediction run on `split`, or on its first
/// `limit` samples. Samples without an output image are listed in `missing`.
pub fn eval_report(run: &Path, manifest: &Manifest, split: Split, limit: Option<usize>, opts: &EvalOptions) -> Result<EvalReport> {
    let mut entries: Vec<_> = manifest.split(split).cloned().collect();
    if let Some(n) = limit {
        entries.truncate(n);
    }
    let results = crate::parallel::map(&entries, |e| -> Result<Option<SampleRecord>> {
        let out_path = output_path(run, &e.id);
        if !out_path.exists() {
            return Ok(None);
        }
        let s = manifest.load_sample(e)?;
        let output = Image::load_png(&out_path)?;
        let dpath = depth_path(run, &e.id);
        let depth = if dpath.exists() { Some(DepthMap::load_png(&dpath)?) } else { None };
        let inputs = SampleInputs {
            id: &s.id,
            i_minus: &s.i_minus,
            i_plus: &s.i_plus,
            x0_plus: &s.x0_plus,
            mask: &s.mask,
            artifact_mask: &s.artifact_mask,
            output: &output,
            depth: depth.as_ref(),
        };
        score_sample(&inputs, opts.both_iou, opts.insertion_ratio).map(Some)
    });
    let mut samples = Vec::new();
    let mut missing = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        match r? {
            Some(rec) => samples.push(rec),
            None => missing.push(e.id.clone()),
        }
    }
    let config = serde_json::to_value(opts)?;
    Ok(build_report(split, config, samples, missing, &opts.gates))
}

pub fn build_report(split: Split, config: serde_json::Value, samples: Vec<SampleRecord>, missing: Vec<String>, gates: &Gates) -> EvalReport {
    let aggregate = aggregate(&samples);
    let gates = check_gates(gates, &aggregate);
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&config).unwrap_or_default());
    hasher.update(serde_json::to_vec(&samples).unwrap_or_default());
    let run_id = hex::encode(&hasher.finalize()[..6]);
    EvalReport {
        schema: REPORT_SCHEMA.to_string(),
        run_id,
        split,
        config,
        samples,
        aggregate,
        missing,
        gates,
    }
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(x) if x.is_infinite() => "inf".to_string(),
        Some(x) => format!("{x:.digits$}"),
        None => "-".to_string(),
    }
}

/// Aligned plain-text summary of a report.
pub fn format_table(report: &EvalReport) -> String {
    let a = &report.aggregate;
    let rows = [
        ("samples", a.count.to_string()),
        ("masked_mae", fmt_opt(a.masked_mae, 5)),
        ("psnr", fmt_opt(Some(a.psnr), 3)),
        ("input_psnr", fmt_opt(Some(a.input_psnr), 3)),
        ("psnr_improved", fmt_opt(Some(a.psnr_improved), 3)),
        ("ssim", fmt_opt(Some(a.ssim), 4)),
        ("residue_iou", fmt_opt(a.residue_iou, 4)),
        ("residue_iou_within", fmt_opt(a.residue_iou_within, 4)),
        ("insertion_rate", fmt_opt(a.insertion_rate, 4)),
    ];
    let mut s = format!("run {} ({:?} split)\n", report.run_id, report.split);
    for (k, v) in rows {
        let _ = writeln!(s, "  {k:<20} {v:>12}");
    }
    if !report.missing.is_empty() {
        let _ = writeln!(s, "  missing outputs: {}", report.missing.join(", "));
    }
    for g in &report.gates {
        let _ = writeln!(
            s,
            "  gate {:<24} {:>10} vs {:<10} {}",
            g.name,
            fmt_opt(g.value, 4),
            g.threshold,
            if g.passed { "pass" } else { "FAIL" }
        );
    }
    s
}

/// Delta table between two reports (b − a).
pub fn compare(a: &EvalReport, b: &EvalReport, label_a: &str, label_b: &str) -> String {
    let (x, y) = (&a.aggregate, &b.aggregate);
    let rows: [(&str, Option<f64>, Option<f64>); 7] = [
        ("masked_mae", x.masked_mae, y.masked_mae),
        ("psnr", Some(x.psnr), Some(y.psnr)),
        ("ssim", Some(x.ssim), Some(y.ssim)),
        ("residue_iou", x.residue_iou, y.residue_iou),
        ("insertion_rate", x.insertion_rate, y.insertion_rate),
        ("psnr_improved", Some(x.psnr_improved), Some(y.psnr_improved)),
        ("input_psnr", Some(x.input_psnr), Some(y.input_psnr)),
    ];
    let mut s = format!("{:<16} {:>12} {:>12} {:>12}\n", "metric", label_a, label_b, "delta");
    for (name, va, vb) in rows {
        let delta = va.zip(vb).map(|(p, q)| q - p);
        let _ = writeln!(s, "{name:<16} {:>12} {:>12} {:>12}", fmt_opt(va, 4), fmt_opt(vb, 4), fmt_opt(delta, 4));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Image::filled(3, 4, [0.5; 3])).is_err());
    }

    #[test]
    fn ssim_examples() {
        let mut a = Image::filled(16, 16, [0.0; 3]);
        for i in 0..16 {
            for j in 0..16 {
                a.set_pixel(i, j, [(i * j) as f32 / 225.0, i as f32 / 15.0, j as f32 / 15.0]);
            }
        }
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let shifted = Image::new(16, 16, a.data().iter().map(|v| (v + 0.2).min(1.0)).collect()).unwrap();
        assert!(ssim(&a, &shifted).unwrap() < 1.0);
        assert!(ssim(&Image::filled(7, 7, [0.0; 3]), &Image::filled(7, 7, [0.0; 3])).is_err());
    }

    #[test]
    fn residue_examples() {
        let a = Image::filled(4, 4, [0.5; 3]);
        assert_eq!(residue_iou(&a, &a, &Mask::empty(4, 4), 20).unwrap(), 1.0);
        let mut art = Mask::empty(4, 4);
        let mut b = a.clone();
        for j in 0..4 {
            art.set(1, j, true);
            b.set_pixel(1, j, [0.9, 0.5, 0.5]);
        }
        assert_eq!(residue_iou(&a, &b, &art, 20).unwrap(), 1.0);
        let mut half = a.clone();
        half.set_pixel(1, 0, [0.9, 0.5, 0.5]);
        half.set_pixel(1, 1, [0.9, 0.5, 0.5]);
        assert_eq!(residue_iou(&a, &half, &art, 20).unwrap(), 0.5);
        assert_eq!(residue_iou_within(&a, &half, &art, 20).unwrap(), 0.5);
    }

    #[test]
    fn residue_threshold_is_strict() {
        let a = Image::filled(1, 1, [0.0; 3]);
        let b = Image::filled(1, 1, [20.0 / 255.0, 0.0, 0.0]);
        let c = Image::filled(1, 1, [21.0 / 255.0, 0.0, 0.0]);
        assert!(change_mask(&a, &b, 20).unwrap().is_empty());
        assert_eq!(change_mask(&a, &c, 20).unwrap().count(), 1);
    }

    fn bump(h: usize, w: usize, height: f32) -> (DepthMap, Mask) {
        let mut d = DepthMap::filled(h, w, 1.0);
        let mut m = Mask::empty(h, w);
        for i in 4..10 {
            for j in 4..10 {
                m.set(i, j, true);
                if (i + j) % 2 == 0 {
                    d.set(i, j, 1.0 - height);
                }
            }
        }
        (d, m)
    }

    #[test]
    fn insertion_examples() {
        let (obj, m) = bump(14, 14, 0.3);
        let flat = DepthMap::filled(14, 14, 1.0);
        assert_eq!(insertion_rate(&[flat.clone()], &[flat.clone()], &[m.clone()], 3.0).unwrap(), 0.0);
        assert_eq!(insertion_rate(&[obj.clone()], &[flat.clone()], &[m.clone()], 3.0).unwrap(), 1.0);
        let mut last = 1.0;
        for r in [1.5, 3.0, 10.0, 1e3, 1e5] {
            let rate = insertion_rate(&[obj.clone(), flat.clone()], &[flat.clone(), flat.clone()], &[m.clone(), m.clone()], r).unwrap();
            assert!(rate <= last);
            last = rate;
        }
        let tiny = {
            let mut t = Mask::empty(14, 14);
            t.set(3, 3, true);
            t
        };
        assert_eq!(detect_insertion(&obj, &flat, &tiny, 3.0).unwrap(), None);
    }

    #[test]
    fn report_aggregates_and_gates() {
        let rec = |psnr: f64, iou: Option<f64>| SampleRecord {
            id: "x".into(),
            masked_mae: Some(0.1),
            psnr,
            input_psnr: 20.0,
            ssim: 0.9,
            residue_iou: iou,
            residue_iou_within: None,
            inserted: Some(false),
        };
        let gates = Gates {
            min_psnr: Some(22.0),
            max_insertion_rate: Some(0.5),
            ..Gates::default()
        };
        let r = build_report(Split::Val, serde_json::json!({}), vec![rec(21.0, Some(0.2)), rec(25.0, None)], vec![], &gates);
        assert_eq!(r.aggregate.psnr, 23.0);
        assert_eq!(r.aggregate.residue_iou, Some(0.2));
        assert_eq!(r.aggregate.psnr_improved, 1.0);
        assert!(r.gates_passed());
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);

        let inf = build_report(Split::Val, serde_json::json!({}), vec![rec(f64::INFINITY, None)], vec![], &Gates::default());
        let json = serde_json::to_string(&inf).unwrap();
        assert!(json.contains("\"psnr\":\"inf\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.aggregate.psnr, f64::INFINITY);

        let empty = build_report(Split::Val, serde_json::json!({}), vec![], vec![], &Gates::default());
        assert_eq!(empty.aggregate.count, 0);
        assert!(empty.gates_passed());
        assert!(!format_table(&r).is_empty());
        assert!(compare(&r, &empty, "a", "b").contains("psnr"));
    }
}
