use std::fs;
use std::path::{Path, PathBuf};

use grlb_tensor::CounterRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{make_pair, Ground, Light, MirrorStrip, ObjectSpec, PairedSample, SceneSpec, Shape, MAX_GROUND_RANGE};
use crate::error::{CoreError, Result};
use crate::imaging::{DepthMap, Image, Mask};

/// Scene-parameter ranges and dataset size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object height range in depth units.
    pub object_height: [f64; 2],
    /// Footprint radius / half-extent range in pixels.
    pub radius: [f64; 2],
    pub elevation_deg: [f64; 2],
    /// Total ground depth range drawn from [lo, hi].
    pub ground_range: [f64; 2],
    pub ground_variation: f32,
    pub mirror_probability: f64,
    /// Mirror strip height range in rows.
    pub mirror_rows: [usize; 2],
    /// Percentage of ids assigned to the validation split.
    pub val_percent: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 3,
            object_height: [0.15, 0.35],
            radius: [3.0, 7.0],
            elevation_deg: [25.0, 55.0],
            ground_range: [0.01, 0.05],
            ground_variation: 0.08,
            mirror_probability: 0.25,
            mirror_rows: [6, 12],
            val_percent: 10,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.height < 16 || self.width < 16 {
            return bad("grid must be at least 16x16");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 <= min_objects <= max_objects");
        }
        if !(self.object_height[0] > 0.1 && self.object_height[0] <= self.object_height[1] && self.object_height[1] <= 0.8) {
            return bad("object_height must lie in (0.1, 0.8]");
        }
        if !(self.radius[0] >= 3.0 && self.radius[0] <= self.radius[1]) {
            return bad("radius range must start at 3 px or more");
        }
        if 2.0 * self.radius[1] + 3.0 > self.height.min(self.width) as f64 {
            return bad("radius too large for the grid");
        }
        if !(self.elevation_deg[0] >= 20.0 && self.elevation_deg[0] <= self.elevation_deg[1] && self.elevation_deg[1] <= 70.0) {
            return bad("elevation_deg must lie in [20, 70]");
        }
        if !(self.ground_range[0] >= 0.0 && self.ground_range[0] <= self.ground_range[1] && self.ground_range[1] <= MAX_GROUND_RANGE) {
            return bad("ground_range must lie in [0, 0.05]");
        }
        if !(0.0..=0.5).contains(&self.ground_variation) {
            return bad("ground_variation must lie in [0, 0.5]");
        }
        if !(0.0..=1.0).contains(&self.mirror_probability) {
            return bad("mirror_probability must lie in [0, 1]");
        }
        if self.mirror_rows[0] == 0 || self.mirror_rows[0] > self.mirror_rows[1] || self.mirror_rows[1] * 3 > self.height {
            return bad("mirror_rows must be nonzero and at most a third of the grid");
        }
        if self.val_percent > 100 {
            return bad("val_percent must be at most 100");
        }
        Ok(())
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

pub fn split_for_id(id: &str, val_percent: u64) -> Split {
    if fnv1a64(id.as_bytes()) % 100 < val_percent {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFiles {
    pub i_minus: String,
    pub i_plus: String,
    pub x_minus: String,
    pub x_plus: String,
    pub mask: String,
    pub artifact_mask: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub files: SampleFiles,
    pub seed: u64,
    pub split: Split,
}

/// Entries plus the directory their relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<PairedSample> {
        let p = |f: &str| self.root.join(f);
        let f = &entry.files;
        let sample = PairedSample {
            id: entry.id.clone(),
            i_minus: Image::load_png(&p(&f.i_minus))?,
            i_plus: Image::load_png(&p(&f.i_plus))?,
            x0_minus: DepthMap::load_png(&p(&f.x_minus))?,
            x0_plus: DepthMap::load_png(&p(&f.x_plus))?,
            mask: Mask::load_png(&p(&f.mask))?,
            artifact_mask: Mask::load_png(&p(&f.artifact_mask))?,
        };
        let dims = sample.i_minus.dims();
        let consistent = [
            sample.i_plus.dims(),
            sample.x0_minus.dims(),
            sample.x0_plus.dims(),
            sample.mask.dims(),
            sample.artifact_mask.dims(),
        ]
        .iter()
        .all(|d| *d == dims);
        if !consistent {
            return Err(CoreError::data(&p(&f.i_minus), format!("sample {} has inconsistent panel sizes", entry.id)));
        }
        if sample.mask.is_empty() {
            return Err(CoreError::data(&p(&f.mask), format!("sample {} has an empty mask", entry.id)));
        }
        Ok(sample)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<PairedSample>> {
        self.split(split).map(|e| self.load_sample(e)).collect()
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| CoreError::data(path, format!("malformed manifest: {e}")))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Manifest { root, entries })
}

fn uniform(rng: &mut CounterRng, r: [f64; 2]) -> f64 {
    rng.uniform_range(r[0], r[1])
}

fn random_albedo(rng: &mut CounterRng, lo: f64, hi: f64) -> [f32; 3] {
    [(); 3].map(|_| rng.uniform_range(lo, hi) as f32)
}

/// Draws a valid scene and target index from `seed`.
pub fn random_scene(cfg: &GenConfig, seed: u64) -> (SceneSpec, usize) {
    let mut rng = CounterRng::new(seed);
    let (h, w) = (cfg.height, cfg.width);
    loop {
        let az = rng.uniform_range(0.0, 360.0);
        let el = uniform(&mut rng, cfg.elevation_deg);
        let range = uniform(&mut rng, cfg.ground_range);
        let share = rng.uniform();
        let ground = Ground {
            albedo: random_albedo(&mut rng, 0.55, 0.85),
            variation: rng.uniform_range(0.0, cfg.ground_variation as f64) as f32,
            frequency: [rng.uniform_range(0.5, 2.0) as f32, rng.uniform_range(0.5, 2.0) as f32],
            phase: rng.uniform_range(0.0, std::f64::consts::TAU) as f32,
            slope: [range * share, range * (1.0 - share)],
        };
        let mirror = (rng.uniform() < cfg.mirror_probability).then(|| {
            let rows = rng.int_inclusive(cfg.mirror_rows[0] as i64, cfg.mirror_rows[1] as i64) as usize;
            let start = rng.int_inclusive((h / 2) as i64, (h - rows) as i64) as usize;
            MirrorStrip {
                start_row: start,
                end_row: start + rows,
            }
        });
        let n = rng.int_inclusive(cfg.min_objects as i64, cfg.max_objects as i64) as usize;
        let mut scene = SceneSpec {
            height: h,
            width: w,
            ground,
            light: Light::from_angles(az, el),
            objects: Vec::new(),
            mirror,
            seed,
        };
        let mut occupied = Mask::empty(h, w);
        for k in 0..n {
            for _ in 0..64 {
                if let Some(obj) = random_object(cfg, &mut rng, mirror.filter(|_| k == 0)) {
                    let mut trial = scene.clone();
                    trial.objects.push(obj);
                    if trial.validate().is_err() {
                        continue;
                    }
                    let fp = trial.footprint(trial.objects.len() - 1);
                    // one pixel of clearance between objects
                    if !fp.union(&fp.dilated()).intersection(&occupied).is_empty() {
                        continue;
                    }
                    occupied = occupied.union(&fp);
                    scene = trial;
                    break;
                }
            }
        }
        if scene.objects.is_empty() {
            continue;
        }
        let target = rng.below(scene.objects.len());
        return (scene, target);
    }
}

fn random_object(cfg: &GenConfig, rng: &mut CounterRng, above_mirror: Option<MirrorStrip>) -> Option<ObjectSpec> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let shape = match rng.below(3) {
        0 => Shape::Box {
            half_rows: uniform(rng, cfg.radius),
            half_cols: uniform(rng, cfg.radius),
        },
        1 => Shape::Cylinder {
            radius: uniform(rng, cfg.radius),
        },
        _ => Shape::Dome {
            radius: uniform(rng, cfg.radius),
        },
    };
    let (er, ec) = match shape {
        Shape::Box { half_rows, half_cols } => (half_rows, half_cols),
        Shape::Cylinder { radius } | Shape::Dome { radius } => (radius, radius),
    };
    let col = rng.int_inclusive(ec.ceil() as i64, (w - 1.0 - ec.ceil()) as i64);
    let row = match above_mirror {
        // sit just above the strip so the reflection is visible
        Some(m) => m.start_row as i64 - 1 - er.floor() as i64 - rng.int_inclusive(0, 1),
        None => rng.int_inclusive(er.ceil() as i64, (h - 1.0 - er.ceil()) as i64),
    };
    if row < er.ceil() as i64 || col < ec.ceil() as i64 {
        return None;
    }
    let height = uniform(rng, cfg.object_height);
    // albedo well separated from the ground
    let albedo = if rng.uniform() < 0.5 {
        random_albedo(rng, 0.05, 0.3)
    } else {
        let mut a = random_albedo(rng, 0.1, 0.35);
        a[rng.below(3) as usize] = rng.uniform_range(0.75, 1.0) as f32;
        a
    };
    Some(ObjectSpec {
        shape,
        center: [row as f64, col as f64],
        height,
        albedo,
    })
}

fn sample_id(index: usize) -> String {
    format!("s{index:06}")
}

fn write_sample(root: &Path, s: &PairedSample) -> Result<SampleFiles> {
    let rel = |name: &str| format!("samples/{}/{name}.png", s.id);
    let files = SampleFiles {
        i_minus: rel("i_minus"),
        i_plus: rel("i_plus"),
        x_minus: rel("x_minus"),
        x_plus: rel("x_plus"),
        mask: rel("mask"),
        artifact_mask: rel("artifact_mask"),
    };
    let dir = root.join("samples").join(&s.id);
    fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
    s.i_minus.save_png(&root.join(&files.i_minus))?;
    s.i_plus.save_png(&root.join(&files.i_plus))?;
    s.x0_minus.save_png(&root.join(&files.x_minus))?;
    s.x0_plus.save_png(&root.join(&files.x_plus))?;
    s.mask.save_png(&root.join(&files.mask))?;
    s.artifact_mask.save_png(&root.join(&files.artifact_mask))?;
    Ok(files)
}

/// Generates `cfg.count` pairs under `out`, writing `manifest.json` and
/// `config.json`. Per-sample seeds are `seed ⊕ fnv1a64(id)`.
pub fn gen_dataset(cfg: &GenConfig, seed: u64, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    let ids: Vec<String> = (0..cfg.count).map(sample_id).collect();
    let entries = crate::parallel::map(&ids, |id| -> Result<ManifestEntry> {
        let sample_seed = seed ^ fnv1a64(id.as_bytes());
        let (scene, target) = random_scene(cfg, sample_seed);
        let pair = make_pair(&scene, target, id.clone())?;
        let files = write_sample(out, &pair)?;
        Ok(ManifestEntry {
            id: id.clone(),
            files,
            seed: sample_seed,
            split: split_for_id(id, cfg.val_percent),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest_path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&entries)?;
    crate::io::write_atomic(&manifest_path, text.as_bytes())?;
    let mut echo = serde_json::to_value(cfg)?;
    echo["seed"] = seed.into();
    crate::io::write_atomic(&out.join("config.json"), serde_json::to_string_pretty(&echo)?.as_bytes())?;
    Ok(Manifest {
        root: out.to_path_buf(),
        entries,
    })
}

/// SHA-256 over every file under `dir` (relative path and contents, sorted
/// by path), hex encoded.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
        hasher.update(rel.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))? {
        let entry = entry.map_err(|e| CoreError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path);
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
