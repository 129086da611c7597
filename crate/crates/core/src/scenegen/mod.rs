//! Procedural paired scenes: a heightfield of simple objects on a gently
//! sloped ground, lit by one directional light, optionally with a mirror
//! strip. Rendering a scene with and without one object yields exact
//! ground truth for depth, appearance, and the shadow/reflection pixels the
//! object causes.

mod dataset;

pub use dataset::{
    fnv1a64, gen_dataset, manifest_hash, random_scene, read_manifest, split_for_id, GenConfig, Manifest, ManifestEntry,
    SampleFiles, Split,
};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::imaging::{DepthMap, Image, Mask};

/// Grid units (pixels) per depth unit of object height.
pub const H_SCALE: f64 = 32.0;
/// Multiplier applied to shadowed pixels.
pub const SHADOW_ATTENUATION: f32 = 0.45;
/// Blend weight of a reflected object over the mirror surface.
pub const REFLECTION_OPACITY: f32 = 0.6;
/// Albedo of the mirror strip surface.
pub const MIRROR_TINT: [f32; 3] = [0.55, 0.6, 0.7];
/// Maximum depth range of the ground gradient.
pub const MAX_GROUND_RANGE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Box { half_rows: f64, half_cols: f64 },
    Cylinder { radius: f64 },
    Dome { radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// (row, col) in pixels.
    pub center: [f64; 2],
    /// Height in depth units.
    pub height: f64,
    pub albedo: [f32; 3],
}

impl ObjectSpec {
    /// Height above ground at pixel (i, j), or `None` outside the footprint.
    pub fn profile(&self, i: usize, j: usize) -> Option<f64> {
        let di = i as f64 - self.center[0];
        let dj = j as f64 - self.center[1];
        match self.shape {
            Shape::Box { half_rows, half_cols } => {
                (di.abs() <= half_rows && dj.abs() <= half_cols).then_some(self.height)
            }
            Shape::Cylinder { radius } => (di.hypot(dj) <= radius).then_some(self.height),
            Shape::Dome { radius } => {
                let rho = di.hypot(dj) / radius;
                (rho <= 1.0).then(|| self.height * (1.0 - rho * rho).max(0.0).sqrt())
            }
        }
    }

    /// Gradient of the profile w.r.t. (row, col), in depth units per pixel.
    fn profile_gradient(&self, i: usize, j: usize) -> (f64, f64) {
        match self.shape {
            Shape::Box { .. } | Shape::Cylinder { .. } => (0.0, 0.0),
            Shape::Dome { radius } => {
                let di = i as f64 - self.center[0];
                let dj = j as f64 - self.center[1];
                let d = di.hypot(dj);
                if d == 0.0 {
                    return (0.0, 0.0);
                }
                let rho = d / radius;
                // steepness capped near the rim
                let root = (1.0 - rho * rho).max(0.01).sqrt();
                let dpdd = -self.height * rho / (radius * root);
                (dpdd * di / d, dpdd * dj / d)
            }
        }
    }

    /// Row/column half extents of the bounding box.
    pub fn extents(&self) -> (f64, f64) {
        match self.shape {
            Shape::Box { half_rows, half_cols } => (half_rows, half_cols),
            Shape::Cylinder { radius } | Shape::Dome { radius } => (radius, radius),
        }
    }

    fn min_radius(&self) -> f64 {
        let (a, b) = self.extents();
        a.min(b)
    }
}

/// Ground: smooth albedo field plus a planar depth gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ground {
    pub albedo: [f32; 3],
    /// Amplitude of the sinusoidal albedo modulation.
    pub variation: f32,
    /// Spatial frequency (cycles across the grid) along rows and cols.
    pub frequency: [f32; 2],
    pub phase: f32,
    /// Height gained across the full grid along rows and cols (depth units).
    pub slope: [f64; 2],
}

impl Ground {
    pub fn flat(albedo: [f32; 3]) -> Self {
        Self {
            albedo,
            variation: 0.0,
            frequency: [0.0, 0.0],
            phase: 0.0,
            slope: [0.0, 0.0],
        }
    }

    fn height(&self, i: usize, j: usize, h: usize, w: usize) -> f64 {
        let fi = if h > 1 { i as f64 / (h - 1) as f64 } else { 0.0 };
        let fj = if w > 1 { j as f64 / (w - 1) as f64 } else { 0.0 };
        self.slope[0] * fi + self.slope[1] * fj
    }

    fn gradient(&self, h: usize, w: usize) -> (f64, f64) {
        let gi = if h > 1 { self.slope[0] / (h - 1) as f64 } else { 0.0 };
        let gj = if w > 1 { self.slope[1] / (w - 1) as f64 } else { 0.0 };
        (gi, gj)
    }

    pub fn albedo_at(&self, i: usize, j: usize, h: usize, w: usize) -> [f32; 3] {
        let arg = 2.0
            * std::f32::consts::PI
            * (self.frequency[0] * i as f32 / h as f32 + self.frequency[1] * j as f32 / w as f32)
            + self.phase;
        let m = self.variation * arg.sin();
        self.albedo.map(|a| (a + m).clamp(0.0, 1.0))
    }
}

/// Unit light direction: `x` along columns, `y` along rows, `z` up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Light {
    pub fn from_angles(azimuth_deg: f64, elevation_deg: f64) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        Self {
            x: el.cos() * az.cos(),
            y: el.cos() * az.sin(),
            z: el.sin(),
        }
    }

    pub fn elevation_deg(&self) -> f64 {
        self.z.atan2(self.x.hypot(self.y)).to_degrees()
    }

    fn horizontal(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Half-open row interval acting as a planar reflector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MirrorStrip {
    pub start_row: usize,
    pub end_row: usize,
}

impl MirrorStrip {
    pub fn contains_row(&self, r: usize) -> bool {
        r >= self.start_row && r < self.end_row
    }

    /// Source row reflected into strip row `r` (mirror about the top edge).
    pub fn source_row(&self, r: usize) -> Option<usize> {
        let s = 2 * self.start_row as isize - 1 - r as isize;
        (s >= 0).then_some(s as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub ground: Ground,
    pub light: Light,
    pub objects: Vec<ObjectSpec>,
    pub mirror: Option<MirrorStrip>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height, self.width);
        if h < 2 || w < 2 {
            return Err(CoreError::InvalidScene(format!("grid {h}x{w} too small")));
        }
        let norm = (self.light.x.powi(2) + self.light.y.powi(2) + self.light.z.powi(2)).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(CoreError::InvalidScene(format!("light direction has norm {norm}")));
        }
        let el = self.light.elevation_deg();
        if !(20.0 - 1e-9..=70.0 + 1e-9).contains(&el) {
            return Err(CoreError::InvalidScene(format!("light elevation {el:.2}° outside [20°, 70°]")));
        }
        let s = &self.ground.slope;
        if s[0] < 0.0 || s[1] < 0.0 || s[0] + s[1] > MAX_GROUND_RANGE + 1e-12 {
            return Err(CoreError::InvalidScene(format!("ground slope {s:?} exceeds the allowed range")));
        }
        if let Some(m) = self.mirror {
            if m.start_row >= m.end_row || m.end_row > h {
                return Err(CoreError::InvalidScene(format!("mirror strip {m:?} invalid")));
            }
        }
        for (k, o) in self.objects.iter().enumerate() {
            if !(o.height > 0.1 && o.height <= 0.8) {
                return Err(CoreError::InvalidScene(format!("object {k}: height {} outside (0.1, 0.8]", o.height)));
            }
            if o.min_radius() < 3.0 {
                return Err(CoreError::InvalidScene(format!("object {k}: footprint radius below 3 px")));
            }
            let (er, ec) = o.extents();
            let [ci, cj] = o.center;
            if ci - er < 0.0 || cj - ec < 0.0 || ci + er > (h - 1) as f64 || cj + ec > (w - 1) as f64 {
                return Err(CoreError::InvalidScene(format!("object {k} leaves the grid")));
            }
            if let Some(m) = self.mirror {
                let fp = self.footprint(k);
                if (m.start_row..m.end_row).any(|r| (0..w).any(|c| fp.get(r, c))) {
                    return Err(CoreError::InvalidScene(format!("object {k} overlaps the mirror strip")));
                }
            }
        }
        Ok(())
    }

    fn all_ids(&self) -> Vec<usize> {
        (0..self.objects.len()).collect()
    }

    /// Pixels covered by object `k`.
    pub fn footprint(&self, k: usize) -> Mask {
        let mut m = Mask::empty(self.height, self.width);
        let o = &self.objects[k];
        for i in 0..self.height {
            for j in 0..self.width {
                if o.profile(i, j).is_some() {
                    m.set(i, j, true);
                }
            }
        }
        m
    }

    /// Index of the topmost included object at each pixel.
    pub fn labels(&self, include: &[usize]) -> Vec<Option<usize>> {
        let mut out = vec![None; self.height * self.width];
        for i in 0..self.height {
            for j in 0..self.width {
                let mut best: Option<(usize, f64)> = None;
                for &k in include {
                    if let Some(p) = self.objects[k].profile(i, j) {
                        if best.is_none_or(|(_, bp)| p > bp) {
                            best = Some((k, p));
                        }
                    }
                }
                out[i * self.width + j] = best.map(|(k, _)| k);
            }
        }
        out
    }

    /// Per-pixel albedo of the visible surface.
    pub fn albedo(&self, include: &[usize]) -> Image {
        let (h, w) = (self.height, self.width);
        let labels = self.labels(include);
        let mut img = Image::filled(h, w, [0.0; 3]);
        for i in 0..h {
            for j in 0..w {
                let a = match labels[i * w + j] {
                    Some(k) => self.objects[k].albedo,
                    None if self.mirror.is_some_and(|m| m.contains_row(i)) => MIRROR_TINT,
                    None => self.ground.albedo_at(i, j, h, w),
                };
                img.set_pixel(i, j, a);
            }
        }
        img
    }

    /// Analytic unit normals of the visible surface, (x=col, y=row, z=up).
    /// Each pixel's normal depends only on the surface it belongs to.
    pub fn normals(&self, include: &[usize]) -> Vec<[f64; 3]> {
        let (h, w) = (self.height, self.width);
        let labels = self.labels(include);
        let (ggi, ggj) = self.ground.gradient(h, w);
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (mut gi, mut gj) = (ggi, ggj);
                if let Some(k) = labels[i * w + j] {
                    let (oi, oj) = self.objects[k].profile_gradient(i, j);
                    gi += oi;
                    gj += oj;
                }
                let n = [-gj * H_SCALE, -gi * H_SCALE, 1.0];
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                out.push([n[0] / len, n[1] / len, n[2] / len]);
            }
        }
        out
    }
}

/// Depth of the scene with only the objects in `include` present:
/// 1 − (ground height + tallest object profile).
pub fn render_depth(scene: &SceneSpec, include: &[usize]) -> DepthMap {
    let (h, w) = (scene.height, scene.width);
    let mut d = DepthMap::filled(h, w, 1.0);
    for i in 0..h {
        for j in 0..w {
            let obj = include
                .iter()
                .filter_map(|&k| scene.objects[k].profile(i, j))
                .fold(0.0f64, f64::max);
            let height = scene.ground.height(i, j, h, w) + obj;
            d.set(i, j, (1.0 - height).clamp(0.0, 1.0) as f32);
        }
    }
    d
}

/// Hard shadows by marching from every pixel toward the light over the
/// heightfield `1 − depth`, one pixel per step for at most W steps. A pixel
/// is shadowed when some sample's terrain height exceeds the ray height
/// `h₀ + s·tan(elevation)/H_SCALE`.
pub fn shadow_mask(depth: &DepthMap, light: &Light) -> Mask {
    let (h, w) = depth.dims();
    let mut m = Mask::empty(h, w);
    let horiz = light.horizontal();
    if horiz == 0.0 || light.z <= 0.0 {
        return m;
    }
    let (dy, dx) = (light.y / horiz, light.x / horiz);
    let rise = light.z / horiz / H_SCALE;
    let height = |i: usize, j: usize| 1.0 - depth.get(i, j) as f64;
    for i in 0..h {
        for j in 0..w {
            let h0 = height(i, j);
            for s in 1..=w {
                let qi = (i as f64 + s as f64 * dy).round();
                let qj = (j as f64 + s as f64 * dx).round();
                if qi < 0.0 || qj < 0.0 || qi >= h as f64 || qj >= w as f64 {
                    break;
                }
                if height(qi as usize, qj as usize) > h0 + s as f64 * rise {
                    m.set(i, j, true);
                    break;
                }
            }
        }
    }
    m
}

/// Object colour reflected into each mirror-strip pixel, with the index of
/// the reflected object.
pub fn reflections(scene: &SceneSpec, include: &[usize]) -> Vec<Option<(usize, [f32; 3])>> {
    let (h, w) = (scene.height, scene.width);
    let mut out = vec![None; h * w];
    let Some(strip) = scene.mirror else { return out };
    let labels = scene.labels(include);
    let normals = scene.normals(include);
    for r in strip.start_row..strip.end_row {
        let Some(src) = strip.source_row(r) else { continue };
        if src >= strip.start_row {
            continue;
        }
        for c in 0..w {
            if let Some(k) = labels[src * w + c] {
                let lam = lambert(&normals[src * w + c], &scene.light);
                let color = scene.objects[k].albedo.map(|a| a * lam);
                out[r * w + c] = Some((k, color));
            }
        }
    }
    out
}

fn lambert(n: &[f64; 3], l: &Light) -> f32 {
    (n[0] * l.x + n[1] * l.y + n[2] * l.z).max(0.0) as f32
}

/// Lambert shading `albedo · max(0, n·l)`, shadowed pixels attenuated by
/// [`SHADOW_ATTENUATION`], mirror pixels blended with their reflection at
/// [`REFLECTION_OPACITY`].
pub fn render_rgb(
    normals: &[[f64; 3]],
    albedo: &Image,
    light: &Light,
    shadow: &Mask,
    reflection: &[Option<(usize, [f32; 3])>],
) -> Image {
    let (h, w) = albedo.dims();
    let mut img = Image::filled(h, w, [0.0; 3]);
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let lam = lambert(&normals[p], light);
            let mut rgb = albedo.pixel(i, j).map(|a| a * lam);
            if shadow.get(i, j) {
                rgb = rgb.map(|v| v * SHADOW_ATTENUATION);
            }
            if let Some((_, refl)) = reflection.get(p).copied().flatten() {
                for c in 0..3 {
                    rgb[c] = (1.0 - REFLECTION_OPACITY) * rgb[c] + REFLECTION_OPACITY * refl[c];
                }
            }
            img.set_pixel(i, j, rgb.map(|v| v.clamp(0.0, 1.0)));
        }
    }
    img
}

/// One scene rendered with and without a target object.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    /// Object present, with its shadow and reflection.
    pub i_minus: Image,
    /// Object and its artifacts absent.
    pub i_plus: Image,
    pub x0_minus: DepthMap,
    pub x0_plus: DepthMap,
    /// Object footprint.
    pub mask: Mask,
    /// Shadow and reflection pixels attributable to the object.
    pub artifact_mask: Mask,
}

struct Rendered {
    depth: DepthMap,
    image: Image,
    shadow: Mask,
    reflection: Vec<Option<(usize, [f32; 3])>>,
}

fn render_all(scene: &SceneSpec, include: &[usize]) -> Rendered {
    let depth = render_depth(scene, include);
    let shadow = shadow_mask(&depth, &scene.light);
    let reflection = reflections(scene, include);
    let image = render_rgb(
        &scene.normals(include),
        &scene.albedo(include),
        &scene.light,
        &shadow,
        &reflection,
    );
    Rendered {
        depth,
        image,
        shadow,
        reflection,
    }
}

/// Renders `scene` with and without object `target`.
pub fn make_pair(scene: &SceneSpec, target: usize, id: impl Into<String>) -> Result<PairedSample> {
    scene.validate()?;
    if target >= scene.objects.len() {
        return Err(CoreError::InvalidScene(format!(
            "target object {target} does not exist ({} objects)",
            scene.objects.len()
        )));
    }
    let all = scene.all_ids();
    let without: Vec<usize> = all.iter().copied().filter(|&k| k != target).collect();
    let with = render_all(scene, &all);
    let wo = render_all(scene, &without);
    let mask = scene.footprint(target);
    let (h, w) = (scene.height, scene.width);
    let mut reflected = Mask::empty(h, w);
    for (p, r) in with.reflection.iter().enumerate() {
        if matches!(r, Some((k, _)) if *k == target) {
            reflected.set(p / w, p % w, true);
        }
    }
    let artifact_mask = with.shadow.difference(&wo.shadow).union(&reflected).difference(&mask);
    Ok(PairedSample {
        id: id.into(),
        i_minus: with.image,
        i_plus: wo.image,
        x0_minus: with.depth,
        x0_plus: wo.depth,
        mask,
        artifact_mask,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptMode {
    /// Masked depth left equal to the object-present depth: a Stage-1 edit
    /// that changed nothing.
    FlattenToInput,
    /// Box blur of radius 2 inside the mask.
    Blur,
}

/// Simulates an unreliable geometry-removal result on the object-present
/// depth map `depth`.
pub fn corrupt_depth(depth: &DepthMap, mask: &Mask, mode: CorruptMode) -> DepthMap {
    match mode {
        CorruptMode::FlattenToInput => depth.clone(),
        CorruptMode::Blur => box_blur_inside(depth, mask, 2),
    }
}

fn box_blur_inside(depth: &DepthMap, mask: &Mask, radius: usize) -> DepthMap {
    let (h, w) = depth.dims();
    let mut out = depth.clone();
    for i in 0..h {
        for j in 0..w {
            if !mask.get(i, j) {
                continue;
            }
            let (i0, i1) = (i.saturating_sub(radius), (i + radius).min(h - 1));
            let (j0, j1) = (j.saturating_sub(radius), (j + radius).min(w - 1));
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for a in i0..=i1 {
                for b in j0..=j1 {
                    sum += depth.get(a, b) as f64;
                    n += 1;
                }
            }
            out.set(i, j, (sum / n as f64) as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests;
