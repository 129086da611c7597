//! Depth-domain operations: forward-difference flow, the flow loss and its
//! reward, mask alignment, masked MAE, colorization and local-max fill-in.
//!
//! Flow validity domain Ω is the set of pixels with both a lower and a
//! right neighbour (i < H−1, j < W−1), so |Ω| = (H−1)(W−1).

use grlb_tensor::{Elem, Graph, Var};

use crate::error::{CoreError, Result};
use crate::imaging::{DepthMap, Image, Mask};

/// Absolute forward differences. `vertical[i][j] = |d[i+1][j] − d[i][j]|`
/// is defined for i < H−1, `horizontal[i][j] = |d[i][j+1] − d[i][j]|` for
/// j < W−1; undefined entries are stored as 0.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub vertical: Vec<f64>,
    pub horizontal: Vec<f64>,
}

impl FlowField {
    pub fn vertical_at(&self, i: usize, j: usize) -> Option<f64> {
        (i + 1 < self.height && j < self.width).then(|| self.vertical[i * self.width + j])
    }

    pub fn horizontal_at(&self, i: usize, j: usize) -> Option<f64> {
        (i < self.height && j + 1 < self.width).then(|| self.horizontal[i * self.width + j])
    }

    /// L1 magnitude of both components at (i, j) ∈ Ω.
    pub fn magnitude(&self, i: usize, j: usize) -> f64 {
        let p = i * self.width + j;
        self.vertical[p] + self.horizontal[p]
    }
}

pub fn depth_flow(x: &DepthMap) -> Result<FlowField> {
    let (h, w) = x.dims();
    if h < 2 || w < 2 {
        return Err(CoreError::Shape(format!("depth flow needs at least 2x2, got {h}x{w}")));
    }
    let mut vertical = vec![0.0; h * w];
    let mut horizontal = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let d = x.get(i, j) as f64;
            if i + 1 < h {
                vertical[i * w + j] = (x.get(i + 1, j) as f64 - d).abs();
            }
            if j + 1 < w {
                horizontal[i * w + j] = (x.get(i, j + 1) as f64 - d).abs();
            }
        }
    }
    Ok(FlowField {
        height: h,
        width: w,
        vertical,
        horizontal,
    })
}

fn same_dims(a: (usize, usize), b: (usize, usize), op: &str) -> Result<()> {
    if a != b {
        return Err(CoreError::Shape(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

/// Mean over Ω of |Fv(x̂) − Fv(x)| + |Fh(x̂) − Fh(x)|.
pub fn flow_loss(x_hat: &DepthMap, x: &DepthMap) -> Result<f64> {
    same_dims(x_hat.dims(), x.dims(), "flow_loss")?;
    let (fa, fb) = (depth_flow(x_hat)?, depth_flow(x)?);
    let (h, w) = x.dims();
    let mut sum = 0.0;
    for i in 0..h - 1 {
        for j in 0..w - 1 {
            let p = i * w + j;
            sum += (fa.vertical[p] - fb.vertical[p]).abs() + (fa.horizontal[p] - fb.horizontal[p]).abs();
        }
    }
    Ok(sum / ((h - 1) * (w - 1)) as f64)
}

/// r = −flow_loss(x̂, x).
pub fn reward(x_hat: &DepthMap, x: &DepthMap) -> Result<f64> {
    flow_loss(x_hat, x).map(|l| -l)
}

/// Differentiable per-sample flow loss between batches `[N,1,H,W]`;
/// returns `[N]`.
pub fn flow_loss_graph<T: Elem>(g: &mut Graph<T>, x_hat: Var, x: Var) -> Result<Var> {
    let (_, c, h, w) = g.value(x_hat).dims4("flow_loss")?;
    if g.value(x).shape() != g.value(x_hat).shape() {
        return Err(CoreError::Shape(format!(
            "flow_loss: {:?} vs {:?}",
            g.value(x_hat).shape(),
            g.value(x).shape()
        )));
    }
    if c != 1 || h < 2 || w < 2 {
        return Err(CoreError::Shape(format!("flow_loss needs [N,1,H>=2,W>=2], got c={c} {h}x{w}")));
    }
    let flows = |g: &mut Graph<T>, v: Var| -> Result<(Var, Var)> {
        let below = g.crop(v, 1..h, 0..w - 1)?;
        let here = g.crop(v, 0..h - 1, 0..w - 1)?;
        let right = g.crop(v, 0..h - 1, 1..w)?;
        let dv = g.sub(below, here)?;
        let dh = g.sub(right, here)?;
        Ok((g.abs(dv)?, g.abs(dh)?))
    };
    let (av, ah) = flows(g, x_hat)?;
    let (bv, bh) = flows(g, x)?;
    let ev = g.sub(av, bv)?;
    let ev = g.abs(ev)?;
    let eh = g.sub(ah, bh)?;
    let eh = g.abs(eh)?;
    let total = g.add(ev, eh)?;
    Ok(g.mean_per_sample(total)?)
}

/// `original` where M = 0, `pred` where M = 1.
pub fn mask_align_replace(pred: &DepthMap, original: &DepthMap, mask: &Mask) -> Result<DepthMap> {
    same_dims(pred.dims(), original.dims(), "mask_align_replace")?;
    same_dims(pred.dims(), mask.dims(), "mask_align_replace")?;
    let data = pred
        .data()
        .iter()
        .zip(original.data())
        .zip(mask.data())
        .map(|((&p, &o), &m)| if m { p } else { o })
        .collect();
    DepthMap::new(pred.height(), pred.width(), data)
}

/// Mean absolute error over pixels with M = 1.
pub fn masked_mae(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<f64> {
    same_dims(pred.dims(), gt.dims(), "masked_mae")?;
    same_dims(pred.dims(), mask.dims(), "masked_mae")?;
    let n = mask.count();
    if n == 0 {
        return Err(CoreError::EmptyMask("masked_mae"));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .map(|((&p, &g), _)| (p as f64 - g as f64).abs())
        .sum();
    Ok(sum / n as f64)
}

/// Replaces each masked pixel by the maximum input depth over the
/// `window`×`window` neighbourhood (offsets −⌊window/2⌋ ..= ⌈window/2⌉−1,
/// clipped at the borders). Reads only the input map.
pub fn local_max_fill_in(depth: &DepthMap, mask: &Mask, window: usize) -> Result<DepthMap> {
    same_dims(depth.dims(), mask.dims(), "local_max_fill_in")?;
    if window == 0 {
        return Err(CoreError::Config("fill-in window must be at least 1".into()));
    }
    let (h, w) = depth.dims();
    let before = window / 2;
    let after = window - 1 - before;
    let mut out = depth.clone();
    for i in 0..h {
        for j in 0..w {
            if !mask.get(i, j) {
                continue;
            }
            let mut m = f32::NEG_INFINITY;
            for a in i.saturating_sub(before)..=(i + after).min(h - 1) {
                for b in j.saturating_sub(before)..=(j + after).min(w - 1) {
                    m = m.max(depth.get(a, b));
                }
            }
            out.set(i, j, m);
        }
    }
    Ok(out)
}

/// Grayscale triplication; values outside [0,1] are clamped with a warning.
pub fn colorize_depth(x: &DepthMap) -> Image {
    let (h, w) = x.dims();
    let out_of_range = x.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    if out_of_range > 0 {
        log::warn!("colorize_depth: clamping {out_of_range} values outside [0, 1]");
    }
    let data = x.data().iter().flat_map(|&v| [v.clamp(0.0, 1.0); 3]).collect();
    Image::new(h, w, data).expect("dimensions follow the depth map")
}

/// Channel 0 of a colorized depth image.
pub fn decolorize_depth(img: &Image) -> DepthMap {
    let (h, w) = img.dims();
    let data = img.data().chunks_exact(3).map(|p| p[0]).collect();
    DepthMap::new(h, w, data).expect("dimensions follow the image")
}
