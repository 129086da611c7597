//! Diffusion machinery shared by every model: linear noise schedule,
//! forward noising, the denoising objective, x₀ recovery and ancestral
//! sampling with optional known-region projection.
//!
//! The network predicts the injected noise ε rather than the score. The two
//! are interchangeable: s_θ(x_t, t) = −ε̂/√(1−ᾱ_t), and the score-matching
//! residual ‖s_θ − ∇log q(x_t|x₀)‖² equals ‖ε̂ − ε‖²/(1−ᾱ_t). Minimizing the
//! ε error with unit weight is therefore score matching with weight
//! w(t) = 1−ᾱ_t.

mod schedule;
mod unet;

pub use schedule::{predict_x0, q_sample, NoiseSchedule, ScheduleConfig, X0_CLAMP};
pub use unet::{forward, timestep_features, ScoreModel, UNetConfig};

use grlb_tensor::{Bound, CounterRng, Elem, Graph, Tensor, Var};

use crate::error::{CoreError, Result};

/// Per-example timesteps and noise for one denoising-loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw<T: Elem> {
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
}

impl<T: Elem> NoiseDraw<T> {
    /// t ~ U{1..T} and ε ~ N(0, I) for a batch of `shape` [N, C, H, W].
    pub fn draw(schedule: &NoiseSchedule, shape: &[usize], rng: &mut CounterRng) -> Self {
        let n = shape[0];
        let t = (0..n).map(|_| 1 + rng.below(schedule.timesteps())).collect();
        let numel = shape.iter().product();
        let eps = Tensor::new(shape.to_vec(), rng.normal_vec::<T>(numel)).expect("sized");
        Self { t, eps }
    }
}

/// Per-example coefficient broadcast to the shape of a [N, ...] batch.
fn per_example<T: Elem>(shape: &[usize], values: impl Fn(usize) -> f64) -> Tensor<T> {
    let n = shape[0];
    let per: usize = shape[1..].iter().product();
    let data = (0..n).flat_map(|i| std::iter::repeat_n(T::from_f64(values(i)), per)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

/// x_t for each example at its own timestep.
pub fn noised<T: Elem>(x0: &Tensor<T>, draw: &NoiseDraw<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    if x0.shape() != draw.eps.shape() || x0.shape()[0] != draw.t.len() {
        return Err(CoreError::Shape(format!("noised: {:?} vs {:?}", x0.shape(), draw.eps.shape())));
    }
    for &t in &draw.t {
        schedule.check(t)?;
    }
    let a: Tensor<T> = per_example(x0.shape(), |i| schedule.alpha_bar(draw.t[i]).sqrt());
    let b: Tensor<T> = per_example(x0.shape(), |i| (1.0 - schedule.alpha_bar(draw.t[i])).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(draw.eps.data())
        .zip(a.data().iter().zip(b.data()))
        .map(|((&x, &e), (&a, &b))| a * x + b * e)
        .collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// Graph nodes of one denoising-loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct DsmTerms {
    /// Mean squared ε error.
    pub loss: Var,
    pub eps_hat: Var,
    pub x_t: Var,
}

/// Denoising loss for targets `x0` [N, C, H, W] under conditioning `cond`
/// [N, Cc, H, W] with pre-drawn timesteps and noise.
pub fn dsm_terms<T: Elem>(
    config: &UNetConfig,
    g: &mut Graph<T>,
    params: &Bound,
    x0: &Tensor<T>,
    cond: &Tensor<T>,
    draw: &NoiseDraw<T>,
    schedule: &NoiseSchedule,
) -> Result<DsmTerms> {
    let xt = noised(x0, draw, schedule)?;
    let x_t = g.constant(xt);
    let c = g.constant(cond.clone());
    let input = g.concat_channels(&[x_t, c])?;
    let eps_hat = forward(config, g, params, input, &draw.t)?;
    let eps = g.constant(draw.eps.clone());
    let loss = g.mse(eps_hat, eps)?;
    Ok(DsmTerms { loss, eps_hat, x_t })
}

/// Draws t and ε from `rng`, then evaluates [`dsm_terms`]; returns the loss.
pub fn dsm_loss<T: Elem>(
    config: &UNetConfig,
    g: &mut Graph<T>,
    params: &Bound,
    x0: &Tensor<T>,
    cond: &Tensor<T>,
    schedule: &NoiseSchedule,
    rng: &mut CounterRng,
) -> Result<Var> {
    let draw = NoiseDraw::draw(schedule, x0.shape(), rng);
    Ok(dsm_terms(config, g, params, x0, cond, &draw, schedule)?.loss)
}

/// Differentiable x̂₀ = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t per example, clamped.
pub fn predict_x0_graph<T: Elem>(g: &mut Graph<T>, x_t: Var, eps_hat: Var, ts: &[usize], schedule: &NoiseSchedule) -> Result<Var> {
    let shape = g.value(x_t).shape().to_vec();
    if shape[0] != ts.len() {
        return Err(CoreError::Shape(format!("predict_x0: {} timesteps for batch {}", ts.len(), shape[0])));
    }
    for &t in ts {
        schedule.check(t)?;
    }
    let a = g.constant(per_example(&shape, |i| 1.0 / schedule.alpha_bar(ts[i]).sqrt()));
    let b = g.constant(per_example(&shape, |i| {
        let ab = schedule.alpha_bar(ts[i]);
        (1.0 - ab).sqrt() / ab.sqrt()
    }));
    let lhs = g.mul(x_t, a)?;
    let rhs = g.mul(eps_hat, b)?;
    let x0 = g.sub(lhs, rhs)?;
    Ok(g.clamp(x0, T::from_f64(-X0_CLAMP), T::from_f64(X0_CLAMP))?)
}

/// Region kept from a reference signal during sampling.
#[derive(Clone, Copy, Debug)]
pub struct Known<'a> {
    /// Reference values, same shape as the sample.
    pub x: &'a Tensor<f32>,
    /// [N, 1, H, W]; 1 where the sample is generated, 0 where `x` is kept.
    pub mask: &'a Tensor<f32>,
}

/// Examples per forward pass during sampling.
const SAMPLE_CHUNK: usize = 16;

/// Ancestral sampling of `[N, out_channels, H, W]` from pure noise,
/// respaced to `steps` timesteps. Each example draws from its own seed, so
/// results do not depend on batch composition. With `known`, the kept
/// region is replaced by a forward-noised copy of the reference after
/// every step and by the reference itself at the end.
pub fn sample(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    cond: &Tensor<f32>,
    known: Option<Known<'_>>,
    steps: usize,
    seeds: &[u64],
) -> Result<Tensor<f32>> {
    let (n, cc, h, w) = cond.dims4("sample")?;
    let cfg = &model.config;
    if cc != cfg.cond_channels || seeds.len() != n {
        return Err(CoreError::Shape(format!(
            "sample: cond has {cc} channels for a model expecting {}, {} seeds for {n} examples",
            cfg.cond_channels,
            seeds.len()
        )));
    }
    if steps > schedule.timesteps() {
        return Err(CoreError::Config(format!("{steps} sampling steps exceed T = {}", schedule.timesteps())));
    }
    let out_shape = [n, cfg.out_channels, h, w];
    if let Some(k) = known {
        if k.x.shape() != out_shape || k.mask.shape() != [n, 1, h, w] {
            return Err(CoreError::Shape(format!(
                "sample: known region {:?}/{:?} does not match output {out_shape:?}",
                k.x.shape(),
                k.mask.shape()
            )));
        }
    }
    let chunks: Vec<(usize, usize)> = (0..n).step_by(SAMPLE_CHUNK).map(|s| (s, (s + SAMPLE_CHUNK).min(n))).collect();
    let parts = crate::parallel::map(&chunks, |&(s, e)| {
        let cond = slice_batch(cond, s, e);
        let known = known.map(|k| (slice_batch(k.x, s, e), slice_batch(k.mask, s, e)));
        sample_chunk(model, schedule, &cond, known.as_ref().map(|(x, m)| Known { x, mask: m }), steps, &seeds[s..e])
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let data: Vec<f32> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(out_shape.to_vec(), data)?)
}

pub(crate) fn slice_batch<T: Elem>(t: &Tensor<T>, start: usize, end: usize) -> Tensor<T> {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, t.data()[start * per..end * per].to_vec()).expect("sized")
}

fn sample_chunk(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    cond: &Tensor<f32>,
    known: Option<Known<'_>>,
    steps: usize,
    seeds: &[u64],
) -> Result<Tensor<f32>> {
    let (n, _, h, w) = cond.dims4("sample")?;
    let c = model.config.out_channels;
    let per = c * h * w;
    let mut rngs: Vec<CounterRng> = seeds.iter().map(|&s| CounterRng::new(s)).collect();
    let mut x: Vec<f32> = rngs.iter_mut().flat_map(|r| r.normal_vec::<f32>(per)).collect();
    let taus = schedule.respaced(steps);
    for k in (0..taus.len()).rev() {
        let t = taus[k];
        let prev = if k == 0 { 0 } else { taus[k - 1] };
        let xt = Tensor::new(vec![n, c, h, w], x.clone())?;
        let eps_hat = {
            let mut g = Graph::<f32>::new();
            let bound = model.params.bind_frozen(&mut g);
            let xv = g.constant(xt.clone());
            let cv = g.constant(cond.clone());
            let input = g.concat_channels(&[xv, cv])?;
            let out = forward(&model.config, &mut g, &bound, input, &vec![t; n])?;
            g.value(out).clone()
        };
        let x0 = predict_x0(&xt, t, &eps_hat, schedule)?;
        let ab_t = schedule.alpha_bar(t);
        let ab_p = schedule.alpha_bar(prev);
        let beta = 1.0 - ab_t / ab_p;
        let c0 = ab_p.sqrt() * beta / (1.0 - ab_t);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
        let sigma = (beta * (1.0 - ab_p) / (1.0 - ab_t)).sqrt();
        for (i, rng) in rngs.iter_mut().enumerate() {
            let range = i * per..(i + 1) * per;
            let noise = if prev > 0 { rng.normal_vec::<f64>(per) } else { vec![0.0; per] };
            for (p, z) in range.zip(noise) {
                let mean = c0 * x0.data()[p] as f64 + ct * x[p] as f64;
                x[p] = (mean + sigma * z) as f32;
            }
        }
        if let Some(k) = known {
            project_known(&mut x, k, prev, schedule, &mut rngs, c, h * w);
        }
    }
    if let Some(k) = known {
        project_known(&mut x, k, 0, schedule, &mut rngs, c, h * w);
    }
    Ok(Tensor::new(vec![n, c, h, w], x)?)
}

/// Overwrites the kept region with q(x_known, t) (exactly x_known at t = 0).
fn project_known(
    x: &mut [f32],
    known: Known<'_>,
    t: usize,
    schedule: &NoiseSchedule,
    rngs: &mut [CounterRng],
    channels: usize,
    hw: usize,
) {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let per = channels * hw;
    for (i, rng) in rngs.iter_mut().enumerate() {
        let noise = if t > 0 { rng.normal_vec::<f64>(per) } else { vec![0.0; per] };
        for ch in 0..channels {
            for q in 0..hw {
                if known.mask.data()[i * hw + q] != 0.0 {
                    continue;
                }
                let p = i * per + ch * hw + q;
                x[p] = if t == 0 {
                    known.x.data()[p]
                } else {
                    (a * known.x.data()[p] as f64 + b * noise[ch * hw + q]) as f32
                };
            }
        }
    }
}
