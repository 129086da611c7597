use grlb_tensor::{Bound, CounterRng, Elem, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Shape of the U-shaped denoiser.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Noised channels (denoised output has the same count).
    pub out_channels: usize,
    /// Un-noised conditioning channels concatenated after x_t.
    pub cond_channels: usize,
    pub base_width: usize,
    /// Width multiplier per resolution level.
    pub multipliers: Vec<usize>,
    pub groups: usize,
    /// Sinusoidal features before the embedding MLP.
    pub time_features: usize,
    pub time_dim: usize,
}

impl UNetConfig {
    pub fn new(out_channels: usize, cond_channels: usize) -> Self {
        Self {
            out_channels,
            cond_channels,
            base_width: 32,
            multipliers: vec![1, 2, 2],
            groups: 8,
            time_features: 32,
            time_dim: 128,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.out_channels + self.cond_channels
    }

    fn widths(&self) -> Vec<usize> {
        self.multipliers.iter().map(|m| m * self.base_width).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.out_channels == 0 || self.multipliers.is_empty() || self.base_width == 0 {
            return bad("U-Net needs outputs, levels and a base width".into());
        }
        if self.time_features % 2 != 0 || self.time_features == 0 || self.time_dim == 0 {
            return bad("time_features must be even and nonzero".into());
        }
        let widths = self.widths();
        let mut check = vec![widths[0]];
        for (l, &c) in widths.iter().enumerate() {
            check.push(c);
            if l + 1 < widths.len() {
                check.push(c + widths[l + 1]);
            } else {
                check.push(2 * c);
            }
        }
        if let Some(c) = check.into_iter().find(|c| c % self.groups != 0) {
            return bad(format!("{c} channels not divisible into {} groups", self.groups));
        }
        Ok(())
    }

    /// Spatial size must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.multipliers.len() - 1)
    }
}

/// Denoiser parameters plus their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModel {
    pub config: UNetConfig,
    pub params: ParamStore<f32>,
}

struct Init<'a> {
    store: ParamStore<f32>,
    rng: &'a mut CounterRng,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) {
        let n = cout * cin * k * k;
        let std = (1.0 / (cin * k * k) as f64).sqrt();
        let w = if zero {
            vec![0.0; n]
        } else {
            self.rng.normal_vec::<f32>(n).into_iter().map(|v| v * std as f32).collect()
        };
        self.store.insert(format!("{name}.w"), Tensor::new(vec![cout, cin, k, k], w).expect("sized"));
        self.store.insert(format!("{name}.b"), Tensor::zeros(vec![cout]));
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) {
        let std = (1.0 / fin as f64).sqrt() as f32;
        let w = self.rng.normal_vec::<f32>(fin * fout).into_iter().map(|v| v * std).collect();
        self.store.insert(format!("{name}.w"), Tensor::new(vec![fout, fin], w).expect("sized"));
        self.store.insert(format!("{name}.b"), Tensor::zeros(vec![fout]));
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.store.insert(format!("{name}.g"), Tensor::full(vec![c], 1.0));
        self.store.insert(format!("{name}.b"), Tensor::zeros(vec![c]));
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize, tdim: usize) {
        self.norm(&format!("{name}.n1"), cin);
        self.conv(&format!("{name}.c1"), cin, cout, 3, false);
        self.linear(&format!("{name}.t"), tdim, cout);
        self.norm(&format!("{name}.n2"), cout);
        self.conv(&format!("{name}.c2"), cout, cout, 3, false);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1, false);
        }
    }
}

impl ScoreModel {
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = CounterRng::new(seed);
        let mut init = Init {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let widths = config.widths();
        let td = config.time_dim;
        init.linear("temb.l1", config.time_features, td);
        init.linear("temb.l2", td, td);
        init.conv("in", config.in_channels(), widths[0], 3, false);
        let mut c = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            init.resblock(&format!("down{l}"), c, w, td);
            c = w;
        }
        init.resblock("mid", c, c, td);
        for (l, &w) in widths.iter().enumerate().rev() {
            init.resblock(&format!("up{l}"), c + w, w, td);
            c = w;
        }
        init.norm("out.n", c);
        init.conv("out", c, config.out_channels, 3, true);
        Ok(Self {
            config,
            params: init.store,
        })
    }

    /// Checks that `params` holds exactly the tensors `config` needs.
    pub fn from_parts(config: UNetConfig, params: ParamStore<f32>) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        if reference.params.names() != params.names() {
            return Err(CoreError::Config("checkpoint tensors do not match the architecture".into()));
        }
        for ((name, a), (_, b)) in reference.params.iter().zip(params.iter()) {
            if a.shape() != b.shape() {
                return Err(CoreError::Config(format!(
                    "tensor {name}: shape {:?} does not match architecture {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }
}

/// Sinusoidal timestep features, [N, F].
pub fn timestep_features<T: Elem>(ts: &[usize], features: usize) -> Tensor<T> {
    let half = features / 2;
    let mut data = Vec::with_capacity(ts.len() * features);
    for &t in ts {
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            data.push(T::from_f64((t as f64 * freq).sin()));
        }
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            data.push(T::from_f64((t as f64 * freq).cos()));
        }
    }
    Tensor::new(vec![ts.len(), features], data).expect("sized")
}

struct Net<'a, T: Elem> {
    g: &'a mut Graph<T>,
    p: &'a Bound,
    groups: usize,
}

impl<T: Elem> Net<'_, T> {
    fn conv(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p.var(&format!("{name}.w"))?;
        let b = self.p.var(&format!("{name}.b"))?;
        Ok(self.g.conv2d(x, w, Some(b))?)
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p.var(&format!("{name}.w"))?;
        let b = self.p.var(&format!("{name}.b"))?;
        Ok(self.g.linear(x, w, Some(b))?)
    }

    fn norm_act(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p.var(&format!("{name}.g"))?;
        let beta = self.p.var(&format!("{name}.b"))?;
        let y = self.g.group_norm(x, gamma, beta, self.groups)?;
        Ok(self.g.silu(y)?)
    }

    fn resblock(&mut self, name: &str, x: Var, temb: Var, reshape: bool) -> Result<Var> {
        let h = self.norm_act(&format!("{name}.n1"), x)?;
        let h = self.conv(&format!("{name}.c1"), h)?;
        let t = self.linear(&format!("{name}.t"), temb)?;
        let h = self.g.add_per_channel(h, t)?;
        let h = self.norm_act(&format!("{name}.n2"), h)?;
        let h = self.conv(&format!("{name}.c2"), h)?;
        let skip = if reshape { self.conv(&format!("{name}.skip"), x)? } else { x };
        Ok(self.g.add(h, skip)?)
    }
}

/// ε̂ for input `x` = concat(x_t, cond) of shape [N, in, H, W] at
/// timesteps `ts` (one per example).
pub fn forward<T: Elem>(config: &UNetConfig, g: &mut Graph<T>, params: &Bound, x: Var, ts: &[usize]) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4("unet")?;
    if c != config.in_channels() || ts.len() != n {
        return Err(CoreError::Shape(format!(
            "unet expects [{n}, {}, H, W] with {n} timesteps, got {c} channels and {} timesteps",
            config.in_channels(),
            ts.len()
        )));
    }
    let m = config.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(CoreError::Shape(format!("unet input {h}x{w} not divisible by {m}")));
    }
    let widths = config.widths();
    let mut net = Net {
        g,
        p: params,
        groups: config.groups,
    };
    let feats = net.g.constant(timestep_features(ts, config.time_features));
    let temb = net.linear("temb.l1", feats)?;
    let temb = net.g.silu(temb)?;
    let temb = net.linear("temb.l2", temb)?;
    let temb = net.g.silu(temb)?;

    let mut hcur = net.conv("in", x)?;
    let mut ch = widths[0];
    let mut skips = Vec::with_capacity(widths.len());
    for (l, &wl) in widths.iter().enumerate() {
        hcur = net.resblock(&format!("down{l}"), hcur, temb, ch != wl)?;
        ch = wl;
        skips.push(hcur);
        if l + 1 < widths.len() {
            hcur = net.g.avg_pool2(hcur)?;
        }
    }
    hcur = net.resblock("mid", hcur, temb, false)?;
    for (l, &wl) in widths.iter().enumerate().rev() {
        if l + 1 < widths.len() {
            hcur = net.g.upsample2(hcur)?;
        }
        let skip = skips[l];
        hcur = net.g.concat_channels(&[hcur, skip])?;
        hcur = net.resblock(&format!("up{l}"), hcur, temb, true)?;
        ch = wl;
    }
    debug_assert_eq!(ch, widths[0]);
    let hcur = net.norm_act("out.n", hcur)?;
    net.conv("out", hcur)
}
