//! Reduced-capacity stacked hourglass with explicit backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, Act};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stacks: usize,
    pub base_channels: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub heatmap_size: usize,
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Number of 2x reductions inside each hourglass.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub batch_norm: bool,
}

fn default_image_size() -> usize {
    256
}
fn default_in_channels() -> usize {
    3
}
fn default_depth() -> usize {
    3
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stacks: 3,
            base_channels: 16,
            k: 9,
            heatmap_size: 64,
            seed: 0,
            image_size: 256,
            in_channels: 3,
            depth: 3,
            batch_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, r: String| Err(Error::config(format!("model.{f}"), r));
        if self.stacks == 0 {
            return err("stacks", "must be >= 1".into());
        }
        if self.base_channels == 0 || self.k == 0 || self.in_channels == 0 {
            return err("base_channels", "channel counts must be positive".into());
        }
        if self.depth == 0 {
            return err("depth", "must be >= 1".into());
        }
        if self.heatmap_size == 0 || self.heatmap_size % (1 << self.depth) != 0 {
            return err(
                "heatmap_size",
                format!(
                    "{} is not divisible by 2^depth = {}",
                    self.heatmap_size,
                    1 << self.depth
                ),
            );
        }
        if self.image_size % self.heatmap_size != 0
            || !(self.image_size / self.heatmap_size).is_power_of_two()
        {
            return err(
                "image_size",
                format!(
                    "{} must be a power-of-two multiple of heatmap_size {}",
                    self.image_size, self.heatmap_size
                ),
            );
        }
        Ok(())
    }

    fn downsamples(&self) -> usize {
        (self.image_size / self.heatmap_size).trailing_zeros() as usize
    }
}

/// One named slice of the flat parameter (or buffer) vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub buffer: bool,
    init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal { std: f64 },
    Const(f64),
}

#[derive(Clone, Debug)]
struct Conv {
    cin: usize,
    cout: usize,
    k3: bool,
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Norm {
    c: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct Residual {
    conv1: Conv,
    norm1: Option<Norm>,
    conv2: Conv,
    norm2: Option<Norm>,
}

#[derive(Clone, Debug)]
enum Inner {
    Nested(Box<Hourglass>),
    Leaf(Residual),
}

#[derive(Clone, Debug)]
struct Hourglass {
    up1: Residual,
    low1: Residual,
    inner: Inner,
    low3: Residual,
}

#[derive(Clone, Debug)]
struct Stage {
    hg: Hourglass,
    res: Residual,
    feat: Conv,
    head: Conv,
    remap_feat: Option<Conv>,
    remap_head: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Stem {
    conv: Conv,
    norm: Option<Norm>,
    pools: usize,
    blocks: Vec<Residual>,
}

#[derive(Clone, Debug)]
struct Arch {
    stem: Stem,
    stages: Vec<Stage>,
}

#[derive(Default)]
struct Layout {
    params: usize,
    buffers: usize,
    entries: Vec<ParamEntry>,
}

impl Layout {
    fn push(&mut self, name: String, len: usize, buffer: bool, init: Init) -> usize {
        let counter = if buffer {
            &mut self.buffers
        } else {
            &mut self.params
        };
        let offset = *counter;
        *counter += len;
        self.entries.push(ParamEntry {
            name,
            offset,
            len,
            buffer,
            init,
        });
        offset
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k3: bool, gain: f64) -> Conv {
        let fan_in = cin * if k3 { 9 } else { 1 };
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let w = self.push(format!("{name}.weight"), cout * fan_in, false, Init::Normal { std });
        let b = self.push(format!("{name}.bias"), cout, false, Init::Const(0.0));
        Conv { cin, cout, k3, w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            c,
            gamma: self.push(format!("{name}.gamma"), c, false, Init::Const(1.0)),
            beta: self.push(format!("{name}.beta"), c, false, Init::Const(0.0)),
            mean: self.push(format!("{name}.running_mean"), c, true, Init::Const(0.0)),
            var: self.push(format!("{name}.running_var"), c, true, Init::Const(1.0)),
        }
    }

    fn residual(&mut self, name: &str, c: usize, bn: bool) -> Residual {
        let conv1 = self.conv(&format!("{name}.conv1"), c, c, true, 1.0);
        let norm1 = bn.then(|| self.norm(&format!("{name}.norm1"), c));
        // Second branch conv starts small so deep residual chains stay
        // well-scaled without normalization.
        let conv2 = self.conv(&format!("{name}.conv2"), c, c, true, if bn { 1.0 } else { 0.3 });
        let norm2 = bn.then(|| self.norm(&format!("{name}.norm2"), c));
        Residual {
            conv1,
            norm1,
            conv2,
            norm2,
        }
    }

    fn hourglass(&mut self, name: &str, depth: usize, c: usize, bn: bool) -> Hourglass {
        let up1 = self.residual(&format!("{name}.up1"), c, bn);
        let low1 = self.residual(&format!("{name}.low1"), c, bn);
        let inner = if depth > 1 {
            Inner::Nested(Box::new(self.hourglass(&format!("{name}.inner"), depth - 1, c, bn)))
        } else {
            Inner::Leaf(self.residual(&format!("{name}.low2"), c, bn))
        };
        let low3 = self.residual(&format!("{name}.low3"), c, bn);
        Hourglass {
            up1,
            low1,
            inner,
            low3,
        }
    }
}

fn build_arch(cfg: &ModelConfig) -> (Arch, Layout) {
    let mut l = Layout::default();
    let c = cfg.base_channels;
    let bn = cfg.batch_norm;
    let conv = l.conv("stem.conv", cfg.in_channels, c, true, 1.0);
    let norm = bn.then(|| l.norm("stem.norm", c));
    let pools = cfg.downsamples();
    let blocks = (0..pools.max(1))
        .map(|i| l.residual(&format!("stem.res{i}"), c, bn))
        .collect();
    let stem = Stem {
        conv,
        norm,
        pools,
        blocks,
    };
    let mut stages = Vec::with_capacity(cfg.stacks);
    for s in 0..cfg.stacks {
        let name = format!("stack{s}");
        let hg = l.hourglass(&format!("{name}.hg"), cfg.depth, c, bn);
        let res = l.residual(&format!("{name}.res"), c, bn);
        let feat = l.conv(&format!("{name}.feat"), c, c, false, 1.0);
        let head = l.conv(&format!("{name}.head"), c, cfg.k, false, 0.1);
        let last = s + 1 == cfg.stacks;
        let remap_feat = (!last).then(|| l.conv(&format!("{name}.remap_feat"), c, c, false, 0.3));
        let remap_head =
            (!last).then(|| l.conv(&format!("{name}.remap_head"), cfg.k, c, false, 0.3));
        stages.push(Stage {
            hg,
            res,
            feat,
            head,
            remap_feat,
            remap_head,
        });
    }
    (Arch { stem, stages }, l)
}

/// Flat, canonically ordered view of all trainable weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters(pub Vec<f64>);

impl ModelParameters {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Heatmap regressor. Trainable weights live in `params`, normalization
/// running statistics in `buffers`.
#[derive(Clone, Debug)]
pub struct PoseNetwork {
    config: ModelConfig,
    arch: Arch,
    entries: Vec<ParamEntry>,
    pub params: Vec<f64>,
    pub buffers: Vec<f64>,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

enum ConvCache {
    Cols(Vec<f64>),
    Input(Act),
}

struct NormCache {
    xhat: Act,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

struct ResidualCache {
    c1: ConvCache,
    n1: Option<NormCache>,
    r: Act,
    c2: ConvCache,
    n2: Option<NormCache>,
    y: Act,
}

struct HourglassCache {
    up1: ResidualCache,
    pool_arg: Vec<u8>,
    in_hw: (usize, usize),
    low1: ResidualCache,
    inner: Box<InnerCache>,
    low3: ResidualCache,
}

enum InnerCache {
    Nested(HourglassCache),
    Leaf(ResidualCache),
}

struct StageCache {
    hg: HourglassCache,
    res: ResidualCache,
    feat_c: ConvCache,
    f2: Act,
    head_c: ConvCache,
    remap_feat_c: Option<ConvCache>,
    remap_head_c: Option<ConvCache>,
}

struct StemCache {
    conv: ConvCache,
    norm: Option<NormCache>,
    a: Act,
    levels: Vec<(Option<(Vec<u8>, (usize, usize))>, ResidualCache)>,
}

/// Everything the backward pass needs from a training-mode forward.
pub struct ForwardCache {
    stem: StemCache,
    stages: Vec<StageCache>,
    batch: usize,
}

/// Per-stack outputs, each `[N, K, S, S]`.
pub struct Forward {
    pub outputs: Vec<Tensor>,
    pub cache: Option<ForwardCache>,
}

impl Forward {
    pub fn last(&self) -> &Tensor {
        self.outputs.last().expect("at least one stack")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches kept for backward.
    Train,
    /// Running statistics, no caches.
    Eval,
}

struct Ctx<'a> {
    p: &'a [f64],
    buf: &'a [f64],
    mode: Mode,
}

impl<'a> Ctx<'a> {
    fn keep(&self) -> bool {
        self.mode == Mode::Train
    }

    fn conv(&self, cv: &Conv, x: Act) -> (Act, Option<ConvCache>) {
        let plane = x.plane();
        let mut y = Act::zeros(cv.cout, x.n, x.h, x.w);
        let kk = cv.cin * if cv.k3 { 9 } else { 1 };
        let w = &self.p[cv.w..cv.w + cv.cout * kk];
        let cache = if cv.k3 {
            let cols = ops::im2col3(&x);
            ops::gemm(cv.cout, kk, plane, w, false, &cols, false, 0.0, &mut y.data);
            ConvCache::Cols(cols)
        } else {
            ops::gemm(cv.cout, kk, plane, w, false, &x.data, false, 0.0, &mut y.data);
            ConvCache::Input(x)
        };
        for o in 0..cv.cout {
            let b = self.p[cv.b + o];
            y.data[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
        (y, self.keep().then_some(cache))
    }

    fn norm(&self, nm: &Norm, mut x: Act) -> (Act, Option<NormCache>) {
        let plane = x.plane();
        let gamma = &self.p[nm.gamma..nm.gamma + nm.c];
        let beta = &self.p[nm.beta..nm.beta + nm.c];
        if self.mode == Mode::Eval {
            for ch in 0..nm.c {
                let m = self.buf[nm.mean + ch];
                let inv = 1.0 / (self.buf[nm.var + ch] + BN_EPS).sqrt();
                x.data[ch * plane..(ch + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = gamma[ch] * (*v - m) * inv + beta[ch]);
            }
            return (x, None);
        }
        let mut xhat = Act::zeros_like(&x);
        let mut inv_std = vec![0.0; nm.c];
        let mut means = vec![0.0; nm.c];
        let mut vars = vec![0.0; nm.c];
        for ch in 0..nm.c {
            let s = &mut x.data[ch * plane..(ch + 1) * plane];
            let mean = s.iter().sum::<f64>() / plane as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let inv = 1.0 / (var + BN_EPS).sqrt();
            let xh = &mut xhat.data[ch * plane..(ch + 1) * plane];
            for (v, h) in s.iter_mut().zip(xh.iter_mut()) {
                *h = (*v - mean) * inv;
                *v = gamma[ch] * *h + beta[ch];
            }
            inv_std[ch] = inv;
            means[ch] = mean;
            vars[ch] = var;
        }
        (
            x,
            Some(NormCache {
                xhat,
                inv_std,
                mean: means,
                var: vars,
            }),
        )
    }

    fn residual(&self, r: &Residual, x: Act) -> (Act, Option<ResidualCache>) {
        let skip = x.clone();
        let (a, c1) = self.conv(&r.conv1, x);
        let (mut a, n1) = match &r.norm1 {
            Some(n) => self.norm(n, a),
            None => (a, None),
        };
        ops::relu_inplace(&mut a);
        let rr = self.keep().then(|| a.clone());
        let (b, c2) = self.conv(&r.conv2, a);
        let (mut b, n2) = match &r.norm2 {
            Some(n) => self.norm(n, b),
            None => (b, None),
        };
        b.add_assign(&skip);
        ops::relu_inplace(&mut b);
        let cache = if self.keep() {
            Some(ResidualCache {
                c1: c1.unwrap(),
                n1,
                r: rr.unwrap(),
                c2: c2.unwrap(),
                n2,
                y: b.clone(),
            })
        } else {
            None
        };
        (b, cache)
    }

    fn hourglass(&self, hg: &Hourglass, x: Act) -> (Act, Option<HourglassCache>) {
        let in_hw = (x.h, x.w);
        let (pooled, arg) = ops::maxpool2(&x);
        let (mut up1, up1_c) = self.residual(&hg.up1, x);
        let (l1, low1_c) = self.residual(&hg.low1, pooled);
        let (l2, inner_c) = match &hg.inner {
            Inner::Nested(h) => {
                let (y, c) = self.hourglass(h, l1);
                (y, c.map(InnerCache::Nested))
            }
            Inner::Leaf(r) => {
                let (y, c) = self.residual(r, l1);
                (y, c.map(InnerCache::Leaf))
            }
        };
        let (l3, low3_c) = self.residual(&hg.low3, l2);
        up1.add_assign(&ops::upsample2(&l3));
        let cache = if self.keep() {
            Some(HourglassCache {
                up1: up1_c.unwrap(),
                pool_arg: arg,
                in_hw,
                low1: low1_c.unwrap(),
                inner: Box::new(inner_c.unwrap()),
                low3: low3_c.unwrap(),
            })
        } else {
            None
        };
        (up1, cache)
    }
}

struct GradCtx<'a> {
    p: &'a [f64],
    g: &'a mut [f64],
}

impl<'a> GradCtx<'a> {
    fn conv(&mut self, cv: &Conv, cache: &ConvCache, dy: &Act) -> Act {
        let plane = dy.plane();
        let kk = cv.cin * if cv.k3 { 9 } else { 1 };
        for o in 0..cv.cout {
            self.g[cv.b + o] += dy.data[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
        let input = match cache {
            ConvCache::Cols(c) => &c[..],
            ConvCache::Input(a) => &a.data[..],
        };
        ops::gemm(
            cv.cout,
            plane,
            kk,
            &dy.data,
            false,
            input,
            true,
            1.0,
            &mut self.g[cv.w..cv.w + cv.cout * kk],
        );
        let w = &self.p[cv.w..cv.w + cv.cout * kk];
        let mut dcols = vec![0.0; kk * plane];
        ops::gemm(kk, cv.cout, plane, w, true, &dy.data, false, 0.0, &mut dcols);
        if cv.k3 {
            ops::col2im3(&dcols, cv.cin, dy.n, dy.h, dy.w)
        } else {
            Act {
                c: cv.cin,
                n: dy.n,
                h: dy.h,
                w: dy.w,
                data: dcols,
            }
        }
    }

    fn norm(&mut self, nm: &Norm, cache: &NormCache, mut dy: Act) -> Act {
        let plane = dy.plane();
        let m = plane as f64;
        for ch in 0..nm.c {
            let gamma = self.p[nm.gamma + ch];
            let xh = &cache.xhat.data[ch * plane..(ch + 1) * plane];
            let d = &mut dy.data[ch * plane..(ch + 1) * plane];
            let sum_dy: f64 = d.iter().sum();
            let sum_dy_xh: f64 = d.iter().zip(xh).map(|(a, b)| a * b).sum();
            self.g[nm.gamma + ch] += sum_dy_xh;
            self.g[nm.beta + ch] += sum_dy;
            let k = gamma * cache.inv_std[ch] / m;
            for (v, &h) in d.iter_mut().zip(xh) {
                *v = k * (m * *v - sum_dy - h * sum_dy_xh);
            }
        }
        dy
    }

    fn residual(&mut self, r: &Residual, c: &ResidualCache, mut dy: Act) -> Act {
        ops::relu_backward(&c.y, &mut dy);
        let skip = dy.clone();
        let db = match (&r.norm2, &c.n2) {
            (Some(n), Some(nc)) => self.norm(n, nc, dy),
            _ => dy,
        };
        let mut dr = self.conv(&r.conv2, &c.c2, &db);
        ops::relu_backward(&c.r, &mut dr);
        let da = match (&r.norm1, &c.n1) {
            (Some(n), Some(nc)) => self.norm(n, nc, dr),
            _ => dr,
        };
        let mut dx = self.conv(&r.conv1, &c.c1, &da);
        dx.add_assign(&skip);
        dx
    }

    fn hourglass(&mut self, hg: &Hourglass, c: &HourglassCache, dy: Act) -> Act {
        let dl3 = ops::upsample2_backward(&dy);
        let dl2 = self.residual(&hg.low3, &c.low3, dl3);
        let dl1 = match (&hg.inner, c.inner.as_ref()) {
            (Inner::Nested(h), InnerCache::Nested(hc)) => self.hourglass(h, hc, dl2),
            (Inner::Leaf(r), InnerCache::Leaf(rc)) => self.residual(r, rc, dl2),
            _ => unreachable!("cache mirrors architecture"),
        };
        let dp = self.residual(&hg.low1, &c.low1, dl1);
        let mut dx = self.residual(&hg.up1, &c.up1, dy);
        dx.add_assign(&ops::maxpool2_backward(&dp, &c.pool_arg, c.in_hw.0, c.in_hw.1));
        dx
    }
}

fn nchw_to_cnhw(t: &Tensor) -> Act {
    let [n, c, h, w] = t.shape;
    let hw = h * w;
    let mut a = Act::zeros(c, n, h, w);
    for ni in 0..n {
        for ci in 0..c {
            a.data[(ci * n + ni) * hw..][..hw].copy_from_slice(&t.data[(ni * c + ci) * hw..][..hw]);
        }
    }
    a
}

fn cnhw_to_nchw(a: &Act) -> Tensor {
    let hw = a.h * a.w;
    let mut t = Tensor::zeros([a.n, a.c, a.h, a.w]);
    for ni in 0..a.n {
        for ci in 0..a.c {
            t.data[(ni * a.c + ci) * hw..][..hw].copy_from_slice(&a.data[(ci * a.n + ni) * hw..][..hw]);
        }
    }
    t
}

impl PoseNetwork {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (arch, layout) = build_arch(&config);
        let mut params = vec![0.0; layout.params];
        let mut buffers = vec![0.0; layout.buffers];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for e in &layout.entries {
            let dst = if e.buffer {
                &mut buffers[e.offset..e.offset + e.len]
            } else {
                &mut params[e.offset..e.offset + e.len]
            };
            match e.init {
                Init::Const(v) => dst.iter_mut().for_each(|x| *x = v),
                Init::Normal { std } => {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    dst.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
                }
            }
        }
        Ok(PoseNetwork {
            config,
            arch,
            entries: layout.entries,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn flatten_parameters(&self) -> ModelParameters {
        ModelParameters(self.params.clone())
    }

    /// Forward pass over `[N, C, H, W]` images.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<Forward> {
        let [n, c, h, w] = images.shape;
        let cfg = &self.config;
        if c != cfg.in_channels || h != cfg.image_size || w != cfg.image_size {
            return Err(Error::Shape(format!(
                "network expects [N, {}, {}, {}] input, got {:?}",
                cfg.in_channels, cfg.image_size, cfg.image_size, images.shape
            )));
        }
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let ctx = Ctx {
            p: &self.params,
            buf: &self.buffers,
            mode,
        };
        let stem = &self.arch.stem;
        let (a, conv_c) = ctx.conv(&stem.conv, nchw_to_cnhw(images));
        let (mut a, norm_c) = match &stem.norm {
            Some(nm) => ctx.norm(nm, a),
            None => (a, None),
        };
        ops::relu_inplace(&mut a);
        let stem_a = ctx.keep().then(|| a.clone());
        let mut levels = Vec::new();
        let mut x = a;
        for (i, block) in stem.blocks.iter().enumerate() {
            let pool = if i < stem.pools {
                let hw = (x.h, x.w);
                let (p, arg) = ops::maxpool2(&x);
                x = p;
                Some((arg, hw))
            } else {
                None
            };
            let (y, rc) = ctx.residual(block, x);
            x = y;
            if let Some(rc) = rc {
                levels.push((pool, rc));
            }
        }

        let mut outputs = Vec::with_capacity(self.arch.stages.len());
        let mut stage_caches = Vec::new();
        for st in &self.arch.stages {
            let (hgo, hg_c) = ctx.hourglass(&st.hg, x.clone());
            let (f, res_c) = ctx.residual(&st.res, hgo);
            let (mut f2, feat_c) = ctx.conv(&st.feat, f);
            ops::relu_inplace(&mut f2);
            let (heat, head_c) = ctx.conv(&st.head, f2.clone());
            outputs.push(cnhw_to_nchw(&heat));
            let (mut rf_c, mut rh_c) = (None, None);
            if let (Some(rf), Some(rh)) = (&st.remap_feat, &st.remap_head) {
                let (a, c1) = ctx.conv(rf, f2.clone());
                let (b, c2) = ctx.conv(rh, heat);
                x.add_assign(&a);
                x.add_assign(&b);
                rf_c = c1;
                rh_c = c2;
            }
            if ctx.keep() {
                stage_caches.push(StageCache {
                    hg: hg_c.unwrap(),
                    res: res_c.unwrap(),
                    feat_c: feat_c.unwrap(),
                    f2,
                    head_c: head_c.unwrap(),
                    remap_feat_c: rf_c,
                    remap_head_c: rh_c,
                });
            }
        }
        let cache = ctx.keep().then(|| ForwardCache {
            stem: StemCache {
                conv: conv_c.unwrap(),
                norm: norm_c,
                a: stem_a.unwrap(),
                levels,
            },
            stages: stage_caches,
            batch: n,
        });
        Ok(Forward { outputs, cache })
    }

    /// Accumulates parameter gradients into `grads` given the loss gradient
    /// for every stack output (same shapes as `Forward::outputs`).
    pub fn backward(&self, fwd: &Forward, grad_outputs: &[Tensor], grads: &mut [f64]) -> Result<()> {
        let cache = fwd
            .cache
            .as_ref()
            .ok_or_else(|| Error::Shape("backward needs a training-mode forward".into()))?;
        if grad_outputs.len() != self.arch.stages.len() || grads.len() != self.params.len() {
            return Err(Error::Shape("gradient buffers do not match the network".into()));
        }
        for (g, o) in grad_outputs.iter().zip(&fwd.outputs) {
            if g.shape != o.shape {
                return Err(Error::Shape(format!(
                    "output gradient {:?} vs output {:?}",
                    g.shape, o.shape
                )));
            }
        }
        let mut gc = GradCtx {
            p: &self.params,
            g: grads,
        };
        let mut dx_next: Option<Act> = None;
        for (si, (st, sc)) in self.arch.stages.iter().zip(&cache.stages).enumerate().rev() {
            let mut dheat = nchw_to_cnhw(&grad_outputs[si]);
            let mut df2 = Act::zeros_like(&sc.f2);
            if let (Some(dxn), Some(rf), Some(rh), Some(rfc), Some(rhc)) = (
                dx_next.as_ref(),
                &st.remap_feat,
                &st.remap_head,
                &sc.remap_feat_c,
                &sc.remap_head_c,
            ) {
                dheat.add_assign(&gc.conv(rh, rhc, dxn));
                df2.add_assign(&gc.conv(rf, rfc, dxn));
            }
            df2.add_assign(&gc.conv(&st.head, &sc.head_c, &dheat));
            ops::relu_backward(&sc.f2, &mut df2);
            let df = gc.conv(&st.feat, &sc.feat_c, &df2);
            let dh = gc.residual(&st.res, &sc.res, df);
            let mut dx = gc.hourglass(&st.hg, &sc.hg, dh);
            if let Some(dxn) = dx_next.take() {
                dx.add_assign(&dxn);
            }
            dx_next = Some(dx);
        }
        let mut dx = dx_next.expect("at least one stack");
        let stem = &self.arch.stem;
        for (block, (pool, rc)) in stem.blocks.iter().zip(&cache.stem.levels).rev() {
            dx = gc.residual(block, rc, dx);
            if let Some((arg, (h, w))) = pool {
                dx = ops::maxpool2_backward(&dx, arg, *h, *w);
            }
        }
        ops::relu_backward(&cache.stem.a, &mut dx);
        if let (Some(nm), Some(nc)) = (&stem.norm, &cache.stem.norm) {
            dx = gc.norm(nm, nc, dx);
        }
        gc.conv(&stem.conv, &cache.stem.conv, &dx);
        debug_assert_eq!(cache.batch, grad_outputs[0].shape[0]);
        Ok(())
    }

    /// Folds the batch statistics of a training forward into the running
    /// statistics. No-op without normalization layers.
    pub fn update_running_stats(&mut self, fwd: &Forward) {
        let Some(cache) = fwd.cache.as_ref() else {
            return;
        };
        let mut updates: Vec<(&Norm, &NormCache, usize)> = Vec::new();
        let stem = &self.arch.stem;
        let plane0 = cache.stem.a.plane();
        if let (Some(n), Some(c)) = (&stem.norm, &cache.stem.norm) {
            updates.push((n, c, plane0));
        }
        fn residual<'a>(r: &'a Residual, c: &'a ResidualCache, out: &mut Vec<(&'a Norm, &'a NormCache, usize)>) {
            let plane = c.y.plane();
            if let (Some(n), Some(nc)) = (&r.norm1, &c.n1) {
                out.push((n, nc, plane));
            }
            if let (Some(n), Some(nc)) = (&r.norm2, &c.n2) {
                out.push((n, nc, plane));
            }
        }
        fn hourglass<'a>(h: &'a Hourglass, c: &'a HourglassCache, out: &mut Vec<(&'a Norm, &'a NormCache, usize)>) {
            residual(&h.up1, &c.up1, out);
            residual(&h.low1, &c.low1, out);
            match (&h.inner, c.inner.as_ref()) {
                (Inner::Nested(hh), InnerCache::Nested(hc)) => hourglass(hh, hc, out),
                (Inner::Leaf(r), InnerCache::Leaf(rc)) => residual(r, rc, out),
                _ => {}
            }
            residual(&h.low3, &c.low3, out);
        }
        for (b, (_, rc)) in stem.blocks.iter().zip(&cache.stem.levels) {
            residual(b, rc, &mut updates);
        }
        for (st, sc) in self.arch.stages.iter().zip(&cache.stages) {
            hourglass(&st.hg, &sc.hg, &mut updates);
            residual(&st.res, &sc.res, &mut updates);
        }
        let mut writes = Vec::new();
        for (n, c, plane) in updates {
            let unbias = if plane > 1 {
                plane as f64 / (plane as f64 - 1.0)
            } else {
                1.0
            };
            for ch in 0..n.c {
                writes.push((n.mean + ch, c.mean[ch]));
                writes.push((n.var + ch, c.var[ch] * unbias));
            }
        }
        for (i, v) in writes {
            self.buffers[i] = (1.0 - BN_MOMENTUM) * self.buffers[i] + BN_MOMENTUM * v;
        }
    }

    /// Checks that `other` has the same architecture.
    pub fn same_structure(&self, other: &PoseNetwork) -> bool {
        let strip = |c: &ModelConfig| ModelConfig { seed: 0, ..*c };
        strip(&self.config) == strip(&other.config)
            && self.params.len() == other.params.len()
            && self.buffers.len() == other.buffers.len()
    }
}
