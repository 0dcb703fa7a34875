//! Prior-conditioned latent diffusion: linear noise schedule, forward
//! corruption, an in-plane-convolution UNet denoiser with cross-attention
//! over prior tokens, the epsilon-prediction objective, and DDPM/DDIM
//! samplers.
//!
//! Every convolution in the denoiser is 3x3x1 in the (i, j) plane and
//! down/upsampling is 2x2x1; depth positions mix only through attention.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use xct_nn::checkpoint::{Checkpoint, RngState};
use xct_nn::graph::{ConvCfg, Graph};
use xct_nn::{adam, init, AdamConfig, Grads, NodeId, ParamStore, Tensor};

use crate::trainer::{guard_finite, CsvLog, TrainError};

pub const STAGE_NAME: &str = "dm";

/// Per-timestep forward-process parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta interpolation from `beta_start` to `beta_end` over `t`
    /// steps; cumulative products in f64.
    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self, TrainError> {
        if t == 0 {
            return Err(TrainError::config("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(TrainError::config(format!(
                "betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas = (0..t)
            .map(|i| {
                if t == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Build from explicit betas in [0, 1). The relaxed lower bound admits
    /// degenerate all-zero schedules used to exercise the samplers.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, TrainError> {
        if betas.is_empty() {
            return Err(TrainError::config("schedule needs at least one step"));
        }
        if betas.iter().any(|&b| !(0.0..1.0).contains(&b)) {
            return Err(TrainError::config("all betas must be in [0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0f64;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// Cumulative alpha at timestep `t` (1-based); `t = 0` extends to 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// Forward corruption: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
/// `t = 0` is the identity extension.
pub fn q_sample(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor, TrainError> {
    if t > sched.t_max() {
        return Err(TrainError::config(format!(
            "t {} out of range 0..={}",
            t,
            sched.t_max()
        )));
    }
    if x0.shape() != eps.shape() {
        return Err(TrainError::shape("noise shape must match x0"));
    }
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| sa * x + sb * e)
        .collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerMode {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmConfig {
    pub latent_dims: (usize, usize, usize),
    pub n_z: usize,
    /// UNet widths at full, half, quarter in-plane resolution.
    pub channels: (usize, usize, usize),
    pub attn_dim: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
}

impl Default for DmConfig {
    fn default() -> Self {
        DmConfig {
            latent_dims: (8, 8, 8),
            n_z: 8,
            channels: (16, 24, 32),
            attn_dim: 32,
            heads: 4,
            time_dim: 16,
            t_steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            seed: 0,
            lr: 1e-4,
            iterations: 500,
            batch_size: 4,
        }
    }
}

impl DmConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let (h, w, d) = self.latent_dims;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(TrainError::config(
                "latent (h, w) must be divisible by 4 for two in-plane downsamples",
            ));
        }
        if d == 0 || self.n_z == 0 {
            return Err(TrainError::config("latent depth and n_z must be > 0"));
        }
        if self.attn_dim % self.heads != 0 || self.heads == 0 {
            return Err(TrainError::config("attention dim must divide evenly into heads"));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(TrainError::config("time embedding dim must be even"));
        }
        if self.t_steps == 0 {
            return Err(TrainError::config("t_steps must be > 0"));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(TrainError::config("invalid beta range"));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(TrainError::config("batch_size and iterations must be > 0"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::linear(self.t_steps, self.beta_start, self.beta_end)
            .expect("validated config")
    }

    pub fn token_count(&self) -> usize {
        self.latent_dims.0 * self.latent_dims.1 * self.latent_dims.2
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResSlot {
    c1: ConvSlot,
    c2: ConvSlot,
    temb: ConvSlot, // linear [C, time_dim] + bias [C]
}

#[derive(Debug, Clone, Copy)]
struct AttnSlot {
    tok: usize,
    pos: usize,
    k: usize,
    v: usize,
    q: usize,
    o: usize,
}

pub struct DmModel {
    pub cfg: DmConfig,
    t_l0: ConvSlot,
    t_l1: ConvSlot,
    conv_in: ConvSlot,
    res0: ResSlot,
    down0: ConvSlot,
    res1: ResSlot,
    attn1: AttnSlot,
    down1: ConvSlot,
    mid1: ResSlot,
    attn2: AttnSlot,
    mid2: ResSlot,
    up1: ConvSlot,
    cat1: ConvSlot,
    res2: ResSlot,
    up0: ConvSlot,
    cat0: ConvSlot,
    res3: ResSlot,
    conv_out: ConvSlot,
}

const K2D: ConvCfg = ConvCfg { kernel: (1, 3, 3), stride: (1, 1, 1), pad: (0, 1, 1) };
const K2DS2: ConvCfg = ConvCfg { kernel: (1, 3, 3), stride: (1, 2, 2), pad: (0, 1, 1) };

impl DmModel {
    pub fn init(cfg: &DmConfig) -> Result<(Self, ParamStore), TrainError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (c0, c1, c2) = cfg.channels;
        let td = cfg.time_dim;
        let n_tokens = cfg.token_count();

        let conv = |store: &mut ParamStore,
                        rng: &mut ChaCha8Rng,
                        name: &str,
                        c_out: usize,
                        c_in: usize|
         -> Result<ConvSlot, TrainError> {
            Ok(ConvSlot {
                w: store.add(format!("{name}.w"), init::conv_weight(rng, c_out, c_in, (1, 3, 3)))?,
                b: store.add(format!("{name}.b"), Tensor::zeros(vec![c_out]))?,
            })
        };
        let lin = |store: &mut ParamStore,
                       rng: &mut ChaCha8Rng,
                       name: &str,
                       out: usize,
                       input: usize|
         -> Result<ConvSlot, TrainError> {
            Ok(ConvSlot {
                w: store.add(format!("{name}.w"), init::linear_weight(rng, out, input))?,
                b: store.add(format!("{name}.b"), Tensor::zeros(vec![out]))?,
            })
        };

        let t_l0 = lin(&mut store, &mut rng, "t.l0", td, td)?;
        let t_l1 = lin(&mut store, &mut rng, "t.l1", td, td)?;
        let conv_in = conv(&mut store, &mut rng, "u.in", c0, cfg.n_z)?;

        let res = |store: &mut ParamStore,
                       rng: &mut ChaCha8Rng,
                       name: &str,
                       c: usize|
         -> Result<ResSlot, TrainError> {
            Ok(ResSlot {
                c1: ConvSlot {
                    w: store.add(format!("{name}.c1.w"), init::conv_weight(rng, c, c, (1, 3, 3)))?,
                    b: store.add(format!("{name}.c1.b"), Tensor::zeros(vec![c]))?,
                },
                c2: ConvSlot {
                    w: store.add(format!("{name}.c2.w"), init::conv_weight(rng, c, c, (1, 3, 3)))?,
                    b: store.add(format!("{name}.c2.b"), Tensor::zeros(vec![c]))?,
                },
                temb: ConvSlot {
                    w: store.add(format!("{name}.t.w"), init::linear_weight(rng, c, td))?,
                    b: store.add(format!("{name}.t.b"), Tensor::zeros(vec![c]))?,
                },
            })
        };
        let attn = |store: &mut ParamStore,
                        rng: &mut ChaCha8Rng,
                        name: &str,
                        c: usize|
         -> Result<AttnSlot, TrainError> {
            let a = cfg.attn_dim;
            Ok(AttnSlot {
                tok: store.add(format!("{name}.tok.w"), init::linear_weight(rng, a, cfg.n_z))?,
                pos: store.add(
                    format!("{name}.pos"),
                    init::uniform_fan_in(rng, vec![n_tokens, a], a),
                )?,
                k: store.add(format!("{name}.k.w"), init::linear_weight(rng, a, a))?,
                v: store.add(format!("{name}.v.w"), init::linear_weight(rng, a, a))?,
                q: store.add(format!("{name}.q.w"), init::linear_weight(rng, a, c))?,
                o: store.add(format!("{name}.o.w"), init::linear_weight(rng, c, a))?,
            })
        };

        let res0 = res(&mut store, &mut rng, "u.r0", c0)?;
        let down0 = conv(&mut store, &mut rng, "u.d0", c1, c0)?;
        let res1 = res(&mut store, &mut rng, "u.r1", c1)?;
        let attn1 = attn(&mut store, &mut rng, "u.a1", c1)?;
        let down1 = conv(&mut store, &mut rng, "u.d1", c2, c1)?;
        let mid1 = res(&mut store, &mut rng, "u.m1", c2)?;
        let attn2 = attn(&mut store, &mut rng, "u.a2", c2)?;
        let mid2 = res(&mut store, &mut rng, "u.m2", c2)?;
        let up1 = conv(&mut store, &mut rng, "u.u1", c1, c2)?;
        let cat1 = conv(&mut store, &mut rng, "u.c1", c1, 2 * c1)?;
        let res2 = res(&mut store, &mut rng, "u.r2", c1)?;
        let up0 = conv(&mut store, &mut rng, "u.u0", c0, c1)?;
        let cat0 = conv(&mut store, &mut rng, "u.c0", c0, 2 * c0)?;
        let res3 = res(&mut store, &mut rng, "u.r3", c0)?;
        // Zero-init the output projection so the initial prediction is 0.
        let conv_out = ConvSlot {
            w: store.add("u.out.w", Tensor::zeros(vec![cfg.n_z, c0, 1, 3, 3]))?,
            b: store.add("u.out.b", Tensor::zeros(vec![cfg.n_z]))?,
        };

        Ok((
            DmModel {
                cfg: cfg.clone(),
                t_l0,
                t_l1,
                conv_in,
                res0,
                down0,
                res1,
                attn1,
                down1,
                mid1,
                attn2,
                mid2,
                up1,
                cat1,
                res2,
                up0,
                cat0,
                res3,
                conv_out,
            },
            store,
        ))
    }

    pub fn from_store(cfg: &DmConfig, store: &ParamStore) -> Result<Self, TrainError> {
        cfg.validate()?;
        let conv = |name: &str| -> Result<ConvSlot, TrainError> {
            Ok(ConvSlot {
                w: store.index_of(&format!("{name}.w"))?,
                b: store.index_of(&format!("{name}.b"))?,
            })
        };
        let res = |name: &str| -> Result<ResSlot, TrainError> {
            Ok(ResSlot {
                c1: conv(&format!("{name}.c1"))?,
                c2: conv(&format!("{name}.c2"))?,
                temb: conv(&format!("{name}.t"))?,
            })
        };
        let attn = |name: &str| -> Result<AttnSlot, TrainError> {
            Ok(AttnSlot {
                tok: store.index_of(&format!("{name}.tok.w"))?,
                pos: store.index_of(&format!("{name}.pos"))?,
                k: store.index_of(&format!("{name}.k.w"))?,
                v: store.index_of(&format!("{name}.v.w"))?,
                q: store.index_of(&format!("{name}.q.w"))?,
                o: store.index_of(&format!("{name}.o.w"))?,
            })
        };
        Ok(DmModel {
            cfg: cfg.clone(),
            t_l0: conv("t.l0")?,
            t_l1: conv("t.l1")?,
            conv_in: conv("u.in")?,
            res0: res("u.r0")?,
            down0: conv("u.d0")?,
            res1: res("u.r1")?,
            attn1: attn("u.a1")?,
            down1: conv("u.d1")?,
            mid1: res("u.m1")?,
            attn2: attn("u.a2")?,
            mid2: res("u.m2")?,
            up1: conv("u.u1")?,
            cat1: conv("u.c1")?,
            res2: res("u.r2")?,
            up0: conv("u.u0")?,
            cat0: conv("u.c0")?,
            res3: res("u.r3")?,
            conv_out: conv("u.out")?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, f64), TrainError> {
        if ckpt.stage != STAGE_NAME {
            return Err(TrainError::config(format!(
                "expected a {STAGE_NAME} checkpoint, found stage {}",
                ckpt.stage
            )));
        }
        let cfg: DmConfig = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| TrainError::config(format!("bad dm config: {e}")))?;
        let model = DmModel::from_store(&cfg, &ckpt.store)?;
        let scale = ckpt
            .store
            .index_of("latent_scale")
            .map(|i| ckpt.store.value(i).item())
            .unwrap_or(1.0);
        Ok((model, scale))
    }

    /// Sinusoidal embedding of timestep `t` as a `[1, time_dim]` tensor.
    fn time_embedding(&self, t: usize) -> Tensor {
        let td = self.cfg.time_dim;
        let half = td / 2;
        let mut data = vec![0.0; td];
        for i in 0..half {
            let freq = if half > 1 {
                (-(10000.0f64.ln()) * i as f64 / (half - 1) as f64).exp()
            } else {
                1.0
            };
            data[i] = (t as f64 * freq).sin();
            data[half + i] = (t as f64 * freq).cos();
        }
        Tensor::new(vec![1, td], data).expect("consistent")
    }

    fn bind(&self, g: &mut Graph, store: &ParamStore, trainable: bool, idx: usize) -> NodeId {
        if trainable {
            g.param(store, idx)
        } else {
            g.frozen(store, idx)
        }
    }

    fn conv(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        trainable: bool,
        x: NodeId,
        slot: ConvSlot,
        cfg: ConvCfg,
    ) -> NodeId {
        let w = self.bind(g, store, trainable, slot.w);
        let b = self.bind(g, store, trainable, slot.b);
        g.conv3d(x, w, Some(b), cfg)
    }

    fn res_block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        trainable: bool,
        x: NodeId,
        temb: NodeId,
        slot: ResSlot,
    ) -> NodeId {
        let h = self.conv(g, store, trainable, x, slot.c1, K2D);
        let tw = self.bind(g, store, trainable, slot.temb.w);
        let tb = self.bind(g, store, trainable, slot.temb.b);
        let proj = g.linear(temb, tw, Some(tb)); // [1, C]
        let c = g.value(proj).shape()[1];
        let proj = g.reshape(proj, vec![c]);
        let h = g.add_channel_bias(h, proj);
        let h = g.silu(h);
        let h = self.conv(g, store, trainable, h, slot.c2, K2D);
        g.add(x, h)
    }

    /// Multi-head cross-attention: queries from the feature grid, keys and
    /// values from position-embedded prior tokens. Softmax rows sum to 1.
    fn cross_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        trainable: bool,
        x: NodeId,
        tokens: NodeId,
        slot: AttnSlot,
    ) -> NodeId {
        let shape = g.value(x).shape().to_vec();
        let (c, dd, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
        let sites = g.grid_to_sites(x); // [S, C]

        let tok_w = self.bind(g, store, trainable, slot.tok);
        let tok = g.linear(tokens, tok_w, None); // [N, A]
        let pos = self.bind(g, store, trainable, slot.pos);
        let tok = g.add(tok, pos);
        let kw = self.bind(g, store, trainable, slot.k);
        let keys = g.linear(tok, kw, None);
        let vw = self.bind(g, store, trainable, slot.v);
        let vals = g.linear(tok, vw, None);
        let qw = self.bind(g, store, trainable, slot.q);
        let queries = g.linear(sites, qw, None); // [S, A]

        let heads = self.cfg.heads;
        let dh = self.cfg.attn_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(queries, h * dh, dh);
            let kh = g.slice_cols(keys, h * dh, dh);
            let vh = g.slice_cols(vals, h * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
        }
        let merged = g.concat_cols(outs); // [S, A]
        let ow = self.bind(g, store, trainable, slot.o);
        let proj = g.linear(merged, ow, None); // [S, C]
        let mixed = g.add(sites, proj);
        g.sites_to_grid(mixed, c, (hh, ww, dd))
    }

    /// Epsilon-prediction UNet graph. `x` is `[n_z, d, h, w]`, `tokens` is
    /// `[N, n_z]`; output has the shape of `x`.
    pub fn denoise_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        trainable: bool,
        x: NodeId,
        t: usize,
        tokens: NodeId,
    ) -> NodeId {
        let temb_in = g.input(self.time_embedding(t));
        let w0 = self.bind(g, store, trainable, self.t_l0.w);
        let b0 = self.bind(g, store, trainable, self.t_l0.b);
        let temb = g.linear(temb_in, w0, Some(b0));
        let temb = g.silu(temb);
        let w1 = self.bind(g, store, trainable, self.t_l1.w);
        let b1 = self.bind(g, store, trainable, self.t_l1.b);
        let temb = g.linear(temb, w1, Some(b1));

        let t0 = self.conv(g, store, trainable, x, self.conv_in, K2D);
        let skip0 = self.res_block(g, store, trainable, t0, temb, self.res0);

        let d0 = self.conv(g, store, trainable, skip0, self.down0, K2DS2);
        let r1 = self.res_block(g, store, trainable, d0, temb, self.res1);
        let skip1 = self.cross_attention(g, store, trainable, r1, tokens, self.attn1);

        let d1 = self.conv(g, store, trainable, skip1, self.down1, K2DS2);
        let m = self.res_block(g, store, trainable, d1, temb, self.mid1);
        let m = self.cross_attention(g, store, trainable, m, tokens, self.attn2);
        let m = self.res_block(g, store, trainable, m, temb, self.mid2);

        let u1 = g.upsample_nearest(m, (1, 2, 2));
        let u1 = self.conv(g, store, trainable, u1, self.up1, K2D);
        let u1 = g.concat_channels(u1, skip1);
        let u1 = self.conv(g, store, trainable, u1, self.cat1, K2D);
        let u1 = self.res_block(g, store, trainable, u1, temb, self.res2);

        let u0 = g.upsample_nearest(u1, (1, 2, 2));
        let u0 = self.conv(g, store, trainable, u0, self.up0, K2D);
        let u0 = g.concat_channels(u0, skip0);
        let u0 = self.conv(g, store, trainable, u0, self.cat0, K2D);
        let u0 = self.res_block(g, store, trainable, u0, temb, self.res3);

        self.conv(g, store, trainable, u0, self.conv_out, K2D)
    }

    /// Predicted noise for `x_t` at timestep `t`, by value.
    pub fn denoise(
        &self,
        store: &ParamStore,
        x_t: &Tensor,
        t: usize,
        tokens: &Tensor,
    ) -> Result<Tensor, TrainError> {
        self.check_shapes(x_t, tokens)?;
        let mut g = Graph::new();
        let x = g.input(x_t.clone());
        let y = g.input(tokens.clone());
        let out = self.denoise_graph(&mut g, store, false, x, t, y);
        Ok(g.value(out).clone())
    }

    fn check_shapes(&self, x_t: &Tensor, tokens: &Tensor) -> Result<(), TrainError> {
        let (h, w, d) = self.cfg.latent_dims;
        if x_t.shape() != [self.cfg.n_z, d, h, w] {
            return Err(TrainError::shape(format!(
                "x_t shape {:?} != [{}, {d}, {h}, {w}]",
                x_t.shape(),
                self.cfg.n_z
            )));
        }
        if tokens.shape() != [self.cfg.token_count(), self.cfg.n_z] {
            return Err(TrainError::shape(format!(
                "tokens shape {:?} != [{}, {}]",
                tokens.shape(),
                self.cfg.token_count(),
                self.cfg.n_z
            )));
        }
        Ok(())
    }
}

/// Anything that predicts the added noise; lets tests drive the samplers
/// with closed-form predictors.
pub trait Denoiser {
    fn predict(&self, x_t: &Tensor, t: usize, tokens: &Tensor) -> Tensor;
}

/// The trained UNet.
pub struct UNetDenoiser<'a> {
    pub model: &'a DmModel,
    pub store: &'a ParamStore,
}

impl Denoiser for UNetDenoiser<'_> {
    fn predict(&self, x_t: &Tensor, t: usize, tokens: &Tensor) -> Tensor {
        self.model
            .denoise(self.store, x_t, t, tokens)
            .expect("shapes validated by sampler")
    }
}

/// Predicts zero noise everywhere.
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict(&self, x_t: &Tensor, _t: usize, _tokens: &Tensor) -> Tensor {
        Tensor::zeros(x_t.shape().to_vec())
    }
}

/// Draw a standard-normal tensor.
pub fn standard_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("consistent")
}

/// Single-draw epsilon objective: t ~ U{1..T}, eps ~ N(0, I), mean squared
/// error between eps and the prediction.
pub fn dm_loss_with(
    den: &dyn Denoiser,
    x0: &Tensor,
    tokens: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let t = rng.gen_range(1..=sched.t_max());
    let eps = standard_normal(rng, x0.shape().to_vec());
    let x_t = q_sample(x0, t, &eps, sched)?;
    let pred = den.predict(&x_t, t, tokens);
    if pred.shape() != eps.shape() {
        return Err(TrainError::shape("denoiser changed the shape"));
    }
    let n = eps.len() as f64;
    let mse = eps
        .data()
        .iter()
        .zip(pred.data())
        .map(|(e, p)| (e - p) * (e - p))
        .sum::<f64>()
        / n;
    if !mse.is_finite() {
        return Err(TrainError::NumericalAbort { term: "dm_loss".into(), step: 0 });
    }
    Ok(mse)
}

/// The trained model's objective on one example.
pub fn dm_loss(
    model: &DmModel,
    store: &ParamStore,
    x0: &Tensor,
    tokens: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    model.check_shapes(x0, tokens)?;
    dm_loss_with(&UNetDenoiser { model, store }, x0, tokens, sched, rng)
}

/// Descending timestep ladder touching T and ending with a step to 0.
fn timestep_ladder(t_max: usize, steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..steps)
        .map(|m| (((m + 1) * t_max) as f64 / steps as f64).round() as usize)
        .map(|t| t.max(1))
        .collect();
    ts.dedup();
    ts.reverse(); // descending, starts at T
    ts
}

/// Reverse-process sampling from seeded Gaussian noise.
///
/// DDIM is fully deterministic given the RNG seed (the only draw is x_T);
/// DDPM adds posterior noise at every step with variance
/// `(1 - abar_prev)/(1 - abar_t) * (1 - abar_t/abar_prev)`.
pub fn sample(
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    shape: Vec<usize>,
    tokens: &Tensor,
    mode: SamplerMode,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, TrainError> {
    if steps == 0 || steps > sched.t_max() {
        return Err(TrainError::config(format!(
            "steps {} out of range 1..={}",
            steps,
            sched.t_max()
        )));
    }
    let ladder = timestep_ladder(sched.t_max(), steps);
    let mut x = standard_normal(rng, shape);
    for (i, &t) in ladder.iter().enumerate() {
        let t_prev = if i + 1 < ladder.len() { ladder[i + 1] } else { 0 };
        let ab_t = sched.alpha_bar(t);
        let ab_p = sched.alpha_bar(t_prev);
        let eps = den.predict(&x, t, tokens);
        let sqrt_ab_t = ab_t.sqrt();
        let sqrt_om_t = (1.0 - ab_t).sqrt();

        let sigma2 = match mode {
            SamplerMode::Ddim => 0.0,
            SamplerMode::Ddpm => {
                if 1.0 - ab_t <= 0.0 {
                    0.0
                } else {
                    ((1.0 - ab_p) / (1.0 - ab_t)) * (1.0 - ab_t / ab_p)
                }
            }
        };
        let dir = (1.0 - ab_p - sigma2).max(0.0).sqrt();
        let sqrt_ab_p = ab_p.sqrt();

        let noise = if sigma2 > 0.0 && t_prev > 0 {
            Some(standard_normal(rng, x.shape().to_vec()))
        } else {
            None
        };
        let sigma = sigma2.sqrt();
        let data: Vec<f64> = x
            .data()
            .iter()
            .zip(eps.data())
            .enumerate()
            .map(|(idx, (xv, ev))| {
                let x0_pred = (xv - sqrt_om_t * ev) / sqrt_ab_t;
                let mut out = sqrt_ab_p * x0_pred + dir * ev;
                if let Some(z) = &noise {
                    out += sigma * z.data()[idx];
                }
                out
            })
            .collect();
        x = Tensor::new(x.shape().to_vec(), data)?;
    }
    Ok(x)
}

/// One training pair: a scaled latent and its conditioning tokens.
pub struct DmTrainItem {
    pub x0: Tensor,
    pub tokens: Tensor,
}

/// Train the conditional denoiser. `latent_scale` is stored in the
/// checkpoint as a frozen parameter so sampling can undo it.
pub fn train_diffusion(
    items: &[DmTrainItem],
    cfg: &DmConfig,
    latent_scale: f64,
    resume: Option<Checkpoint>,
    log_out: Option<&mut dyn Write>,
) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(TrainError::config("diffusion training needs at least one item"));
    }
    let cfg_json = serde_json::to_string(cfg).expect("config serializes");
    let sched = cfg.schedule();

    let (model, mut store, mut rng, start) = match resume {
        None => {
            let (model, mut store) = DmModel::init(cfg)?;
            store.add_frozen("latent_scale", Tensor::scalar(latent_scale))?;
            let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x747261696e);
            (model, store, rng, 0usize)
        }
        Some(ckpt) => {
            if ckpt.stage != STAGE_NAME {
                return Err(TrainError::config("resume checkpoint is not stage dm"));
            }
            if ckpt.config_json != cfg_json {
                return Err(TrainError::config(
                    "resume checkpoint was trained with a different config",
                ));
            }
            let model = DmModel::from_store(cfg, &ckpt.store)?;
            let rng = ckpt
                .rng
                .as_ref()
                .ok_or_else(|| TrainError::config("checkpoint lacks RNG state"))?
                .restore();
            (model, ckpt.store, rng, ckpt.iteration as usize)
        }
    };

    for item in items {
        model.check_shapes(&item.x0, &item.tokens)?;
    }
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut log = CsvLog::new(log_out);
    let header = "step,loss";

    for step in start..cfg.iterations {
        let mut merged = Grads::new();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..items.len());
            let t = rng.gen_range(1..=sched.t_max());
            let eps = standard_normal(&mut rng, item_shape(&items[idx]));
            let x_t = q_sample(&items[idx].x0, t, &eps, &sched)?;
            let mut g = Graph::new();
            let x = g.input(x_t);
            let y = g.input(items[idx].tokens.clone());
            let pred = model.denoise_graph(&mut g, &store, true, x, t, y);
            let target = g.input(eps);
            let loss = g.mse_loss(pred, target);
            let value = g.scalar(loss);
            guard_finite(&[("dm_loss", value)], step)?;
            loss_sum += value;
            let grads = g.backward(loss);
            merged.merge(&grads);
        }
        let inv_b = 1.0 / cfg.batch_size as f64;
        merged.scale(inv_b);
        adam::step(&mut store, &merged, &adam_cfg);
        log.row(header, format_args!("{},{:.6e}", step, loss_sum * inv_b))?;
        if step % 100 == 0 {
            log::info!("dm step {step}: loss {:.4}", loss_sum * inv_b);
        }
    }

    Ok(Checkpoint {
        stage: STAGE_NAME.into(),
        config_json: cfg_json,
        iteration: cfg.iterations as u64,
        rng: Some(RngState::capture(&rng)),
        store,
        codebook: None,
    })
}

fn item_shape(item: &DmTrainItem) -> Vec<usize> {
    item.x0.shape().to_vec()
}
