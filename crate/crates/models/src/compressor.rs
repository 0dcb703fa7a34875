//! The vector-quantized 3D compression autoencoder.
//!
//! Encoder: five 3^3 convs, two of them stride 2 (downsample factor 4).
//! Decoder: conv, nearest x2 upsample + conv, then a super-resolution tail
//! (voxel-shuffle x2 + conv) providing the final doubling; output clamped to
//! [-1, 1]. A 3D volume discriminator and a 2D coronal-slice discriminator
//! train adversarially against the reconstruction. The quantizer bottleneck
//! trains with the two-term stop-gradient loss, either in raw space or in
//! z-score-normalized (homogeneous) space.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use xct_core::metrics::PerceptualNet;
use xct_core::volume::{Unit, Volume};
use xct_nn::checkpoint::{Checkpoint, CodebookBlock, RngState};
use xct_nn::graph::{ConvCfg, Graph};
use xct_nn::{adam, init, AdamConfig, Grads, NodeId, ParamStore, Tensor};

use crate::codebook::{Codebook, LookupMode};
use crate::latent::LatentGrid;
use crate::trainer::{guard_finite, CsvLog, TrainError};

pub const STAGE_NAME: &str = "vq";
/// Encoder downsampling factor (two stride-2 convs).
pub const DOWNSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqLossWeights {
    /// L1 reconstruction weight.
    pub rec: f64,
    /// Perceptual (random-feature) weight.
    pub perceptual: f64,
    /// Quantizer loss weight.
    pub vq: f64,
    /// Adversarial weight.
    pub gan: f64,
    /// 3D discriminator share inside the adversarial terms.
    pub alpha: f64,
    /// 2D slice discriminator share.
    pub beta: f64,
}

impl Default for VqLossWeights {
    fn default() -> Self {
        VqLossWeights {
            rec: 1.0,
            perceptual: 1.0,
            vq: 1.0,
            gan: 0.1,
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

impl VqLossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, v) in [
            ("rec", self.rec),
            ("perceptual", self.perceptual),
            ("vq", self.vq),
            ("gan", self.gan),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0) {
                return Err(TrainError::config(format!("loss weight {name} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressorConfig {
    pub volume_dims: (usize, usize, usize),
    /// Encoder/decoder channel widths (after the stem, before the bottleneck).
    pub channels: (usize, usize),
    pub n_z: usize,
    pub codebook_size: usize,
    pub lookup_mode: LookupMode,
    /// Compute the quantizer loss in z-score-normalized space.
    pub homogeneous_vq_loss: bool,
    /// Channels entering the voxel-shuffle tail (pre-shuffle count is 8x).
    pub sr_channels: usize,
    pub disc_channels: usize,
    pub loss: VqLossWeights,
    pub seed: u64,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Fraction of `iterations` before adversarial terms switch on.
    pub gan_warmup_frac: f64,
    pub perceptual_seed: u64,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        CompressorConfig {
            volume_dims: (32, 32, 32),
            channels: (8, 16),
            n_z: 8,
            codebook_size: 512,
            lookup_mode: LookupMode::Raw,
            homogeneous_vq_loss: true,
            sr_channels: 4,
            disc_channels: 6,
            loss: VqLossWeights::default(),
            seed: 0,
            lr: 2e-4,
            iterations: 500,
            batch_size: 1,
            gan_warmup_frac: 0.25,
            perceptual_seed: 77,
        }
    }
}

impl CompressorConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let (h, w, d) = self.volume_dims;
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || d % DOWNSAMPLE != 0 {
            return Err(TrainError::config(format!(
                "volume dims {:?} must be divisible by {DOWNSAMPLE}",
                self.volume_dims
            )));
        }
        if h < 8 || w < 8 || d < 8 {
            return Err(TrainError::config("volume dims must be >= 8"));
        }
        if self.n_z == 0 || self.codebook_size == 0 {
            return Err(TrainError::config("n_z and codebook_size must be > 0"));
        }
        if self.channels.0 == 0 || self.channels.1 == 0 || self.sr_channels == 0 {
            return Err(TrainError::config("channel widths must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.gan_warmup_frac) {
            return Err(TrainError::config("gan_warmup_frac must be in [0, 1]"));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(TrainError::config("batch_size and iterations must be > 0"));
        }
        self.loss.validate()
    }

    pub fn latent_dims(&self) -> (usize, usize, usize) {
        (
            self.volume_dims.0 / DOWNSAMPLE,
            self.volume_dims.1 / DOWNSAMPLE,
            self.volume_dims.2 / DOWNSAMPLE,
        )
    }

    fn gan_warmup_steps(&self) -> usize {
        (self.iterations as f64 * self.gan_warmup_frac).floor() as usize
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    w: usize,
    b: usize,
}

/// Parameter-slot map over a [`ParamStore`].
pub struct CompressorModel {
    pub cfg: CompressorConfig,
    enc: Vec<ConvSlot>,
    dec: Vec<ConvSlot>,
    d3: Vec<ConvSlot>,
    d2: Vec<ConvSlot>,
    codebook_slot: usize,
    perc_kernel: Tensor,
}

const K3: ConvCfg = ConvCfg { kernel: (3, 3, 3), stride: (1, 1, 1), pad: (1, 1, 1) };
const K3S2: ConvCfg = ConvCfg { kernel: (3, 3, 3), stride: (2, 2, 2), pad: (1, 1, 1) };
const K2D: ConvCfg = ConvCfg { kernel: (1, 3, 3), stride: (1, 1, 1), pad: (0, 1, 1) };
const K2DS2: ConvCfg = ConvCfg { kernel: (1, 3, 3), stride: (1, 2, 2), pad: (0, 1, 1) };

fn add_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_out: usize,
    c_in: usize,
    kernel: (usize, usize, usize),
) -> Result<ConvSlot, TrainError> {
    let w = store.add(format!("{name}.w"), init::conv_weight(rng, c_out, c_in, kernel))?;
    let b = store.add(format!("{name}.b"), Tensor::zeros(vec![c_out]))?;
    Ok(ConvSlot { w, b })
}

fn perceptual_kernel(seed: u64) -> Tensor {
    let net = PerceptualNet::new(seed);
    let c = net.channels();
    Tensor::new(vec![c, 1, 3, 3, 3], net.kernel().to_vec()).expect("kernel layout")
}

impl CompressorModel {
    /// Fresh parameters from the config seed. Draw order is part of the
    /// checkpoint contract.
    pub fn init(cfg: &CompressorConfig) -> Result<(Self, ParamStore), TrainError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (c1, c2) = cfg.channels;
        let n_z = cfg.n_z;

        let enc = vec![
            add_conv(&mut store, &mut rng, "enc.0", c1, 1, (3, 3, 3))?,
            add_conv(&mut store, &mut rng, "enc.1", c1, c1, (3, 3, 3))?,
            add_conv(&mut store, &mut rng, "enc.2", c2, c1, (3, 3, 3))?,
            add_conv(&mut store, &mut rng, "enc.3", c2, c2, (3, 3, 3))?,
            add_conv(&mut store, &mut rng, "enc.4", n_z, c2, (3, 3, 3))?,
        ];
        let sr = cfg.sr_channels;
        let dec = vec![
            add_conv(&mut store, &mut rng, "dec.0", c2, n_z, (3, 3, 3))?,
            add_conv(&mut store, &mut rng, "dec.1", c1, c2, (3, 3, 3))?,
            add_conv(&mut store, &mut rng, "dec.sr0", sr * 8, c1, (3, 3, 3))?,
            add_conv(&mut store, &mut rng, "dec.sr1", 1, sr, (3, 3, 3))?,
        ];
        let dc = cfg.disc_channels;
        let d3 = vec![
            add_conv(&mut store, &mut rng, "d3.0", dc, 1, (3, 3, 3))?,
            add_conv(&mut store, &mut rng, "d3.1", 2 * dc, dc, (3, 3, 3))?,
            add_conv(&mut store, &mut rng, "d3.2", 1, 2 * dc, (3, 3, 3))?,
        ];
        let d2 = vec![
            add_conv(&mut store, &mut rng, "d2.0", dc, 1, (1, 3, 3))?,
            add_conv(&mut store, &mut rng, "d2.1", 2 * dc, dc, (1, 3, 3))?,
            add_conv(&mut store, &mut rng, "d2.2", 1, 2 * dc, (1, 3, 3))?,
        ];
        let cb = Codebook::init_uniform(cfg.codebook_size, n_z, cfg.seed)?;
        let codebook_slot = store.add(
            "codebook",
            Tensor::new(vec![cfg.codebook_size, n_z], cb.entries)?,
        )?;

        Ok((
            CompressorModel {
                cfg: cfg.clone(),
                enc,
                dec,
                d3,
                d2,
                codebook_slot,
                perc_kernel: perceptual_kernel(cfg.perceptual_seed),
            },
            store,
        ))
    }

    /// Resolve slots against an existing (checkpoint-loaded) store.
    pub fn from_store(cfg: &CompressorConfig, store: &ParamStore) -> Result<Self, TrainError> {
        cfg.validate()?;
        let slot = |name: &str| -> Result<ConvSlot, TrainError> {
            Ok(ConvSlot {
                w: store.index_of(&format!("{name}.w"))?,
                b: store.index_of(&format!("{name}.b"))?,
            })
        };
        Ok(CompressorModel {
            cfg: cfg.clone(),
            enc: ["enc.0", "enc.1", "enc.2", "enc.3", "enc.4"]
                .iter()
                .map(|n| slot(n))
                .collect::<Result<_, _>>()?,
            dec: ["dec.0", "dec.1", "dec.sr0", "dec.sr1"]
                .iter()
                .map(|n| slot(n))
                .collect::<Result<_, _>>()?,
            d3: ["d3.0", "d3.1", "d3.2"]
                .iter()
                .map(|n| slot(n))
                .collect::<Result<_, _>>()?,
            d2: ["d2.0", "d2.1", "d2.2"]
                .iter()
                .map(|n| slot(n))
                .collect::<Result<_, _>>()?,
            codebook_slot: store.index_of("codebook")?,
            perc_kernel: perceptual_kernel(cfg.perceptual_seed),
        })
    }

    /// Rebuild model and codebook from a stage-1 checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Codebook), TrainError> {
        if ckpt.stage != STAGE_NAME {
            return Err(TrainError::config(format!(
                "expected a {STAGE_NAME} checkpoint, found stage {}",
                ckpt.stage
            )));
        }
        let cfg: CompressorConfig = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| TrainError::config(format!("bad compressor config: {e}")))?;
        let model = CompressorModel::from_store(&cfg, &ckpt.store)?;
        let block = ckpt
            .codebook
            .as_ref()
            .ok_or_else(|| TrainError::config("checkpoint lacks a codebook block"))?;
        let mut cb = Codebook::new(block.n, block.n_z, block.entries.clone())?;
        cb.usage = block.usage.clone();
        Ok((model, cb))
    }

    pub fn codebook_slot(&self) -> usize {
        self.codebook_slot
    }

    fn conv_act(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        trainable: bool,
        x: NodeId,
        slot: ConvSlot,
        cfg: ConvCfg,
        silu: bool,
    ) -> NodeId {
        let (w, b) = if trainable {
            (g.param(store, slot.w), g.param(store, slot.b))
        } else {
            (g.frozen(store, slot.w), g.frozen(store, slot.b))
        };
        let y = g.conv3d(x, w, Some(b), cfg);
        if silu {
            g.silu(y)
        } else {
            y
        }
    }

    /// Encoder graph: `[1, D, H, W] -> [n_z, D/4, H/4, W/4]`.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        trainable: bool,
        x: NodeId,
    ) -> NodeId {
        let t = self.conv_act(g, store, trainable, x, self.enc[0], K3, true);
        let t = self.conv_act(g, store, trainable, t, self.enc[1], K3S2, true);
        let t = self.conv_act(g, store, trainable, t, self.enc[2], K3, true);
        let t = self.conv_act(g, store, trainable, t, self.enc[3], K3S2, true);
        self.conv_act(g, store, trainable, t, self.enc[4], K3, false)
    }

    /// Decoder graph: `[n_z, d, h, w] -> [1, 4d, 4h, 4w]`, clamped to [-1, 1].
    /// The final x2 upsampling comes from the voxel-shuffle tail.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        trainable: bool,
        zq: NodeId,
    ) -> NodeId {
        let t = self.conv_act(g, store, trainable, zq, self.dec[0], K3, true);
        let t = g.upsample_nearest(t, (2, 2, 2));
        let t = self.conv_act(g, store, trainable, t, self.dec[1], K3, true);
        let t = self.conv_act(g, store, trainable, t, self.dec[2], K3, false);
        let t = g.voxel_shuffle(t, 2);
        let t = g.silu(t);
        let t = self.conv_act(g, store, trainable, t, self.dec[3], K3, false);
        g.clamp(t, -1.0, 1.0)
    }

    /// Volume discriminator: `[1, D, H, W] -> scalar in (0, 1)`.
    pub fn d3_graph(&self, g: &mut Graph, store: &ParamStore, trainable: bool, x: NodeId) -> NodeId {
        let t = self.conv_act(g, store, trainable, x, self.d3[0], K3S2, false);
        let t = g.leaky_relu(t, 0.2);
        let t = self.conv_act(g, store, trainable, t, self.d3[1], K3S2, false);
        let t = g.leaky_relu(t, 0.2);
        let t = self.conv_act(g, store, trainable, t, self.d3[2], K3, false);
        let logit = g.mean_all(t);
        g.sigmoid(logit)
    }

    /// Slice discriminator on a coronal slice `[1, 1, H, W] -> (0, 1)`.
    pub fn d2_graph(&self, g: &mut Graph, store: &ParamStore, trainable: bool, x: NodeId) -> NodeId {
        let t = self.conv_act(g, store, trainable, x, self.d2[0], K2DS2, false);
        let t = g.leaky_relu(t, 0.2);
        let t = self.conv_act(g, store, trainable, t, self.d2[1], K2DS2, false);
        let t = g.leaky_relu(t, 0.2);
        let t = self.conv_act(g, store, trainable, t, self.d2[2], K2D, false);
        let logit = g.mean_all(t);
        g.sigmoid(logit)
    }

    /// Random-feature perceptual distance between two volumes, in-graph:
    /// unit-normalized conv features compared at up to three scales.
    pub fn perceptual_graph(&self, g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
        let kernel = g.input(self.perc_kernel.clone());
        let mut xa = a;
        let mut xb = b;
        let mut total: Option<NodeId> = None;
        for scale in 0..3 {
            let dims = g.value(xa).shape().to_vec();
            if dims[1] < 3 || dims[2] < 3 || dims[3] < 3 {
                break;
            }
            let fa = g.conv3d(xa, kernel, None, K3);
            let fa = g.unit_norm_channels(fa);
            let fb = g.conv3d(xb, kernel, None, K3);
            let fb = g.unit_norm_channels(fb);
            let d = g.mse_loss(fa, fb);
            total = Some(match total {
                None => d,
                Some(t) => g.add(t, d),
            });
            if scale < 2 && dims[1] % 2 == 0 && dims[2] % 2 == 0 && dims[3] % 2 == 0 {
                xa = g.avg_pool(xa, (2, 2, 2));
                xb = g.avg_pool(xb, (2, 2, 2));
            } else if scale < 2 {
                break;
            }
        }
        total.expect("at least one perceptual scale")
    }

    // ---- inference ----

    /// Encode a normalized volume into a continuous latent grid.
    pub fn encode(&self, store: &ParamStore, v: &Volume) -> Result<LatentGrid, TrainError> {
        if v.unit() != Unit::Normalized {
            return Err(TrainError::config("encode expects a normalized volume"));
        }
        let (h, w, d) = v.dims();
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || d % DOWNSAMPLE != 0 {
            return Err(TrainError::config(format!(
                "volume dims {:?} not divisible by {DOWNSAMPLE}",
                v.dims()
            )));
        }
        let mut g = Graph::new();
        let x = g.input(volume_to_tensor(v));
        let z = self.encode_graph(&mut g, store, false, x);
        let sites = g.grid_to_sites(z);
        LatentGrid::from_sites_tensor(
            (h / DOWNSAMPLE, w / DOWNSAMPLE, d / DOWNSAMPLE),
            g.value(sites),
            None,
        )
    }

    /// Decode a quantized latent grid back to a normalized volume.
    pub fn decode(&self, store: &ParamStore, zq: &LatentGrid) -> Result<Volume, TrainError> {
        if !zq.quantized() {
            return Err(TrainError::config("decode expects a quantized latent"));
        }
        if zq.n_z != self.cfg.n_z {
            return Err(TrainError::shape(format!(
                "latent channels {} do not match model n_z {}",
                zq.n_z, self.cfg.n_z
            )));
        }
        let mut g = Graph::new();
        let sites = g.input(zq.to_sites_tensor());
        let grid = g.sites_to_grid(sites, zq.n_z, zq.dims);
        let out = self.decode_graph(&mut g, store, false, grid);
        tensor_to_volume(g.value(out))
    }

    /// Full discriminator objective (the quantity the discriminator ascends):
    /// `alpha*[ln D3(x) + ln(1 - D3(xhat))] + beta*[ln D2(x_k) + ln(1 - D2(xhat_k))]`
    /// with log arguments clamped at 1e-7.
    pub fn gan_objective(
        &self,
        store: &ParamStore,
        x: &Volume,
        xhat: &Volume,
        slice_k: usize,
    ) -> Result<f64, TrainError> {
        if x.dims() != xhat.dims() {
            return Err(TrainError::shape("gan inputs differ in dims"));
        }
        if slice_k >= x.dims().2 {
            return Err(TrainError::config(format!(
                "slice index {slice_k} out of range"
            )));
        }
        let mut g = Graph::new();
        let xn = g.input(volume_to_tensor(x));
        let xh = g.input(volume_to_tensor(xhat));
        let obj = self.gan_objective_graph(&mut g, store, false, xn, xh, slice_k);
        Ok(g.scalar(obj))
    }

    fn gan_objective_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        trainable_disc: bool,
        x: NodeId,
        xhat: NodeId,
        slice_k: usize,
    ) -> NodeId {
        let d3_real = self.d3_graph(g, store, trainable_disc, x);
        let d3_fake = self.d3_graph(g, store, trainable_disc, xhat);
        let xk = g.slice_depth(x, slice_k);
        let xhk = g.slice_depth(xhat, slice_k);
        let d2_real = self.d2_graph(g, store, trainable_disc, xk);
        let d2_fake = self.d2_graph(g, store, trainable_disc, xhk);
        let term3 = log_pair(g, d3_real, d3_fake);
        let term2 = log_pair(g, d2_real, d2_fake);
        let term3 = g.scale(term3, self.cfg.loss.alpha);
        let term2 = g.scale(term2, self.cfg.loss.beta);
        g.add(term3, term2)
    }
}

/// `ln(real) + ln(1 - fake)`, log arguments clamped at 1e-7.
fn log_pair(g: &mut Graph, real: NodeId, fake: NodeId) -> NodeId {
    let r = g.clamp(real, 1e-7, 1.0);
    let lr = g.ln(r);
    let inv = g.scale(fake, -1.0);
    let inv = g.add_scalar(inv, 1.0);
    let inv = g.clamp(inv, 1e-7, 1.0);
    let lf = g.ln(inv);
    g.add(lr, lf)
}

/// Volume (i-fastest) -> `[1, D, H, W]` tensor.
pub fn volume_to_tensor(v: &Volume) -> Tensor {
    let (h, w, d) = v.dims();
    let mut data = vec![0.0f64; h * w * d];
    for k in 0..d {
        for i in 0..h {
            for j in 0..w {
                data[(k * h + i) * w + j] = v.at(i, j, k) as f64;
            }
        }
    }
    Tensor::new(vec![1, d, h, w], data).expect("consistent")
}

/// `[1, D, H, W]` tensor -> normalized volume with unit spacing metadata.
pub fn tensor_to_volume(t: &Tensor) -> Result<Volume, TrainError> {
    let (d, h, w) = match *t.shape() {
        [1, d, h, w] => (d, h, w),
        _ => return Err(TrainError::shape("expected [1, D, H, W] tensor")),
    };
    let td = t.data();
    let mut values = vec![0.0f32; h * w * d];
    for k in 0..d {
        for i in 0..h {
            for j in 0..w {
                values[i + h * (j + w * k)] =
                    (td[(k * h + i) * w + j] as f32).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(Volume::new((h, w, d), (1.0, 1.0, 1.0), Unit::Normalized, values)?)
}

/// Per-step loss values for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub rec: f64,
    pub perceptual: f64,
    pub vq: f64,
    pub gan_g: f64,
    pub disc: f64,
    pub total: f64,
}

/// One generator forward pass with every loss term, built on `g`.
/// Returns (loss node, term values, per-site indices, xhat node).
fn generator_losses(
    model: &CompressorModel,
    g: &mut Graph,
    store: &ParamStore,
    x_t: Tensor,
    slice_k: usize,
    gan_on: bool,
) -> (NodeId, LossBreakdown, Vec<usize>, NodeId) {
    let cfg = &model.cfg;
    let x = g.input(x_t);
    let z = model.encode_graph(g, store, true, x);
    let sites = g.grid_to_sites(z);

    let cb_value = store.value(model.codebook_slot);
    let cb = Codebook {
        n: cfg.codebook_size,
        n_z: cfg.n_z,
        entries: cb_value.data().to_vec(),
        usage: Vec::new(),
    };
    let indices = cb.assign_batch(g.value(sites).data(), cfg.lookup_mode);

    let cbn = g.param(store, model.codebook_slot);
    let zq_sites = g.gather_rows(cbn, indices.clone());
    let s_count = indices.len() as f64;
    let eps = crate::codebook::STANDARDIZE_EPS;

    // Gathered entries in homogeneous coordinates: standardized by the whole
    // table's statistics, so every entry receives gradient through the
    // shared mean/std, not only the selected rows.
    let table_standardized = |g: &mut Graph, rows: NodeId| {
        let mu = g.mean_all(cbn);
        let neg = g.scale(mu, -1.0);
        let centered_t = g.add_bscalar(cbn, neg);
        let sq = g.mul(centered_t, centered_t);
        let var = g.mean_all(sq);
        let std = g.sqrt(var);
        let denom = g.add_scalar(std, eps);
        let inv = g.recip(denom);
        let centered = g.add_bscalar(rows, neg);
        g.mul_bscalar(centered, inv)
    };

    // Two-term quantizer loss; sg placement decides which side trains.
    let l_vq = if cfg.homogeneous_vq_loss {
        let zq_n = table_standardized(g, zq_sites);
        let z_det = g.detach(sites);
        let zn_det = g.standardize_all(z_det, eps);
        let d1 = g.sub(zn_det, zq_n);
        let d1 = g.mul(d1, d1);
        let t1 = g.sum_all(d1);
        let t1 = g.scale(t1, 1.0 / s_count);

        let zq_det = g.detach(zq_n);
        let zn = g.standardize_all(sites, eps);
        let d2 = g.sub(zq_det, zn);
        let d2 = g.mul(d2, d2);
        let t2 = g.sum_all(d2);
        let t2 = g.scale(t2, 1.0 / s_count);
        g.add(t1, t2)
    } else {
        let z_det = g.detach(sites);
        let d1 = g.sub(z_det, zq_sites);
        let d1 = g.mul(d1, d1);
        let t1 = g.sum_all(d1);
        let t1 = g.scale(t1, 1.0 / s_count);

        let q_det = g.detach(zq_sites);
        let d2 = g.sub(q_det, sites);
        let d2 = g.mul(d2, d2);
        let t2 = g.sum_all(d2);
        let t2 = g.scale(t2, 1.0 / s_count);
        g.add(t1, t2)
    };

    // Decoder input follows the lookup convention: raw entries in Raw mode,
    // table-standardized entries in Normalized (homogeneous) mode.
    // Straight-through gradients reach the encoder through the matching
    // view of `sites`.
    let st = match cfg.lookup_mode {
        LookupMode::Raw => g.straight_through(sites, zq_sites),
        LookupMode::Normalized => {
            let zn = g.standardize_all(sites, eps);
            let qn = table_standardized(g, zq_sites);
            g.straight_through(zn, qn)
        }
    };
    let latent_dims = (
        g.value(z).shape()[2],
        g.value(z).shape()[3],
        g.value(z).shape()[1],
    );
    let zq_grid = g.sites_to_grid(st, cfg.n_z, latent_dims);
    let xhat = model.decode_graph(g, store, true, zq_grid);

    let l_rec = g.l1_loss(xhat, x);
    let l_perc = model.perceptual_graph(g, x, xhat);

    let (l_gan, gan_value) = if gan_on && cfg.loss.gan > 0.0 {
        // Non-saturating generator terms against frozen discriminators.
        let d3f = model.d3_graph(g, store, false, xhat);
        let d3f = g.clamp(d3f, 1e-7, 1.0);
        let l3 = g.ln(d3f);
        let xhk = g.slice_depth(xhat, slice_k);
        let d2f = model.d2_graph(g, store, false, xhk);
        let d2f = g.clamp(d2f, 1e-7, 1.0);
        let l2 = g.ln(d2f);
        let l3 = g.scale(l3, -cfg.loss.alpha);
        let l2 = g.scale(l2, -cfg.loss.beta);
        let lg = g.add(l3, l2);
        let v = g.scalar(lg);
        (Some(lg), v)
    } else {
        (None, 0.0)
    };

    let rec_w = g.scale(l_rec, cfg.loss.rec);
    let perc_w = g.scale(l_perc, cfg.loss.perceptual);
    let vq_w = g.scale(l_vq, cfg.loss.vq);
    let mut total = g.add(rec_w, perc_w);
    total = g.add(total, vq_w);
    if let Some(lg) = l_gan {
        let gan_w = g.scale(lg, cfg.loss.gan);
        total = g.add(total, gan_w);
    }

    let breakdown = LossBreakdown {
        rec: g.scalar(l_rec),
        perceptual: g.scalar(l_perc),
        vq: g.scalar(l_vq),
        gan_g: gan_value,
        disc: 0.0,
        total: g.scalar(total),
    };
    (total, breakdown, indices, xhat)
}

/// Composite autoencoder objective for one (x, xhat-from-x) pass, by value.
/// Returns the weighted total and the term breakdown.
pub fn vqgan_loss(
    model: &CompressorModel,
    store: &ParamStore,
    x: &Volume,
    slice_k: usize,
    gan_on: bool,
) -> Result<LossBreakdown, TrainError> {
    let mut g = Graph::new();
    let (_, breakdown, _, _) = generator_losses(model, &mut g, store, volume_to_tensor(x), slice_k, gan_on);
    Ok(breakdown)
}

/// Train the compressor. `volumes` must hold at least two normalized volumes
/// of the configured dims. Resumes bit-exactly from `resume`.
pub fn train_compressor(
    volumes: &[Volume],
    cfg: &CompressorConfig,
    resume: Option<Checkpoint>,
    log_out: Option<&mut dyn Write>,
) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    if volumes.len() < 2 {
        return Err(TrainError::config("need at least 2 training volumes"));
    }
    for v in volumes {
        if v.dims() != cfg.volume_dims {
            return Err(TrainError::shape(format!(
                "training volume dims {:?} != configured {:?}",
                v.dims(),
                cfg.volume_dims
            )));
        }
        if v.unit() != Unit::Normalized {
            return Err(TrainError::config("training volumes must be normalized"));
        }
    }
    let cfg_json = serde_json::to_string(cfg).expect("config serializes");

    let (model, mut store, mut usage, mut rng, start) = match resume {
        None => {
            let (model, store) = CompressorModel::init(cfg)?;
            let usage = vec![0u64; cfg.codebook_size];
            let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x747261696e); // training stream
            (model, store, usage, rng, 0usize)
        }
        Some(ckpt) => {
            if ckpt.stage != STAGE_NAME {
                return Err(TrainError::config("resume checkpoint is not stage vq"));
            }
            if ckpt.config_json != cfg_json {
                return Err(TrainError::config(
                    "resume checkpoint was trained with a different config",
                ));
            }
            let model = CompressorModel::from_store(cfg, &ckpt.store)?;
            let usage = ckpt
                .codebook
                .as_ref()
                .map(|b| b.usage.clone())
                .unwrap_or_else(|| vec![0; cfg.codebook_size]);
            let rng = ckpt
                .rng
                .as_ref()
                .ok_or_else(|| TrainError::config("checkpoint lacks RNG state"))?
                .restore();
            (model, ckpt.store, usage, rng, ckpt.iteration as usize)
        }
    };

    let warmup = cfg.gan_warmup_steps();
    let gen_adam = AdamConfig::gan(cfg.lr);
    let disc_adam = AdamConfig::gan(cfg.lr);
    let mut log = CsvLog::new(log_out);
    let header = "step,l_rec,l_perceptual,l_vq,l_gan_g,l_disc,slice_k,codebook_usage";

    let volume_tensors: Vec<Tensor> = volumes.iter().map(volume_to_tensor).collect();
    let (_, _, dz) = cfg.latent_dims();
    let _ = dz;

    for step in start..cfg.iterations {
        let gan_on = step >= warmup;
        let mut merged = Grads::new();
        let mut sum = LossBreakdown {
            rec: 0.0,
            perceptual: 0.0,
            vq: 0.0,
            gan_g: 0.0,
            disc: 0.0,
            total: 0.0,
        };
        let mut fakes: Vec<(usize, Tensor, usize)> = Vec::new(); // (vol idx, xhat, slice)
        let mut last_k = 0usize;
        for _ in 0..cfg.batch_size {
            let vi = rng.gen_range(0..volumes.len());
            let k = rng.gen_range(0..cfg.volume_dims.2);
            last_k = k;
            let mut g = Graph::new();
            let (loss, terms, indices, xhat) =
                generator_losses(&model, &mut g, &store, volume_tensors[vi].clone(), k, gan_on);
            guard_finite(
                &[
                    ("l_rec", terms.rec),
                    ("l_perceptual", terms.perceptual),
                    ("l_vq", terms.vq),
                    ("l_gan_g", terms.gan_g),
                ],
                step,
            )?;
            let grads = g.backward(loss);
            merged.merge(&grads);
            for (acc, v) in [
                (&mut sum.rec, terms.rec),
                (&mut sum.perceptual, terms.perceptual),
                (&mut sum.vq, terms.vq),
                (&mut sum.gan_g, terms.gan_g),
                (&mut sum.total, terms.total),
            ] {
                *acc += v;
            }
            for &i in &indices {
                usage[i] += 1;
            }
            fakes.push((vi, g.value(xhat).clone(), k));
        }
        let inv_b = 1.0 / cfg.batch_size as f64;
        merged.scale(inv_b);
        adam::step_with_t(&mut store, &merged, &gen_adam, (step + 1) as u64);

        if gan_on && cfg.loss.gan > 0.0 {
            let mut d_merged = Grads::new();
            let mut d_sum = 0.0;
            for (vi, xhat, k) in &fakes {
                let mut g = Graph::new();
                let x = g.input(volume_tensors[*vi].clone());
                let xh = g.input(xhat.clone());
                let obj = model.gan_objective_graph(&mut g, &store, true, x, xh, *k);
                let loss_d = g.scale(obj, -1.0);
                let value = g.scalar(loss_d);
                guard_finite(&[("l_disc", value)], step)?;
                d_sum += value;
                let grads = g.backward(loss_d);
                d_merged.merge(&grads);
            }
            d_merged.scale(inv_b);
            adam::step_with_t(
                &mut store,
                &d_merged,
                &disc_adam,
                (step + 1 - warmup) as u64,
            );
            sum.disc = d_sum;
        }

        let used = usage.iter().filter(|&&u| u > 0).count() as f64 / cfg.codebook_size as f64;
        log.row(
            header,
            format_args!(
                "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{:.4}",
                step,
                sum.rec * inv_b,
                sum.perceptual * inv_b,
                sum.vq * inv_b,
                sum.gan_g * inv_b,
                sum.disc * inv_b,
                last_k,
                used
            ),
        )?;
        if step % 100 == 0 {
            log::info!(
                "vq step {step}: rec {:.4} vq {:.4} usage {:.2}%",
                sum.rec * inv_b,
                sum.vq * inv_b,
                used * 100.0
            );
        }
    }

    let entries = store.value(store.index_of("codebook")?).data().to_vec();
    Ok(Checkpoint {
        stage: STAGE_NAME.into(),
        config_json: cfg_json,
        iteration: cfg.iterations as u64,
        rng: Some(RngState::capture(&rng)),
        store,
        codebook: Some(CodebookBlock {
            n: cfg.codebook_size,
            n_z: cfg.n_z,
            entries,
            usage,
        }),
    })
}

/// Usage telemetry pass: reset counters, quantize every volume's latent, and
/// report the fraction of entries touched.
pub fn evaluate_usage(
    model: &CompressorModel,
    store: &ParamStore,
    cb: &mut Codebook,
    volumes: &[Volume],
) -> Result<f64, TrainError> {
    cb.reset_usage();
    for v in volumes {
        let z = model.encode(store, v)?;
        let indices = cb.assign_batch(&z.values, model.cfg.lookup_mode);
        cb.record_usage(&indices);
    }
    Ok(cb.usage_fraction())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> CompressorConfig {
        CompressorConfig {
            volume_dims: (8, 8, 8),
            channels: (3, 4),
            n_z: 4,
            codebook_size: 16,
            sr_channels: 2,
            disc_channels: 2,
            iterations: 4,
            ..CompressorConfig::default()
        }
    }

    fn norm_volume(dims: (usize, usize, usize), seed: u64) -> Volume {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2;
        let vals = (0..n).map(|_| rng.gen_range(-0.9..0.9)).collect();
        Volume::new(dims, (1.0, 1.0, 1.0), Unit::Normalized, vals).unwrap()
    }

    #[test]
    fn encode_decode_shape_contracts() {
        let cfg = tiny_cfg();
        let (model, store) = CompressorModel::init(&cfg).unwrap();
        let v = norm_volume((8, 8, 8), 1);
        let z = model.encode(&store, &v).unwrap();
        assert_eq!(z.dims, (2, 2, 2));
        assert_eq!(z.n_z, 4);

        let mut cb = Codebook::init_uniform(16, 4, 9).unwrap();
        let (zq, _) = crate::codebook::quantize(&z, &mut cb, LookupMode::Raw, true).unwrap();
        let out = model.decode(&store, &zq).unwrap();
        assert_eq!(out.dims(), (8, 8, 8));
        assert_eq!(out.unit(), Unit::Normalized);
    }

    #[test]
    fn encode_rejects_indivisible_dims_and_wrong_unit() {
        let cfg = tiny_cfg();
        let (model, store) = CompressorModel::init(&cfg).unwrap();
        let bad = Volume::filled((6, 8, 8), (1.0, 1.0, 1.0), Unit::Normalized, 0.0).unwrap();
        assert!(model.encode(&store, &bad).is_err());
        let hu = Volume::filled((8, 8, 8), (1.0, 1.0, 1.0), Unit::Hu, 0.0).unwrap();
        assert!(model.encode(&store, &hu).is_err());
    }

    #[test]
    fn zero_weights_give_zero_latent_and_bias_output() {
        let cfg = tiny_cfg();
        let (model, mut store) = CompressorModel::init(&cfg).unwrap();
        for i in 0..store.len() {
            store.get_mut(i).value.data_mut().fill(0.0);
        }
        let v = norm_volume((8, 8, 8), 2);
        let z = model.encode(&store, &v).unwrap();
        assert!(z.values.iter().all(|&x| x == 0.0));

        // Set only the final decoder bias; the output must be that constant.
        let b = store.index_of("dec.sr1.b").unwrap();
        store.get_mut(b).value.data_mut()[0] = 0.37;
        let zq = LatentGrid::new((2, 2, 2), 4, vec![0.0; 32], Some(vec![0; 8])).unwrap();
        let out = model.decode(&store, &zq).unwrap();
        for &x in out.values() {
            assert!((x - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn gan_objective_closed_form_at_half() {
        // Zeroed discriminators output sigmoid(0) = 0.5 everywhere; with
        // alpha = beta = 1 the objective is 4*ln(0.5).
        let mut cfg = tiny_cfg();
        cfg.loss.alpha = 1.0;
        cfg.loss.beta = 1.0;
        let (model, mut store) = CompressorModel::init(&cfg).unwrap();
        for name in ["d3.0", "d3.1", "d3.2", "d2.0", "d2.1", "d2.2"] {
            for suffix in [".w", ".b"] {
                let idx = store.index_of(&format!("{name}{suffix}")).unwrap();
                store.get_mut(idx).value.data_mut().fill(0.0);
            }
        }
        let x = norm_volume((8, 8, 8), 3);
        let xh = norm_volume((8, 8, 8), 4);
        let got = model.gan_objective(&store, &x, &xh, 2).unwrap();
        let expect = 4.0 * 0.5f64.ln();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");

        // alpha = beta = 0 switches the objective off entirely.
        let mut cfg0 = tiny_cfg();
        cfg0.loss.alpha = 0.0;
        cfg0.loss.beta = 0.0;
        let model0 = CompressorModel::from_store(&cfg0, &store).unwrap();
        assert_eq!(model0.gan_objective(&store, &x, &xh, 2).unwrap(), 0.0);

        assert!(model.gan_objective(&store, &x, &xh, 99).is_err());
    }

    #[test]
    fn vq_loss_terms_zero_on_identity() {
        // xhat = x and z already a codebook entry: rec and vq terms vanish.
        let cfg = tiny_cfg();
        let (model, store) = CompressorModel::init(&cfg).unwrap();
        let mut g = Graph::new();
        let v = norm_volume((8, 8, 8), 5);
        let x = g.input(volume_to_tensor(&v));
        let same = g.input(volume_to_tensor(&v));
        let l_rec = g.l1_loss(x, same);
        assert_eq!(g.scalar(l_rec), 0.0);

        // quantize a grid whose rows are exact codebook entries
        let cb_t = store.value(model.codebook_slot);
        let mut vals = Vec::new();
        for s in 0..8 {
            vals.extend_from_slice(&cb_t.data()[s * 4..(s + 1) * 4]);
        }
        let z = LatentGrid::new((2, 2, 2), 4, vals, None).unwrap();
        let mut cb = Codebook::new(16, 4, cb_t.data().to_vec()).unwrap();
        let (zq, loss) = crate::codebook::quantize(&z, &mut cb, LookupMode::Raw, false).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(zq.values, z.values);
    }

    #[test]
    fn trainer_rejects_bad_datasets() {
        let cfg = tiny_cfg();
        let v = norm_volume((8, 8, 8), 6);
        assert!(matches!(
            train_compressor(&[v.clone()], &cfg, None, None),
            Err(TrainError::Config(_))
        ));
        let wrong = norm_volume((8, 8, 16), 7);
        assert!(train_compressor(&[v, wrong], &cfg, None, None).is_err());
    }

    #[test]
    fn nan_guard_names_the_term() {
        let err = guard_finite(&[("l_rec", 1.0), ("l_vq", f64::NAN)], 7).unwrap_err();
        match err {
            TrainError::NumericalAbort { term, step } => {
                assert_eq!(term, "l_vq");
                assert_eq!(step, 7);
            }
            other => panic!("unexpected error {other}"),
        }
    }
}
