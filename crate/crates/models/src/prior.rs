//! The progressive radiograph-to-latent prior encoder.
//!
//! A 2D feature stack reduces the radiograph to the latent's (h, w) plane,
//! one shared MLP expands each pixel's feature vector into a full depth
//! column (no information crosses (i, j) inside the MLP), 3D convolutions
//! refine the assembled rough volume, and the result is quantized against
//! the frozen compressor codebook and z-score normalized into tokens.
//!
//! Training matches the refined continuous prediction to the frozen
//! encoder's latent (MSE) plus a code-index cross-entropy on distance
//! logits; index accuracy is reported per step.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use xct_core::projector::Radiograph;
use xct_nn::checkpoint::{Checkpoint, RngState};
use xct_nn::graph::{ConvCfg, Graph};
use xct_nn::{adam, init, AdamConfig, Grads, NodeId, ParamStore, Tensor};

use crate::codebook::{Codebook, LookupMode};
use crate::latent::PriorTokens;
use crate::trainer::{guard_finite, CsvLog, TrainError};

pub const STAGE_NAME: &str = "prior";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub radiograph_dims: (usize, usize),
    /// Latent grid (h, w, d) this encoder targets.
    pub latent_dims: (usize, usize, usize),
    pub n_z: usize,
    /// Channels produced by the 2D stack / consumed by the column MLP.
    pub feature_channels: usize,
    /// 0 = single 1x1 conv (receptive field 1, radiograph already at (h, w));
    /// 2 = two stride-2 3x3 convs (radiograph at (4h, 4w)).
    pub stack_depth: usize,
    pub mlp_hidden: usize,
    pub lookup_mode: LookupMode,
    /// Weight of the code-index cross-entropy term.
    pub ce_weight: f64,
    pub seed: u64,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            radiograph_dims: (32, 32),
            latent_dims: (8, 8, 8),
            n_z: 8,
            feature_channels: 16,
            stack_depth: 2,
            mlp_hidden: 48,
            lookup_mode: LookupMode::Raw,
            ce_weight: 0.5,
            seed: 0,
            lr: 1e-4,
            iterations: 500,
            batch_size: 4,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let (h, w, d) = self.latent_dims;
        if h == 0 || w == 0 || d == 0 || self.n_z == 0 {
            return Err(TrainError::config("latent dims and n_z must be > 0"));
        }
        let expect = match self.stack_depth {
            0 => (h, w),
            2 => (4 * h, 4 * w),
            other => {
                return Err(TrainError::config(format!(
                    "stack_depth must be 0 or 2, got {other}"
                )))
            }
        };
        if self.radiograph_dims != expect {
            return Err(TrainError::config(format!(
                "radiograph dims {:?} incompatible with latent {:?} at stack depth {}",
                self.radiograph_dims, self.latent_dims, self.stack_depth
            )));
        }
        if self.feature_channels == 0 || self.mlp_hidden == 0 {
            return Err(TrainError::config("channel widths must be > 0"));
        }
        if !(self.ce_weight >= 0.0) {
            return Err(TrainError::config("ce_weight must be >= 0"));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(TrainError::config("batch_size and iterations must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct LinearSlot {
    w: usize,
    b: usize,
}

pub struct PriorModel {
    pub cfg: PriorConfig,
    stack: Vec<ConvSlot>,
    mlp0: LinearSlot,
    mlp1: LinearSlot,
    refine0: ConvSlot,
    refine1: ConvSlot,
}

const K2DS2: ConvCfg = ConvCfg { kernel: (1, 3, 3), stride: (1, 2, 2), pad: (0, 1, 1) };
const K1X1: ConvCfg = ConvCfg { kernel: (1, 1, 1), stride: (1, 1, 1), pad: (0, 0, 0) };
const K3: ConvCfg = ConvCfg { kernel: (3, 3, 3), stride: (1, 1, 1), pad: (1, 1, 1) };

impl PriorModel {
    pub fn init(cfg: &PriorConfig) -> Result<(Self, ParamStore), TrainError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let c = cfg.feature_channels;
        let (_, _, d) = cfg.latent_dims;

        let mut stack = Vec::new();
        match cfg.stack_depth {
            0 => {
                let w = store.add("pe.s0.w", init::conv_weight(&mut rng, c, 1, (1, 1, 1)))?;
                let b = store.add("pe.s0.b", Tensor::zeros(vec![c]))?;
                stack.push(ConvSlot { w, b });
            }
            2 => {
                let w = store.add("pe.s0.w", init::conv_weight(&mut rng, c, 1, (1, 3, 3)))?;
                let b = store.add("pe.s0.b", Tensor::zeros(vec![c]))?;
                stack.push(ConvSlot { w, b });
                let w = store.add("pe.s1.w", init::conv_weight(&mut rng, c, c, (1, 3, 3)))?;
                let b = store.add("pe.s1.b", Tensor::zeros(vec![c]))?;
                stack.push(ConvSlot { w, b });
            }
            _ => unreachable!("validated"),
        }

        let mlp0 = LinearSlot {
            w: store.add("pe.mlp0.w", init::linear_weight(&mut rng, cfg.mlp_hidden, c))?,
            b: store.add("pe.mlp0.b", Tensor::zeros(vec![cfg.mlp_hidden]))?,
        };
        let mlp1 = LinearSlot {
            w: store.add(
                "pe.mlp1.w",
                init::linear_weight(&mut rng, d * c, cfg.mlp_hidden),
            )?,
            b: store.add("pe.mlp1.b", Tensor::zeros(vec![d * c]))?,
        };
        let refine0 = ConvSlot {
            w: store.add("pe.r0.w", init::conv_weight(&mut rng, c, c, (3, 3, 3)))?,
            b: store.add("pe.r0.b", Tensor::zeros(vec![c]))?,
        };
        let refine1 = ConvSlot {
            w: store.add("pe.r1.w", init::conv_weight(&mut rng, cfg.n_z, c, (3, 3, 3)))?,
            b: store.add("pe.r1.b", Tensor::zeros(vec![cfg.n_z]))?,
        };

        Ok((
            PriorModel { cfg: cfg.clone(), stack, mlp0, mlp1, refine0, refine1 },
            store,
        ))
    }

    pub fn from_store(cfg: &PriorConfig, store: &ParamStore) -> Result<Self, TrainError> {
        cfg.validate()?;
        let conv = |name: &str| -> Result<ConvSlot, TrainError> {
            Ok(ConvSlot {
                w: store.index_of(&format!("{name}.w"))?,
                b: store.index_of(&format!("{name}.b"))?,
            })
        };
        let lin = |name: &str| -> Result<LinearSlot, TrainError> {
            Ok(LinearSlot {
                w: store.index_of(&format!("{name}.w"))?,
                b: store.index_of(&format!("{name}.b"))?,
            })
        };
        let mut stack = vec![conv("pe.s0")?];
        if cfg.stack_depth == 2 {
            stack.push(conv("pe.s1")?);
        }
        Ok(PriorModel {
            cfg: cfg.clone(),
            stack,
            mlp0: lin("pe.mlp0")?,
            mlp1: lin("pe.mlp1")?,
            refine0: conv("pe.r0")?,
            refine1: conv("pe.r1")?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        if ckpt.stage != STAGE_NAME {
            return Err(TrainError::config(format!(
                "expected a {STAGE_NAME} checkpoint, found stage {}",
                ckpt.stage
            )));
        }
        let cfg: PriorConfig = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| TrainError::config(format!("bad prior config: {e}")))?;
        PriorModel::from_store(&cfg, &ckpt.store)
    }

    /// Rough-volume graph: radiograph `[1, 1, H, W]` -> `[C, d, h, w]`.
    /// The depth expansion is one shared MLP per (i, j) column.
    pub fn lift_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        trainable: bool,
        x: NodeId,
    ) -> NodeId {
        let cfg = &self.cfg;
        let (h, w, d) = cfg.latent_dims;
        let c = cfg.feature_channels;
        let bind = |g: &mut Graph, idx: usize| {
            if trainable {
                g.param(store, idx)
            } else {
                g.frozen(store, idx)
            }
        };
        // 2D feature stack down to the latent plane.
        let mut t = x;
        for (li, slot) in self.stack.iter().enumerate() {
            let wv = bind(g, slot.w);
            let bv = bind(g, slot.b);
            let cfg2d = match (cfg.stack_depth, li) {
                (0, _) => K1X1,
                (2, _) => K2DS2,
                _ => unreachable!(),
            };
            t = g.conv3d(t, wv, Some(bv), cfg2d);
            t = g.silu(t);
        }
        // Shared column MLP: per-pixel features -> a depth column.
        let pixels = g.grid_to_sites(t); // [h*w, C]
        let w0 = bind(g, self.mlp0.w);
        let b0 = bind(g, self.mlp0.b);
        let hid = g.linear(pixels, w0, Some(b0));
        let hid = g.silu(hid);
        let w1 = bind(g, self.mlp1.w);
        let b1 = bind(g, self.mlp1.b);
        let cols = g.linear(hid, w1, Some(b1)); // [h*w, d*C]
        // Reassemble depth-major site rows: block k holds sites i + h*j.
        let mut parts = Vec::with_capacity(d);
        for k in 0..d {
            parts.push(g.slice_cols(cols, k * c, c));
        }
        let sites = g.concat_rows(parts); // [h*w*d, C]
        g.sites_to_grid(sites, c, (h, w, d))
    }

    /// Refinement convs over the rough grid -> continuous latent prediction
    /// `[n_z, d, h, w]`.
    pub fn refine_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        trainable: bool,
        rough: NodeId,
    ) -> NodeId {
        let bind = |g: &mut Graph, idx: usize| {
            if trainable {
                g.param(store, idx)
            } else {
                g.frozen(store, idx)
            }
        };
        let w0 = bind(g, self.refine0.w);
        let b0 = bind(g, self.refine0.b);
        let t = g.conv3d(rough, w0, Some(b0), K3);
        let t = g.silu(t);
        let w1 = bind(g, self.refine1.w);
        let b1 = bind(g, self.refine1.b);
        g.conv3d(t, w1, Some(b1), K3)
    }

    fn radiograph_tensor(&self, r: &Radiograph) -> Result<Tensor, TrainError> {
        if r.dims != self.cfg.radiograph_dims {
            return Err(TrainError::shape(format!(
                "radiograph dims {:?} != configured {:?}",
                r.dims, self.cfg.radiograph_dims
            )));
        }
        Ok(radiograph_to_tensor(r))
    }

    /// Rough feature volume for a radiograph (values, `[C, d, h, w]`).
    pub fn lift_columns(&self, store: &ParamStore, r: &Radiograph) -> Result<Tensor, TrainError> {
        let x_t = self.radiograph_tensor(r)?;
        let mut g = Graph::new();
        let x = g.input(x_t);
        let rough = self.lift_graph(&mut g, store, false, x);
        Ok(g.value(rough).clone())
    }

    /// Full prior extraction: lift, refine, quantize against the frozen
    /// codebook, z-score normalize, flatten i-fastest.
    pub fn encode_prior(
        &self,
        store: &ParamStore,
        r: &Radiograph,
        cb: &Codebook,
    ) -> Result<PriorTokens, TrainError> {
        if cb.n_z != self.cfg.n_z {
            return Err(TrainError::shape(format!(
                "codebook dim {} != prior n_z {}",
                cb.n_z, self.cfg.n_z
            )));
        }
        let x_t = self.radiograph_tensor(r)?;
        let mut g = Graph::new();
        let x = g.input(x_t);
        let rough = self.lift_graph(&mut g, store, false, x);
        let refined = self.refine_graph(&mut g, store, false, rough);
        let sites = g.grid_to_sites(refined);
        let site_values = g.value(sites).data();
        let indices = cb.assign_batch(site_values, self.cfg.lookup_mode);

        // Tokens are the selected entries mapped into homogeneous space
        // (whole-table standardization), regardless of lookup mode.
        let n_z = self.cfg.n_z;
        let table = cb.standardized_entries();
        let mut values = vec![0.0; indices.len() * n_z];
        for (s, &idx) in indices.iter().enumerate() {
            values[s * n_z..(s + 1) * n_z].copy_from_slice(&table[idx * n_z..(idx + 1) * n_z]);
        }
        Ok(PriorTokens {
            grid_dims: self.cfg.latent_dims,
            n_z,
            values,
        })
    }
}

/// Radiograph -> `[1, 1, H, W]` tensor, min-max rescaled to [0, 1].
pub fn radiograph_to_tensor(r: &Radiograph) -> Tensor {
    let (h, w) = r.dims;
    let rescaled = r.rescaled_unit();
    let mut data = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            data[i * w + j] = rescaled[i + h * j];
        }
    }
    Tensor::new(vec![1, 1, h, w], data).expect("consistent")
}

/// One precomputed training pair.
pub struct PriorTrainItem {
    pub input: Tensor,
    pub target_sites: Tensor,
    pub target_indices: Vec<usize>,
}

/// Precompute frozen-compressor targets for (radiograph, volume) pairs.
pub fn prepare_prior_dataset(
    pairs: &[(Radiograph, xct_core::Volume)],
    compressor: &crate::compressor::CompressorModel,
    comp_store: &ParamStore,
    cb: &Codebook,
    cfg: &PriorConfig,
) -> Result<Vec<PriorTrainItem>, TrainError> {
    let mut items = Vec::with_capacity(pairs.len());
    for (r, v) in pairs {
        if r.dims != cfg.radiograph_dims {
            return Err(TrainError::shape("radiograph dims mismatch in dataset"));
        }
        let z = compressor.encode(comp_store, v)?;
        if z.dims != cfg.latent_dims || z.n_z != cfg.n_z {
            return Err(TrainError::shape(
                "compressor latent geometry differs from prior config",
            ));
        }
        let target_indices = cb.assign_batch(&z.values, cfg.lookup_mode);
        items.push(PriorTrainItem {
            input: radiograph_to_tensor(r),
            target_sites: z.to_sites_tensor(),
            target_indices,
        });
    }
    Ok(items)
}

/// Loss graph for one item. Returns (loss, mse value, ce value, accuracy).
fn prior_losses(
    model: &PriorModel,
    g: &mut Graph,
    store: &ParamStore,
    item: &PriorTrainItem,
    cb_raw: &Tensor,
    cb_normalized: &Tensor,
) -> (NodeId, f64, f64, f64) {
    let cfg = &model.cfg;
    let x = g.input(item.input.clone());
    let rough = model.lift_graph(g, store, true, x);
    let refined = model.refine_graph(g, store, true, rough);
    let pred = g.grid_to_sites(refined);
    let target = g.input(item.target_sites.clone());
    let mse = g.mse_loss(pred, target);

    let (query, table_t) = match cfg.lookup_mode {
        LookupMode::Raw => (pred, cb_raw),
        LookupMode::Normalized => (
            g.standardize_all(pred, crate::codebook::STANDARDIZE_EPS),
            cb_normalized,
        ),
    };
    let table = g.input(table_t.clone());
    let sqd = g.sq_dist_rows(query, table);
    let logits = g.scale(sqd, -1.0);
    let ce = g.cross_entropy_rows(logits, item.target_indices.clone());

    // Index accuracy from the logits by value.
    let lv = g.value(logits).data();
    let n = item.target_indices.len();
    let m = lv.len() / n;
    let mut hits = 0usize;
    for (rix, &t) in item.target_indices.iter().enumerate() {
        let row = &lv[rix * m..(rix + 1) * m];
        let mut best = 0;
        for cix in 1..m {
            if row[cix] > row[best] {
                best = cix;
            }
        }
        if best == t {
            hits += 1;
        }
    }

    let ce_w = g.scale(ce, cfg.ce_weight);
    let loss = g.add(mse, ce_w);
    (loss, g.scalar(mse), g.scalar(ce), hits as f64 / n as f64)
}

/// Evaluate the current loss on one item without updating anything.
pub fn prior_loss_value(
    model: &PriorModel,
    store: &ParamStore,
    item: &PriorTrainItem,
    cb: &Codebook,
) -> (f64, f64, f64) {
    let cb_raw = Tensor::new(vec![cb.n, cb.n_z], cb.entries.clone()).expect("table");
    let cb_norm = Tensor::new(vec![cb.n, cb.n_z], cb.standardized_entries()).expect("table");
    let mut g = Graph::new();
    let (loss, mse, ce, _) = prior_losses(model, &mut g, store, item, &cb_raw, &cb_norm);
    (g.scalar(loss), mse, ce)
}

/// Train the prior encoder against a frozen compressor.
pub fn train_prior(
    items: &[PriorTrainItem],
    cb: &Codebook,
    cfg: &PriorConfig,
    resume: Option<Checkpoint>,
    log_out: Option<&mut dyn Write>,
) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(TrainError::config("prior training needs at least one pair"));
    }
    let cfg_json = serde_json::to_string(cfg).expect("config serializes");

    let (model, mut store, mut rng, start) = match resume {
        None => {
            let (model, store) = PriorModel::init(cfg)?;
            let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x747261696e);
            (model, store, rng, 0usize)
        }
        Some(ckpt) => {
            if ckpt.stage != STAGE_NAME {
                return Err(TrainError::config("resume checkpoint is not stage prior"));
            }
            if ckpt.config_json != cfg_json {
                return Err(TrainError::config(
                    "resume checkpoint was trained with a different config",
                ));
            }
            let model = PriorModel::from_store(cfg, &ckpt.store)?;
            let rng = ckpt
                .rng
                .as_ref()
                .ok_or_else(|| TrainError::config("checkpoint lacks RNG state"))?
                .restore();
            (model, ckpt.store, rng, ckpt.iteration as usize)
        }
    };

    let cb_raw = Tensor::new(vec![cb.n, cb.n_z], cb.entries.clone())?;
    let cb_norm = Tensor::new(vec![cb.n, cb.n_z], cb.standardized_entries())?;
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut log = CsvLog::new(log_out);
    let header = "step,mse,ce,index_accuracy";

    for step in start..cfg.iterations {
        let mut merged = Grads::new();
        let (mut mse_sum, mut ce_sum, mut acc_sum) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..items.len());
            let mut g = Graph::new();
            let (loss, mse, ce, acc) =
                prior_losses(&model, &mut g, &store, &items[idx], &cb_raw, &cb_norm);
            guard_finite(&[("mse", mse), ("ce", ce)], step)?;
            let grads = g.backward(loss);
            merged.merge(&grads);
            mse_sum += mse;
            ce_sum += ce;
            acc_sum += acc;
        }
        let inv_b = 1.0 / cfg.batch_size as f64;
        merged.scale(inv_b);
        adam::step(&mut store, &merged, &adam_cfg);
        log.row(
            header,
            format_args!(
                "{},{:.6e},{:.6e},{:.4}",
                step,
                mse_sum * inv_b,
                ce_sum * inv_b,
                acc_sum * inv_b
            ),
        )?;
        if step % 100 == 0 {
            log::info!(
                "prior step {step}: mse {:.4} ce {:.4} acc {:.3}",
                mse_sum * inv_b,
                ce_sum * inv_b,
                acc_sum * inv_b
            );
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

#[cfg(test)]
mod tests {
    use super::*;
    use xct_core::projector::RadiographDomain;

    fn radiograph(dims: (usize, usize), seed: u64) -> Radiograph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = (0..dims.0 * dims.1).map(|_| rng.gen_range(0.0..3.0)).collect();
        Radiograph::new(dims, RadiographDomain::LineIntegral, vals).unwrap()
    }

    fn small_cfg() -> PriorConfig {
        PriorConfig {
            radiograph_dims: (16, 16),
            latent_dims: (4, 4, 4),
            n_z: 4,
            feature_channels: 6,
            mlp_hidden: 12,
            ..PriorConfig::default()
        }
    }

    #[test]
    fn shape_chain_through_lift_and_tokens() {
        let cfg = small_cfg();
        let (model, store) = PriorModel::init(&cfg).unwrap();
        let r = radiograph((16, 16), 1);
        let rough = model.lift_columns(&store, &r).unwrap();
        assert_eq!(rough.shape(), [6, 4, 4, 4]);

        let cb = Codebook::init_uniform(32, 4, 5).unwrap();
        let tokens = model.encode_prior(&store, &r, &cb).unwrap();
        assert_eq!(tokens.count(), 64);
        assert_eq!(tokens.n_z, 4);
    }

    #[test]
    fn tokens_are_homogeneous_entries_or_zero() {
        let cfg = small_cfg();
        let (model, store) = PriorModel::init(&cfg).unwrap();
        let cb = Codebook::init_uniform(32, 4, 5).unwrap();
        let table = cb.standardized_entries();
        let tokens = model
            .encode_prior(&store, &radiograph((16, 16), 2), &cb)
            .unwrap();
        for t in 0..tokens.count() {
            let tok = tokens.token(t);
            let zero = tok.iter().all(|&v| v == 0.0);
            let member = (0..cb.n).any(|e| {
                let row = &table[e * 4..(e + 1) * 4];
                row.iter().zip(tok).all(|(a, b)| (a - b).abs() < 1e-12)
            });
            assert!(zero || member, "token {t} not in the standardized codebook");
        }
    }

    #[test]
    fn same_radiograph_same_tokens() {
        let cfg = small_cfg();
        let (model, store) = PriorModel::init(&cfg).unwrap();
        let cb = Codebook::init_uniform(32, 4, 5).unwrap();
        let r = radiograph((16, 16), 3);
        let a = model.encode_prior(&store, &r, &cb).unwrap();
        let b = model.encode_prior(&store, &r, &cb).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn receptive_field_one_locality() {
        // depth-0 stack: perturbing one radiograph pixel changes only that
        // (i, j) column of the rough volume.
        let cfg = PriorConfig {
            radiograph_dims: (4, 4),
            latent_dims: (4, 4, 4),
            n_z: 4,
            feature_channels: 5,
            stack_depth: 0,
            mlp_hidden: 10,
            ..PriorConfig::default()
        };
        let (model, store) = PriorModel::init(&cfg).unwrap();
        // Anchor min and max so the per-image rescale is unaffected by the
        // bump and the comparison isolates the network's receptive field.
        let mut base = radiograph((4, 4), 4);
        for v in base.values.iter_mut() {
            *v = 1.0 + 0.5 * *v;
        }
        base.values[0] = 0.0;
        base.values[15] = 10.0;
        let mut bumped = base.clone();
        let (i0, j0) = (1, 2);
        bumped.values[i0 + 4 * j0] += 0.25;

        let a = model.lift_columns(&store, &base).unwrap();
        let b = model.lift_columns(&store, &bumped).unwrap();
        // layout [C, d, h, w]
        for c in 0..5 {
            for k in 0..4 {
                for i in 0..4 {
                    for j in 0..4 {
                        let idx = ((c * 4 + k) * 4 + i) * 4 + j;
                        let same = (a.data()[idx] - b.data()[idx]).abs() < 1e-12;
                        if i == i0 && j == j0 {
                            // at least the column may differ; checked below
                        } else {
                            assert!(same, "off-column change at c{c} k{k} i{i} j{j}");
                        }
                    }
                }
            }
        }
        let mut any_diff = false;
        for c in 0..5 {
            for k in 0..4 {
                let idx = ((c * 4 + k) * 4 + i0) * 4 + j0;
                if (a.data()[idx] - b.data()[idx]).abs() > 1e-12 {
                    any_diff = true;
                }
            }
        }
        assert!(any_diff, "perturbed column must change");
    }

    #[test]
    fn rejects_mismatched_radiograph() {
        let cfg = small_cfg();
        let (model, store) = PriorModel::init(&cfg).unwrap();
        let bad = radiograph((8, 8), 5);
        assert!(model.lift_columns(&store, &bad).is_err());
    }
}
