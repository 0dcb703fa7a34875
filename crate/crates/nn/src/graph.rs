//! Eager tape autodiff.
//!
//! Every builder method computes its value immediately and records the op;
//! [`Graph::backward`] walks the tape once in reverse. Nodes are append-only,
//! so by the time a node is visited every consumer has already deposited its
//! gradient contribution.
//!
//! Shape violations inside a graph are programming errors and panic; model
//! code validates user-facing preconditions before building graphs.

use xct_core::parallel;

pub use crate::conv::ConvCfg;
use crate::params::{Grads, ParamStore};
use crate::tensor::{GridShape, Tensor};

pub type NodeId = usize;

const ZSCORE_EPS: f64 = 1e-6;
const UNITNORM_EPS: f64 = 1e-8;

enum Op {
    Value,
    Param { slot: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Abs(NodeId),
    Silu(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Clamp(NodeId, f64, f64),
    Ln(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    AddBScalar(NodeId, NodeId),
    MulBScalar(NodeId, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    Conv3d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        cfg: ConvCfg,
    },
    UpsampleNearest {
        x: NodeId,
        factor: (usize, usize, usize),
    },
    VoxelShuffle {
        x: NodeId,
        r: usize,
    },
    AvgPool {
        x: NodeId,
        factor: (usize, usize, usize),
    },
    SliceDepth {
        x: NodeId,
        k: usize,
    },
    Reshape(NodeId),
    ConcatChannels(NodeId, NodeId),
    AddChannelBias {
        x: NodeId,
        bias: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    SoftmaxRows(NodeId),
    ZScoreRows(NodeId),
    UnitNormChannels(NodeId),
    GatherRows {
        table: NodeId,
        rows: Vec<usize>,
    },
    Detach,
    CrossEntropyRows {
        logits: NodeId,
        targets: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SqDistRows(NodeId, NodeId),
    GridToSites(NodeId),
    SitesToGrid {
        x: NodeId,
        shape: GridShape,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value.item()
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn grid(&self, id: NodeId) -> GridShape {
        GridShape::of(&self.nodes[id].value).expect("grid-shaped node")
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id].value.data()
    }

    // ---- leaves ----

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Value, value, false)
    }

    /// Trainable leaf bound to a [`ParamStore`] slot.
    pub fn param(&mut self, store: &ParamStore, slot: usize) -> NodeId {
        self.push(Op::Param { slot }, store.value(slot).clone(), true)
    }

    /// Use a stored parameter as a frozen constant.
    pub fn frozen(&mut self, store: &ParamStore, slot: usize) -> NodeId {
        self.push(Op::Value, store.value(slot).clone(), false)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), value, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), value, ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), value, ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.data(a).iter().map(|x| x + c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(Op::AddScalar(a), value, ng)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let data = self.data(a).iter().map(|x| x.abs()).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(Op::Abs(a), value, ng)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let data = self
            .data(a)
            .iter()
            .map(|&x| x / (1.0 + (-x).exp()))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(Op::Silu(a), value, ng)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let data = self
            .data(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(Op::LeakyRelu(a, slope), value, ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self
            .data(a)
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), value, ng)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let data = self.data(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(Op::Clamp(a, lo, hi), value, ng)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let data = self.data(a).iter().map(|x| x.ln()).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(Op::Ln(a), value, ng)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let data = self.data(a).iter().map(|x| x.sqrt()).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(Op::Sqrt(a), value, ng)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let data = self.data(a).iter().map(|x| 1.0 / x).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(Op::Recip(a), value, ng)
    }

    /// Add a scalar node (shape `[1]`) to every element.
    pub fn add_bscalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.shape(s), [1], "broadcast scalar must be [1]");
        let sv = self.data(s)[0];
        let data = self.data(a).iter().map(|x| x + sv).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.needs(a) || self.needs(s);
        self.push(Op::AddBScalar(a, s), value, ng)
    }

    /// Multiply every element by a scalar node (shape `[1]`).
    pub fn mul_bscalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.shape(s), [1], "broadcast scalar must be [1]");
        let sv = self.data(s)[0];
        let data = self.data(a).iter().map(|x| x * sv).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.needs(a) || self.needs(s);
        self.push(Op::MulBScalar(a, s), value, ng)
    }

    /// Standardize by the tensor's own scalar statistics:
    /// `(x - mean)/(std + eps)` with population std over every element.
    /// Gradients flow through the statistics.
    pub fn standardize_all(&mut self, x: NodeId, eps: f64) -> NodeId {
        let mean = self.mean_all(x);
        let neg_mean = self.scale(mean, -1.0);
        let centered = self.add_bscalar(x, neg_mean);
        let sq = self.mul(centered, centered);
        let var = self.mean_all(sq);
        let std = self.sqrt(var);
        let denom = self.add_scalar(std, eps);
        let inv = self.recip(denom);
        self.mul_bscalar(centered, inv)
    }

    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.clone();
        self.push(Op::Detach, value, false)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.data(a).iter().sum();
        let ng = self.needs(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.data(a).len() as f64;
        let s = self.data(a).iter().sum::<f64>() / n;
        let ng = self.needs(a);
        self.push(Op::MeanAll(a), Tensor::scalar(s), ng)
    }

    /// mean(|a - b|)
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean_all(d)
    }

    /// mean((a - b)^2)
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let d2 = self.mul(d, d);
        self.mean_all(d2)
    }

    // ---- conv and spatial ----

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, cfg: ConvCfg) -> NodeId {
        let xs = self.grid(x);
        let wshape = self.shape(w).to_vec();
        assert_eq!(wshape.len(), 5, "conv weight must be 5D");
        assert_eq!(wshape[1], xs.c, "conv in-channel mismatch");
        assert_eq!(
            (wshape[2], wshape[3], wshape[4]),
            cfg.kernel,
            "conv kernel mismatch"
        );
        let os = cfg.out_shape(&xs, wshape[0]).expect("conv output shape");
        assert!(os.d > 0 && os.h > 0 && os.w > 0, "empty conv output");
        if let Some(b) = b {
            assert_eq!(self.shape(b), [wshape[0]], "conv bias shape");
        }
        let mut out = vec![0.0; os.len()];
        crate::conv::forward(
            self.data(x),
            &xs,
            self.data(w),
            b.map(|b| self.data(b)),
            &cfg,
            &mut out,
            &os,
        );
        let value = Tensor::new(os.to_vec(), out).unwrap();
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Op::Conv3d { x, w, b, cfg }, value, ng)
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: (usize, usize, usize)) -> NodeId {
        let xs = self.grid(x);
        let os = GridShape {
            c: xs.c,
            d: xs.d * factor.0,
            h: xs.h * factor.1,
            w: xs.w * factor.2,
        };
        let xd = self.data(x);
        let mut out = vec![0.0; os.len()];
        for c in 0..os.c {
            for d in 0..os.d {
                for h in 0..os.h {
                    for w in 0..os.w {
                        out[os.index(c, d, h, w)] =
                            xd[xs.index(c, d / factor.0, h / factor.1, w / factor.2)];
                    }
                }
            }
        }
        let value = Tensor::new(os.to_vec(), out).unwrap();
        let ng = self.needs(x);
        self.push(Op::UpsampleNearest { x, factor }, value, ng)
    }

    /// `[C*r^3, D, H, W] -> [C, rD, rH, rW]`; sub-voxel order (rd, rh, rw).
    pub fn voxel_shuffle(&mut self, x: NodeId, r: usize) -> NodeId {
        let xs = self.grid(x);
        let r3 = r * r * r;
        assert_eq!(xs.c % r3, 0, "voxel shuffle channel count");
        let os = GridShape {
            c: xs.c / r3,
            d: xs.d * r,
            h: xs.h * r,
            w: xs.w * r,
        };
        let xd = self.data(x);
        let mut out = vec![0.0; os.len()];
        for c in 0..os.c {
            for rd in 0..r {
                for rh in 0..r {
                    for rw in 0..r {
                        let ic = c * r3 + (rd * r + rh) * r + rw;
                        for d in 0..xs.d {
                            for h in 0..xs.h {
                                for w in 0..xs.w {
                                    out[os.index(c, d * r + rd, h * r + rh, w * r + rw)] =
                                        xd[xs.index(ic, d, h, w)];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(os.to_vec(), out).unwrap();
        let ng = self.needs(x);
        self.push(Op::VoxelShuffle { x, r }, value, ng)
    }

    pub fn avg_pool(&mut self, x: NodeId, factor: (usize, usize, usize)) -> NodeId {
        let xs = self.grid(x);
        assert!(
            xs.d % factor.0 == 0 && xs.h % factor.1 == 0 && xs.w % factor.2 == 0,
            "avg pool dims not divisible"
        );
        let os = GridShape {
            c: xs.c,
            d: xs.d / factor.0,
            h: xs.h / factor.1,
            w: xs.w / factor.2,
        };
        let inv = 1.0 / (factor.0 * factor.1 * factor.2) as f64;
        let xd = self.data(x);
        let mut out = vec![0.0; os.len()];
        for c in 0..os.c {
            for d in 0..os.d {
                for h in 0..os.h {
                    for w in 0..os.w {
                        let mut acc = 0.0;
                        for fd in 0..factor.0 {
                            for fh in 0..factor.1 {
                                for fw in 0..factor.2 {
                                    acc += xd[xs.index(
                                        c,
                                        d * factor.0 + fd,
                                        h * factor.1 + fh,
                                        w * factor.2 + fw,
                                    )];
                                }
                            }
                        }
                        out[os.index(c, d, h, w)] = acc * inv;
                    }
                }
            }
        }
        let value = Tensor::new(os.to_vec(), out).unwrap();
        let ng = self.needs(x);
        self.push(Op::AvgPool { x, factor }, value, ng)
    }

    /// Extract the coronal slice at depth `k`: `[C, D, H, W] -> [C, 1, H, W]`.
    pub fn slice_depth(&mut self, x: NodeId, k: usize) -> NodeId {
        let xs = self.grid(x);
        assert!(k < xs.d, "slice index out of range");
        let os = GridShape { c: xs.c, d: 1, h: xs.h, w: xs.w };
        let xd = self.data(x);
        let mut out = vec![0.0; os.len()];
        for c in 0..xs.c {
            for h in 0..xs.h {
                for w in 0..xs.w {
                    out[os.index(c, 0, h, w)] = xd[xs.index(c, k, h, w)];
                }
            }
        }
        let value = Tensor::new(os.to_vec(), out).unwrap();
        let ng = self.needs(x);
        self.push(Op::SliceDepth { x, k }, value, ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let value = self.nodes[x].value.reshaped(shape).expect("reshape size");
        let ng = self.needs(x);
        self.push(Op::Reshape(x), value, ng)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let asg = self.grid(a);
        let bs = self.grid(b);
        assert_eq!((asg.d, asg.h, asg.w), (bs.d, bs.h, bs.w), "concat spatial");
        let os = GridShape { c: asg.c + bs.c, ..asg };
        let mut out = Vec::with_capacity(os.len());
        out.extend_from_slice(self.data(a));
        out.extend_from_slice(self.data(b));
        let value = Tensor::new(os.to_vec(), out).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::ConcatChannels(a, b), value, ng)
    }

    /// Add a per-channel bias vector `[C]` across all spatial positions.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xs = self.grid(x);
        assert_eq!(self.shape(bias), [xs.c], "channel bias shape");
        let xd = self.data(x);
        let bd = self.data(bias);
        let spatial = xs.spatial() / xs.c * xs.c; // d*h*w
        let per_c = xs.d * xs.h * xs.w;
        let _ = spatial;
        let mut out = vec![0.0; xs.len()];
        for c in 0..xs.c {
            let b = bd[c];
            for s in 0..per_c {
                out[c * per_c + s] = xd[c * per_c + s] + b;
            }
        }
        let value = Tensor::new(xs.to_vec(), out).unwrap();
        let ng = self.needs(x) || self.needs(bias);
        self.push(Op::AddChannelBias { x, bias }, value, ng)
    }

    // ---- matrices ----

    /// `[N, In] x [Out, In]^T (+ bias) -> [N, Out]`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (n, input) = mat_shape(self.shape(x));
        let (out_dim, w_in) = mat_shape(self.shape(w));
        assert_eq!(input, w_in, "linear in-features mismatch");
        if let Some(b) = b {
            assert_eq!(self.shape(b), [out_dim], "linear bias shape");
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = b.map(|b| self.data(b).to_vec());
        let mut out = vec![0.0; n * out_dim];
        parallel::for_each_chunk_mut(&mut out, out_dim, |row, dst| {
            let xrow = &xd[row * input..(row + 1) * input];
            for (o, val) in dst.iter_mut().enumerate() {
                let wrow = &wd[o * input..(o + 1) * input];
                let mut acc = bd.as_ref().map_or(0.0, |b| b[o]);
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
                *val = acc;
            }
        });
        let value = Tensor::new(vec![n, out_dim], out).unwrap();
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Op::Linear { x, w, b }, value, ng)
    }

    /// `[N, K] x [K, M] -> [N, M]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, k) = mat_shape(self.shape(a));
        let (k2, m) = mat_shape(self.shape(b));
        assert_eq!(k, k2, "matmul inner dim");
        let value = Tensor::new(vec![n, m], matmul_nn(self.data(a), self.data(b), n, k, m)).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), value, ng)
    }

    /// `[N, K] x [M, K]^T -> [N, M]`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, k) = mat_shape(self.shape(a));
        let (m, k2) = mat_shape(self.shape(b));
        assert_eq!(k, k2, "matmul_nt inner dim");
        let value = Tensor::new(vec![n, m], matmul_nt(self.data(a), self.data(b), n, k, m)).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMulNT(a, b), value, ng)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (n, m) = mat_shape(self.shape(x));
        let xd = self.data(x);
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &xd[r * m..(r + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (o, &v) in out[r * m..(r + 1) * m].iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                denom += e;
            }
            let inv = 1.0 / denom;
            for o in &mut out[r * m..(r + 1) * m] {
                *o *= inv;
            }
        }
        let value = Tensor::new(vec![n, m], out).unwrap();
        let ng = self.needs(x);
        self.push(Op::SoftmaxRows(x), value, ng)
    }

    /// Per-row z-score normalization: `(v - mean)/(std + 1e-6)`, with
    /// near-constant rows (std < 1e-6) mapping to the zero vector.
    pub fn zscore_rows(&mut self, x: NodeId) -> NodeId {
        let (n, m) = mat_shape(self.shape(x));
        let xd = self.data(x);
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &xd[r * m..(r + 1) * m];
            zscore_row(row, &mut out[r * m..(r + 1) * m]);
        }
        let value = Tensor::new(vec![n, m], out).unwrap();
        let ng = self.needs(x);
        self.push(Op::ZScoreRows(x), value, ng)
    }

    /// Unit-normalize the channel vector at every voxel of `[C, D, H, W]`.
    pub fn unit_norm_channels(&mut self, x: NodeId) -> NodeId {
        let xs = self.grid(x);
        let per_c = xs.d * xs.h * xs.w;
        let xd = self.data(x);
        let mut out = vec![0.0; xs.len()];
        for s in 0..per_c {
            let mut norm = 0.0;
            for c in 0..xs.c {
                let v = xd[c * per_c + s];
                norm += v * v;
            }
            let inv = 1.0 / (norm.sqrt() + UNITNORM_EPS);
            for c in 0..xs.c {
                out[c * per_c + s] = xd[c * per_c + s] * inv;
            }
        }
        let value = Tensor::new(xs.to_vec(), out).unwrap();
        let ng = self.needs(x);
        self.push(Op::UnitNormChannels(x), value, ng)
    }

    /// Select rows of a `[n, m]` table: `out[r] = table[rows[r]]`.
    pub fn gather_rows(&mut self, table: NodeId, rows: Vec<usize>) -> NodeId {
        let (n, m) = mat_shape(self.shape(table));
        let td = self.data(table);
        let mut out = vec![0.0; rows.len() * m];
        for (r, &src) in rows.iter().enumerate() {
            assert!(src < n, "gather row out of range");
            out[r * m..(r + 1) * m].copy_from_slice(&td[src * m..(src + 1) * m]);
        }
        let value = Tensor::new(vec![rows.len(), m], out).unwrap();
        let ng = self.needs(table);
        self.push(Op::GatherRows { table, rows }, value, ng)
    }

    /// Mean cross-entropy of row softmaxes against integer targets.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let (n, m) = mat_shape(self.shape(logits));
        assert_eq!(targets.len(), n, "one target per row");
        let xd = self.data(logits);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < m, "target out of range");
            let row = &xd[r * m..(r + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = Tensor::scalar(total / n as f64);
        let ng = self.needs(logits);
        self.push(Op::CrossEntropyRows { logits, targets }, value, ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (n, m) = mat_shape(self.shape(x));
        assert!(start + len <= m, "column slice out of range");
        let xd = self.data(x);
        let mut out = vec![0.0; n * len];
        for r in 0..n {
            out[r * len..(r + 1) * len].copy_from_slice(&xd[r * m + start..r * m + start + len]);
        }
        let value = Tensor::new(vec![n, len], out).unwrap();
        let ng = self.needs(x);
        self.push(Op::SliceCols { x, start, len }, value, ng)
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty());
        let n = mat_shape(self.shape(parts[0])).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (rows, cols) = mat_shape(self.shape(p));
                assert_eq!(rows, n, "concat_cols row mismatch");
                cols
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        for r in 0..n {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let pd = self.data(*p);
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let value = Tensor::new(vec![n, total], out).unwrap();
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols(parts), value, ng)
    }

    /// Stack same-width matrices vertically.
    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty());
        let m = mat_shape(self.shape(parts[0])).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let (n, cols) = mat_shape(self.shape(p));
            assert_eq!(cols, m, "concat_rows width mismatch");
            out.extend_from_slice(self.data(p));
            rows += n;
        }
        let value = Tensor::new(vec![rows, m], out).unwrap();
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatRows(parts), value, ng)
    }

    /// Pairwise squared distances: `out[r, c] = ||x_r - table_c||^2` for
    /// x `[N, C]` and table `[M, C]`.
    pub fn sq_dist_rows(&mut self, x: NodeId, table: NodeId) -> NodeId {
        let (n, c) = mat_shape(self.shape(x));
        let (m, c2) = mat_shape(self.shape(table));
        assert_eq!(c, c2, "sq_dist_rows feature dim");
        let xd = self.data(x);
        let td = self.data(table);
        let mut out = vec![0.0; n * m];
        parallel::for_each_chunk_mut(&mut out, m, |r, dst| {
            let xrow = &xd[r * c..(r + 1) * c];
            for (col, o) in dst.iter_mut().enumerate() {
                let trow = &td[col * c..(col + 1) * c];
                let mut acc = 0.0;
                for (a, b) in xrow.iter().zip(trow) {
                    let d = a - b;
                    acc += d * d;
                }
                *o = acc;
            }
        });
        let value = Tensor::new(vec![n, m], out).unwrap();
        let ng = self.needs(x) || self.needs(table);
        self.push(Op::SqDistRows(x, table), value, ng)
    }

    /// `[C, D, H, W] -> [S, C]` with `site = i + H*(j + W*k)` for grid
    /// position (i=h, j=w, k=d); the flattening order used for latent sites
    /// and prior tokens.
    pub fn grid_to_sites(&mut self, x: NodeId) -> NodeId {
        let xs = self.grid(x);
        let sites = xs.d * xs.h * xs.w;
        let xd = self.data(x);
        let mut out = vec![0.0; sites * xs.c];
        for k in 0..xs.d {
            for j in 0..xs.w {
                for i in 0..xs.h {
                    let s = i + xs.h * (j + xs.w * k);
                    for c in 0..xs.c {
                        out[s * xs.c + c] = xd[xs.index(c, k, i, j)];
                    }
                }
            }
        }
        let value = Tensor::new(vec![sites, xs.c], out).unwrap();
        let ng = self.needs(x);
        self.push(Op::GridToSites(x), value, ng)
    }

    /// Inverse of [`Graph::grid_to_sites`].
    pub fn sites_to_grid(&mut self, x: NodeId, c: usize, dims: (usize, usize, usize)) -> NodeId {
        let (h, w, d) = dims;
        let (sites, cols) = mat_shape(self.shape(x));
        assert_eq!(sites, h * w * d, "site count mismatch");
        assert_eq!(cols, c, "site channel mismatch");
        let os = GridShape { c, d, h, w };
        let xd = self.data(x);
        let mut out = vec![0.0; os.len()];
        for k in 0..d {
            for j in 0..w {
                for i in 0..h {
                    let s = i + h * (j + w * k);
                    for ch in 0..c {
                        out[os.index(ch, k, i, j)] = xd[s * c + ch];
                    }
                }
            }
        }
        let value = Tensor::new(os.to_vec(), out).unwrap();
        let ng = self.needs(x);
        self.push(Op::SitesToGrid { x, shape: os }, value, ng)
    }

    /// Straight-through copy: evaluates to `quantized`, but gradients flow to
    /// `continuous` unchanged: `z + detach(z_q - z)`.
    pub fn straight_through(&mut self, continuous: NodeId, quantized: NodeId) -> NodeId {
        let delta = self.sub(quantized, continuous);
        let delta = self.detach(delta);
        self.add(continuous, delta)
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Returns per-slot parameter gradients.
    pub fn backward(&mut self, loss: NodeId) -> Grads {
        assert_eq!(self.nodes[loss].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        let mut out = Grads::new();

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            match &self.nodes[id].op {
                Op::Value | Op::Detach => {}
                Op::Param { slot } => out.accumulate(*slot, &g),
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accum(&mut grads, a, |buf| buf.add_assign(&g));
                    self.accum(&mut grads, b, |buf| buf.add_assign(&g));
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accum(&mut grads, a, |buf| buf.add_assign(&g));
                    self.accum(&mut grads, b, |buf| {
                        for (o, gv) in buf.data_mut().iter_mut().zip(g.data()) {
                            *o -= gv;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a].value.data().to_vec();
                    let bv = self.nodes[b].value.data().to_vec();
                    self.accum(&mut grads, a, |buf| {
                        for ((o, gv), bvv) in buf.data_mut().iter_mut().zip(g.data()).zip(&bv) {
                            *o += gv * bvv;
                        }
                    });
                    self.accum(&mut grads, b, |buf| {
                        for ((o, gv), avv) in buf.data_mut().iter_mut().zip(g.data()).zip(&av) {
                            *o += gv * avv;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.accum(&mut grads, a, |buf| {
                        for (o, gv) in buf.data_mut().iter_mut().zip(g.data()) {
                            *o += gv * c;
                        }
                    });
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    self.accum(&mut grads, a, |buf| buf.add_assign(&g));
                }
                Op::Abs(a) => {
                    let a = *a;
                    let xv = self.nodes[a].value.data().to_vec();
                    self.accum(&mut grads, a, |buf| {
                        for ((o, gv), x) in buf.data_mut().iter_mut().zip(g.data()).zip(&xv) {
                            *o += gv * if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 };
                        }
                    });
                }
                Op::Silu(a) => {
                    let a = *a;
                    let xv = self.nodes[a].value.data().to_vec();
                    self.accum(&mut grads, a, |buf| {
                        for ((o, gv), &x) in buf.data_mut().iter_mut().zip(g.data()).zip(&xv) {
                            let s = 1.0 / (1.0 + (-x).exp());
                            *o += gv * s * (1.0 + x * (1.0 - s));
                        }
                    });
                }
                Op::LeakyRelu(a, slope) => {
                    let (a, slope) = (*a, *slope);
                    let xv = self.nodes[a].value.data().to_vec();
                    self.accum(&mut grads, a, |buf| {
                        for ((o, gv), &x) in buf.data_mut().iter_mut().zip(g.data()).zip(&xv) {
                            *o += gv * if x > 0.0 { 1.0 } else { slope };
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let yv = self.nodes[id].value.data().to_vec();
                    self.accum(&mut grads, a, |buf| {
                        for ((o, gv), &y) in buf.data_mut().iter_mut().zip(g.data()).zip(&yv) {
                            *o += gv * y * (1.0 - y);
                        }
                    });
                }
                Op::Clamp(a, lo, hi) => {
                    let (a, lo, hi) = (*a, *lo, *hi);
                    let xv = self.nodes[a].value.data().to_vec();
                    self.accum(&mut grads, a, |buf| {
                        for ((o, gv), &x) in buf.data_mut().iter_mut().zip(g.data()).zip(&xv) {
                            if x > lo && x < hi {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::Ln(a) => {
                    let a = *a;
                    let xv = self.nodes[a].value.data().to_vec();
                    self.accum(&mut grads, a, |buf| {
                        for ((o, gv), &x) in buf.data_mut().iter_mut().zip(g.data()).zip(&xv) {
                            *o += gv / x;
                        }
                    });
                }
                Op::Sqrt(a) => {
                    let a = *a;
                    let yv = self.nodes[id].value.data().to_vec();
                    self.accum(&mut grads, a, |buf| {
                        for ((o, gv), &y) in buf.data_mut().iter_mut().zip(g.data()).zip(&yv) {
                            *o += gv / (2.0 * y);
                        }
                    });
                }
                Op::Recip(a) => {
                    let a = *a;
                    let yv = self.nodes[id].value.data().to_vec();
                    self.accum(&mut grads, a, |buf| {
                        for ((o, gv), &y) in buf.data_mut().iter_mut().zip(g.data()).zip(&yv) {
                            *o -= gv * y * y;
                        }
                    });
                }
                Op::AddBScalar(a, s) => {
                    let (a, s) = (*a, *s);
                    self.accum(&mut grads, a, |buf| buf.add_assign(&g));
                    if self.needs(s) {
                        let total: f64 = g.data().iter().sum();
                        self.accum(&mut grads, s, |buf| {
                            buf.data_mut()[0] += total;
                        });
                    }
                }
                Op::MulBScalar(a, s) => {
                    let (a, s) = (*a, *s);
                    let sv = self.nodes[s].value.item();
                    let av = self.nodes[a].value.data().to_vec();
                    self.accum(&mut grads, a, |buf| {
                        for (o, gv) in buf.data_mut().iter_mut().zip(g.data()) {
                            *o += gv * sv;
                        }
                    });
                    if self.needs(s) {
                        let total: f64 = g.data().iter().zip(&av).map(|(gv, a)| gv * a).sum();
                        self.accum(&mut grads, s, |buf| {
                            buf.data_mut()[0] += total;
                        });
                    }
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let gs = g.item();
                    self.accum(&mut grads, a, |buf| {
                        for o in buf.data_mut() {
                            *o += gs;
                        }
                    });
                }
                Op::MeanAll(a) => {
                    let a = *a;
                    let n = self.nodes[a].value.len() as f64;
                    let gs = g.item() / n;
                    self.accum(&mut grads, a, |buf| {
                        for o in buf.data_mut() {
                            *o += gs;
                        }
                    });
                }
                Op::Conv3d { x, w, b, cfg } => {
                    let (x, w, b, cfg) = (*x, *w, *b, *cfg);
                    let xs = self.grid(x);
                    let os = GridShape::of(&self.nodes[id].value).unwrap();
                    if self.needs(x) {
                        let wv = self.nodes[w].value.data().to_vec();
                        self.accum(&mut grads, x, |buf| {
                            crate::conv::backward_input(
                                g.data(),
                                &os,
                                &wv,
                                &cfg,
                                &xs,
                                buf.data_mut(),
                            );
                        });
                    }
                    if self.needs(w) || b.is_some_and(|b| self.needs(b)) {
                        let xv = self.nodes[x].value.data().to_vec();
                        let mut gw = Tensor::zeros(self.nodes[w].value.shape().to_vec());
                        let mut gb = b.map(|b| Tensor::zeros(self.nodes[b].value.shape().to_vec()));
                        crate::conv::backward_weight(
                            g.data(),
                            &os,
                            &xv,
                            &xs,
                            &cfg,
                            gw.data_mut(),
                            gb.as_mut().map(|t| t.data_mut()),
                        );
                        if self.needs(w) {
                            self.accum(&mut grads, w, |buf| buf.add_assign(&gw));
                        }
                        if let (Some(b), Some(gb)) = (b, gb) {
                            if self.needs(b) {
                                self.accum(&mut grads, b, |buf| buf.add_assign(&gb));
                            }
                        }
                    }
                }
                Op::UpsampleNearest { x, factor } => {
                    let (x, factor) = (*x, *factor);
                    let xs = self.grid(x);
                    let os = GridShape::of(&self.nodes[id].value).unwrap();
                    self.accum(&mut grads, x, |buf| {
                        let dst = buf.data_mut();
                        for c in 0..os.c {
                            for d in 0..os.d {
                                for h in 0..os.h {
                                    for w in 0..os.w {
                                        dst[xs.index(c, d / factor.0, h / factor.1, w / factor.2)] +=
                                            g.data()[os.index(c, d, h, w)];
                                    }
                                }
                            }
                        }
                    });
                }
                Op::VoxelShuffle { x, r } => {
                    let (x, r) = (*x, *r);
                    let xs = self.grid(x);
                    let os = GridShape::of(&self.nodes[id].value).unwrap();
                    let r3 = r * r * r;
                    self.accum(&mut grads, x, |buf| {
                        let dst = buf.data_mut();
                        for c in 0..os.c {
                            for rd in 0..r {
                                for rh in 0..r {
                                    for rw in 0..r {
                                        let ic = c * r3 + (rd * r + rh) * r + rw;
                                        for d in 0..xs.d {
                                            for h in 0..xs.h {
                                                for w in 0..xs.w {
                                                    dst[xs.index(ic, d, h, w)] += g.data()[os
                                                        .index(
                                                            c,
                                                            d * r + rd,
                                                            h * r + rh,
                                                            w * r + rw,
                                                        )];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::AvgPool { x, factor } => {
                    let (x, factor) = (*x, *factor);
                    let xs = self.grid(x);
                    let os = GridShape::of(&self.nodes[id].value).unwrap();
                    let inv = 1.0 / (factor.0 * factor.1 * factor.2) as f64;
                    self.accum(&mut grads, x, |buf| {
                        let dst = buf.data_mut();
                        for c in 0..os.c {
                            for d in 0..os.d {
                                for h in 0..os.h {
                                    for w in 0..os.w {
                                        let gv = g.data()[os.index(c, d, h, w)] * inv;
                                        for fd in 0..factor.0 {
                                            for fh in 0..factor.1 {
                                                for fw in 0..factor.2 {
                                                    dst[xs.index(
                                                        c,
                                                        d * factor.0 + fd,
                                                        h * factor.1 + fh,
                                                        w * factor.2 + fw,
                                                    )] += gv;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::SliceDepth { x, k } => {
                    let (x, k) = (*x, *k);
                    let xs = self.grid(x);
                    let os = GridShape::of(&self.nodes[id].value).unwrap();
                    self.accum(&mut grads, x, |buf| {
                        let dst = buf.data_mut();
                        for c in 0..xs.c {
                            for h in 0..xs.h {
                                for w in 0..xs.w {
                                    dst[xs.index(c, k, h, w)] += g.data()[os.index(c, 0, h, w)];
                                }
                            }
                        }
                    });
                }
                Op::Reshape(x) => {
                    let x = *x;
                    let shape = self.nodes[x].value.shape().to_vec();
                    let gr = g.reshaped(shape).unwrap();
                    self.accum(&mut grads, x, |buf| buf.add_assign(&gr));
                }
                Op::ConcatChannels(a, b) => {
                    let (a, b) = (*a, *b);
                    let na = self.nodes[a].value.len();
                    self.accum(&mut grads, a, |buf| {
                        for (o, gv) in buf.data_mut().iter_mut().zip(&g.data()[..na]) {
                            *o += gv;
                        }
                    });
                    self.accum(&mut grads, b, |buf| {
                        for (o, gv) in buf.data_mut().iter_mut().zip(&g.data()[na..]) {
                            *o += gv;
                        }
                    });
                }
                Op::AddChannelBias { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let xs = self.grid(x);
                    let per_c = xs.d * xs.h * xs.w;
                    self.accum(&mut grads, x, |buf| buf.add_assign(&g));
                    if self.needs(bias) {
                        self.accum(&mut grads, bias, |buf| {
                            let dst = buf.data_mut();
                            for c in 0..xs.c {
                                let mut acc = 0.0;
                                for s in 0..per_c {
                                    acc += g.data()[c * per_c + s];
                                }
                                dst[c] += acc;
                            }
                        });
                    }
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (n, input) = mat_shape(self.nodes[x].value.shape());
                    let (out_dim, _) = mat_shape(self.nodes[w].value.shape());
                    if self.needs(x) {
                        // gx = g [N,Out] x w [Out,In]
                        let gx = matmul_nn(g.data(), self.nodes[w].value.data(), n, out_dim, input);
                        let gx = Tensor::new(vec![n, input], gx).unwrap();
                        self.accum(&mut grads, x, |buf| buf.add_assign(&gx));
                    }
                    if self.needs(w) {
                        // gw = g^T [Out,N] x x [N,In]
                        let gw = matmul_tn(g.data(), self.nodes[x].value.data(), n, out_dim, input);
                        let gw = Tensor::new(vec![out_dim, input], gw).unwrap();
                        self.accum(&mut grads, w, |buf| buf.add_assign(&gw));
                    }
                    if let Some(b) = b {
                        if self.needs(b) {
                            self.accum(&mut grads, b, |buf| {
                                let dst = buf.data_mut();
                                for r in 0..n {
                                    for o in 0..out_dim {
                                        dst[o] += g.data()[r * out_dim + o];
                                    }
                                }
                            });
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (n, k) = mat_shape(self.nodes[a].value.shape());
                    let (_, m) = mat_shape(self.nodes[b].value.shape());
                    if self.needs(a) {
                        // ga = g [N,M] x b^T -> matmul_nt(g, b^T?) : g [N,M] x b [K,M]^T
                        let ga = matmul_nt(g.data(), self.nodes[b].value.data(), n, m, k);
                        // note: matmul_nt(a[N,K'],b[M',K']) with K'=m, M'=k
                        let ga = Tensor::new(vec![n, k], ga).unwrap();
                        self.accum(&mut grads, a, |buf| buf.add_assign(&ga));
                    }
                    if self.needs(b) {
                        // gb = a^T [K,N] x g [N,M]
                        let gb = matmul_tn(self.nodes[a].value.data(), g.data(), n, k, m);
                        let gb = Tensor::new(vec![k, m], gb).unwrap();
                        self.accum(&mut grads, b, |buf| buf.add_assign(&gb));
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (a, b) = (*a, *b);
                    let (n, k) = mat_shape(self.nodes[a].value.shape());
                    let (m, _) = mat_shape(self.nodes[b].value.shape());
                    if self.needs(a) {
                        // ga = g [N,M] x b [M,K]
                        let ga = matmul_nn(g.data(), self.nodes[b].value.data(), n, m, k);
                        let ga = Tensor::new(vec![n, k], ga).unwrap();
                        self.accum(&mut grads, a, |buf| buf.add_assign(&ga));
                    }
                    if self.needs(b) {
                        // gb = g^T [M,N] x a [N,K]
                        let gb = matmul_tn(g.data(), self.nodes[a].value.data(), n, m, k);
                        let gb = Tensor::new(vec![m, k], gb).unwrap();
                        self.accum(&mut grads, b, |buf| buf.add_assign(&gb));
                    }
                }
                Op::SoftmaxRows(x) => {
                    let x = *x;
                    let (n, m) = mat_shape(self.nodes[id].value.shape());
                    let yv = self.nodes[id].value.data().to_vec();
                    self.accum(&mut grads, x, |buf| {
                        let dst = buf.data_mut();
                        for r in 0..n {
                            let y = &yv[r * m..(r + 1) * m];
                            let gr = &g.data()[r * m..(r + 1) * m];
                            let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..m {
                                dst[r * m + c] += y[c] * (gr[c] - dot);
                            }
                        }
                    });
                }
                Op::ZScoreRows(x) => {
                    let x = *x;
                    let (n, m) = mat_shape(self.nodes[x].value.shape());
                    let xv = self.nodes[x].value.data().to_vec();
                    let yv = self.nodes[id].value.data().to_vec();
                    self.accum(&mut grads, x, |buf| {
                        let dst = buf.data_mut();
                        for r in 0..n {
                            let row = &xv[r * m..(r + 1) * m];
                            let y = &yv[r * m..(r + 1) * m];
                            let gr = &g.data()[r * m..(r + 1) * m];
                            let mean = row.iter().sum::<f64>() / m as f64;
                            let var =
                                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                            let std = var.sqrt();
                            if std < ZSCORE_EPS {
                                continue; // output pinned to zero
                            }
                            let s = std + ZSCORE_EPS;
                            let gmean = gr.iter().sum::<f64>() / m as f64;
                            let proj: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                            for c in 0..m {
                                dst[r * m + c] +=
                                    (gr[c] - gmean) / s - y[c] * proj / (m as f64 * std);
                            }
                        }
                    });
                }
                Op::UnitNormChannels(x) => {
                    let x = *x;
                    let xs = self.grid(x);
                    let per_c = xs.d * xs.h * xs.w;
                    let xv = self.nodes[x].value.data().to_vec();
                    self.accum(&mut grads, x, |buf| {
                        let dst = buf.data_mut();
                        for sidx in 0..per_c {
                            let mut norm2 = 0.0;
                            for c in 0..xs.c {
                                let v = xv[c * per_c + sidx];
                                norm2 += v * v;
                            }
                            let norm = norm2.sqrt();
                            let s = norm + UNITNORM_EPS;
                            let mut dot = 0.0;
                            for c in 0..xs.c {
                                dot += g.data()[c * per_c + sidx] * xv[c * per_c + sidx];
                            }
                            for c in 0..xs.c {
                                let gi = g.data()[c * per_c + sidx];
                                let xi = xv[c * per_c + sidx];
                                let t2 = if norm > 0.0 {
                                    xi * dot / (norm * s * s)
                                } else {
                                    0.0
                                };
                                dst[c * per_c + sidx] += gi / s - t2;
                            }
                        }
                    });
                }
                Op::GatherRows { table, rows } => {
                    let table = *table;
                    let rows = rows.clone();
                    let (_, m) = mat_shape(self.nodes[table].value.shape());
                    self.accum(&mut grads, table, |buf| {
                        let dst = buf.data_mut();
                        for (r, &src) in rows.iter().enumerate() {
                            for c in 0..m {
                                dst[src * m + c] += g.data()[r * m + c];
                            }
                        }
                    });
                }
                Op::CrossEntropyRows { logits, targets } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let (n, m) = mat_shape(self.nodes[logits].value.shape());
                    let xv = self.nodes[logits].value.data().to_vec();
                    let gs = g.item() / n as f64;
                    self.accum(&mut grads, logits, |buf| {
                        let dst = buf.data_mut();
                        for (r, &t) in targets.iter().enumerate() {
                            let row = &xv[r * m..(r + 1) * m];
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                            for c in 0..m {
                                let p = (row[c] - max).exp() / denom;
                                let onehot = if c == t { 1.0 } else { 0.0 };
                                dst[r * m + c] += gs * (p - onehot);
                            }
                        }
                    });
                }
                Op::SliceCols { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    let (n, m) = mat_shape(self.nodes[x].value.shape());
                    self.accum(&mut grads, x, |buf| {
                        let dst = buf.data_mut();
                        for r in 0..n {
                            for c in 0..len {
                                dst[r * m + start + c] += g.data()[r * len + c];
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let n = mat_shape(self.nodes[parts[0]].value.shape()).0;
                    let total = mat_shape(self.nodes[id].value.shape()).1;
                    let mut off = 0;
                    for p in parts {
                        let w = mat_shape(self.nodes[p].value.shape()).1;
                        if self.needs(p) {
                            let start = off;
                            self.accum(&mut grads, p, |buf| {
                                let dst = buf.data_mut();
                                for r in 0..n {
                                    for c in 0..w {
                                        dst[r * w + c] += g.data()[r * total + start + c];
                                    }
                                }
                            });
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let m = mat_shape(self.nodes[id].value.shape()).1;
                    let mut row_off = 0;
                    for p in parts {
                        let n = mat_shape(self.nodes[p].value.shape()).0;
                        if self.needs(p) {
                            let start = row_off * m;
                            self.accum(&mut grads, p, |buf| {
                                for (o, gv) in buf
                                    .data_mut()
                                    .iter_mut()
                                    .zip(&g.data()[start..start + n * m])
                                {
                                    *o += gv;
                                }
                            });
                        }
                        row_off += n;
                    }
                }
                Op::SqDistRows(x, table) => {
                    let (x, table) = (*x, *table);
                    let (n, c) = mat_shape(self.nodes[x].value.shape());
                    let (m, _) = mat_shape(self.nodes[table].value.shape());
                    let xv = self.nodes[x].value.data().to_vec();
                    let tv = self.nodes[table].value.data().to_vec();
                    if self.needs(x) {
                        self.accum(&mut grads, x, |buf| {
                            let dst = buf.data_mut();
                            for r in 0..n {
                                for col in 0..m {
                                    let gv = g.data()[r * m + col];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for cc in 0..c {
                                        dst[r * c + cc] +=
                                            gv * 2.0 * (xv[r * c + cc] - tv[col * c + cc]);
                                    }
                                }
                            }
                        });
                    }
                    if self.needs(table) {
                        self.accum(&mut grads, table, |buf| {
                            let dst = buf.data_mut();
                            for r in 0..n {
                                for col in 0..m {
                                    let gv = g.data()[r * m + col];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for cc in 0..c {
                                        dst[col * c + cc] +=
                                            gv * 2.0 * (tv[col * c + cc] - xv[r * c + cc]);
                                    }
                                }
                            }
                        });
                    }
                }
                Op::GridToSites(x) => {
                    let x = *x;
                    let xs = self.grid(x);
                    self.accum(&mut grads, x, |buf| {
                        let dst = buf.data_mut();
                        for k in 0..xs.d {
                            for j in 0..xs.w {
                                for i in 0..xs.h {
                                    let s = i + xs.h * (j + xs.w * k);
                                    for c in 0..xs.c {
                                        dst[xs.index(c, k, i, j)] += g.data()[s * xs.c + c];
                                    }
                                }
                            }
                        }
                    });
                }
                Op::SitesToGrid { x, shape } => {
                    let (x, os) = (*x, *shape);
                    self.accum(&mut grads, x, |buf| {
                        let dst = buf.data_mut();
                        for k in 0..os.d {
                            for j in 0..os.w {
                                for i in 0..os.h {
                                    let s = i + os.h * (j + os.w * k);
                                    for c in 0..os.c {
                                        dst[s * os.c + c] += g.data()[os.index(c, k, i, j)];
                                    }
                                }
                            }
                        }
                    });
                }
            }
        }
        out
    }

    fn accum<F>(&self, grads: &mut [Option<Tensor>], id: NodeId, f: F)
    where
        F: FnOnce(&mut Tensor),
    {
        if !self.nodes[id].needs_grad {
            return;
        }
        let buf = grads[id]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[id].value.shape().to_vec()));
        f(buf);
    }
}

fn mat_shape(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [n, m] => (n, m),
        _ => panic!("expected matrix, got {shape:?}"),
    }
}

/// Standalone z-score of one vector with the engine's epsilon conventions.
pub fn zscore_row(row: &[f64], out: &mut [f64]) {
    let m = row.len() as f64;
    let mean = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    let std = var.sqrt();
    if std < ZSCORE_EPS {
        out.fill(0.0);
        return;
    }
    let inv = 1.0 / (std + ZSCORE_EPS);
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - mean) * inv;
    }
}

fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    parallel::for_each_chunk_mut(&mut out, m, |r, dst| {
        let arow = &a[r * k..(r + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, bv) in dst.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// a [N,K'] x b [M,K']^T -> [N,M] where K' = a's cols.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, kp: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    parallel::for_each_chunk_mut(&mut out, m, |r, dst| {
        let arow = &a[r * kp..(r + 1) * kp];
        for (c, o) in dst.iter_mut().enumerate() {
            let brow = &b[c * kp..(c + 1) * kp];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
    out
}

/// a^T x b where a is [N, P] and b is [N, Q] -> [P, Q].
fn matmul_tn(a: &[f64], b: &[f64], n: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    parallel::for_each_chunk_mut(&mut out, q, |r, dst| {
        for nn in 0..n {
            let av = a[nn * p + r];
            if av == 0.0 {
                continue;
            }
            let brow = &b[nn * q..(nn + 1) * q];
            for (o, bv) in dst.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        // Gradient at z must equal the gradient the same loss produces when
        // evaluated directly at the quantized value.
        let mut store = ParamStore::new();
        let z_slot = store
            .add("z", Tensor::new(vec![1, 3], vec![0.3, -0.7, 1.1]).unwrap())
            .unwrap();
        let zq_val = Tensor::new(vec![1, 3], vec![0.5, -1.0, 1.0]).unwrap();

        let mut g = Graph::new();
        let z = g.param(&store, z_slot);
        let zq = g.input(zq_val.clone());
        let st = g.straight_through(z, zq);
        assert_eq!(g.value(st).data(), zq_val.data());
        let sq = g.mul(st, st);
        let loss = g.mean_all(sq);
        let grads = g.backward(loss);
        let got = grads.get(z_slot).unwrap().data().to_vec();

        let mut store2 = ParamStore::new();
        let q_slot = store2.add("q", zq_val).unwrap();
        let mut g2 = Graph::new();
        let q = g2.param(&store2, q_slot);
        let sq = g2.mul(q, q);
        let loss = g2.mean_all(sq);
        let grads2 = g2.backward(loss);
        let expect = grads2.get(q_slot).unwrap().data().to_vec();
        assert_eq!(got, expect);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.37 - 2.0).collect()).unwrap());
        let y = g.softmax_rows(x);
        for r in 0..3 {
            let s: f64 = g.value(y).data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zscore_matches_hand_values() {
        let mut out = [0.0; 3];
        zscore_row(&[2.0, 4.0, 6.0], &mut out);
        // mean 4, population std sqrt(8/3)
        let e = 2.0 / (8.0f64 / 3.0).sqrt();
        assert!((out[0] + e).abs() < 1e-5, "{out:?}");
        assert!(out[1].abs() < 1e-12);
        assert!((out[2] - e).abs() < 1e-5);

        let mut c = [0.0; 4];
        zscore_row(&[5.0, 5.0, 5.0, 5.0], &mut c);
        assert_eq!(c, [0.0; 4]);
    }

    #[test]
    fn grid_site_roundtrip() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![2, 3, 4, 5], (0..120).map(|i| i as f64).collect()).unwrap();
        let x = g.input(t.clone());
        let s = g.grid_to_sites(x);
        assert_eq!(g.value(s).shape(), [60, 2]);
        let back = g.sites_to_grid(s, 2, (4, 5, 3));
        assert_eq!(g.value(back).data(), t.data());
    }

    #[test]
    fn voxel_shuffle_shapes_and_inverse_of_itself() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![8, 2, 2, 2], (0..64).map(|i| i as f64).collect()).unwrap();
        let x = g.input(t);
        let y = g.voxel_shuffle(x, 2);
        assert_eq!(g.value(y).shape(), [1, 4, 4, 4]);
        // each input value appears exactly once
        let mut seen: Vec<f64> = g.value(y).data().to_vec();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(seen, (0..64).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_small() {
        let mut g = Graph::new();
        let mut logits = vec![0.0; 2 * 3];
        logits[0] = 20.0; // row 0 -> class 0
        logits[5] = 20.0; // row 1 -> class 2
        let x = g.input(Tensor::new(vec![2, 3], logits).unwrap());
        let ce = g.cross_entropy_rows(x, vec![0, 2]);
        assert!(g.scalar(ce) < 1e-8);
    }
}
