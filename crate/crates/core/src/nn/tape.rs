//! Eager reverse-mode autodiff over `f64` ndarrays.
//!
//! A `Tape` is a per-sample computation graph: ops evaluate immediately and
//! record enough structure to run one reverse sweep. Sequences are laid out
//! rows-as-time (`T x C`); 2-D feature maps are `[C, H, W]`. Scalars are
//! `1 x 1`. Gradients for parameter leaves land in a `GradStore`; gradients
//! at interior nodes stay addressable for the straight-through checks.

use ndarray::{ArrayD, ArrayView2, ArrayView3, Axis, Ix2, Ix3, IxDyn};

use super::params::{Arr, GradStore, ParamId, ParamStore};

const NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Const,
    Param(ParamId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    OuterAdd(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    Matmul(NodeId, NodeId),
    MatmulNT(NodeId, NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LogFloor(NodeId, f64),
    Reciprocal(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    NormCols { x: NodeId, gain: NodeId, bias: NodeId },
    NormCh { x: NodeId, gain: NodeId, bias: NodeId },
    Conv1d { x: NodeId, w: NodeId, b: NodeId, k: usize },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, k: usize, stride: (usize, usize) },
    UpsampleW2(NodeId),
    EmbedRows { table: NodeId, ids: Vec<usize> },
    RepeatRows { x: NodeId, durations: Vec<usize> },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Transpose(NodeId),
    MeanRows(NodeId),
    RowSumSq(NodeId),
    RowNormalize(NodeId),
    L2NormRows(NodeId),
    SumAll(NodeId),
    MseLoss(NodeId, NodeId),
    L1Loss(NodeId, NodeId),
    CrossEntropyRows { logits: NodeId, targets: Vec<usize> },
    #[allow(dead_code)]
    StopGrad(NodeId),
    StraightThrough(NodeId),
    FramesFromMap(NodeId),
    MapFromFrames { x: NodeId, channels: usize, width: usize },
    AddChannelBias { x: NodeId, b: NodeId },
    AddTimeChannel { x: NodeId, m: NodeId },
}

struct Node {
    value: Arr,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients at every node after a backward sweep.
pub struct NodeGrads {
    grads: Vec<Option<Arr>>,
}

impl NodeGrads {
    pub fn get(&self, n: NodeId) -> Option<&Arr> {
        self.grads[n.0].as_ref()
    }
}

fn as2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d value")
}

fn as3(a: &Arr) -> ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("expected 3-d value")
}

fn scalar_arr(v: f64) -> Arr {
    ArrayD::from_elem(IxDyn(&[1, 1]), v)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Arr, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, n: NodeId) -> &Arr {
        &self.nodes[n.0].value
    }

    pub fn scalar(&self, n: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[n.0].value.len(), 1);
        *self.nodes[n.0].value.iter().next().expect("scalar node")
    }

    // ---- leaves ---------------------------------------------------------

    pub fn constant(&mut self, v: Arr) -> NodeId {
        self.push(v, Op::Const)
    }

    /// Trainable leaf: gradients flow into the `GradStore` slot for `id`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Frozen leaf: same value, no gradient.
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Const)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    /// `(R x C) + (1 x C)` row broadcast (bias add).
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        debug_assert_eq!(bv.nrows(), 1);
        debug_assert_eq!(av.ncols(), bv.ncols());
        let v = (&av + &bv.row(0)).into_dyn();
        self.push(v, Op::AddRow(a, b))
    }

    /// `(R x 1) + (1 x C) -> R x C`.
    pub fn outer_add(&mut self, col: NodeId, row: NodeId) -> NodeId {
        let cv = as2(self.value(col));
        let rv = as2(self.value(row));
        debug_assert_eq!(cv.ncols(), 1);
        debug_assert_eq!(rv.nrows(), 1);
        let (r, c) = (cv.nrows(), rv.ncols());
        let mut out = ndarray::Array2::<f64>::zeros((r, c));
        for i in 0..r {
            for j in 0..c {
                out[[i, j]] = cv[[i, 0]] + rv[[0, j]];
            }
        }
        self.push(out.into_dyn(), Op::OuterAdd(col, row))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::Shift(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn log_floor(&mut self, a: NodeId, floor: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(floor).ln());
        self.push(v, Op::LogFloor(a, floor))
    }

    pub fn reciprocal(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        self.push(v, Op::Reciprocal(a))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        debug_assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::Matmul(a, b))
    }

    /// `a . b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        debug_assert_eq!(av.ncols(), bv.ncols(), "matmul_nt inner dims");
        let v = av.dot(&bv.t()).into_dyn();
        self.push(v, Op::MatmulNT(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = as2(self.value(a)).t().as_standard_layout().to_owned().into_dyn();
        self.push(v, Op::Transpose(a))
    }

    // ---- normalization and softmax ---------------------------------------

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = as2(self.value(a));
        let mut out = av.to_owned();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(out.into_dyn(), Op::SoftmaxRows(a))
    }

    /// Per-row layer norm with learned gain/bias (both `1 x C`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = as2(self.value(x));
        let g = as2(self.value(gain));
        let b = as2(self.value(bias));
        let c = xv.ncols() as f64;
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let mean = row.sum() / c;
            let var = row.fold(0.0, |s, &v| s + (v - mean) * (v - mean)) / c;
            let rstd = 1.0 / (var + NORM_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[[0, j]] + b[[0, j]];
            }
        }
        self.push(out.into_dyn(), Op::LayerNorm { x, gain, bias })
    }

    /// Per-column normalization over the time axis of a `T x C` sequence
    /// (batch-size-1 batch norm, i.e. instance norm), with learned affine.
    pub fn norm_cols(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = as2(self.value(x));
        let g = as2(self.value(gain));
        let b = as2(self.value(bias));
        let t = xv.nrows() as f64;
        let mut out = xv.to_owned();
        for j in 0..xv.ncols() {
            let col = xv.column(j);
            let mean = col.sum() / t;
            let var = col.fold(0.0, |s, &v| s + (v - mean) * (v - mean)) / t;
            let rstd = 1.0 / (var + NORM_EPS).sqrt();
            for i in 0..xv.nrows() {
                out[[i, j]] = (xv[[i, j]] - mean) * rstd * g[[0, j]] + b[[0, j]];
            }
        }
        self.push(out.into_dyn(), Op::NormCols { x, gain, bias })
    }

    /// Per-channel normalization of a `[C, H, W]` map over its spatial axes
    /// (batch-size-1 batch norm), with learned affine of shape `1 x C`.
    pub fn norm_channels(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = as3(self.value(x)).to_owned();
        let g = as2(self.value(gain));
        let b = as2(self.value(bias));
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let n = (h * w) as f64;
        let mut out = xv.clone();
        for ci in 0..c {
            let plane = xv.index_axis(Axis(0), ci);
            let mean = plane.sum() / n;
            let var = plane.fold(0.0, |s, &v| s + (v - mean) * (v - mean)) / n;
            let rstd = 1.0 / (var + NORM_EPS).sqrt();
            let mut dst = out.index_axis_mut(Axis(0), ci);
            dst.mapv_inplace(|v| (v - mean) * rstd * g[[0, ci]] + b[[0, ci]]);
        }
        self.push(out.into_dyn(), Op::NormCh { x, gain, bias })
    }

    // ---- convolutions -----------------------------------------------------

    /// Same-padded 1-D convolution over a `T x Cin` sequence. Weights are
    /// `(k*Cin) x Cout` with offset-major layout, bias `1 x Cout`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, k: usize) -> NodeId {
        assert!(k % 2 == 1, "conv1d expects odd kernel");
        let xv = as2(self.value(x));
        let wv = as2(self.value(w));
        let bv = as2(self.value(b));
        let cin = xv.ncols();
        debug_assert_eq!(wv.nrows(), k * cin);
        let col = im2col_1d(&xv, k);
        let mut y = col.dot(&wv);
        y += &bv.row(0);
        self.push(y.into_dyn(), Op::Conv1d { x, w, b, k })
    }

    /// Same-padded 2-D convolution over `[Cin, H, W]`. Weights are
    /// `(k*k*Cin) x Cout` laid out `(kh, kw, c)`-major, bias `1 x Cout`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, k: usize, stride: (usize, usize)) -> NodeId {
        let xv = as3(self.value(x)).to_owned();
        let wv = as2(self.value(w));
        let bv = as2(self.value(b));
        let cout = wv.ncols();
        let (ho, wo, col) = im2col_2d(&xv.view(), k, stride);
        let mut y2 = col.dot(&wv);
        y2 += &bv.row(0);
        // (Ho*Wo) x Cout -> [Cout, Ho, Wo]
        let mut out = ndarray::Array3::<f64>::zeros((cout, ho, wo));
        for hi in 0..ho {
            for wi in 0..wo {
                for co in 0..cout {
                    out[[co, hi, wi]] = y2[[hi * wo + wi, co]];
                }
            }
        }
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, k, stride })
    }

    /// Nearest-neighbor 2x upsample along the last (frequency) axis.
    pub fn upsample_w2(&mut self, x: NodeId) -> NodeId {
        let xv = as3(self.value(x));
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = ndarray::Array3::<f64>::zeros((c, h, 2 * w));
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[[ci, hi, 2 * wi]] = xv[[ci, hi, wi]];
                    out[[ci, hi, 2 * wi + 1]] = xv[[ci, hi, wi]];
                }
            }
        }
        self.push(out.into_dyn(), Op::UpsampleW2(x))
    }

    // ---- gather / scatter shapes ------------------------------------------

    /// Row gather from a `V x D` table.
    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = as2(self.value(table));
        let mut out = ndarray::Array2::<f64>::zeros((ids.len(), tv.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&tv.row(id));
        }
        self.push(out.into_dyn(), Op::EmbedRows { table, ids: ids.to_vec() })
    }

    /// Length regulation: repeat row `i` of `x` `durations[i]` times.
    pub fn repeat_rows(&mut self, x: NodeId, durations: &[usize]) -> NodeId {
        let xv = as2(self.value(x));
        debug_assert_eq!(xv.nrows(), durations.len());
        let total: usize = durations.iter().sum();
        let mut out = ndarray::Array2::<f64>::zeros((total, xv.ncols()));
        let mut t = 0;
        for (i, &d) in durations.iter().enumerate() {
            for _ in 0..d {
                out.row_mut(t).assign(&xv.row(i));
                t += 1;
            }
        }
        self.push(out.into_dyn(), Op::RepeatRows { x, durations: durations.to_vec() })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = as2(self.value(x));
        let v = xv.slice(ndarray::s![.., start..start + len]).to_owned().into_dyn();
        self.push(v, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        let views: Vec<ArrayView2<f64>> = xs.iter().map(|n| as2(self.value(*n))).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shapes").into_dyn();
        self.push(v, Op::ConcatCols(xs.to_vec()))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> NodeId {
        let views: Vec<ArrayView2<f64>> = xs.iter().map(|n| as2(self.value(*n))).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shapes").into_dyn();
        self.push(v, Op::ConcatRows(xs.to_vec()))
    }

    /// `[C, T, W] -> T x (C*W)` per-frame flattening.
    pub fn frames_from_map(&mut self, x: NodeId) -> NodeId {
        let xv = as3(self.value(x));
        let (c, t, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = ndarray::Array2::<f64>::zeros((t, c * w));
        for ti in 0..t {
            for ci in 0..c {
                for wi in 0..w {
                    out[[ti, ci * w + wi]] = xv[[ci, ti, wi]];
                }
            }
        }
        self.push(out.into_dyn(), Op::FramesFromMap(x))
    }

    /// `T x (C*W) -> [C, T, W]`, inverse of `frames_from_map`.
    pub fn map_from_frames(&mut self, x: NodeId, channels: usize, width: usize) -> NodeId {
        let xv = as2(self.value(x));
        let t = xv.nrows();
        debug_assert_eq!(xv.ncols(), channels * width);
        let mut out = ndarray::Array3::<f64>::zeros((channels, t, width));
        for ti in 0..t {
            for ci in 0..channels {
                for wi in 0..width {
                    out[[ci, ti, wi]] = xv[[ti, ci * width + wi]];
                }
            }
        }
        self.push(out.into_dyn(), Op::MapFromFrames { x, channels, width })
    }

    /// Add a per-channel scalar (`1 x C`) to every spatial position.
    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = as3(self.value(x)).to_owned();
        let bv = as2(self.value(b));
        let mut out = xv;
        for (ci, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            plane += bv[[0, ci]];
        }
        self.push(out.into_dyn(), Op::AddChannelBias { x, b })
    }

    /// Add a `T x C` signal to a `[C, T, W]` map, broadcast over W.
    pub fn add_time_channel(&mut self, x: NodeId, m: NodeId) -> NodeId {
        let xv = as3(self.value(x)).to_owned();
        let mv = as2(self.value(m));
        let (c, t, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        debug_assert_eq!((mv.nrows(), mv.ncols()), (t, c));
        let mut out = xv;
        for ci in 0..c {
            for ti in 0..t {
                for wi in 0..w {
                    out[[ci, ti, wi]] += mv[[ti, ci]];
                }
            }
        }
        self.push(out.into_dyn(), Op::AddTimeChannel { x, m })
    }

    // ---- reductions and losses ---------------------------------------------

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = as2(self.value(x));
        let v = xv.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0)).into_dyn();
        self.push(v, Op::MeanRows(x))
    }

    pub fn row_sum_sq(&mut self, x: NodeId) -> NodeId {
        let xv = as2(self.value(x));
        let mut out = ndarray::Array2::<f64>::zeros((xv.nrows(), 1));
        for (i, row) in xv.rows().into_iter().enumerate() {
            out[[i, 0]] = row.fold(0.0, |s, &v| s + v * v);
        }
        self.push(out.into_dyn(), Op::RowSumSq(x))
    }

    pub fn row_normalize(&mut self, x: NodeId) -> NodeId {
        let xv = as2(self.value(x));
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(out.into_dyn(), Op::RowNormalize(x))
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xv = as2(self.value(x));
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let n = row.fold(0.0, |s, &v| s + v * v).sqrt().max(L2_EPS);
            row.mapv_inplace(|v| v / n);
        }
        self.push(out.into_dyn(), Op::L2NormRows(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = scalar_arr(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let d = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let v = scalar_arr(d.mapv(|x| x * x).sum() / d.len() as f64);
        self.push(v, Op::MseLoss(a, b))
    }

    pub fn l1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let d = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let v = scalar_arr(d.mapv(f64::abs).sum() / d.len() as f64);
        self.push(v, Op::L1Loss(a, b))
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = as2(self.value(logits));
        debug_assert_eq!(lv.nrows(), targets.len());
        let mut total = 0.0;
        for (row, &t) in lv.rows().into_iter().zip(targets) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.fold(0.0, |s, &x| s + (x - max).exp()).ln();
            total += lse - row[t];
        }
        let v = scalar_arr(total / targets.len() as f64);
        self.push(v, Op::CrossEntropyRows { logits, targets: targets.to_vec() })
    }

    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.push(v, Op::StopGrad(x))
    }

    /// Value substitution with identity gradient: the node's value is
    /// `replacement` bit-exactly, while backward copies the incoming
    /// gradient to `x` unchanged (straight-through estimator).
    pub fn straight_through(&mut self, x: NodeId, replacement: Arr) -> NodeId {
        debug_assert_eq!(self.nodes[x.0].value.shape(), replacement.shape());
        self.push(replacement, Op::StraightThrough(x))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from scalar `loss` with seed 1.
    pub fn backward(&self, loss: NodeId, grads: &mut GradStore) -> NodeGrads {
        self.backward_seeded(&[(loss, scalar_arr(1.0))], grads)
    }

    /// Reverse sweep with explicit seed gradients (several roots allowed).
    pub fn backward_seeded(&self, seeds: &[(NodeId, Arr)], grads: &mut GradStore) -> NodeGrads {
        let mut g: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        for (node, seed) in seeds {
            debug_assert_eq!(self.nodes[node.0].value.shape(), seed.shape());
            match &mut g[node.0] {
                Some(acc) => *acc += seed,
                slot => *slot = Some(seed.clone()),
            }
        }
        for i in (0..self.nodes.len()).rev() {
            let gy = match g[i].take() {
                Some(x) => x,
                None => continue,
            };
            self.back_one(i, &gy, &mut g, grads);
            g[i] = Some(gy);
        }
        NodeGrads { grads: g }
    }

    fn back_one(&self, i: usize, gy: &Arr, g: &mut [Option<Arr>], grads: &mut GradStore) {
        fn acc(g: &mut [Option<Arr>], n: NodeId, delta: Arr) {
            match &mut g[n.0] {
                Some(acc) => *acc += &delta,
                slot => *slot = Some(delta),
            }
        }
        match &self.nodes[i].op {
            Op::Const => {}
            Op::Param(id) => grads.accumulate(*id, gy),
            Op::Add(a, b) => {
                acc(g, *a, gy.clone());
                acc(g, *b, gy.clone());
            }
            Op::AddRow(a, b) => {
                acc(g, *a, gy.clone());
                let gv = as2(gy);
                let db = gv.sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn();
                acc(g, *b, db);
            }
            Op::OuterAdd(col, row) => {
                let gv = as2(gy);
                let dcol = gv.sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn();
                let drow = gv.sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn();
                acc(g, *col, dcol);
                acc(g, *row, drow);
            }
            Op::Sub(a, b) => {
                acc(g, *a, gy.clone());
                acc(g, *b, -gy.clone());
            }
            Op::Mul(a, b) => {
                let da = gy * &self.nodes[b.0].value;
                let db = gy * &self.nodes[a.0].value;
                acc(g, *a, da);
                acc(g, *b, db);
            }
            Op::Scale(a, c) => acc(g, *a, gy * *c),
            Op::Shift(a) => acc(g, *a, gy.clone()),
            Op::Matmul(a, b) => {
                let gv = as2(gy);
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                acc(g, *a, gv.dot(&bv.t()).into_dyn());
                acc(g, *b, av.t().dot(&gv).into_dyn());
            }
            Op::MatmulNT(a, b) => {
                let gv = as2(gy);
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                acc(g, *a, gv.dot(&bv).into_dyn());
                acc(g, *b, gv.t().dot(&av).into_dyn());
            }
            Op::Relu(a) => {
                let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(g, *a, gy * &mask);
            }
            Op::SoftmaxRows(a) => {
                let y = as2(&self.nodes[i].value);
                let gv = as2(gy);
                let mut dx = y.to_owned();
                for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let dot = gv.row(r).dot(&y.row(r));
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = y[[r, j]] * (gv[[r, j]] - dot);
                    }
                }
                acc(g, *a, dx.into_dyn());
            }
            Op::LogFloor(a, floor) => {
                let xv = &self.nodes[a.0].value;
                let dx = ndarray::Zip::from(gy).and(xv).map_collect(|&gi, &x| {
                    if x > *floor {
                        gi / x
                    } else {
                        0.0
                    }
                });
                acc(g, *a, dx);
            }
            Op::Reciprocal(a) => {
                let y = &self.nodes[i].value;
                acc(g, *a, -(gy * y * y));
            }
            Op::LayerNorm { x, gain, bias } => {
                let (dx, dg, db) = norm_backward(
                    as2(&self.nodes[x.0].value),
                    as2(&self.nodes[gain.0].value),
                    as2(gy),
                    NormAxis::Rows,
                );
                acc(g, *x, dx.into_dyn());
                acc(g, *gain, dg.into_dyn());
                acc(g, *bias, db.into_dyn());
            }
            Op::NormCols { x, gain, bias } => {
                let (dx, dg, db) = norm_backward(
                    as2(&self.nodes[x.0].value),
                    as2(&self.nodes[gain.0].value),
                    as2(gy),
                    NormAxis::Cols,
                );
                acc(g, *x, dx.into_dyn());
                acc(g, *gain, dg.into_dyn());
                acc(g, *bias, db.into_dyn());
            }
            Op::NormCh { x, gain, bias } => {
                let xv = as3(&self.nodes[x.0].value);
                let gv = as2(&self.nodes[gain.0].value);
                let gyv = as3(gy);
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let n = (h * w) as f64;
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                let mut dgain = ndarray::Array2::<f64>::zeros((1, c));
                let mut dbias = ndarray::Array2::<f64>::zeros((1, c));
                for ci in 0..c {
                    let plane = xv.index_axis(Axis(0), ci);
                    let gplane = gyv.index_axis(Axis(0), ci);
                    let mean = plane.sum() / n;
                    let var = plane.fold(0.0, |s, &v| s + (v - mean) * (v - mean)) / n;
                    let rstd = 1.0 / (var + NORM_EPS).sqrt();
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for (xi, gi) in plane.iter().zip(gplane.iter()) {
                        let xh = (xi - mean) * rstd;
                        sum_g += gi;
                        sum_gx += gi * xh;
                        dgain[[0, ci]] += gi * xh;
                        dbias[[0, ci]] += gi;
                    }
                    let gamma = gv[[0, ci]];
                    let mut dplane = dx.index_axis_mut(Axis(0), ci);
                    for ((d, xi), gi) in dplane.iter_mut().zip(plane.iter()).zip(gplane.iter()) {
                        let xh = (xi - mean) * rstd;
                        *d = gamma * rstd * (gi - sum_g / n - xh * sum_gx / n);
                    }
                }
                acc(g, *x, dx.into_dyn());
                acc(g, *gain, dgain.into_dyn());
                acc(g, *bias, dbias.into_dyn());
            }
            Op::Conv1d { x, w, b, k } => {
                let xv = as2(&self.nodes[x.0].value);
                let wv = as2(&self.nodes[w.0].value);
                let gv = as2(gy);
                let col = im2col_1d(&xv, *k);
                let dw = col.t().dot(&gv);
                let db = gv.sum_axis(Axis(0)).insert_axis(Axis(0));
                let dcol = gv.dot(&wv.t());
                let dx = col2im_1d(&dcol.view(), xv.nrows(), xv.ncols(), *k);
                acc(g, *x, dx.into_dyn());
                acc(g, *w, dw.into_dyn());
                acc(g, *b, db.into_dyn());
            }
            Op::Conv2d { x, w, b, k, stride } => {
                let xv = as3(&self.nodes[x.0].value).to_owned();
                let wv = as2(&self.nodes[w.0].value);
                let gv = as3(gy);
                let (cout, ho, wo) = (gv.shape()[0], gv.shape()[1], gv.shape()[2]);
                let mut g2 = ndarray::Array2::<f64>::zeros((ho * wo, cout));
                for co in 0..cout {
                    for hi in 0..ho {
                        for wi in 0..wo {
                            g2[[hi * wo + wi, co]] = gv[[co, hi, wi]];
                        }
                    }
                }
                let (_, _, col) = im2col_2d(&xv.view(), *k, *stride);
                let dw = col.t().dot(&g2);
                let db = g2.sum_axis(Axis(0)).insert_axis(Axis(0));
                let dcol = g2.dot(&wv.t());
                let dx = col2im_2d(&dcol.view(), xv.shape(), *k, *stride);
                acc(g, *x, dx.into_dyn());
                acc(g, *w, dw.into_dyn());
                acc(g, *b, db.into_dyn());
            }
            Op::UpsampleW2(x) => {
                let gv = as3(gy);
                let (c, h, w2) = (gv.shape()[0], gv.shape()[1], gv.shape()[2]);
                let w = w2 / 2;
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            dx[[ci, hi, wi]] = gv[[ci, hi, 2 * wi]] + gv[[ci, hi, 2 * wi + 1]];
                        }
                    }
                }
                acc(g, *x, dx.into_dyn());
            }
            Op::EmbedRows { table, ids } => {
                let tv = as2(&self.nodes[table.0].value);
                let gv = as2(gy);
                let mut dt = ndarray::Array2::<f64>::zeros((tv.nrows(), tv.ncols()));
                for (r, &id) in ids.iter().enumerate() {
                    let mut dst = dt.row_mut(id);
                    dst += &gv.row(r);
                }
                acc(g, *table, dt.into_dyn());
            }
            Op::RepeatRows { x, durations } => {
                let gv = as2(gy);
                let cols = gv.ncols();
                let mut dx = ndarray::Array2::<f64>::zeros((durations.len(), cols));
                let mut t = 0;
                for (i2, &d) in durations.iter().enumerate() {
                    for _ in 0..d {
                        let mut dst = dx.row_mut(i2);
                        dst += &gv.row(t);
                        t += 1;
                    }
                }
                acc(g, *x, dx.into_dyn());
            }
            Op::SliceCols { x, start, len } => {
                let xv = as2(&self.nodes[x.0].value);
                let gv = as2(gy);
                let mut dx = ndarray::Array2::<f64>::zeros((xv.nrows(), xv.ncols()));
                dx.slice_mut(ndarray::s![.., *start..start + len]).assign(&gv);
                acc(g, *x, dx.into_dyn());
            }
            Op::ConcatCols(xs) => {
                let gv = as2(gy);
                let mut start = 0;
                for n in xs {
                    let w = as2(&self.nodes[n.0].value).ncols();
                    let part = gv.slice(ndarray::s![.., start..start + w]).to_owned();
                    acc(g, *n, part.into_dyn());
                    start += w;
                }
            }
            Op::ConcatRows(xs) => {
                let gv = as2(gy);
                let mut start = 0;
                for n in xs {
                    let h = as2(&self.nodes[n.0].value).nrows();
                    let part = gv.slice(ndarray::s![start..start + h, ..]).to_owned();
                    acc(g, *n, part.into_dyn());
                    start += h;
                }
            }
            Op::Transpose(x) => {
                let dt = as2(gy).t().as_standard_layout().to_owned();
                acc(g, *x, dt.into_dyn());
            }
            Op::MeanRows(x) => {
                let xv = as2(&self.nodes[x.0].value);
                let gv = as2(gy);
                let r = xv.nrows() as f64;
                let mut dx = ndarray::Array2::<f64>::zeros((xv.nrows(), xv.ncols()));
                for mut row in dx.rows_mut() {
                    row.assign(&gv.row(0));
                    row.mapv_inplace(|v| v / r);
                }
                acc(g, *x, dx.into_dyn());
            }
            Op::RowSumSq(x) => {
                let xv = as2(&self.nodes[x.0].value);
                let gv = as2(gy);
                let mut dx = xv.to_owned();
                for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                    row.mapv_inplace(|v| 2.0 * v * gv[[r, 0]]);
                }
                acc(g, *x, dx.into_dyn());
            }
            Op::RowNormalize(x) => {
                let xv = as2(&self.nodes[x.0].value);
                let y = as2(&self.nodes[i].value);
                let gv = as2(gy);
                let mut dx = xv.to_owned();
                for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let s = xv.row(r).sum();
                    let dot = gv.row(r).dot(&y.row(r));
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = (gv[[r, j]] - dot) / s;
                    }
                }
                acc(g, *x, dx.into_dyn());
            }
            Op::L2NormRows(x) => {
                let xv = as2(&self.nodes[x.0].value);
                let y = as2(&self.nodes[i].value);
                let gv = as2(gy);
                let mut dx = xv.to_owned();
                for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let n = xv.row(r).fold(0.0, |s, &v| s + v * v).sqrt().max(L2_EPS);
                    let dot = gv.row(r).dot(&y.row(r));
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = gv[[r, j]] / n - y[[r, j]] * dot / n;
                    }
                }
                acc(g, *x, dx.into_dyn());
            }
            Op::SumAll(x) => {
                let s = gy.iter().next().copied().unwrap_or(0.0);
                let dx = self.nodes[x.0].value.mapv(|_| s);
                acc(g, *x, dx);
            }
            Op::MseLoss(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let s = gy.iter().next().copied().unwrap_or(0.0);
                let n = av.len() as f64;
                let d = (av - bv) * (2.0 * s / n);
                acc(g, *a, d.clone());
                acc(g, *b, -d);
            }
            Op::L1Loss(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let s = gy.iter().next().copied().unwrap_or(0.0);
                let n = av.len() as f64;
                let d = ndarray::Zip::from(av).and(bv).map_collect(|&x, &y| {
                    let diff = x - y;
                    if diff > 0.0 {
                        s / n
                    } else if diff < 0.0 {
                        -s / n
                    } else {
                        0.0
                    }
                });
                acc(g, *a, d.clone());
                acc(g, *b, -d);
            }
            Op::CrossEntropyRows { logits, targets } => {
                let lv = as2(&self.nodes[logits.0].value);
                let s = gy.iter().next().copied().unwrap_or(0.0);
                let r = targets.len() as f64;
                let mut dx = lv.to_owned();
                for (ri, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    row.mapv_inplace(|x| (x - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|x| x / sum * s / r);
                    row[targets[ri]] -= s / r;
                }
                acc(g, *logits, dx.into_dyn());
            }
            Op::StopGrad(_) => {}
            Op::StraightThrough(x) => acc(g, *x, gy.clone()),
            Op::FramesFromMap(x) => {
                let xv = as3(&self.nodes[x.0].value);
                let gv = as2(gy);
                let (c, t, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let mut dx = ndarray::Array3::<f64>::zeros((c, t, w));
                for ti in 0..t {
                    for ci in 0..c {
                        for wi in 0..w {
                            dx[[ci, ti, wi]] = gv[[ti, ci * w + wi]];
                        }
                    }
                }
                acc(g, *x, dx.into_dyn());
            }
            Op::MapFromFrames { x, channels, width } => {
                let gv = as3(gy);
                let t = gv.shape()[1];
                let mut dx = ndarray::Array2::<f64>::zeros((t, channels * width));
                for ti in 0..t {
                    for ci in 0..*channels {
                        for wi in 0..*width {
                            dx[[ti, ci * width + wi]] = gv[[ci, ti, wi]];
                        }
                    }
                }
                acc(g, *x, dx.into_dyn());
            }
            Op::AddChannelBias { x, b } => {
                acc(g, *x, gy.clone());
                let gv = as3(gy);
                let c = gv.shape()[0];
                let mut db = ndarray::Array2::<f64>::zeros((1, c));
                for ci in 0..c {
                    db[[0, ci]] = gv.index_axis(Axis(0), ci).sum();
                }
                acc(g, *b, db.into_dyn());
            }
            Op::AddTimeChannel { x, m } => {
                acc(g, *x, gy.clone());
                let gv = as3(gy);
                let (c, t, w) = (gv.shape()[0], gv.shape()[1], gv.shape()[2]);
                let mut dm = ndarray::Array2::<f64>::zeros((t, c));
                for ci in 0..c {
                    for ti in 0..t {
                        for wi in 0..w {
                            dm[[ti, ci]] += gv[[ci, ti, wi]];
                        }
                    }
                }
                acc(g, *m, dm.into_dyn());
            }
        }
    }
}

enum NormAxis {
    Rows,
    Cols,
}

/// Shared layer-norm style backward; `Rows` normalizes each row (stats over
/// C), `Cols` normalizes each column (stats over T).
fn norm_backward(
    x: ArrayView2<f64>,
    gain: ArrayView2<f64>,
    gy: ArrayView2<f64>,
    axis: NormAxis,
) -> (ndarray::Array2<f64>, ndarray::Array2<f64>, ndarray::Array2<f64>) {
    let (r, c) = (x.nrows(), x.ncols());
    let mut dx = ndarray::Array2::<f64>::zeros((r, c));
    let mut dgain = ndarray::Array2::<f64>::zeros((1, c));
    let mut dbias = ndarray::Array2::<f64>::zeros((1, c));
    match axis {
        NormAxis::Rows => {
            let n = c as f64;
            for ri in 0..r {
                let row = x.row(ri);
                let mean = row.sum() / n;
                let var = row.fold(0.0, |s, &v| s + (v - mean) * (v - mean)) / n;
                let rstd = 1.0 / (var + NORM_EPS).sqrt();
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for j in 0..c {
                    let xh = (x[[ri, j]] - mean) * rstd;
                    let gg = gy[[ri, j]] * gain[[0, j]];
                    sum_g += gg;
                    sum_gx += gg * xh;
                    dgain[[0, j]] += gy[[ri, j]] * xh;
                    dbias[[0, j]] += gy[[ri, j]];
                }
                for j in 0..c {
                    let xh = (x[[ri, j]] - mean) * rstd;
                    let gg = gy[[ri, j]] * gain[[0, j]];
                    dx[[ri, j]] = rstd * (gg - sum_g / n - xh * sum_gx / n);
                }
            }
        }
        NormAxis::Cols => {
            let n = r as f64;
            for j in 0..c {
                let col = x.column(j);
                let mean = col.sum() / n;
                let var = col.fold(0.0, |s, &v| s + (v - mean) * (v - mean)) / n;
                let rstd = 1.0 / (var + NORM_EPS).sqrt();
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for ri in 0..r {
                    let xh = (x[[ri, j]] - mean) * rstd;
                    let gg = gy[[ri, j]] * gain[[0, j]];
                    sum_g += gg;
                    sum_gx += gg * xh;
                    dgain[[0, j]] += gy[[ri, j]] * xh;
                    dbias[[0, j]] += gy[[ri, j]];
                }
                for ri in 0..r {
                    let xh = (x[[ri, j]] - mean) * rstd;
                    let gg = gy[[ri, j]] * gain[[0, j]];
                    dx[[ri, j]] = rstd * (gg - sum_g / n - xh * sum_gx / n);
                }
            }
        }
    }
    (dx, dgain, dbias)
}

fn im2col_1d(x: &ArrayView2<f64>, k: usize) -> ndarray::Array2<f64> {
    let (t, cin) = (x.nrows(), x.ncols());
    let pad = (k - 1) / 2;
    let mut col = ndarray::Array2::<f64>::zeros((t, k * cin));
    for ti in 0..t {
        for j in 0..k {
            let src = ti as isize + j as isize - pad as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            for c in 0..cin {
                col[[ti, j * cin + c]] = x[[src as usize, c]];
            }
        }
    }
    col
}

fn col2im_1d(dcol: &ArrayView2<f64>, t: usize, cin: usize, k: usize) -> ndarray::Array2<f64> {
    let pad = (k - 1) / 2;
    let mut dx = ndarray::Array2::<f64>::zeros((t, cin));
    for ti in 0..t {
        for j in 0..k {
            let src = ti as isize + j as isize - pad as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            for c in 0..cin {
                dx[[src as usize, c]] += dcol[[ti, j * cin + c]];
            }
        }
    }
    dx
}

/// TF-style "same" padding: output is `ceil(in/stride)` per axis.
fn same_pad(input: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(input);
    (out, total / 2)
}

fn im2col_2d(
    x: &ArrayView3<f64>,
    k: usize,
    stride: (usize, usize),
) -> (usize, usize, ndarray::Array2<f64>) {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, ph) = same_pad(h, k, stride.0);
    let (wo, pw) = same_pad(w, k, stride.1);
    let mut col = ndarray::Array2::<f64>::zeros((ho * wo, k * k * cin));
    for hi in 0..ho {
        for wi in 0..wo {
            let row = hi * wo + wi;
            for kh in 0..k {
                let sh = (hi * stride.0 + kh) as isize - ph as isize;
                if sh < 0 || sh >= h as isize {
                    continue;
                }
                for kw in 0..k {
                    let sw = (wi * stride.1 + kw) as isize - pw as isize;
                    if sw < 0 || sw >= w as isize {
                        continue;
                    }
                    for c in 0..cin {
                        col[[row, (kh * k + kw) * cin + c]] = x[[c, sh as usize, sw as usize]];
                    }
                }
            }
        }
    }
    (ho, wo, col)
}

fn col2im_2d(
    dcol: &ArrayView2<f64>,
    xshape: &[usize],
    k: usize,
    stride: (usize, usize),
) -> ndarray::Array3<f64> {
    let (cin, h, w) = (xshape[0], xshape[1], xshape[2]);
    let (ho, ph) = same_pad(h, k, stride.0);
    let (wo, pw) = same_pad(w, k, stride.1);
    let mut dx = ndarray::Array3::<f64>::zeros((cin, h, w));
    for hi in 0..ho {
        for wi in 0..wo {
            let row = hi * wo + wi;
            for kh in 0..k {
                let sh = (hi * stride.0 + kh) as isize - ph as isize;
                if sh < 0 || sh >= h as isize {
                    continue;
                }
                for kw in 0..k {
                    let sw = (wi * stride.1 + kw) as isize - pw as isize;
                    if sw < 0 || sw >= w as isize {
                        continue;
                    }
                    for c in 0..cin {
                        dx[[c, sh as usize, sw as usize]] += dcol[[row, (kh * k + kw) * cin + c]];
                    }
                }
            }
        }
    }
    dx
}
