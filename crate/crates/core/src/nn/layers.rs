//! Reusable layers built over the tape: linear maps, norms, convolutions,
//! multi-head attention and the feed-forward Transformer (FFT) block used by
//! both encoder and decoder stacks.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::params::{self, ParamId, ParamStore};
use super::tape::{NodeId, Tape};

/// Forward-pass context: the tape being built, the parameter store backing
/// it, and whether leaves should be trainable or frozen constants.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Fwd<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Fwd { tape, store, trainable: true }
    }

    pub fn frozen(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Fwd { tape, store, trainable: false }
    }

    pub fn leaf(&mut self, id: ParamId) -> NodeId {
        if self.trainable {
            self.tape.param(self.store, id)
        } else {
            self.tape.frozen(self.store, id)
        }
    }
}

#[derive(Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), params::xavier(rng, &[din, dout], din, dout));
        let b = store.add(&format!("{name}.b"), params::zeros(&[1, dout]));
        Linear { w, b: Some(b) }
    }

    /// Zero-initialized projection (used for the per-block style injections,
    /// which must start as a no-op).
    pub fn new_zeros(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Self {
        let w = store.add(&format!("{name}.w"), params::zeros(&[din, dout]));
        Linear { w, b: None }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let w = f.leaf(self.w);
        let y = f.tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = f.leaf(b);
                f.tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let g = store.add(&format!("{name}.g"), params::ones(&[1, dim]));
        let b = store.add(&format!("{name}.b"), params::zeros(&[1, dim]));
        LayerNorm { g, b }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let g = f.leaf(self.g);
        let b = f.leaf(self.b);
        f.tape.layer_norm(x, g, b)
    }
}

/// Per-channel normalization over time for `T x C` sequences. This is batch
/// norm at batch size one (instance norm): the model trains on independent
/// per-sample graphs, so statistics are per sample by construction.
#[derive(Clone)]
pub struct InstanceNorm1d {
    pub g: ParamId,
    pub b: ParamId,
}

impl InstanceNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let g = store.add(&format!("{name}.g"), params::ones(&[1, dim]));
        let b = store.add(&format!("{name}.b"), params::zeros(&[1, dim]));
        InstanceNorm1d { g, b }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let g = f.leaf(self.g);
        let b = f.leaf(self.b);
        f.tape.norm_cols(x, g, b)
    }
}

/// Per-channel normalization over the spatial axes of `[C, H, W]` maps.
#[derive(Clone)]
pub struct InstanceNorm2d {
    pub g: ParamId,
    pub b: ParamId,
}

impl InstanceNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let g = store.add(&format!("{name}.g"), params::ones(&[1, channels]));
        let b = store.add(&format!("{name}.b"), params::zeros(&[1, channels]));
        InstanceNorm2d { g, b }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let g = f.leaf(self.g);
        let b = f.leaf(self.b);
        f.tape.norm_channels(x, g, b)
    }
}

#[derive(Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            params::xavier(rng, &[k * cin, cout], k * cin, cout),
        );
        let b = store.add(&format!("{name}.b"), params::zeros(&[1, cout]));
        Conv1d { w, b, k }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let w = f.leaf(self.w);
        let b = f.leaf(self.b);
        f.tape.conv1d(x, w, b, self.k)
    }
}

#[derive(Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub stride: (usize, usize),
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: (usize, usize),
    ) -> Self {
        let fan_in = k * k * cin;
        let w = store.add(&format!("{name}.w"), params::xavier(rng, &[fan_in, cout], fan_in, cout));
        let b = store.add(&format!("{name}.b"), params::zeros(&[1, cout]));
        Conv2d { w, b, k, stride }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let w = f.leaf(self.w);
        let b = f.leaf(self.b);
        f.tape.conv2d(x, w, b, self.k, self.stride)
    }
}

#[derive(Clone)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Self {
        let table = store.add(&format!("{name}.table"), params::normal(rng, &[vocab, dim], 0.02));
        Embedding { table }
    }

    pub fn forward(&self, f: &mut Fwd, ids: &[usize]) -> NodeId {
        let table = f.leaf(self.table);
        f.tape.embed_rows(table, ids)
    }
}

#[derive(Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(store, rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(store, rng, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(store, rng, &format!("{name}.wo"), dim, dim),
            heads: heads,
        }
    }

    /// Attention with `q_in` as queries and `kv_in` as keys/values
    /// (`kv_in == q_in` for self-attention).
    pub fn forward(&self, f: &mut Fwd, q_in: NodeId, kv_in: NodeId) -> NodeId {
        self.forward_with_attn(f, q_in, kv_in).0
    }

    /// Also returns the per-head attention weight nodes (rows sum to 1).
    pub fn forward_with_attn(&self, f: &mut Fwd, q_in: NodeId, kv_in: NodeId) -> (NodeId, Vec<NodeId>) {
        let dim = f.tape.value(q_in).shape()[1];
        let dh = dim / self.heads;
        let q = self.wq.forward(f, q_in);
        let k = self.wk.forward(f, kv_in);
        let v = self.wv.forward(f, kv_in);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctxs = Vec::with_capacity(self.heads);
        let mut attns = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = f.tape.slice_cols(q, h * dh, dh);
            let kh = f.tape.slice_cols(k, h * dh, dh);
            let vh = f.tape.slice_cols(v, h * dh, dh);
            let scores = f.tape.matmul_nt(qh, kh);
            let scaled = f.tape.scale(scores, scale);
            let attn = f.tape.softmax_rows(scaled);
            let ctx = f.tape.matmul(attn, vh);
            ctxs.push(ctx);
            attns.push(attn);
        }
        let merged = f.tape.concat_cols(&ctxs);
        (self.wo.forward(f, merged), attns)
    }
}

/// Feed-forward Transformer block: self-attention and a two-layer 1-D
/// convolution, each with residual connection and layer norm.
#[derive(Clone)]
pub struct FftBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub ln2: LayerNorm,
}

impl FftBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        kernel: usize,
    ) -> Self {
        FftBlock {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            conv1: Conv1d::new(store, rng, &format!("{name}.conv1"), dim, hidden, kernel),
            conv2: Conv1d::new(store, rng, &format!("{name}.conv2"), hidden, dim, kernel),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let a = self.attn.forward(f, x, x);
        let r1 = f.tape.add(x, a);
        let x1 = self.ln1.forward(f, r1);
        let h = self.conv1.forward(f, x1);
        let h = f.tape.relu(h);
        let h = self.conv2.forward(f, h);
        let r2 = f.tape.add(x1, h);
        self.ln2.forward(f, r2)
    }
}

/// Two-conv scalar predictor used for duration, pitch and energy.
#[derive(Clone)]
pub struct VariancePredictor {
    pub conv1: Conv1d,
    pub ln1: LayerNorm,
    pub conv2: Conv1d,
    pub ln2: LayerNorm,
    pub out: Linear,
}

impl VariancePredictor {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        kernel: usize,
    ) -> Self {
        VariancePredictor {
            conv1: Conv1d::new(store, rng, &format!("{name}.conv1"), dim, dim, kernel),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            conv2: Conv1d::new(store, rng, &format!("{name}.conv2"), dim, dim, kernel),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, 1),
        }
    }

    /// `N x D -> N x 1` scalar track.
    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let h = self.conv1.forward(f, x);
        let h = f.tape.relu(h);
        let h = self.ln1.forward(f, h);
        let h = self.conv2.forward(f, h);
        let h = f.tape.relu(h);
        let h = self.ln2.forward(f, h);
        self.out.forward(f, h)
    }
}

/// Standard sinusoidal positional encoding table.
pub fn pos_encoding(len: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::<f64>::zeros((len, dim));
    for pos in 0..len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            pe[[pos, 2 * i]] = angle.sin();
            pe[[pos, 2 * i + 1]] = angle.cos();
        }
    }
    pe
}

/// Repeat a `1 x D` row `n` times.
pub fn broadcast_row(f: &mut Fwd, row: NodeId, n: usize) -> NodeId {
    f.tape.repeat_rows(row, &[n])
}
