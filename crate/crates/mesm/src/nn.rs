//! Parameter storage and the transformer building blocks shared by the
//! aligner, encoder, and decoder.

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::sync::Arc;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Index of a named parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Owns every learnable tensor of a model, by canonical name. The same
/// storage is injected into each step's tape, so modules holding the same
/// `ParamId` genuinely share weights.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// One forward pass: a tape with every parameter injected as a leaf, plus
/// the dropout state for this step.
pub struct Graph {
    pub tape: Tape,
    param_vars: Vec<Var>,
    pub training: bool,
    pub dropout: f64,
    rng: ChaCha8Rng,
}

impl Graph {
    pub fn new(store: &ParamStore, training: bool, dropout: f64, rng: ChaCha8Rng) -> Self {
        let mut tape = Tape::new();
        let param_vars = store.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Self { tape, param_vars, training, dropout, rng }
    }

    /// Graph with dropout disabled; used for evaluation and verification.
    pub fn inference(store: &ParamStore) -> Self {
        use rand::SeedableRng;
        Self::new(store, false, 0.0, ChaCha8Rng::seed_from_u64(0))
    }

    /// Inject the parameters onto an existing tape (which may already hold
    /// input leaves) instead of a fresh one.
    pub fn attach_inference(store: &ParamStore, mut tape: Tape) -> Self {
        use rand::SeedableRng;
        let param_vars = store.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Self { tape, param_vars, training: false, dropout: 0.0, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.param_vars[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.param_vars
    }

    /// Inverted dropout; identity when not training or rate is zero.
    pub fn apply_dropout(&mut self, x: Var) -> Var {
        if !self.training || self.dropout <= 0.0 {
            return x;
        }
        let (rows, cols) = self.tape.value(x).shape();
        let keep = 1.0 - self.dropout;
        let mut mask = Tensor::zeros(rows, cols);
        for v in mask.data_mut() {
            if self.rng.gen::<f64>() < keep {
                *v = 1.0 / keep;
            }
        }
        let m = self.tape.constant(mask);
        self.tape.mul_elem(x, m)
    }
}

/// Affine map `x @ w + b` with `w: in_dim x out_dim`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(&format!("{name}.w"), Tensor::xavier(in_dim, out_dim, rng));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(1, out_dim));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let m = g.tape.matmul(x, w);
        g.tape.add_row_broadcast(m, b)
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::filled(1, dim, 1.0));
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.tape.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Two-layer feed-forward with ReLU and dropout between the layers.
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            lin1: Linear::new(store, &format!("{name}.lin1"), dim, hidden, rng),
            lin2: Linear::new(store, &format!("{name}.lin2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.lin1.forward(g, x);
        let h = g.tape.relu(h);
        let h = g.apply_dropout(h);
        self.lin2.forward(g, h)
    }
}

/// Multi-head attention: `softmax(Q K^T / sqrt(d)) V` per head, heads
/// concatenated and mixed by an output projection. Invalid key/value
/// positions receive exactly zero attention.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dim % heads == 0, "model dim {dim} not divisible by {heads} heads");
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, keys_values: Var, kv_mask: &Arc<Vec<bool>>) -> Var {
        assert!(kv_mask.iter().any(|&m| m), "attention requires at least one valid key");
        let q = self.wq.forward(g, queries);
        let k = self.wk.forward(g, keys_values);
        let v = self.wv.forward(g, keys_values);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut ctx = None;
        for h in 0..self.heads {
            let qh = g.tape.slice_cols(q, h * head_dim, head_dim);
            let kh = g.tape.slice_cols(k, h * head_dim, head_dim);
            let vh = g.tape.slice_cols(v, h * head_dim, head_dim);
            let kt = g.tape.transpose(kh);
            let scores = g.tape.matmul(qh, kt);
            let scores = g.tape.scale(scores, scale);
            let attn = g.tape.masked_softmax_rows(scores, kv_mask.clone());
            let attn = g.apply_dropout(attn);
            let ctx_h = g.tape.matmul(attn, vh);
            ctx = Some(match ctx {
                None => ctx_h,
                Some(prev) => g.tape.concat_cols(prev, ctx_h),
            });
        }
        self.wo.forward(g, ctx.expect("at least one head"))
    }
}

/// Residual cross-attention block:
/// `out = x + dropout(FFN(LN(MHA(x, kv))))`.
///
/// Zero-initializing `ffn.lin2` makes the block the identity on its query
/// stream, which several verification tests rely on. Self-attention is the
/// `kv = x` special case.
pub struct CrossAttnBlock {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
    pub ffn: FeedForward,
}

impl CrossAttnBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, kv: Var, kv_mask: &Arc<Vec<bool>>) -> Var {
        let attn = self.attn.forward(g, x, kv, kv_mask);
        let normed = self.norm.forward(g, attn);
        let f = self.ffn.forward(g, normed);
        let f = g.apply_dropout(f);
        g.tape.add(x, f)
    }
}

/// Fixed sinusoidal positional encoding, `len x dim`.
pub fn sinusoidal_positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            pe.set(pos, 2 * i, (pos as f64 * freq).sin());
            pe.set(pos, 2 * i + 1, (pos as f64 * freq).cos());
        }
        if dim % 2 == 1 {
            let i = dim / 2;
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            pe.set(pos, dim - 1, (pos as f64 * freq).sin());
        }
    }
    pe
}

/// All-true mask of the given length.
pub fn full_mask(len: usize) -> Arc<Vec<bool>> {
    Arc::new(vec![true; len])
}

/// Finite-difference check of a scalar loss against every parameter in the
/// store. Samples up to `max_elems_per_tensor` entries of each tensor
/// (deterministically strided, endpoints included) and returns the worst
/// relative error together with the offending parameter name.
pub fn param_max_relative_error(
    store: &mut ParamStore,
    step: f64,
    max_elems_per_tensor: usize,
    build: &dyn Fn(&mut Graph) -> Var,
) -> (f64, String) {
    let analytic: Vec<Tensor> = {
        let mut g = Graph::inference(store);
        let out = build(&mut g);
        let grads = g.tape.backward_scalar(out);
        (0..store.len()).map(|i| grads.get(&g.tape, g.param(ParamId(i)))).collect()
    };
    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::inference(store);
        let out = build(&mut g);
        g.tape.value(out).item()
    };
    let mut worst = 0.0_f64;
    let mut worst_name = String::new();
    for i in 0..store.len() {
        let len = store.get(ParamId(i)).len();
        let stride = (len / max_elems_per_tensor.max(1)).max(1);
        let mut e = 0;
        while e < len {
            let orig = store.get(ParamId(i)).data()[e];
            store.get_mut(ParamId(i)).data_mut()[e] = orig + step;
            let up = eval(store);
            store.get_mut(ParamId(i)).data_mut()[e] = orig - step;
            let down = eval(store);
            store.get_mut(ParamId(i)).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i].data()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
                worst_name = format!("{}[{}]", store.name(ParamId(i)), e);
            }
            e += stride;
        }
    }
    (worst, worst_name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_relative_error;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn zero_param(store: &mut ParamStore, id: ParamId) {
        let t = store.get_mut(id);
        for v in t.data_mut() {
            *v = 0.0;
        }
    }

    #[test]
    fn block_is_identity_with_zero_ffn_output() {
        let mut r = rng(11);
        let mut store = ParamStore::new();
        let block = CrossAttnBlock::new(&mut store, "blk", 8, 2, 16, &mut r);
        zero_param(&mut store, block.ffn.lin2.w);

        let mut g = Graph::inference(&store);
        let x = g.tape.leaf(Tensor::xavier(5, 8, &mut r));
        let kv = g.tape.leaf(Tensor::xavier(3, 8, &mut r));
        let out = block.forward(&mut g, x, kv, &full_mask(3));
        let xin = g.tape.value(x).clone();
        assert_eq!(g.tape.value(out), &xin);
    }

    #[test]
    fn attention_ignores_masked_keys() {
        let mut r = rng(12);
        let mut store = ParamStore::new();
        let block = CrossAttnBlock::new(&mut store, "blk", 8, 2, 16, &mut r);

        let mut kv_data = Tensor::xavier(4, 8, &mut r);
        let mask = Arc::new(vec![true, true, false, true]);

        let run = |store: &ParamStore, kv_t: &Tensor| {
            let mut g = Graph::inference(store);
            let x = {
                let mut rr = rng(13);
                g.tape.leaf(Tensor::xavier(5, 8, &mut rr))
            };
            let kv = g.tape.leaf(kv_t.clone());
            let out = block.forward(&mut g, x, kv, &mask);
            g.tape.value(out).clone()
        };

        let base = run(&store, &kv_data);
        // Corrupt the masked row with garbage, including NaN.
        for (i, v) in kv_data.row_mut(2).iter_mut().enumerate() {
            *v = if i == 0 { f64::NAN } else { 1e12 };
        }
        let corrupted = run(&store, &kv_data);
        assert_eq!(base, corrupted);
    }

    #[test]
    fn block_gradcheck_through_attention() {
        let mut r = rng(14);
        let mut store = ParamStore::new();
        let block = CrossAttnBlock::new(&mut store, "blk", 6, 2, 8, &mut r);
        let x0 = Tensor::xavier(3, 6, &mut r);
        let kv0 = Tensor::xavier(4, 6, &mut r);

        // Check gradients with respect to the data inputs and the three
        // attention projections.
        let inputs = vec![
            x0,
            kv0,
            store.get(block.attn.wq.w).clone(),
            store.get(block.attn.wk.w).clone(),
            store.get(block.attn.wv.w).clone(),
        ];
        let err = max_relative_error(&inputs, 1e-5, &|tape, vars| {
            let q = tape.matmul(vars[0], vars[2]);
            let k = tape.matmul(vars[1], vars[3]);
            let v = tape.matmul(vars[1], vars[4]);
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt);
            let scores = tape.scale(scores, 1.0 / (6f64).sqrt());
            let attn = tape.masked_softmax_rows(scores, full_mask(4));
            let ctx = tape.matmul(attn, v);
            let s = tape.mul_elem(ctx, ctx);
            tape.sum_all(s)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn positional_encoding_shape_and_range() {
        let pe = sinusoidal_positional_encoding(7, 10);
        assert_eq!(pe.shape(), (7, 10));
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        // Row 0 alternates sin(0)=0, cos(0)=1.
        assert_eq!(pe.get(0, 0), 0.0);
        assert_eq!(pe.get(0, 1), 1.0);
    }

    #[test]
    fn dropout_disabled_outside_training() {
        let mut r = rng(15);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 4, 4, &mut r);
        let x0 = Tensor::xavier(3, 4, &mut r);
        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut g = Graph::inference(&store);
            let x = g.tape.leaf(x0.clone());
            let y = lin.forward(&mut g, x);
            let y = g.apply_dropout(y);
            outs.push(g.tape.value(y).clone());
        }
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn param_names_resolve() {
        let mut r = rng(16);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "proj.video", 4, 8, &mut r);
        assert_eq!(store.lookup("proj.video.w"), Some(lin.w));
        assert_eq!(store.name(lin.b), "proj.video.b");
    }
}
