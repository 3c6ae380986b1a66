//! Frame-word level enhancement: a weight-shared stack of cross-attention
//! blocks that (a) enhances frame features against the query words and
//! (b) with exchanged inputs reconstructs masked words for an auxiliary
//! language-modeling loss. Both passes read the same parameter storage, so
//! training the reconstruction sharpens the enhancement.

use crate::autodiff::Var;
use crate::config::MlmSupervision;
use crate::nn::{CrossAttnBlock, Graph, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub struct FrameWordEnhancer {
    /// Shared blocks: video-queries-words on the enhancement pass,
    /// words-query-video on the reconstruction pass.
    pub blocks: Vec<CrossAttnBlock>,
    /// Learnable embedding substituted at masked word positions.
    pub mask_embedding: ParamId,
    /// Word-probability head, D -> N_vocab.
    pub mlm_head: Linear,
    pub vocab_size: usize,
}

impl FrameWordEnhancer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        layers: usize,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| CrossAttnBlock::new(store, &format!("fw.block{i}"), dim, heads, ffn_hidden, rng))
            .collect();
        let mask_embedding = store.add("fw.mask_embedding", Tensor::xavier(1, dim, rng));
        let mlm_head = Linear::new(store, "fw.mlm_head", dim, vocab_size, rng);
        Self { blocks, mask_embedding, mlm_head, vocab_size }
    }

    /// Enhancement pass: frames as queries, words as keys/values. Shape is
    /// preserved; an empty stack is the identity.
    pub fn enhance_video(&self, g: &mut Graph, frames: Var, words: Var, word_mask: &Arc<Vec<bool>>) -> Var {
        let mut x = frames;
        for block in &self.blocks {
            x = block.forward(g, x, words, word_mask);
        }
        x
    }

    /// Substitute the learnable mask embedding at the given word rows.
    /// Gradients flow into the embedding through the indicator product.
    pub fn apply_word_mask(&self, g: &mut Graph, words: Var, positions: &[usize]) -> Var {
        let (rows, _cols) = g.tape.value(words).shape();
        let mut keep = Tensor::filled(rows, g.tape.value(words).cols(), 1.0);
        let mut indicator = Tensor::zeros(rows, 1);
        for &p in positions {
            assert!(p < rows, "mask position {p} outside sentence of {rows}");
            for v in keep.row_mut(p) {
                *v = 0.0;
            }
            indicator.set(p, 0, 1.0);
        }
        let keep = g.tape.constant(keep);
        let indicator = g.tape.constant(indicator);
        let kept = g.tape.mul_elem(words, keep);
        let embed = g.param(self.mask_embedding);
        let replacement = g.tape.matmul(indicator, embed);
        g.tape.add(kept, replacement)
    }

    /// Reconstruction pass with exchanged modalities: the masked words act
    /// as queries against the video. Returns `L_w x N_vocab` log
    /// probabilities; each row exponentiates to a distribution.
    pub fn reconstruct_words(
        &self,
        g: &mut Graph,
        masked_words: Var,
        frames: Var,
        frame_mask: &Arc<Vec<bool>>,
    ) -> Var {
        let mut x = masked_words;
        for block in &self.blocks {
            x = block.forward(g, x, frames, frame_mask);
        }
        let logits = self.mlm_head.forward(g, x);
        g.tape.log_softmax_rows(logits)
    }

    /// Probability view of [`reconstruct_words`] output.
    pub fn word_probabilities(&self, g: &mut Graph, log_probs: Var) -> Tensor {
        g.tape.value(log_probs).map(f64::exp)
    }
}

/// Mean negative log-likelihood of the correct tokens over the supervised
/// positions: every valid word in `AllWords` mode, the masked positions in
/// `MaskedOnly` mode.
pub fn reconstruction_loss(
    g: &mut Graph,
    log_probs: Var,
    token_ids: &[usize],
    word_mask: &[bool],
    mlm_positions: &[usize],
    scope: MlmSupervision,
) -> Var {
    let rows = g.tape.value(log_probs).rows();
    assert!(token_ids.len() <= rows, "more token ids than word rows");
    let mut supervised = vec![false; rows];
    match scope {
        MlmSupervision::AllWords => {
            for (i, m) in word_mask.iter().enumerate().take(rows) {
                supervised[i] = *m && i < token_ids.len();
            }
        }
        MlmSupervision::MaskedOnly => {
            for &p in mlm_positions {
                supervised[p] = p < token_ids.len();
            }
        }
    }
    let count = supervised.iter().filter(|&&s| s).count();
    assert!(count > 0, "empty supervision set for the reconstruction loss");
    // Pad target ids for unsupervised rows; their NLL never enters the mean.
    let ids: Vec<usize> = (0..rows).map(|i| if i < token_ids.len() { token_ids[i] } else { 0 }).collect();
    let nll = g.tape.nll_rows(log_probs, Arc::new(ids));
    let sel = Tensor::from_vec(rows, 1, supervised.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect());
    let sel = g.tape.constant(sel);
    let masked = g.tape.mul_elem(nll, sel);
    let sum = g.tape.sum_all(masked);
    g.tape.scale(sum, 1.0 / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::full_mask;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn build(dim: usize, layers: usize, vocab: usize, seed: u64) -> (ParamStore, FrameWordEnhancer) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let fw = FrameWordEnhancer::new(&mut store, dim, 2, dim * 2, layers, vocab, &mut r);
        (store, fw)
    }

    #[test]
    fn enhance_preserves_shape() {
        let (store, fw) = build(256, 2, 50, 1);
        let mut g = Graph::inference(&store);
        let mut r = rng(2);
        let frames = g.tape.leaf(Tensor::xavier(8, 256, &mut r));
        let words = g.tape.leaf(Tensor::xavier(5, 256, &mut r));
        let out = fw.enhance_video(&mut g, frames, words, &full_mask(5));
        assert_eq!(g.tape.value(out).shape(), (8, 256));
    }

    #[test]
    fn empty_stack_is_identity() {
        let (store, fw) = build(16, 0, 10, 3);
        let mut g = Graph::inference(&store);
        let mut r = rng(4);
        let frames_t = Tensor::xavier(6, 16, &mut r);
        let frames = g.tape.leaf(frames_t.clone());
        let words = g.tape.leaf(Tensor::xavier(4, 16, &mut r));
        let out = fw.enhance_video(&mut g, frames, words, &full_mask(4));
        assert_eq!(g.tape.value(out), &frames_t);
    }

    #[test]
    fn zeroed_ffn_outputs_give_residual_identity() {
        let (mut store, fw) = build(16, 3, 10, 5);
        for block in &fw.blocks {
            for v in store.get_mut(block.ffn.lin2.w).data_mut() {
                *v = 0.0;
            }
        }
        let mut g = Graph::inference(&store);
        let mut r = rng(6);
        let frames_t = Tensor::xavier(6, 16, &mut r);
        let frames = g.tape.leaf(frames_t.clone());
        let words = g.tape.leaf(Tensor::xavier(4, 16, &mut r));
        let out = fw.enhance_video(&mut g, frames, words, &full_mask(4));
        assert_eq!(g.tape.value(out), &frames_t);
    }

    #[test]
    fn reconstruction_rows_are_distributions() {
        let (store, fw) = build(16, 2, 100, 7);
        let mut g = Graph::inference(&store);
        let mut r = rng(8);
        let words = g.tape.leaf(Tensor::xavier(5, 16, &mut r));
        let frames = g.tape.leaf(Tensor::xavier(6, 16, &mut r));
        let masked = fw.apply_word_mask(&mut g, words, &[1, 3]);
        let logp = fw.reconstruct_words(&mut g, masked, frames, &full_mask(6));
        let probs = fw.word_probabilities(&mut g, logp);
        assert_eq!(probs.shape(), (5, 100));
        for row in 0..5 {
            let sum: f64 = probs.row(row).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {row} sums to {sum}");
        }
    }

    #[test]
    fn reconstruction_is_deterministic() {
        let (store, fw) = build(16, 2, 20, 9);
        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut g = Graph::inference(&store);
            let mut r = rng(10);
            let words = g.tape.leaf(Tensor::xavier(4, 16, &mut r));
            let frames = g.tape.leaf(Tensor::xavier(5, 16, &mut r));
            let masked = fw.apply_word_mask(&mut g, words, &[0]);
            let logp = fw.reconstruct_words(&mut g, masked, frames, &full_mask(5));
            outs.push(g.tape.value(logp).clone());
        }
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn shared_weights_touch_both_passes() {
        let (mut store, fw) = build(16, 2, 20, 11);
        let run = |store: &ParamStore| -> (Tensor, Tensor) {
            let mut g = Graph::inference(store);
            let mut r = rng(12);
            let frames = g.tape.leaf(Tensor::xavier(6, 16, &mut r));
            let words = g.tape.leaf(Tensor::xavier(4, 16, &mut r));
            let enh = fw.enhance_video(&mut g, frames, words, &full_mask(4));
            let masked = fw.apply_word_mask(&mut g, words, &[2]);
            let logp = fw.reconstruct_words(&mut g, masked, frames, &full_mask(6));
            (g.tape.value(enh).clone(), g.tape.value(logp).clone())
        };
        let (enh_a, logp_a) = run(&store);
        // Mutating the shared key projection must change BOTH passes:
        // the parameter storage is aliased, not copied.
        let wk = fw.blocks[0].attn.wk.w;
        store.get_mut(wk).data_mut()[3] += 0.25;
        let (enh_b, logp_b) = run(&store);
        assert_ne!(enh_a, enh_b, "enhancement pass ignores the shared weights");
        assert_ne!(logp_a, logp_b, "reconstruction pass ignores the shared weights");
    }

    #[test]
    fn loss_uniform_and_one_hot() {
        let (store, _fw) = build(8, 1, 100, 13);
        let mut g = Graph::inference(&store);
        // Uniform distribution over 100 tokens.
        let logp = g.tape.constant(Tensor::filled(3, 100, (1.0f64 / 100.0).ln()));
        let loss = reconstruction_loss(
            &mut g,
            logp,
            &[5, 50, 99],
            &[true, true, true],
            &[0],
            MlmSupervision::AllWords,
        );
        assert!((g.tape.value(loss).item() - 100f64.ln()).abs() < 1e-12);

        // One-hot correct rows: zero loss.
        let mut t = Tensor::filled(2, 4, -1e9);
        t.set(0, 1, 0.0);
        t.set(1, 3, 0.0);
        let logp = g.tape.constant(t);
        let loss = reconstruction_loss(&mut g, logp, &[1, 3], &[true, true], &[0], MlmSupervision::AllWords);
        assert_eq!(g.tape.value(loss).item(), 0.0);
    }

    #[test]
    fn loss_hand_computed_example() {
        let (store, _fw) = build(8, 1, 10, 14);
        let mut g = Graph::inference(&store);
        // Correct-token probabilities 0.5 and 0.25.
        let mut t = Tensor::filled(2, 10, -30.0);
        t.set(0, 2, 0.5f64.ln());
        t.set(1, 7, 0.25f64.ln());
        let logp = g.tape.constant(t);
        let loss = reconstruction_loss(&mut g, logp, &[2, 7], &[true, true], &[1], MlmSupervision::AllWords);
        let expected = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((g.tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn masked_only_scope_restricts_supervision() {
        let (store, _fw) = build(8, 1, 10, 15);
        let mut g = Graph::inference(&store);
        let mut t = Tensor::filled(2, 10, -30.0);
        t.set(0, 2, 0.5f64.ln()); // masked position
        t.set(1, 7, 0.1f64.ln()); // unmasked; must not count
        let logp = g.tape.constant(t);
        let loss = reconstruction_loss(&mut g, logp, &[2, 7], &[true, true], &[0], MlmSupervision::MaskedOnly);
        assert!((g.tape.value(loss).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn padded_inputs_cannot_change_outputs() {
        let (store, fw) = build(16, 2, 12, 16);
        let mut r = rng(17);
        let frames_t = Tensor::xavier(6, 16, &mut r);
        let words_base = Tensor::xavier(5, 16, &mut r);
        let word_mask = Arc::new(vec![true, true, true, false, false]);
        let frame_mask = Arc::new(vec![true, true, true, true, false, false]);

        let run = |frames_t: &Tensor, words_t: &Tensor| {
            let mut g = Graph::inference(&store);
            let frames = g.tape.leaf(frames_t.clone());
            let words = g.tape.leaf(words_t.clone());
            let enh = fw.enhance_video(&mut g, frames, words, &word_mask);
            let masked = fw.apply_word_mask(&mut g, words, &[0]);
            let logp = fw.reconstruct_words(&mut g, masked, frames, &frame_mask);
            // Compare only valid rows; padded query rows are never read.
            let mut enh_valid = Vec::new();
            for r in 0..4 {
                enh_valid.extend_from_slice(g.tape.value(enh).row(r));
            }
            let mut logp_valid = Vec::new();
            for r in 0..3 {
                logp_valid.extend_from_slice(g.tape.value(logp).row(r));
            }
            (enh_valid, logp_valid)
        };

        let base = run(&frames_t, &words_base);
        let mut frames_c = frames_t.clone();
        let mut words_c = words_base.clone();
        for v in frames_c.row_mut(5) {
            *v = 7e11;
        }
        for v in words_c.row_mut(4) {
            *v = -3e10;
        }
        let corrupted = run(&frames_c, &words_c);
        assert_eq!(base, corrupted);
    }

    #[test]
    fn kv_permutation_invariance_without_positions() {
        // Attention is a set operation over keys/values: permuting word
        // order (no positional encodings here) leaves enhancement unchanged.
        let (store, fw) = build(16, 2, 12, 18);
        let mut r = rng(19);
        let frames_t = Tensor::xavier(6, 16, &mut r);
        let words_t = Tensor::xavier(5, 16, &mut r);
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = Tensor::zeros(5, 16);
        for (dst, &src) in perm.iter().enumerate() {
            permuted.row_mut(dst).copy_from_slice(words_t.row(src));
        }
        let run = |words: &Tensor| {
            let mut g = Graph::inference(&store);
            let f = g.tape.leaf(frames_t.clone());
            let w = g.tape.leaf(words.clone());
            let out = fw.enhance_video(&mut g, f, w, &full_mask(5));
            g.tape.value(out).clone()
        };
        let a = run(&words_t);
        let b = run(&permuted);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
