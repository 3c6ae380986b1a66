//! Segment-sentence level enhancement: pool the video's sentences, swap the
//! current one for a learnable [MASK] token, regenerate it from the video
//! and the context sentences, and prepend the generated token to the query
//! as complementary knowledge. Supervision is a segment-pooled, IoU-gated
//! contrastive loss over the batch.

use crate::autodiff::Var;
use crate::nn::{full_mask, CrossAttnBlock, Graph, ParamId, ParamStore};
use crate::span::{iou_1d, FrameIndexSpan, TemporalSpan};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// One layer: self-attention across the sentence set (how context sentences
/// reach the masked slot) followed by cross-attention into the frames.
pub struct SsLayer {
    pub self_block: CrossAttnBlock,
    pub cross_block: CrossAttnBlock,
}

pub struct SentenceComplement {
    pub layers: Vec<SsLayer>,
    /// Learnable [MASK] token substituted for the current sentence.
    pub mask_token: ParamId,
}

impl SentenceComplement {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..layers)
            .map(|i| SsLayer {
                self_block: CrossAttnBlock::new(store, &format!("ss.layer{i}.self"), dim, heads, ffn_hidden, rng),
                cross_block: CrossAttnBlock::new(store, &format!("ss.layer{i}.cross"), dim, heads, ffn_hidden, rng),
            })
            .collect();
        let mask_token = store.add("ss.mask_token", Tensor::xavier(1, dim, rng));
        Self { layers, mask_token }
    }

    /// Build the masked sentence set (row `current` replaced by the [MASK]
    /// token), run the layer stack against the frames, and return the
    /// regenerated row.
    ///
    /// `context_grad = false` detaches the other sentences' pooled features
    /// so gradients stop at the sentence set.
    pub fn generate_complement(
        &self,
        g: &mut Graph,
        pooled_sentences: &[Var],
        current: usize,
        frames: Var,
        frame_mask: &Arc<Vec<bool>>,
        context_grad: bool,
    ) -> Var {
        let k = pooled_sentences.len();
        assert!(k >= 1, "need at least one sentence");
        assert!(current < k, "current sentence index {current} outside the {k}-sentence set");
        let rows: Vec<Var> = pooled_sentences
            .iter()
            .enumerate()
            .map(|(i, &row)| {
                if i == current {
                    g.param(self.mask_token)
                } else if context_grad {
                    row
                } else {
                    g.tape.detach(row)
                }
            })
            .collect();
        let mut x = g.tape.stack_rows(&rows);
        let sentence_mask = full_mask(k);
        for layer in &self.layers {
            x = layer.self_block.forward(g, x, x, &sentence_mask);
            x = layer.cross_block.forward(g, x, frames, frame_mask);
        }
        g.tape.slice_rows(x, current, 1)
    }
}

/// Mean of each sentence's valid word vectors: one `1 x D` row per sentence.
pub fn pool_sentences(g: &mut Graph, sentences: &[(Var, Arc<Vec<bool>>)]) -> Vec<Var> {
    sentences
        .iter()
        .map(|(words, mask)| g.tape.masked_mean_rows(*words, mask.clone()))
        .collect()
}

/// Prepend the generated complement token to the word features; the
/// extended mask gains one always-valid position at row 0.
pub fn concat_complement(g: &mut Graph, complement: Var, words: Var, word_mask: &[bool]) -> (Var, Arc<Vec<bool>>) {
    let out = g.tape.concat_rows(complement, words);
    let mut mask = Vec::with_capacity(word_mask.len() + 1);
    mask.push(true);
    mask.extend_from_slice(word_mask);
    (out, Arc::new(mask))
}

/// Average of the frame features inside the inclusive index span.
pub fn pool_segment(g: &mut Graph, frames: Var, span: FrameIndexSpan) -> Var {
    let len = span.num_frames();
    let sliced = g.tape.slice_rows(frames, span.l_s, len);
    g.tape.masked_mean_rows(sliced, full_mask(len))
}

/// Per-element positive sets over a batch: `j` is positive for `i` when the
/// ground-truth spans overlap above the gate. Timestamps are only comparable
/// within one video, so cross-video pairs are excluded unless explicitly
/// enabled. Every element is its own positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveSet {
    pub members: Vec<Vec<bool>>,
}

impl PositiveSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub fn build_positive_set(
    gts: &[(String, TemporalSpan)],
    gamma: f64,
    cross_video: bool,
) -> PositiveSet {
    let n = gts.len();
    let mut members = vec![vec![false; n]; n];
    for i in 0..n {
        members[i][i] = true;
        for j in 0..n {
            if i == j {
                continue;
            }
            let comparable = cross_video || gts[i].0 == gts[j].0;
            if comparable {
                if let Ok(iou) = iou_1d(&gts[i].1, &gts[j].1) {
                    if iou > gamma {
                        members[i][j] = true;
                    }
                }
            }
        }
    }
    PositiveSet { members }
}

/// Multi-positive InfoNCE on a precomputed similarity matrix (already
/// divided by the temperature): mean over rows of
/// `-log(sum_pos exp(sim) / sum_all exp(sim))`, evaluated with
/// log-sum-exp stabilization.
pub fn infonce_from_sims(g: &mut Graph, sims: Var, positives: &PositiveSet) -> Var {
    let n = g.tape.value(sims).rows();
    assert_eq!(g.tape.value(sims).cols(), n, "similarity matrix must be square");
    assert_eq!(positives.len(), n, "one positive set per batch element");
    let pos_masks: Vec<Vec<bool>> = positives.members.clone();
    let all_masks: Vec<Vec<bool>> = vec![vec![true; n]; n];
    let pos = g.tape.masked_logsumexp_rows(sims, Arc::new(pos_masks));
    let all = g.tape.masked_logsumexp_rows(sims, Arc::new(all_masks));
    let diff = g.tape.sub(all, pos);
    let sum = g.tape.sum_all(diff);
    g.tape.scale(sum, 1.0 / n as f64)
}

/// Full contrastive loss: token-pooled enhanced queries against pooled
/// segment features. `normalize` L2-normalizes each token row and each
/// segment vector first (making the temperature meaningful);
/// `mean_over_tokens` uses the token mean instead of the sum so the scale is
/// length-invariant.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss(
    g: &mut Graph,
    enhanced_queries: &[(Var, Arc<Vec<bool>>)],
    segments: &[Var],
    positives: &PositiveSet,
    tau: f64,
    normalize: bool,
    mean_over_tokens: bool,
) -> Var {
    assert!(tau > 0.0, "temperature must be positive, got {tau}");
    assert_eq!(enhanced_queries.len(), segments.len());
    assert_eq!(enhanced_queries.len(), positives.len());
    let query_rows: Vec<Var> = enhanced_queries
        .iter()
        .map(|(tokens, mask)| {
            let tokens = if normalize { g.tape.l2_normalize_rows(*tokens, 1e-12) } else { *tokens };
            let mean = g.tape.masked_mean_rows(tokens, mask.clone());
            if mean_over_tokens {
                mean
            } else {
                let n = mask.iter().filter(|&&m| m).count() as f64;
                g.tape.scale(mean, n)
            }
        })
        .collect();
    let q = g.tape.stack_rows(&query_rows);
    let s = g.tape.stack_rows(segments);
    let s = if normalize { g.tape.l2_normalize_rows(s, 1e-12) } else { s };
    let st = g.tape.transpose(s);
    let dots = g.tape.matmul(q, st);
    let sims = g.tape.scale(dots, 1.0 / tau);
    infonce_from_sims(g, sims, positives)
}
