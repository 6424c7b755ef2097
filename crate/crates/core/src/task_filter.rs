//! Language-conditioned slot relevance scoring and top-k retention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention, TransformerLayer};
use crate::params::{Binder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Embedding table plus learned token positions for task strings.
#[derive(Clone, Debug)]
pub struct LanguageEncoder {
    pub table: ParamId,
    pub pos: ParamId,
    pub vocab: usize,
    pub max_len: usize,
}

/// Embedded task description `P` (M×d) and its vocabulary ids.
#[derive(Clone, Debug)]
pub struct LanguageEmbedding<'t, T: Scalar> {
    pub tokens: Var<'t, T>,
    pub ids: Vec<usize>,
}

impl LanguageEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        max_len: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        LanguageEncoder {
            table: store.add(format!("{name}.table"), Tensor::randn([vocab, dim], 1.0, rng)),
            pos: store.add(format!("{name}.pos"), Tensor::randn([max_len, dim], 0.1, rng)),
            vocab,
            max_len,
        }
    }

    pub fn embed<'t, T: Scalar>(&self, bd: &Binder<'t, '_, T>, ids: &[usize]) -> Result<LanguageEmbedding<'t, T>> {
        if ids.is_empty() {
            return Err(Error::invalid("task description has no tokens"));
        }
        if ids.len() > self.max_len {
            return Err(Error::invalid(format!(
                "task description has {} tokens, limit is {}",
                ids.len(),
                self.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", self.vocab)));
        }
        let tokens = bd
            .p(self.table)?
            .gather_rows(ids)?
            .add(bd.p(self.pos)?.slice_rows(0, ids.len())?)?;
        Ok(LanguageEmbedding {
            tokens,
            ids: ids.to_vec(),
        })
    }
}

/// Slots attend to language and language attends to slots, each with a
/// pre-norm residual connection.
#[derive(Clone, Debug)]
pub struct BidirectionalCrossAttention {
    pub slot_norm: LayerNorm,
    pub lang_norm: LayerNorm,
    pub slot_to_lang: MultiHeadAttention,
    pub lang_to_slot: MultiHeadAttention,
}

impl BidirectionalCrossAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        BidirectionalCrossAttention {
            slot_norm: LayerNorm::new(store, &format!("{name}.ln_s"), dim),
            lang_norm: LayerNorm::new(store, &format!("{name}.ln_p"), dim),
            slot_to_lang: MultiHeadAttention::new(store, &format!("{name}.s2p"), dim, heads, rng),
            lang_to_slot: MultiHeadAttention::new(store, &format!("{name}.p2s"), dim, heads, rng),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        bd: &Binder<'t, '_, T>,
        slots: Var<'t, T>,
        lang: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if slots.cols() != lang.cols() {
            return Err(Error::shape("bca", &slots.shape(), &lang.shape()));
        }
        let s = self.slot_norm.forward(bd, slots)?;
        let p = self.lang_norm.forward(bd, lang)?;
        let slots_out = slots.add(self.slot_to_lang.forward(bd, s, p)?.out)?;
        let lang_out = lang.add(self.lang_to_slot.forward(bd, p, s)?.out)?;
        Ok((slots_out, lang_out))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskFilterConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Slots retained after filtering (N_S).
    pub keep: usize,
}

impl Default for TaskFilterConfig {
    fn default() -> Self {
        TaskFilterConfig {
            dim: 64,
            heads: 4,
            ff_mult: 4,
            keep: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskFilter {
    pub cfg: TaskFilterConfig,
    pub bca: BidirectionalCrossAttention,
    pub trans: TransformerLayer,
    pub head_norm: LayerNorm,
    pub head: Linear,
}

/// Per-slot relevance logits and probabilities π (both K×1).
pub struct Relevance<'t, T: Scalar> {
    pub logits: Var<'t, T>,
    pub pi: Var<'t, T>,
}

/// Scores of one frame and the retained slot indices.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceScores<T> {
    pub pi: Vec<T>,
    pub selected: Vec<usize>,
}

impl TaskFilter {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: TaskFilterConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        TaskFilter {
            bca: BidirectionalCrossAttention::new(store, "filter.bca", d, cfg.heads, rng),
            trans: TransformerLayer::new(store, "filter.trans", d, cfg.heads, cfg.ff_mult, rng),
            head_norm: LayerNorm::new(store, "filter.head_ln", d),
            head: Linear::new(store, "filter.head", d, 1, true, rng),
            cfg,
        }
    }

    pub fn bca<'t, T: Scalar>(
        &self,
        bd: &Binder<'t, '_, T>,
        slots: Var<'t, T>,
        lang: &LanguageEmbedding<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.bca.forward(bd, slots, lang.tokens)
    }

    /// Per-slot head + sigmoid over contextualised slots.
    pub fn score_slots<'t, T: Scalar>(&self, bd: &Binder<'t, '_, T>, slots: Var<'t, T>) -> Result<Relevance<'t, T>> {
        let logits = self.head.forward(bd, self.head_norm.forward(bd, slots)?)?;
        Ok(Relevance {
            logits,
            pi: logits.sigmoid()?,
        })
    }

    /// BCA, then one self-attention layer over the slot stream, then the
    /// scoring head. The language stream leaving BCA is not used further.
    pub fn relevance<'t, T: Scalar>(
        &self,
        bd: &Binder<'t, '_, T>,
        slots: Var<'t, T>,
        lang: &LanguageEmbedding<'t, T>,
    ) -> Result<Relevance<'t, T>> {
        let (s, _) = self.bca(bd, slots, lang)?;
        let s = self.trans.forward(bd, s)?;
        self.score_slots(bd, s)
    }
}

/// Indices of the `k` largest scores in ascending index order; ties go to
/// the lower index.
pub fn top_k_filter<T: Scalar>(pi: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > pi.len() {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", pi.len())));
    }
    let mut order: Vec<usize> = (0..pi.len()).collect();
    order.sort_by(|&a, &b| {
        pi[b]
            .partial_cmp(&pi[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Retains the selected slot rows; gradients flow only to those rows.
pub fn filter_slots<'t, T: Scalar>(
    slots: Var<'t, T>,
    pi: &[T],
    k: usize,
) -> Result<(Var<'t, T>, RelevanceScores<T>)> {
    if pi.len() != slots.rows() {
        return Err(Error::shape("filter_slots", &slots.shape(), &[pi.len()]));
    }
    let selected = top_k_filter(pi, k)?;
    Ok((
        slots.gather_rows(&selected)?,
        RelevanceScores {
            pi: pi.to_vec(),
            selected,
        },
    ))
}
