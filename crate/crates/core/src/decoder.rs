//! Action decoder over `[S; R; P; o]` bundles with uniform action binning.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, TransformerLayer};
use crate::params::{Binder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{concat_rows, Var};
use crate::tensor::Tensor;

pub const ACTION_DIMS: usize = 7;
pub const PROPRIO_DIMS: usize = 4;

/// Uniform bins over `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActionBinning {
    pub bins: usize,
}

impl ActionBinning {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::invalid("at least two action bins are required"));
        }
        Ok(ActionBinning { bins })
    }

    pub fn bin_of(&self, a: f64) -> usize {
        let x = ((a.clamp(-1.0, 1.0) + 1.0) / 2.0 * self.bins as f64).floor();
        (x as usize).min(self.bins - 1)
    }

    pub fn center(&self, bin: usize) -> f64 {
        -1.0 + (bin as f64 + 0.5) * 2.0 / self.bins as f64
    }

    pub fn encode(&self, action: &[f64]) -> Vec<usize> {
        action.iter().map(|&a| self.bin_of(a)).collect()
    }
}

/// Per-dimension argmax (ties → lower bin) mapped to bin centres.
pub fn greedy_action<T: Scalar>(logits: &Tensor<T>, binning: ActionBinning) -> Result<Vec<f64>> {
    if logits.rank() != 2 || logits.cols() != binning.bins {
        return Err(Error::shape("greedy_action", logits.shape(), &[ACTION_DIMS, binning.bins]));
    }
    Ok((0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            binning.center(best)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub bins: usize,
    pub vocab: usize,
    pub max_words: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            dim: 64,
            heads: 4,
            layers: 2,
            ff_mult: 4,
            bins: 256,
            vocab: 32,
            max_words: 16,
        }
    }
}

/// Decoder input and its segment sizes.
pub struct TokenBundle<'t, T: Scalar> {
    pub tokens: Var<'t, T>,
    pub objects: usize,
    pub relations: usize,
    pub words: usize,
}

impl<'t, T: Scalar> TokenBundle<'t, T> {
    pub fn len(&self) -> usize {
        self.objects + self.relations + self.words + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug)]
pub struct PolicyDecoder {
    pub cfg: DecoderConfig,
    pub lang: crate::task_filter::LanguageEncoder,
    pub proprio: Linear,
    /// Rows: object, relation, language, proprioception.
    pub segments: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl PolicyDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: DecoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let lang = crate::task_filter::LanguageEncoder::new(store, "decoder.lang", cfg.vocab, cfg.max_words, d, rng);
        let proprio = Linear::new(store, "decoder.proprio", PROPRIO_DIMS, d, true, rng);
        let segments = store.add("decoder.segments", Tensor::randn([4, d], 0.1, rng));
        let layers = (0..cfg.layers)
            .map(|i| TransformerLayer::new(store, &format!("decoder.layer{i}"), d, cfg.heads, cfg.ff_mult, rng))
            .collect();
        PolicyDecoder {
            norm: LayerNorm::new(store, "decoder.ln", d),
            head: Linear::new(store, "decoder.head", d, ACTION_DIMS * cfg.bins, true, rng),
            lang,
            proprio,
            segments,
            layers,
            cfg,
        }
    }

    pub fn binning(&self) -> ActionBinning {
        ActionBinning { bins: self.cfg.bins }
    }

    /// `[S; R; P; o]` with a learned segment embedding added to each part.
    /// `relations = None` is object-centric mode.
    pub fn assemble_bundle<'t, T: Scalar>(
        &self,
        bd: &Binder<'t, '_, T>,
        objects: Var<'t, T>,
        relations: Option<Var<'t, T>>,
        words: &[usize],
        proprio: &[T],
    ) -> Result<TokenBundle<'t, T>> {
        if proprio.len() != PROPRIO_DIMS {
            return Err(Error::shape("assemble_bundle", &[PROPRIO_DIMS], &[proprio.len()]));
        }
        let seg = bd.p(self.segments)?;
        let tag = |x: Var<'t, T>, row: usize| x.add_row(seg.slice_rows(row, 1)?);
        let p = self.lang.embed(bd, words)?.tokens;
        let o = self
            .proprio
            .forward(bd, bd.constant(Tensor::new([1, PROPRIO_DIMS], proprio.to_vec())?)?)?;
        let mut parts = vec![tag(objects, 0)?];
        if let Some(r) = relations {
            parts.push(tag(r, 1)?);
        }
        parts.push(tag(p, 2)?);
        parts.push(tag(o, 3)?);
        Ok(TokenBundle {
            tokens: concat_rows(&parts)?,
            objects: objects.rows(),
            relations: relations.map_or(0, |r| r.rows()),
            words: words.len(),
        })
    }

    /// Per-dimension bin logits, `7 × K`.
    pub fn decode<'t, T: Scalar>(&self, bd: &Binder<'t, '_, T>, bundle: &TokenBundle<'t, T>) -> Result<Var<'t, T>> {
        let mut x = bundle.tokens;
        for layer in &self.layers {
            x = layer.forward(bd, x)?;
        }
        let pooled = self.norm.forward(bd, x)?.mean_axis(0)?;
        self.head.forward(bd, pooled)?.reshape([ACTION_DIMS, self.cfg.bins])
    }
}
