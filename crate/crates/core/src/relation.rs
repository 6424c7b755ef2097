//! Learned relation queries conditioned on dense patches, then on object slots.

use rand::Rng;

use crate::error::{Error, Result};
use crate::frontend::DenseTokens;
use crate::nn::CrossAttentionBlock;
use crate::params::{Binder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RelationConfig {
    pub num_relations: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Start each frame from the previous frame's relation tokens instead of
    /// the shared learned queries. Off by default.
    pub carryover: bool,
}

impl Default for RelationConfig {
    fn default() -> Self {
        RelationConfig {
            num_relations: 16,
            dim: 64,
            heads: 4,
            ff_mult: 4,
            carryover: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RelationEncoder {
    pub cfg: RelationConfig,
    pub queries: ParamId,
    pub visual: CrossAttentionBlock,
    pub object: CrossAttentionBlock,
}

/// Relation tokens `R` (N_R×d) and the attention of both blocks.
pub struct RelationTokens<'t, T: Scalar> {
    pub tokens: Var<'t, T>,
    pub visual_attn: Tensor<T>,
    pub slot_attn: Tensor<T>,
}

impl RelationEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: RelationConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        RelationEncoder {
            queries: store.add("relation.queries", Tensor::randn([cfg.num_relations, d], 1.0, rng)),
            visual: CrossAttentionBlock::new(store, "relation.cab_v", d, cfg.heads, cfg.ff_mult, rng),
            object: CrossAttentionBlock::new(store, "relation.cab_s", d, cfg.heads, cfg.ff_mult, rng),
            cfg,
        }
    }

    /// `CAB(CAB(R̃, V), S)`. With carryover on, `prev` replaces the learned
    /// queries (detached).
    pub fn encode<'t, T: Scalar>(
        &self,
        bd: &Binder<'t, '_, T>,
        dense: &DenseTokens<'t, T>,
        slots: Var<'t, T>,
        prev: Option<&Tensor<T>>,
    ) -> Result<RelationTokens<'t, T>> {
        if slots.rows() == 0 {
            return Err(Error::invalid("relation encoder needs at least one object slot"));
        }
        let queries = match (self.cfg.carryover, prev) {
            (true, Some(p)) => {
                if p.shape() != [self.cfg.num_relations, self.cfg.dim] {
                    return Err(Error::shape("encode_relations", p.shape(), &[self.cfg.num_relations, self.cfg.dim]));
                }
                bd.constant(p.clone())?
            }
            _ => bd.p(self.queries)?,
        };
        let v = self.visual.forward(bd, queries, dense.tokens)?;
        let s = self.object.forward(bd, v.out, slots)?;
        Ok(RelationTokens {
            tokens: s.out,
            visual_attn: v.probs,
            slot_attn: s.probs,
        })
    }
}
