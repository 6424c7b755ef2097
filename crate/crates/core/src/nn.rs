//! Reusable layers: linear maps, normalization, attention blocks and the GRU cell.
//!
//! All residual blocks are pre-norm (`x + f(norm(x))`), so zeroing a block's
//! output projection turns it into the identity.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{concat_cols, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_xavier(format!("{name}.w"), fan_in, fan_out, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros([1, fan_out])));
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, bd: &Binder<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(bd.p(self.w)?)?;
        match self.b {
            Some(b) => y.add_row(bd.p(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.g"), Tensor::full([1, width], T::one())),
            bias: store.add(format!("{name}.b"), Tensor::zeros([1, width])),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, bd: &Binder<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(T::c(LN_EPS))?
            .mul_row(bd.p(self.gain)?)?
            .add_row(bd.p(self.bias)?)
    }
}

/// Two-layer ReLU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, true, rng),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, bd: &Binder<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.up.forward(bd, x)?.relu()?;
        self.down.forward(bd, h)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

/// Attention output plus head-averaged attention probabilities (queries × keys).
pub struct Attended<'t, T: Scalar> {
    pub out: Var<'t, T>,
    pub probs: Tensor<T>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), width, width, true, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, true, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, true, rng),
            out: Linear::new(store, &format!("{name}.o"), width, width, true, rng),
            heads,
            width,
        }
    }

    /// Queries attend to `context`; softmax over context rows.
    pub fn forward<'t, T: Scalar>(
        &self,
        bd: &Binder<'t, '_, T>,
        queries: Var<'t, T>,
        context: Var<'t, T>,
    ) -> Result<Attended<'t, T>> {
        if queries.cols() != self.width || context.cols() != self.width {
            return Err(Error::shape("attention", &queries.shape(), &context.shape()));
        }
        let q = self.q.forward(bd, queries)?;
        let k = self.k.forward(bd, context)?;
        let v = self.v.forward(bd, context)?;
        let dh = self.width / self.heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let (nq, nk) = (queries.rows(), context.rows());
        let mut avg = vec![T::zero(); nq * nk];
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                q.slice_cols(h * dh, dh)?,
                k.slice_cols(h * dh, dh)?,
                v.slice_cols(h * dh, dh)?,
            );
            let p = qh.matmul_t(kh)?.scale(scale)?.softmax(1)?;
            for (a, &x) in avg.iter_mut().zip(p.value().data()) {
                *a = *a + x / T::c(self.heads as f64);
            }
            heads.push(p.matmul(vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { concat_cols(&heads)? };
        Ok(Attended {
            out: self.out.forward(bd, merged)?,
            probs: Tensor::new([nq, nk], avg)?,
        })
    }
}

/// Pre-norm self-attention layer followed by a feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        ff_mult: usize,
        rng: &mut impl Rng,
    ) -> Self {
        TransformerLayer {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.ln2"), width),
            ff: FeedForward::new(store, &format!("{name}.ff"), width, width * ff_mult, rng),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, bd: &Binder<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.norm_attn.forward(bd, x)?;
        let x = x.add(self.attn.forward(bd, h, h)?.out)?;
        let h = self.norm_ff.forward(bd, x)?;
        x.add(self.ff.forward(bd, h)?)
    }
}

/// Cross-attention block: queries attend to a context set, then a feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub norm_q: LayerNorm,
    pub norm_ctx: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl CrossAttentionBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        ff_mult: usize,
        rng: &mut impl Rng,
    ) -> Self {
        CrossAttentionBlock {
            norm_q: LayerNorm::new(store, &format!("{name}.lnq"), width),
            norm_ctx: LayerNorm::new(store, &format!("{name}.lnc"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.lnf"), width),
            ff: FeedForward::new(store, &format!("{name}.ff"), width, width * ff_mult, rng),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        bd: &Binder<'t, '_, T>,
        queries: Var<'t, T>,
        context: Var<'t, T>,
    ) -> Result<Attended<'t, T>> {
        let q = self.norm_q.forward(bd, queries)?;
        let c = self.norm_ctx.forward(bd, context)?;
        let att = self.attn.forward(bd, q, c)?;
        let x = queries.add(att.out)?;
        let h = self.norm_ff.forward(bd, x)?;
        Ok(Attended {
            out: x.add(self.ff.forward(bd, h)?)?,
            probs: att.probs,
        })
    }

    /// Output projections of both sublayers; zeroing them yields the identity.
    pub fn output_params(&self) -> Vec<ParamId> {
        let mut v = vec![self.attn.out.w, self.ff.down.w];
        v.extend(self.attn.out.b);
        v.extend(self.ff.down.b);
        v
    }
}

/// Gated recurrent unit applied row-wise: each row is an independent recurrence.
///
/// r = σ(x·W_r + h·U_r), z = σ(x·W_z + h·U_z), n = tanh(x·W_n + r ⊙ (h·U_n)),
/// h' = (1 − z) ⊙ n + z ⊙ h.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input_reset: Linear,
    pub input_update: Linear,
    pub input_new: Linear,
    pub hidden_reset: Linear,
    pub hidden_update: Linear,
    pub hidden_new: Linear,
}

impl GruCell {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        let mut lin = |n: &str| Linear::new(store, &format!("{name}.{n}"), width, width, true, rng);
        GruCell {
            input_reset: lin("ir"),
            input_update: lin("iz"),
            input_new: lin("in"),
            hidden_reset: lin("hr"),
            hidden_update: lin("hz"),
            hidden_new: lin("hn"),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        bd: &Binder<'t, '_, T>,
        inputs: Var<'t, T>,
        states: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        if inputs.shape() != states.shape() {
            return Err(Error::shape("gru_cell", &inputs.shape(), &states.shape()));
        }
        let r = self
            .input_reset
            .forward(bd, inputs)?
            .add(self.hidden_reset.forward(bd, states)?)?
            .sigmoid()?;
        let z = self
            .input_update
            .forward(bd, inputs)?
            .add(self.hidden_update.forward(bd, states)?)?
            .sigmoid()?;
        let n = self
            .input_new
            .forward(bd, inputs)?
            .add(r.mul(self.hidden_new.forward(bd, states)?)?)?
            .tanh()?;
        n.add(z.mul(states.sub(n)?)?)
    }
}
