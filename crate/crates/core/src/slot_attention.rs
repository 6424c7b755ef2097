//! Iterative slot attention with GRU updates and cross-frame slot carryover.
//!
//! One refinement step computes
//!
//! ```text
//! a  = k(V) q(S)ᵀ / √d          N × K logits
//! ã  = softmax over slots        rows sum to 1
//! w  = ã normalized over inputs  columns sum to 1
//! S' = GRU(inputs = wᵀ v(V), states = S)
//! ```
//!
//! optionally followed by a residual MLP. Frame `t = 0` starts from
//! `μ + σ·ε`; later frames start from the previous frame's final slots,
//! copied bit for bit and detached from the previous tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frontend::DenseTokens;
use crate::nn::{FeedForward, GruCell, LayerNorm, Linear};
use crate::params::{Binder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SlotAttentionConfig {
    pub num_slots: usize,
    pub dim: usize,
    pub iters: usize,
    pub residual_mlp: bool,
    pub mlp_hidden: usize,
    /// Added to every attention weight before the per-slot normalization.
    pub eps: f64,
    pub carryover: bool,
}

impl Default for SlotAttentionConfig {
    fn default() -> Self {
        SlotAttentionConfig {
            num_slots: 16,
            dim: 64,
            iters: 3,
            residual_mlp: true,
            mlp_hidden: 128,
            eps: 1e-8,
            carryover: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    Random,
    Carryover,
}

/// Final refined slots of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotState<T> {
    pub slots: Tensor<T>,
    pub frame_index: usize,
    pub steps: usize,
    pub init_mode: InitMode,
}

/// Attention of the last refinement step, both `N × K`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps<T> {
    /// Softmax over slots for each input.
    pub attn: Tensor<T>,
    /// Weighted-mean weights; each slot column sums to one over inputs.
    pub weights: Tensor<T>,
}

pub struct FrameSlots<'t, T: Scalar> {
    pub slots: Var<'t, T>,
    pub initial: Tensor<T>,
    pub state: SlotState<T>,
    pub maps: AttentionMaps<T>,
}

#[derive(Clone, Debug)]
pub struct SlotAttention {
    pub cfg: SlotAttentionConfig,
    pub norm_inputs: LayerNorm,
    pub norm_slots: LayerNorm,
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub gru: GruCell,
    pub mlp: Option<(LayerNorm, FeedForward)>,
    pub mu: ParamId,
    pub log_sigma: ParamId,
}

impl SlotAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: SlotAttentionConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        if cfg.num_slots == 0 || cfg.iters == 0 || cfg.dim == 0 {
            return Err(Error::invalid("slot count, width and refinement steps must be positive"));
        }
        let d = cfg.dim;
        let mlp = cfg.residual_mlp.then(|| {
            (
                LayerNorm::new(store, "slot.mlp_ln", d),
                FeedForward::new(store, "slot.mlp", d, cfg.mlp_hidden, rng),
            )
        });
        Ok(SlotAttention {
            norm_inputs: LayerNorm::new(store, "slot.ln_in", d),
            norm_slots: LayerNorm::new(store, "slot.ln_slots", d),
            to_q: Linear::new(store, "slot.q", d, d, false, rng),
            to_k: Linear::new(store, "slot.k", d, d, false, rng),
            to_v: Linear::new(store, "slot.v", d, d, false, rng),
            gru: GruCell::new(store, "slot.gru", d, rng),
            mlp,
            mu: store.add("slot.mu", Tensor::randn([1, d], 1.0, rng)),
            log_sigma: store.add("slot.log_sigma", Tensor::zeros([1, d])),
            cfg,
        })
    }

    /// `μ + σ·ε` with `ε` drawn from a generator seeded by `seed`.
    pub fn random_init<'t, T: Scalar>(&self, bd: &Binder<'t, '_, T>, seed: u64) -> Result<Var<'t, T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = bd.constant(Tensor::randn([self.cfg.num_slots, self.cfg.dim], 1.0, &mut rng))?;
        noise
            .mul_row(bd.p(self.log_sigma)?.exp()?)?
            .add_row(bd.p(self.mu)?)
    }

    /// Initial slots for frame `frame_index`: random at `t = 0` (or always,
    /// when carryover is disabled), otherwise the previous frame's final slots.
    pub fn init_slots<'t, T: Scalar>(
        &self,
        bd: &Binder<'t, '_, T>,
        prev: Option<&SlotState<T>>,
        frame_index: usize,
        seed: u64,
    ) -> Result<(Var<'t, T>, InitMode)> {
        if frame_index == 0 || !self.cfg.carryover {
            return Ok((self.random_init(bd, seed)?, InitMode::Random));
        }
        let prev = prev.ok_or_else(|| {
            Error::invalid(format!("frame {frame_index} needs the previous slot state for carryover"))
        })?;
        if prev.slots.shape() != [self.cfg.num_slots, self.cfg.dim] {
            return Err(Error::shape(
                "init_slots",
                prev.slots.shape(),
                &[self.cfg.num_slots, self.cfg.dim],
            ));
        }
        Ok((bd.constant(prev.slots.clone())?, InitMode::Carryover))
    }

    /// Normalised inputs projected to keys and values.
    pub fn project_inputs<'t, T: Scalar>(
        &self,
        bd: &Binder<'t, '_, T>,
        dense: &DenseTokens<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if dense.tokens.cols() != self.cfg.dim {
            return Err(Error::shape("slot_attention", &dense.tokens.shape(), &[self.cfg.dim]));
        }
        let x = self.norm_inputs.forward(bd, dense.tokens)?;
        Ok((self.to_k.forward(bd, x)?, self.to_v.forward(bd, x)?))
    }

    pub fn refine_step<'t, T: Scalar>(
        &self,
        bd: &Binder<'t, '_, T>,
        slots: Var<'t, T>,
        keys: Var<'t, T>,
        values: Var<'t, T>,
    ) -> Result<(Var<'t, T>, AttentionMaps<T>)> {
        let d = self.cfg.dim;
        if slots.cols() != d || keys.cols() != d || values.shape() != keys.shape() {
            return Err(Error::shape("refine_step", &slots.shape(), &keys.shape()));
        }
        let q = self.to_q.forward(bd, self.norm_slots.forward(bd, slots)?)?;
        let logits = keys.matmul_t(q)?.scale(T::one() / T::c(d as f64).sqrt())?;
        let attn = logits.softmax(1)?;
        let weights = attn.normalize_axis(0, T::c(self.cfg.eps))?;
        let updates = weights.transpose()?.matmul(values)?;
        let mut next = self.gru.forward(bd, updates, slots)?;
        if let Some((ln, ff)) = &self.mlp {
            next = next.add(ff.forward(bd, ln.forward(bd, next)?)?)?;
        }
        Ok((
            next,
            AttentionMaps {
                attn: (*attn.value()).clone(),
                weights: (*weights.value()).clone(),
            },
        ))
    }

    /// Runs `iters` refinement steps from explicit initial slots.
    pub fn refine<'t, T: Scalar>(
        &self,
        bd: &Binder<'t, '_, T>,
        dense: &DenseTokens<'t, T>,
        init: Var<'t, T>,
        iters: usize,
    ) -> Result<(Var<'t, T>, AttentionMaps<T>)> {
        if iters == 0 {
            return Err(Error::invalid("at least one refinement step is required"));
        }
        let (k, v) = self.project_inputs(bd, dense)?;
        let mut slots = init;
        let mut maps = None;
        for _ in 0..iters {
            let (s, m) = self.refine_step(bd, slots, k, v)?;
            slots = s;
            maps = Some(m);
        }
        Ok((slots, maps.expect("iters >= 1")))
    }

    pub fn encode_frame<'t, T: Scalar>(
        &self,
        bd: &Binder<'t, '_, T>,
        dense: &DenseTokens<'t, T>,
        prev: Option<&SlotState<T>>,
        frame_index: usize,
        seed: u64,
    ) -> Result<FrameSlots<'t, T>> {
        let (init, mode) = self.init_slots(bd, prev, frame_index, seed)?;
        let initial = (*init.value()).clone();
        let (slots, maps) = self.refine(bd, dense, init, self.cfg.iters)?;
        Ok(FrameSlots {
            slots,
            initial,
            state: SlotState {
                slots: (*slots.value()).clone(),
                frame_index,
                steps: self.cfg.iters,
                init_mode: mode,
            },
            maps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn build(cfg: SlotAttentionConfig, seed: u64) -> (ParamStore<f64>, SlotAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sa = SlotAttention::new(&mut store, cfg, &mut rng).unwrap();
        (store, sa)
    }

    fn small() -> SlotAttentionConfig {
        SlotAttentionConfig {
            num_slots: 2,
            dim: 4,
            iters: 2,
            mlp_hidden: 8,
            ..SlotAttentionConfig::default()
        }
    }

    #[test]
    fn zero_variance_init_equals_mean() {
        let (mut store, sa) = build(small(), 0);
        store.set(sa.log_sigma, Tensor::full([1, 4], -60.0)).unwrap();
        let tape = Tape::new();
        let bd = Binder::inference(&tape, &store);
        let s = sa.random_init(&bd, 9).unwrap().value();
        let mu = store.get(sa.mu);
        for r in 0..2 {
            for c in 0..4 {
                assert!((s.at(r, c) - mu.at(0, c)).abs() < 1e-20);
            }
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let (store, sa) = build(small(), 42);
        let run = || {
            let tape = Tape::new();
            let bd = Binder::inference(&tape, &store);
            (*sa.random_init(&bd, 42).unwrap().value()).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn carryover_copies_previous_state() {
        let (store, sa) = build(small(), 3);
        let prev = SlotState {
            slots: Tensor::from_f64([2, 4], &[0.1, 0.2, 0.3, 0.4, -1.0, 2.0, 3.5, 1e-7]).unwrap(),
            frame_index: 2,
            steps: 2,
            init_mode: InitMode::Carryover,
        };
        let tape = Tape::new();
        let bd = Binder::inference(&tape, &store);
        let (init, mode) = sa.init_slots(&bd, Some(&prev), 3, 0).unwrap();
        assert_eq!(mode, InitMode::Carryover);
        assert_eq!(*init.value(), prev.slots);
        assert!(sa.init_slots(&bd, None, 3, 0).is_err());
    }
}
