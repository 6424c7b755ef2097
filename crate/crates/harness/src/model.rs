//! Full model: object-centric encoder (stage 1) plus relation encoder and decoder (stage 2).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slotforge_core::boxes::{iou, MatchAssignment};
use slotforge_core::decoder::{DecoderConfig, PolicyDecoder};
use slotforge_core::frontend::{DenseTokens, Frame, FrontendConfig, PatchEmbed};
use slotforge_core::losses::{
    action_ce, match_frame, relevance_labels, relevance_loss, slot_attn_loss, stage1_total, track_loss, FrameTargets,
    SlotHeads,
};
use slotforge_core::params::{Binder, ParamGrads, ParamStore, Trainable};
use slotforge_core::relation::{RelationConfig, RelationEncoder};
use slotforge_core::slot_attention::{SlotAttention, SlotAttentionConfig, SlotState};
use slotforge_core::task_filter::{top_k_filter, LanguageEncoder, TaskFilter, TaskFilterConfig};
use slotforge_core::{Tape, Tensor};
use slotforge_world::vocab::{tokenize, vocab_size, MAX_WORDS};
use slotforge_world::Episode;

use crate::config::RunConfig;

pub const STAGE1_PREFIXES: [&str; 4] = ["frontend.", "slot.", "filter.", "heads."];
pub const STAGE2_PREFIXES: [&str; 2] = ["relation.", "decoder."];

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore<f64>,
    pub frontend: PatchEmbed,
    pub slots: SlotAttention,
    pub lang: LanguageEncoder,
    pub filter: TaskFilter,
    pub heads: SlotHeads,
    pub relation: RelationEncoder,
    pub decoder: PolicyDecoder,
    pub filter_on: bool,
    pub relations_on: bool,
}

/// Per-frame stage-1 scalars for logging.
#[derive(Clone, Copy, Debug, Default)]
pub struct Stage1Terms {
    pub l_box: f64,
    pub l_obj: f64,
    pub l_seg: f64,
    pub l_track: f64,
    pub l_int: f64,
    pub total: f64,
}

impl Stage1Terms {
    pub fn add(&mut self, o: &Stage1Terms) {
        self.l_box += o.l_box;
        self.l_obj += o.l_obj;
        self.l_seg += o.l_seg;
        self.l_track += o.l_track;
        self.l_int += o.l_int;
        self.total += o.total;
    }

    pub fn scale(&mut self, s: f64) {
        for v in [
            &mut self.l_box,
            &mut self.l_obj,
            &mut self.l_seg,
            &mut self.l_track,
            &mut self.l_int,
            &mut self.total,
        ] {
            *v *= s;
        }
    }
}

/// Stage-1 outputs of one frame, detached from any tape.
#[derive(Clone, Debug)]
pub struct EncodedFrame {
    pub dense: Tensor,
    /// Slots before the first refinement step.
    pub initial: Tensor,
    pub slots: Tensor,
    pub state: SlotState<f64>,
    pub boxes: Vec<[f64; 4]>,
    pub pi: Vec<f64>,
    pub selected: Vec<usize>,
    pub attn: Tensor,
    pub mask_logits: Tensor,
}

impl EncodedFrame {
    /// Slots handed to stage 2: the top-k subset, or all slots with the filter off.
    pub fn objects(&self, filter_on: bool) -> Tensor {
        if filter_on {
            self.slots.select_rows(&self.selected).expect("selected rows exist")
        } else {
            self.slots.clone()
        }
    }
}

/// Quality of one frame's slot decomposition against ground truth.
#[derive(Clone, Debug)]
pub struct FrameEval {
    pub matching: MatchAssignment<f64>,
    pub ious: Vec<f64>,
    pub labels: Vec<bool>,
}

pub fn frame_seed(episode_seed: u64, t: usize) -> u64 {
    episode_seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ (t as u64).wrapping_mul(0x9e37_79b9) ^ 0x5107
}

impl Model {
    pub fn new(cfg: &RunConfig) -> anyhow::Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6f_64656c);
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let frontend = PatchEmbed::new(
            &mut store,
            FrontendConfig {
                patch: cfg.patch,
                dim: d,
                ..FrontendConfig::default()
            },
            &mut rng,
        )?;
        let slots = SlotAttention::new(
            &mut store,
            SlotAttentionConfig {
                num_slots: cfg.num_slots,
                dim: d,
                iters: cfg.slot_iters,
                mlp_hidden: cfg.mlp_hidden,
                carryover: cfg.carryover_on,
                ..SlotAttentionConfig::default()
            },
            &mut rng,
        )?;
        let lang = LanguageEncoder::new(&mut store, "filter.lang", vocab_size(), MAX_WORDS, d, &mut rng);
        let filter = TaskFilter::new(
            &mut store,
            TaskFilterConfig {
                dim: d,
                heads: cfg.heads,
                ff_mult: cfg.ff_mult,
                keep: cfg.keep,
            },
            &mut rng,
        );
        let heads = SlotHeads::new(&mut store, d, cfg.track_projection, &mut rng);
        let relation = RelationEncoder::new(
            &mut store,
            RelationConfig {
                num_relations: cfg.num_relations,
                dim: d,
                heads: cfg.heads,
                ff_mult: cfg.ff_mult,
                carryover: cfg.relation_carryover,
            },
            &mut rng,
        );
        let decoder = PolicyDecoder::new(
            &mut store,
            DecoderConfig {
                dim: d,
                heads: cfg.heads,
                layers: cfg.decoder_layers,
                ff_mult: cfg.ff_mult,
                bins: cfg.bins,
                vocab: vocab_size(),
                max_words: MAX_WORDS,
            },
            &mut rng,
        );
        Ok(Model {
            store,
            frontend,
            slots,
            lang,
            filter,
            heads,
            relation,
            decoder,
            filter_on: cfg.filter_on,
            relations_on: cfg.relations_on,
        })
    }

    pub fn set_carryover(&mut self, on: bool) {
        self.slots.cfg.carryover = on;
    }

    pub fn stage1_mask(&self) -> Trainable {
        Trainable::prefixes(&self.store, &STAGE1_PREFIXES)
    }

    pub fn stage2_mask(&self) -> Trainable {
        Trainable::prefixes(&self.store, &STAGE2_PREFIXES)
    }

    pub fn patch(&self) -> usize {
        self.frontend.cfg.patch
    }

    /// Gradients and logged terms of the stage-1 objective on frames
    /// `start..start + len` of `ep`, starting from freshly sampled slots.
    pub fn stage1_clip(
        &self,
        cfg: &RunConfig,
        ep: &Episode,
        start: usize,
        len: usize,
        seed: u64,
    ) -> anyhow::Result<(ParamGrads<f64>, Stage1Terms)> {
        let lc = cfg.loss();
        let tape = Tape::new();
        let bd = Binder::new(&tape, &self.store, self.stage1_mask());
        let ids = tokenize(&ep.task)?;
        let mut prev: Option<SlotState<f64>> = None;
        let mut frame_totals = Vec::new();
        let mut embeddings = Vec::new();
        let mut identities = Vec::new();
        let mut terms = Stage1Terms::default();
        for (local, t) in (start..start + len).enumerate() {
            let gt = ep.targets(t, self.patch())?;
            let frame = ep.frames[t].frame();
            let dense = self.frontend.forward(&bd, &frame)?;
            let fs = self
                .slots
                .encode_frame(&bd, &dense, prev.as_ref(), local, frame_seed(seed, t))?;
            let preds = self.heads.forward(&bd, fs.slots, dense.tokens)?;
            let m = match_frame(&preds, &gt, lc.box_weights)?;
            let sa = slot_attn_loss(&preds, &gt, &m, &lc)?;
            let lang = self.lang.embed(&bd, &ids)?;
            let rel = self.filter.relevance(&bd, fs.slots, &lang)?;
            let labels = relevance_labels(&m, &gt, self.slots.cfg.num_slots);
            let l_int = relevance_loss(rel.logits, &labels, lc.w_pos, lc.w_neg)?;
            terms.l_box += sa.l_box.value().item();
            terms.l_obj += sa.l_obj.value().item();
            terms.l_seg += sa.l_seg.value().item();
            terms.l_int += l_int.value().item();
            frame_totals.push(stage1_total(sa.total, None, l_int, &lc)?);
            if lc.track > 0.0 {
                embeddings.push(self.heads.track_embedding(&bd, fs.slots)?);
                identities.push(
                    m.slot_to_object(self.slots.cfg.num_slots)
                        .into_iter()
                        .map(|o| o.map(|g| gt.identities[g]))
                        .collect::<Vec<_>>(),
                );
            }
            prev = Some(fs.state);
        }
        let n = len as f64;
        let mut total = frame_totals[0];
        for f in &frame_totals[1..] {
            total = total.add(*f)?;
        }
        total = total.scale(1.0 / n)?;
        if lc.track > 0.0 && embeddings.len() >= 2 {
            if let Some(tr) = track_loss(&embeddings, &identities, lc.tau, lc.track_window)?.loss {
                terms.l_track = tr.value().item() * n;
                total = total.add(tr.scale(lc.track)?)?;
            }
        }
        terms.scale(1.0 / n);
        terms.total = total.value().item();
        let grads = tape.backward(total)?;
        Ok((bd.param_grads(&grads), terms))
    }

    /// Stage-1 inference on one frame.
    pub fn encode(
        &self,
        frame: &Frame<f64>,
        ids: &[usize],
        prev: Option<&SlotState<f64>>,
        t: usize,
        seed: u64,
    ) -> anyhow::Result<EncodedFrame> {
        let tape = Tape::new();
        let bd = Binder::inference(&tape, &self.store);
        let dense = self.frontend.forward(&bd, frame)?;
        let fs = self.slots.encode_frame(&bd, &dense, prev, t, frame_seed(seed, t))?;
        let preds = self.heads.forward(&bd, fs.slots, dense.tokens)?;
        let lang = self.lang.embed(&bd, ids)?;
        let rel = self.filter.relevance(&bd, fs.slots, &lang)?;
        let pi = rel.pi.value().data().to_vec();
        let selected = if self.filter_on {
            top_k_filter(&pi, self.filter.cfg.keep)?
        } else {
            (0..pi.len()).collect()
        };
        let out = EncodedFrame {
            dense: (*dense.tokens.value()).clone(),
            slots: (*fs.slots.value()).clone(),
            initial: fs.initial,
            boxes: preds.box_rows(),
            mask_logits: (*preds.mask_logits.value()).clone(),
            pi,
            selected,
            attn: fs.maps.attn,
            state: fs.state,
        };
        Ok(out)
    }

    /// Runs stage 1 over a whole episode with the configured carryover.
    pub fn encode_episode(&self, ep: &Episode) -> anyhow::Result<Vec<EncodedFrame>> {
        let ids = tokenize(&ep.task)?;
        let mut out: Vec<EncodedFrame> = Vec::with_capacity(ep.frames.len());
        for (t, f) in ep.frames.iter().enumerate() {
            let prev = out.last().map(|e| &e.state);
            out.push(self.encode(&f.frame(), &ids, prev, t, ep.seed)?);
        }
        Ok(out)
    }

    pub fn evaluate_frame(&self, enc: &EncodedFrame, gt: &FrameTargets<f64>) -> anyhow::Result<FrameEval> {
        let cost_w = slotforge_core::boxes::BoxCostWeights::default();
        let matching = if gt.is_empty() {
            slotforge_core::boxes::hungarian_match(&vec![Vec::new(); enc.boxes.len()])?
        } else {
            slotforge_core::boxes::hungarian_match(&slotforge_core::boxes::box_cost(&enc.boxes, &gt.boxes, cost_w)?)?
        };
        let ious = matching
            .pairs
            .iter()
            .map(|&(s, g)| {
                iou(
                    slotforge_core::boxes::cxcywh_to_xyxy(enc.boxes[s]),
                    slotforge_core::boxes::cxcywh_to_xyxy(gt.boxes[g]),
                )
            })
            .collect();
        let labels = relevance_labels(&matching, gt, enc.boxes.len());
        Ok(FrameEval { matching, ious, labels })
    }

    /// Action logits (`7 × K`) for one frame from cached stage-1 outputs.
    pub fn stage2_logits<'t>(
        &self,
        bd: &Binder<'t, '_, f64>,
        enc: &EncodedFrame,
        ids: &[usize],
        proprio: &[f64; 4],
        prev_relations: Option<&Tensor>,
    ) -> anyhow::Result<(slotforge_core::Var<'t, f64>, Option<Tensor>)> {
        let objects = bd.constant(enc.objects(self.filter_on))?;
        let (relations, rel_value) = if self.relations_on {
            let dense = DenseTokens {
                tokens: bd.constant(enc.dense.clone())?,
                grid: self.frontend.cfg.grid(),
            };
            let r = self.relation.encode(bd, &dense, objects, prev_relations)?;
            let v = (*r.tokens.value()).clone();
            (Some(r.tokens), Some(v))
        } else {
            (None, None)
        };
        let bundle = self.decoder.assemble_bundle(bd, objects, relations, ids, proprio)?;
        Ok((self.decoder.decode(bd, &bundle)?, rel_value))
    }

    /// Gradient of the mean action cross-entropy over the given frames.
    pub fn stage2_batch(
        &self,
        frames: &[(&EncodedFrame, &[usize], [f64; 4], [f64; 7])],
    ) -> anyhow::Result<(ParamGrads<f64>, f64, usize, usize)> {
        let tape = Tape::new();
        let bd = Binder::new(&tape, &self.store, self.stage2_mask());
        let binning = self.decoder.binning();
        let mut losses = Vec::with_capacity(frames.len());
        let (mut correct, mut total) = (0, 0);
        for (enc, ids, proprio, action) in frames {
            let (logits, _) = self.stage2_logits(&bd, enc, ids, proprio, None)?;
            let labels = binning.encode(action);
            let lv = logits.value();
            for (d, &l) in labels.iter().enumerate() {
                let row = lv.row(d);
                let best = argmax(row);
                correct += usize::from(best == l);
                total += 1;
            }
            losses.push(action_ce(logits, &labels)?);
        }
        let mut sum = losses[0];
        for l in &losses[1..] {
            sum = sum.add(*l)?;
        }
        let mean = sum.scale(1.0 / frames.len() as f64)?;
        let value = mean.value().item();
        let grads = tape.backward(mean)?;
        Ok((bd.param_grads(&grads), value, correct, total))
    }
}

/// Lowest index among maxima.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
