//! Per-slot prediction heads and the two-stage training objectives.

use rand::Rng;

use crate::boxes::{box_cost, box_terms, hungarian_match, BoxCostWeights, MatchAssignment};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{concat_rows, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub slot_attn: f64,
    pub track: f64,
    pub int: f64,
    pub r#box: f64,
    pub obj: f64,
    pub seg: f64,
    pub tau: f64,
    pub w_pos: f64,
    pub w_neg: f64,
    pub box_weights: BoxCostWeights,
    /// Positives are the same object within this many frames.
    pub track_window: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            slot_attn: 1.0,
            track: 0.5,
            int: 1.0,
            r#box: 1.0,
            obj: 0.5,
            seg: 1.0,
            tau: 0.1,
            w_pos: 2.0,
            w_neg: 1.0,
            box_weights: BoxCostWeights::default(),
            track_window: 2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.slot_attn,
            self.track,
            self.int,
            self.r#box,
            self.obj,
            self.seg,
            self.w_pos,
            self.w_neg,
            self.box_weights.l1,
            self.box_weights.giou,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }
}

/// Ground truth of one frame in model coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTargets<T> {
    /// Normalized cxcywh per instance.
    pub boxes: Vec<[T; 4]>,
    /// Per instance, one target in {0, 1} per patch-grid cell.
    pub masks: Vec<Vec<T>>,
    pub relevant: Vec<bool>,
    /// Episode-stable identity per instance.
    pub identities: Vec<usize>,
}

impl<T: Scalar> FrameTargets<T> {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Downsamples a pixel mask to a patch grid: a cell is on when at least half
/// its pixels are set. A non-empty mask that covers no cell that much keeps
/// its best-covered cell so small objects are never dropped.
pub fn downsample_mask<T: Scalar>(mask: &[bool], height: usize, width: usize, patch: usize) -> Result<Vec<T>> {
    if mask.len() != height * width || patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::shape("downsample_mask", &[height, width], &[mask.len(), patch]));
    }
    let (gr, gc) = (height / patch, width / patch);
    let mut cover = vec![0usize; gr * gc];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                cover[(y / patch) * gc + x / patch] += 1;
            }
        }
    }
    let full = patch * patch;
    let mut out: Vec<T> = cover
        .iter()
        .map(|&c| if 2 * c >= full && c > 0 { T::one() } else { T::zero() })
        .collect();
    if out.iter().all(|v| v.is_zero()) {
        let (best, &c) = cover
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty grid");
        if c > 0 {
            out[best] = T::one();
        }
    }
    Ok(out)
}

/// Box, objectness and mask heads applied to every slot.
#[derive(Clone, Debug)]
pub struct SlotHeads {
    pub box_hidden: Linear,
    pub box_out: Linear,
    pub objectness: Linear,
    pub mask_slot_norm: LayerNorm,
    pub mask_input_norm: LayerNorm,
    pub mask_q: Linear,
    pub mask_k: Linear,
    /// Projection (d → d/2) applied before tracking similarities.
    pub track: Option<Linear>,
    pub dim: usize,
}

/// Head outputs for one frame's `K` slots.
pub struct SlotPredictions<'t, T: Scalar> {
    /// `K × 4` cxcywh in (0, 1).
    pub boxes: Var<'t, T>,
    /// `K × 1`.
    pub objectness: Var<'t, T>,
    /// `K × N` over the patch grid.
    pub mask_logits: Var<'t, T>,
}

impl<'t, T: Scalar> SlotPredictions<'t, T> {
    pub fn box_rows(&self) -> Vec<[T; 4]> {
        let b = self.boxes.value();
        (0..b.rows())
            .map(|r| {
                let row = b.row(r);
                [row[0], row[1], row[2], row[3]]
            })
            .collect()
    }
}

impl SlotHeads {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, dim: usize, track_projection: bool, rng: &mut impl Rng) -> Self {
        SlotHeads {
            track: track_projection.then(|| Linear::new(store, "heads.track", dim, (dim / 2).max(1), true, rng)),
            box_hidden: Linear::new(store, "heads.box1", dim, dim, true, rng),
            box_out: Linear::new(store, "heads.box2", dim, 4, true, rng),
            objectness: Linear::new(store, "heads.obj", dim, 1, true, rng),
            mask_slot_norm: LayerNorm::new(store, "heads.mask_ln_s", dim),
            mask_input_norm: LayerNorm::new(store, "heads.mask_ln_v", dim),
            mask_q: Linear::new(store, "heads.mask_q", dim, dim, false, rng),
            mask_k: Linear::new(store, "heads.mask_k", dim, dim, false, rng),
            dim,
        }
    }

    /// Slot embeddings used by the tracking loss.
    pub fn track_embedding<'t, T: Scalar>(&self, bd: &Binder<'t, '_, T>, slots: Var<'t, T>) -> Result<Var<'t, T>> {
        match &self.track {
            Some(p) => p.forward(bd, slots),
            None => Ok(slots),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        bd: &Binder<'t, '_, T>,
        slots: Var<'t, T>,
        dense: Var<'t, T>,
    ) -> Result<SlotPredictions<'t, T>> {
        let boxes = self
            .box_out
            .forward(bd, self.box_hidden.forward(bd, slots)?.relu()?)?
            .sigmoid()?;
        let objectness = self.objectness.forward(bd, slots)?;
        let q = self.mask_q.forward(bd, self.mask_slot_norm.forward(bd, slots)?)?;
        let k = self.mask_k.forward(bd, self.mask_input_norm.forward(bd, dense)?)?;
        let mask_logits = q.matmul_t(k)?.scale(T::one() / T::c(self.dim as f64).sqrt())?;
        Ok(SlotPredictions {
            boxes,
            objectness,
            mask_logits,
        })
    }
}

/// Matches slots to objects from predicted boxes.
pub fn match_frame<T: Scalar>(
    preds: &SlotPredictions<'_, T>,
    gt: &FrameTargets<T>,
    w: BoxCostWeights,
) -> Result<MatchAssignment<T>> {
    let pred = preds.box_rows();
    if gt.is_empty() {
        return hungarian_match(&vec![Vec::new(); pred.len()]);
    }
    hungarian_match(&box_cost(&pred, &gt.boxes, w)?)
}

pub struct SlotAttnLoss<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub l_box: Var<'t, T>,
    pub l_obj: Var<'t, T>,
    pub l_seg: Var<'t, T>,
}

/// `λ_box L_box + λ_obj L_obj + λ_seg L_seg` for one frame.
pub fn slot_attn_loss<'t, T: Scalar>(
    preds: &SlotPredictions<'t, T>,
    gt: &FrameTargets<T>,
    m: &MatchAssignment<T>,
    cfg: &LossConfig,
) -> Result<SlotAttnLoss<'t, T>> {
    let tape = preds.boxes.tape();
    let k = preds.boxes.rows();
    let n = preds.mask_logits.cols();
    if let Some(bad) = gt.masks.iter().find(|mk| mk.len() != n) {
        return Err(Error::shape("slot_attn_loss", &[n], &[bad.len()]));
    }
    let mut obj_t = vec![T::zero(); k];
    for &(s, _) in &m.pairs {
        obj_t[s] = T::one();
    }
    let l_obj = preds
        .objectness
        .bce_with_logits(&obj_t, &vec![T::one(); k])?
        .scale(T::one() / T::c(k as f64))?;
    let zero = || tape.constant(Tensor::scalar(T::zero()));
    let (l_box, l_seg) = if m.pairs.is_empty() {
        (zero()?, zero()?)
    } else {
        let slots: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
        let np = T::c(m.pairs.len() as f64);
        let gt_boxes: Vec<T> = m.pairs.iter().flat_map(|p| gt.boxes[p.1]).collect();
        let gt_boxes = tape.constant(Tensor::new([m.pairs.len(), 4], gt_boxes)?)?;
        let (l1, giou) = box_terms(preds.boxes.gather_rows(&slots)?, gt_boxes)?;
        let l_box = l1
            .scale(T::c(cfg.box_weights.l1))?
            .add(giou.scale(T::c(cfg.box_weights.giou))?)?
            .sum()?
            .scale(T::one() / np)?;
        let targets: Vec<T> = m.pairs.iter().flat_map(|p| gt.masks[p.1].iter().copied()).collect();
        let l_seg = preds
            .mask_logits
            .gather_rows(&slots)?
            .bce_with_logits(&targets, &vec![T::one(); targets.len()])?
            .scale(T::one() / (np * T::c(n as f64)))?;
        (l_box, l_seg)
    };
    let total = l_box
        .scale(T::c(cfg.r#box))?
        .add(l_obj.scale(T::c(cfg.obj))?)?
        .add(l_seg.scale(T::c(cfg.seg))?)?;
    Ok(SlotAttnLoss {
        total,
        l_box,
        l_obj,
        l_seg,
    })
}

pub struct TrackLoss<'t, T: Scalar> {
    /// Mean over anchors with at least one positive; `None` when no anchor had one.
    pub loss: Option<Var<'t, T>>,
    pub anchors: usize,
    pub skipped: usize,
}

/// Multi-positive InfoNCE over slot embeddings of consecutive frames.
///
/// `embeddings[t]` is the `K × e` slot embedding of frame `t` and
/// `identities[t][i]` the object identity matched to slot `i`, if any. An
/// anchor is a matched slot; positives are slots with the same identity in
/// other frames within `window`; negatives are all other slots of the clip
/// except same-identity slots outside the window.
pub fn track_loss<'t, T: Scalar>(
    embeddings: &[Var<'t, T>],
    identities: &[Vec<Option<usize>>],
    tau: f64,
    window: usize,
) -> Result<TrackLoss<'t, T>> {
    if embeddings.len() < 2 || embeddings.len() != identities.len() {
        return Err(Error::invalid("tracking needs at least two frames with identities"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let k = embeddings[0].rows();
    if embeddings.iter().any(|e| e.rows() != k) || identities.iter().any(|i| i.len() != k) {
        return Err(Error::invalid("every frame needs the same slot count"));
    }
    let frames = embeddings.len();
    let total = frames * k;
    let ident = |r: usize| identities[r / k][r % k];
    let mut anchors = Vec::new();
    let mut all_mask = Vec::new();
    let mut pos_mask = Vec::new();
    let mut skipped = 0;
    for a in 0..total {
        let Some(id) = ident(a) else { continue };
        let ta = a / k;
        let mut pos = vec![false; total];
        let mut all = vec![false; total];
        for b in 0..total {
            if b == a {
                continue;
            }
            let same = ident(b) == Some(id);
            let near = (b / k).abs_diff(ta) <= window && b / k != ta;
            if same {
                if near {
                    pos[b] = true;
                    all[b] = true;
                }
            } else {
                all[b] = true;
            }
        }
        if !pos.iter().any(|&p| p) {
            skipped += 1;
            continue;
        }
        anchors.push(a);
        all_mask.extend(all);
        pos_mask.extend(pos);
    }
    if anchors.is_empty() {
        return Ok(TrackLoss {
            loss: None,
            anchors: 0,
            skipped,
        });
    }
    let e = concat_rows(embeddings)?.l2_normalize_rows(T::c(1e-12))?;
    let sim = e
        .gather_rows(&anchors)?
        .matmul_t(e)?
        .scale(T::one() / T::c(tau))?;
    let per_anchor = sim
        .masked_logsumexp(&all_mask)?
        .sub(sim.masked_logsumexp(&pos_mask)?)?;
    Ok(TrackLoss {
        loss: Some(per_anchor.mean()?),
        anchors: anchors.len(),
        skipped,
    })
}

/// Relevance label per slot: inherited from the matched object, 0 otherwise.
pub fn relevance_labels<T: Scalar>(m: &MatchAssignment<T>, gt: &FrameTargets<T>, num_slots: usize) -> Vec<bool> {
    let mut out = vec![false; num_slots];
    for &(s, g) in &m.pairs {
        out[s] = gt.relevant[g];
    }
    out
}

/// Class-weighted BCE `(1/K) Σ w(û)·BCE(û, σ(logit))`, computed from logits.
pub fn relevance_loss<'t, T: Scalar>(logits: Var<'t, T>, labels: &[bool], w_pos: f64, w_neg: f64) -> Result<Var<'t, T>> {
    let k = labels.len();
    if k == 0 || logits.value().len() != k {
        return Err(Error::shape("relevance_loss", &logits.shape(), &[k]));
    }
    let t: Vec<T> = labels.iter().map(|&l| if l { T::one() } else { T::zero() }).collect();
    let w: Vec<T> = labels.iter().map(|&l| T::c(if l { w_pos } else { w_neg })).collect();
    logits.bce_with_logits(&t, &w)?.scale(T::one() / T::c(k as f64))
}

/// `λ_slot-attn L_slot-attn + λ_track L_track + λ_int L_int`; absent
/// components contribute nothing.
pub fn stage1_total<'t, T: Scalar>(
    slot_attn: Var<'t, T>,
    track: Option<Var<'t, T>>,
    int: Var<'t, T>,
    cfg: &LossConfig,
) -> Result<Var<'t, T>> {
    let mut total = slot_attn
        .scale(T::c(cfg.slot_attn))?
        .add(int.scale(T::c(cfg.int))?)?;
    if let Some(tr) = track {
        total = total.add(tr.scale(T::c(cfg.track))?)?;
    }
    Ok(total)
}

/// Cross-entropy between per-dimension bin logits (`L × K`) and bin labels,
/// summed over the `L` dimensions.
pub fn action_ce<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    logits.cross_entropy(labels)
}

/// Area under the ROC curve (ties count one half). `None` without both classes.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let npos = labels.iter().filter(|&&l| l).count();
    let nneg = labels.len() - npos;
    if npos == 0 || nneg == 0 {
        return None;
    }
    // Mann–Whitney with average ranks for ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &r in &idx[i..=j] {
            if labels[r] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (npos * (npos + 1)) as f64 / 2.0;
    Some(u / (npos * nneg) as f64)
}
