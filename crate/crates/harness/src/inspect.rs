//! Static per-frame reports: attention maps, relevance table, relation summaries.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use slotforge_core::frontend::DenseTokens;
use slotforge_core::params::Binder;
use slotforge_core::Tape;
use slotforge_world::io::write_pgm;
use slotforge_world::scene::CANVAS;
use slotforge_world::Episode;

use crate::model::{EncodedFrame, Model};

#[derive(Clone, Debug)]
pub struct InstanceSlot {
    pub id: String,
    pub relevant: bool,
    /// Slot whose thresholded mask has the highest IoU with this instance.
    pub best_slot: usize,
    pub mask_iou: f64,
    pub selected: bool,
}

#[derive(Clone, Debug)]
pub struct InspectReport {
    pub pgm_files: Vec<PathBuf>,
    pub pi: Vec<f64>,
    pub selected: Vec<usize>,
    pub instances: Vec<InstanceSlot>,
}

/// Upsamples a grid map to the canvas with values scaled by its maximum.
fn grid_image(values: &[f64], rows: usize, cols: usize) -> Vec<u8> {
    let max = values.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
    let (ph, pw) = (CANVAS / rows, CANVAS / cols);
    let mut out = vec![0u8; CANVAS * CANVAS];
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let v = values[(y / ph) * cols + x / pw] / max;
            out[y * CANVAS + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

/// Encodes `ep` up to frame `t` (with carryover) and writes the report under `out`.
pub fn inspect(model: &Model, ep: &Episode, t: usize, out: &Path) -> anyhow::Result<InspectReport> {
    anyhow::ensure!(t < ep.frames.len(), "frame {t} outside episode of {} frames", ep.frames.len());
    std::fs::create_dir_all(out)?;
    let encoded = model.encode_episode(ep)?;
    let enc: &EncodedFrame = &encoded[t];
    let grid = model.frontend.cfg.grid();
    let k = enc.slots.rows();
    let mut pgm_files = Vec::new();
    for s in 0..k {
        let col: Vec<f64> = (0..enc.attn.rows()).map(|n| enc.attn.at(n, s)).collect();
        let path = out.join(format!("slot_{s:02}_attn.pgm"));
        write_pgm(&path, CANVAS, CANVAS, grid_image(&col, grid.rows, grid.cols))?;
        pgm_files.push(path);
        let mask: Vec<f64> = enc.mask_logits.row(s).iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect();
        let path = out.join(format!("slot_{s:02}_mask.pgm"));
        write_pgm(&path, CANVAS, CANVAS, grid_image(&mask, grid.rows, grid.cols))?;
        pgm_files.push(path);
    }

    let mut table = String::from("slot,pi,selected,cx,cy,w,h\n");
    for s in 0..k {
        let b = enc.boxes[s];
        let _ = writeln!(
            table,
            "{s},{:.6},{},{:.4},{:.4},{:.4},{:.4}",
            enc.pi[s],
            enc.selected.contains(&s),
            b[0],
            b[1],
            b[2],
            b[3]
        );
    }
    std::fs::write(out.join("slots.csv"), table)?;
    std::fs::write(
        out.join("selected.txt"),
        enc.selected.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ") + "\n",
    )?;

    let gt = ep.targets(t, model.patch())?;
    let ann = &ep.frames[t].ann;
    let mut instances = Vec::new();
    let mut inst_csv = String::from("instance,relevant,best_slot,mask_iou,selected\n");
    for (g, inst) in ann.instances.iter().enumerate() {
        let target = &gt.masks[g];
        let mut best = (0, -1.0);
        for s in 0..k {
            let pred: Vec<bool> = enc.mask_logits.row(s).iter().map(|&l| l > 0.0).collect();
            let inter = pred.iter().zip(target).filter(|(p, &m)| **p && m > 0.5).count();
            let union = pred.iter().zip(target).filter(|(p, &m)| **p || m > 0.5).count();
            let v = inter as f64 / union.max(1) as f64;
            if v > best.1 {
                best = (s, v);
            }
        }
        let row = InstanceSlot {
            id: inst.id.clone(),
            relevant: inst.relevant,
            best_slot: best.0,
            mask_iou: best.1,
            selected: enc.selected.contains(&best.0),
        };
        let _ = writeln!(inst_csv, "{},{},{},{:.4},{}", row.id, row.relevant, row.best_slot, row.mask_iou, row.selected);
        instances.push(row);
    }
    std::fs::write(out.join("instances.csv"), inst_csv)?;

    if model.relations_on {
        let tape = Tape::new();
        let bd = Binder::inference(&tape, &model.store);
        let dense = DenseTokens {
            tokens: bd.constant(enc.dense.clone())?,
            grid,
        };
        let objects = bd.constant(enc.objects(model.filter_on))?;
        let r = model.relation.encode(&bd, &dense, objects, None)?;
        let mut s = String::from("relation,top_patch,top_patch_weight,slot_weights\n");
        for q in 0..r.visual_attn.rows() {
            let row = r.visual_attn.row(q);
            let (p, w) = row
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            let slots: Vec<String> = r.slot_attn.row(q).iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "{q},{p},{w:.4},{}", slots.join(" "));
        }
        std::fs::write(out.join("relations.csv"), s)?;
    }
    Ok(InspectReport {
        pgm_files,
        pi: enc.pi.clone(),
        selected: enc.selected.clone(),
        instances,
    })
}
