//! Standalone checks of annotation invariants over episodes and dataset directories.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::episode::{filter_noops, Episode};
use crate::io::{episode_files, load_episode};
use crate::scene::CANVAS;
use crate::vocab::mentions;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    TooShort { frames: usize },
    NonContiguous { index: usize, t: usize },
    BoxMismatch { t: usize, id: String, err_px: u64 },
    EmptyMask { t: usize, id: String },
    Overlap { t: usize, a: String, b: String },
    DuplicateId { t: usize, id: String },
    NounChanged { t: usize, id: String },
    Relevance { t: usize, id: String },
    TaskChanged { t: usize },
    NoOp { t: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            TooShort { frames } => write!(f, "episode has {frames} frames, need at least 2"),
            NonContiguous { index, t } => write!(f, "frame {index} carries t = {t}"),
            BoxMismatch { t, id, err_px } => write!(f, "t={t} {id}: box differs from mask extent by {err_px} px"),
            EmptyMask { t, id } => write!(f, "t={t} {id}: empty mask"),
            Overlap { t, a, b } => write!(f, "t={t}: masks of {a} and {b} overlap"),
            DuplicateId { t, id } => write!(f, "t={t}: id {id} appears twice"),
            NounChanged { t, id } => write!(f, "t={t} {id}: noun differs from earlier frames"),
            Relevance { t, id } => write!(f, "t={t} {id}: relevance flag disagrees with the task"),
            TaskChanged { t } => write!(f, "t={t}: task string changed"),
            NoOp { t } => write!(f, "t={t}: no-op action survived filtering"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ValidatorConfig {
    pub box_tolerance_px: f64,
    pub noop_eps: f64,
}

impl Default for ValidatorConfig {
    fn default() -> Self {
        ValidatorConfig {
            box_tolerance_px: 1.0,
            noop_eps: 1e-3,
        }
    }
}

/// Tight pixel box `[x1, y1, x2, y2)` of a mask.
fn mask_extent(mask: &[bool]) -> Option<[usize; 4]> {
    let mut e: Option<[usize; 4]> = None;
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (p % CANVAS, p / CANVAS);
        e = Some(match e {
            None => [x, y, x + 1, y + 1],
            Some([a, b, c, d]) => [a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)],
        });
    }
    e
}

pub fn validate_episode(ep: &Episode, cfg: &ValidatorConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    if ep.frames.len() < 2 {
        out.push(Violation::TooShort { frames: ep.frames.len() });
    }
    let mut nouns: HashMap<&str, &str> = HashMap::new();
    let c = CANVAS as f64;
    for (i, f) in ep.frames.iter().enumerate() {
        let a = &f.ann;
        if a.t != i {
            out.push(Violation::NonContiguous { index: i, t: a.t });
        }
        if a.task != ep.task {
            out.push(Violation::TaskChanged { t: a.t });
        }
        let mut owner: Vec<Option<usize>> = vec![None; CANVAS * CANVAS];
        let mut seen: HashMap<&str, ()> = HashMap::new();
        for (k, inst) in a.instances.iter().enumerate() {
            if seen.insert(&inst.id, ()).is_some() {
                out.push(Violation::DuplicateId { t: a.t, id: inst.id.clone() });
            }
            if *nouns.entry(&inst.id).or_insert(&inst.noun) != inst.noun {
                out.push(Violation::NounChanged { t: a.t, id: inst.id.clone() });
            }
            if inst.relevant != mentions(&a.task, &inst.noun) {
                out.push(Violation::Relevance { t: a.t, id: inst.id.clone() });
            }
            let Some([x1, y1, x2, y2]) = mask_extent(&inst.mask) else {
                out.push(Violation::EmptyMask { t: a.t, id: inst.id.clone() });
                continue;
            };
            let [cx, cy, w, h] = inst.bbox;
            let stored = [(cx - w / 2.0) * c, (cy - h / 2.0) * c, (cx + w / 2.0) * c, (cy + h / 2.0) * c];
            let actual = [x1, y1, x2, y2].map(|v| v as f64);
            let err = stored.iter().zip(&actual).fold(0.0f64, |m, (s, a)| m.max((s - a).abs()));
            if err > cfg.box_tolerance_px || !err.is_finite() {
                out.push(Violation::BoxMismatch {
                    t: a.t,
                    id: inst.id.clone(),
                    err_px: err.ceil().min(u64::MAX as f64) as u64,
                });
            }
            let mut clash = None;
            for (p, _) in inst.mask.iter().enumerate().filter(|(_, &m)| m) {
                match owner[p] {
                    Some(o) if clash.is_none() => clash = Some(o),
                    Some(_) => {}
                    None => owner[p] = Some(k),
                }
            }
            if let Some(o) = clash {
                out.push(Violation::Overlap {
                    t: a.t,
                    a: a.instances[o].id.clone(),
                    b: inst.id.clone(),
                });
            }
        }
    }
    // Re-running the filter must keep every frame; the first frame is its own reference.
    let actions: Vec<[f64; 7]> = ep.frames.iter().map(|f| f.ann.action).collect();
    if let Ok(keep) = filter_noops(&actions, None, cfg.noop_eps) {
        let mut k = keep.into_iter().peekable();
        for t in 0..actions.len() {
            if k.peek() == Some(&t) {
                k.next();
            } else if t > 0 {
                out.push(Violation::NoOp { t });
            }
        }
    }
    let a0 = actions.first();
    if let Some(a) = a0 {
        let motion = a[..6].iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let grip_change = ep.frames[0].ann.proprio[3] != a[6];
        if motion < cfg.noop_eps && !grip_change {
            out.push(Violation::NoOp { t: 0 });
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct DirReport {
    pub episodes: usize,
    pub failures: Vec<(PathBuf, String)>,
}

impl DirReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Validates every episode file in `dir`; unreadable files count as failures.
pub fn validate_dir(dir: &Path, cfg: &ValidatorConfig) -> crate::Result<DirReport> {
    let mut report = DirReport::default();
    for path in episode_files(dir)? {
        report.episodes += 1;
        match load_episode(&path) {
            Ok(ep) => {
                for v in validate_episode(&ep, cfg) {
                    report.failures.push((path.clone(), v.to_string()));
                }
            }
            Err(e) => report.failures.push((path.clone(), e.to_string())),
        }
    }
    Ok(report)
}
