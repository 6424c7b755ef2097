//! Corpus statistics in the layout of the benchmark summary table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use crate::episode::{Episode, Subset};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SubsetStats {
    pub episodes: usize,
    pub tasks: usize,
    /// Distinct layouts; episodes drawn without a fixed layout pool count individually.
    pub layouts: usize,
    pub objects: (usize, usize),
    pub relevant: (usize, usize),
    pub frames: usize,
    pub boxes: usize,
}

fn widen(r: &mut (usize, usize), v: usize, first: bool) {
    if first {
        *r = (v, v);
    } else {
        *r = (r.0.min(v), r.1.max(v));
    }
}

/// Object counts are distinct instance ids per episode, gripper included.
pub fn corpus_stats(episodes: &[Episode]) -> BTreeMap<&'static str, SubsetStats> {
    let mut out: BTreeMap<&'static str, SubsetStats> = BTreeMap::new();
    let mut tasks: BTreeMap<Subset, BTreeSet<&str>> = BTreeMap::new();
    let mut layouts: BTreeMap<Subset, BTreeSet<(bool, u64)>> = BTreeMap::new();
    for ep in episodes {
        let s = out.entry(ep.subset.name()).or_default();
        let first = s.episodes == 0;
        s.episodes += 1;
        tasks.entry(ep.subset).or_default().insert(&ep.task);
        let key = match ep.layout {
            Some(l) => (true, l as u64),
            None => (false, ep.seed),
        };
        layouts.entry(ep.subset).or_default().insert(key);
        let mut ids = BTreeSet::new();
        let mut rel = BTreeSet::new();
        for f in &ep.frames {
            s.frames += 1;
            s.boxes += f.ann.instances.len();
            for i in &f.ann.instances {
                ids.insert(&i.id);
                if i.relevant {
                    rel.insert(&i.id);
                }
            }
        }
        widen(&mut s.objects, ids.len(), first);
        widen(&mut s.relevant, rel.len(), first);
    }
    for (subset, t) in tasks {
        let s = out.get_mut(subset.name()).expect("entry exists");
        s.tasks = t.len();
        s.layouts = layouts[&subset].len();
    }
    out
}

pub fn render_table(stats: &BTreeMap<&'static str, SubsetStats>) -> String {
    let range = |r: (usize, usize)| if r.0 == r.1 { r.0.to_string() } else { format!("{}-{}", r.0, r.1) };
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<9} {:>8} {:>6} {:>8} {:>8} {:>11} {:>8} {:>9}",
        "subset", "episodes", "tasks", "layouts", "objects", "tr_objects", "frames", "boxes"
    );
    for (name, st) in stats {
        let _ = writeln!(
            s,
            "{:<9} {:>8} {:>6} {:>8} {:>8} {:>11} {:>8} {:>9}",
            name,
            st.episodes,
            st.tasks,
            st.layouts,
            range(st.objects),
            range(st.relevant),
            st.frames,
            st.boxes
        );
    }
    s
}
