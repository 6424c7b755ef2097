//! Held-out metrics and closed-loop rollouts.

use std::collections::HashMap;
use std::fmt::Write;

use rayon::prelude::*;
use slotforge_core::decoder::greedy_action;
use slotforge_core::frontend::Frame;
use slotforge_core::losses::auc;
use slotforge_core::params::Binder;
use slotforge_core::{Tape, Tensor};
use slotforge_world::episode::expert_action;
use slotforge_world::scene::CANVAS;
use slotforge_world::vocab::tokenize;
use slotforge_world::{rollout_scene, Episode, ScenarioConfig, Scene};

use crate::model::{argmax, Model};
use crate::train::Stage2Episode;

#[derive(Clone, Debug, Default)]
pub struct Stage1Metrics {
    /// Mean IoU over every matched (slot, object) pair.
    pub mean_iou: f64,
    /// Relevance AUC pooled over every slot of every frame.
    pub auc: Option<f64>,
    /// Fraction of consecutive-frame object appearances whose matched slot changes.
    pub flip_rate: f64,
    pub pairs: usize,
    pub transitions: usize,
    pub frames: usize,
}

pub fn evaluate_stage1(model: &Model, episodes: &[Episode]) -> anyhow::Result<Stage1Metrics> {
    struct Part {
        ious: Vec<f64>,
        scores: Vec<f64>,
        labels: Vec<bool>,
        flips: usize,
        transitions: usize,
        frames: usize,
    }
    let parts: Vec<Part> = episodes
        .par_iter()
        .map(|ep| {
            let enc = model.encode_episode(ep)?;
            let mut p = Part {
                ious: Vec::new(),
                scores: Vec::new(),
                labels: Vec::new(),
                flips: 0,
                transitions: 0,
                frames: enc.len(),
            };
            let mut prev: Option<HashMap<usize, usize>> = None;
            for (t, e) in enc.iter().enumerate() {
                let gt = ep.targets(t, model.patch())?;
                let fe = model.evaluate_frame(e, &gt)?;
                p.ious.extend(&fe.ious);
                p.scores.extend(&e.pi);
                p.labels.extend(&fe.labels);
                let cur: HashMap<usize, usize> = fe
                    .matching
                    .pairs
                    .iter()
                    .map(|&(s, g)| (gt.identities[g], s))
                    .collect();
                if let Some(prev) = &prev {
                    for (id, s) in &cur {
                        if let Some(ps) = prev.get(id) {
                            p.transitions += 1;
                            p.flips += usize::from(ps != s);
                        }
                    }
                }
                prev = Some(cur);
            }
            Ok(p)
        })
        .collect::<anyhow::Result<_>>()?;
    let mut ious = Vec::new();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    let (mut flips, mut transitions, mut frames) = (0, 0, 0);
    for p in parts {
        ious.extend(p.ious);
        scores.extend(p.scores);
        labels.extend(p.labels);
        flips += p.flips;
        transitions += p.transitions;
        frames += p.frames;
    }
    Ok(Stage1Metrics {
        mean_iou: ious.iter().sum::<f64>() / ious.len().max(1) as f64,
        auc: auc(&scores, &labels),
        flip_rate: flips as f64 / transitions.max(1) as f64,
        pairs: ious.len(),
        transitions,
        frames,
    })
}

/// Greedy-decoding accuracy per action dimension on cached frames.
pub fn action_accuracy(model: &Model, cache: &[Stage2Episode]) -> anyhow::Result<[f64; 7]> {
    let binning = model.decoder.binning();
    let counts: Vec<[usize; 7]> = cache
        .par_iter()
        .map(|ep| {
            let mut c = [0usize; 7];
            let mut prev_rel: Option<Tensor> = None;
            for (t, enc) in ep.frames.iter().enumerate() {
                let tape = Tape::new();
                let bd = Binder::inference(&tape, &model.store);
                let (logits, rel) = model.stage2_logits(&bd, enc, &ep.ids, &ep.proprio[t], prev_rel.as_ref())?;
                prev_rel = rel;
                let lv = logits.value();
                for (d, l) in binning.encode(&ep.actions[t]).into_iter().enumerate() {
                    c[d] += usize::from(argmax(lv.row(d)) == l);
                }
            }
            Ok(c)
        })
        .collect::<anyhow::Result<_>>()?;
    let n: usize = cache.iter().map(|e| e.frames.len()).sum();
    let mut out = [0.0; 7];
    for c in counts {
        for d in 0..7 {
            out[d] += c[d] as f64;
        }
    }
    Ok(out.map(|v| v / n.max(1) as f64))
}

#[derive(Clone, Copy, Debug)]
pub enum Policy<'m> {
    Expert,
    Learned(&'m Model),
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub success: bool,
    pub steps: usize,
    pub released: bool,
}

pub fn scene_frame(scene: &Scene, t: usize) -> Frame<f64> {
    Frame {
        height: CANVAS,
        width: CANVAS,
        rgb: scene.render().rgb.iter().map(|&b| b as f64 / 255.0).collect(),
        depth: None,
        index: t,
    }
}

/// Closed loop until the gripper releases a sprite or `max_steps` elapse.
pub fn rollout(policy: Policy<'_>, mut scene: Scene, task: &str, max_steps: usize, seed: u64) -> anyhow::Result<Rollout> {
    let ids = tokenize(task)?;
    let mut state = None;
    let mut prev_rel: Option<Tensor> = None;
    let mut steps = 0;
    while !scene.released && steps < max_steps {
        let action: [f64; 7] = match policy {
            Policy::Expert => expert_action(&scene),
            Policy::Learned(model) => {
                let enc = model.encode(&scene_frame(&scene, steps), &ids, state.as_ref(), steps, seed)?;
                let tape = Tape::new();
                let bd = Binder::inference(&tape, &model.store);
                let (logits, rel) = model.stage2_logits(&bd, &enc, &ids, &scene.proprio(), prev_rel.as_ref())?;
                prev_rel = rel;
                state = Some(enc.state);
                let a = greedy_action(&logits.value(), model.decoder.binning())?;
                std::array::from_fn(|i| a[i])
            }
        };
        scene.step(&action)?;
        steps += 1;
    }
    Ok(Rollout {
        success: scene.success(),
        steps,
        released: scene.released,
    })
}

#[derive(Clone, Debug)]
pub struct TaskResult {
    pub seed: u64,
    pub task: String,
    pub successes: usize,
    pub rollouts: usize,
}

impl TaskResult {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.rollouts.max(1) as f64
    }
}

/// Task seeds for closed-loop evaluation; disjoint from training and held-out episodes.
pub fn eval_seeds(cfg: &crate::config::RunConfig) -> Vec<u64> {
    (0..cfg.eval_tasks)
        .map(|i| crate::train::episode_seed(cfg, i, true) ^ 0xe7a1)
        .collect()
}

/// `rollouts` closed-loop attempts on each task seed, varying the gripper start.
pub fn evaluate_tasks(
    policy: Policy<'_>,
    scenario: &ScenarioConfig,
    task_seeds: &[u64],
    rollouts: usize,
    max_steps: usize,
) -> anyhow::Result<Vec<TaskResult>> {
    task_seeds
        .par_iter()
        .map(|&seed| {
            let mut ok = 0;
            let mut task = String::new();
            for r in 0..rollouts {
                let (scene, t, _) = rollout_scene(seed, scenario, r as u64)?;
                task = t;
                ok += usize::from(rollout(policy, scene, &task, max_steps, seed ^ r as u64)?.success);
            }
            Ok(TaskResult {
                seed,
                task,
                successes: ok,
                rollouts,
            })
        })
        .collect()
}

pub fn mean_success(results: &[TaskResult]) -> f64 {
    let n: usize = results.iter().map(|r| r.rollouts).sum();
    results.iter().map(|r| r.successes).sum::<usize>() as f64 / n.max(1) as f64
}

/// One row per task plus an average row.
pub fn success_csv(label: &str, results: &[TaskResult]) -> String {
    let mut s = String::from("mode,task_seed,task,successes,rollouts,success_rate\n");
    for r in results {
        let _ = writeln!(s, "{label},{},\"{}\",{},{},{:.4}", r.seed, r.task, r.successes, r.rollouts, r.rate());
    }
    let n: usize = results.iter().map(|r| r.rollouts).sum();
    let k: usize = results.iter().map(|r| r.successes).sum();
    let _ = writeln!(s, "{label},average,,{k},{n},{:.4}", mean_success(results));
    s
}
