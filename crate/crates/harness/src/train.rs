//! Corpus generation and the two training stages.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use slotforge_core::checkpoint::{load_file, load_into_store, write_records};
use slotforge_core::optim::{CosineSchedule, RmsProp};
use slotforge_core::params::ParamGrads;
use slotforge_core::Tensor;
use slotforge_world::vocab::tokenize;
use slotforge_world::{generate_episode, Episode};

use crate::config::RunConfig;
use crate::model::{EncodedFrame, Model, Stage1Terms};

/// Held-out episodes use seeds disjoint from training seeds.
pub fn episode_seed(cfg: &RunConfig, i: usize, heldout: bool) -> u64 {
    let base = cfg.seed.wrapping_mul(1_000_003);
    base.wrapping_add(i as u64).wrapping_add(if heldout { 1 << 32 } else { 0 })
}

pub fn generate_corpus(cfg: &RunConfig, count: usize, heldout: bool) -> anyhow::Result<Vec<Episode>> {
    let sc = cfg.scenario();
    (0..count)
        .into_par_iter()
        .map(|i| generate_episode(episode_seed(cfg, i, heldout), &sc).map_err(anyhow::Error::from))
        .collect()
}

pub fn pool(cfg: &RunConfig) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build()?)
}

/// One optimisation run: parameters, optimiser state and step counter.
pub struct Trainer {
    pub model: Model,
    pub opt: RmsProp<f64>,
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct Stage1Row {
    pub step: usize,
    pub lr: f64,
    pub terms: Stage1Terms,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Stage2Row {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub bin_accuracy: f64,
    pub grad_norm: f64,
}

fn schedule(cfg: &RunConfig, base: f64, total: usize) -> CosineSchedule {
    CosineSchedule {
        base,
        warmup: cfg.warmup.min(total / 2),
        total,
        min_ratio: cfg.min_lr_ratio,
    }
}

/// Clips of one stage-1 step: (episode, start, length, noise seed).
pub fn stage1_batch_plan(cfg: &RunConfig, episodes: &[Episode], step: usize) -> Vec<(usize, usize, usize, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (step as u64).wrapping_mul(0x51ed_270b) ^ 0x5747_0001);
    (0..cfg.batch)
        .map(|_| {
            let e = rng.random_range(0..episodes.len());
            let n = episodes[e].frames.len();
            let len = cfg.clip_len.min(n);
            let start = rng.random_range(0..=n - len);
            (e, start, len, rng.random())
        })
        .collect()
}

fn sum_grads(n: usize, parts: Vec<ParamGrads<f64>>) -> ParamGrads<f64> {
    let mut acc = ParamGrads::empty(n);
    for g in &parts {
        acc.accumulate(g);
    }
    acc
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let n = model.store.len();
        Trainer {
            model,
            opt: RmsProp::new(n),
            step: 0,
        }
    }

    /// Batch-mean stage-1 gradient for step `step` (order-independent of thread count).
    pub fn stage1_gradients(
        &self,
        cfg: &RunConfig,
        episodes: &[Episode],
        step: usize,
    ) -> anyhow::Result<(ParamGrads<f64>, Stage1Terms)> {
        let plan = stage1_batch_plan(cfg, episodes, step);
        let parts: Vec<(ParamGrads<f64>, Stage1Terms)> = plan
            .par_iter()
            .map(|&(e, start, len, seed)| self.model.stage1_clip(cfg, &episodes[e], start, len, seed))
            .collect::<anyhow::Result<_>>()?;
        let mut terms = Stage1Terms::default();
        for (_, t) in &parts {
            terms.add(t);
        }
        terms.scale(1.0 / parts.len() as f64);
        let mut g = sum_grads(self.model.store.len(), parts.into_iter().map(|p| p.0).collect());
        g.scale(1.0 / plan.len() as f64);
        Ok((g, terms))
    }

    pub fn stage1_step(&mut self, cfg: &RunConfig, episodes: &[Episode]) -> anyhow::Result<Stage1Row> {
        let (mut g, terms) = self.stage1_gradients(cfg, episodes, self.step)?;
        let grad_norm = g.clip_norm(cfg.grad_clip);
        let lr = schedule(cfg, cfg.lr1, cfg.iters1).lr(self.step);
        self.opt.step(&mut self.model.store, &g, lr);
        let row = Stage1Row {
            step: self.step,
            lr,
            terms,
            grad_norm,
        };
        self.step += 1;
        Ok(row)
    }

    /// Runs stage 1 up to `cfg.iters1` steps, calling `log` after each.
    pub fn train_stage1(
        &mut self,
        cfg: &RunConfig,
        episodes: &[Episode],
        mut log: impl FnMut(&Stage1Row),
    ) -> anyhow::Result<()> {
        if episodes.is_empty() {
            bail!("stage 1 needs at least one episode");
        }
        let pool = pool(cfg)?;
        while self.step < cfg.iters1 {
            let row = pool.install(|| self.stage1_step(cfg, episodes))?;
            log(&row);
        }
        Ok(())
    }

    /// Frames of one stage-2 step: (episode, frame).
    fn stage2_plan(cfg: &RunConfig, cache: &[Stage2Episode], step: usize) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (step as u64).wrapping_mul(0x2c1b_3c6d) ^ 0x5747_0002);
        (0..cfg.batch)
            .map(|_| {
                let e = rng.random_range(0..cache.len());
                (e, rng.random_range(0..cache[e].frames.len()))
            })
            .collect()
    }

    pub fn stage2_step(&mut self, cfg: &RunConfig, cache: &[Stage2Episode]) -> anyhow::Result<Stage2Row> {
        let plan = Self::stage2_plan(cfg, cache, self.step);
        // A few frames per task keep the per-task tape small enough to parallelise.
        let chunk = plan.len().div_ceil(cfg.threads.max(1)).max(1);
        let parts: Vec<(ParamGrads<f64>, f64, usize, usize, usize)> = plan
            .par_chunks(chunk)
            .map(|ch| {
                let frames: Vec<_> = ch
                    .iter()
                    .map(|&(e, t)| {
                        let ep = &cache[e];
                        (&ep.frames[t], ep.ids.as_slice(), ep.proprio[t], ep.actions[t])
                    })
                    .collect();
                let (g, ce, c, n) = self.model.stage2_batch(&frames)?;
                Ok((g, ce, c, n, ch.len()))
            })
            .collect::<anyhow::Result<_>>()?;
        let mut acc = ParamGrads::empty(self.model.store.len());
        let (mut ce, mut correct, mut total) = (0.0, 0, 0);
        for (g, c, k, n, len) in &parts {
            let mut g = g.clone();
            g.scale(*len as f64 / plan.len() as f64);
            acc.accumulate(&g);
            ce += c * *len as f64 / plan.len() as f64;
            correct += k;
            total += n;
        }
        let grad_norm = acc.clip_norm(cfg.grad_clip);
        let lr = schedule(cfg, cfg.lr2, cfg.iters2).lr(self.step);
        self.opt.step(&mut self.model.store, &acc, lr);
        let row = Stage2Row {
            step: self.step,
            lr,
            ce,
            bin_accuracy: correct as f64 / total.max(1) as f64,
            grad_norm,
        };
        self.step += 1;
        Ok(row)
    }

    pub fn train_stage2(
        &mut self,
        cfg: &RunConfig,
        cache: &[Stage2Episode],
        mut log: impl FnMut(&Stage2Row),
    ) -> anyhow::Result<()> {
        if cache.is_empty() {
            bail!("stage 2 needs at least one episode");
        }
        let pool = pool(cfg)?;
        while self.step < cfg.iters2 {
            let row = pool.install(|| self.stage2_step(cfg, cache))?;
            log(&row);
        }
        Ok(())
    }

    /// Parameters, optimiser moments and the step counter in one file.
    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let mut records: Vec<(String, Tensor)> = self
            .model
            .store
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.clone()))
            .collect();
        records.extend(self.opt.state_records(&self.model.store));
        records.push(("train.step".into(), Tensor::scalar(self.step as f64)));
        let f = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| path.display().to_string())?);
        write_records(f, records.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(())
    }

    /// Restores a checkpoint written by [`Trainer::save`] into a model built from the same config.
    pub fn load(model: Model, path: &Path) -> anyhow::Result<Self> {
        let records = load_file::<f64>(path).with_context(|| path.display().to_string())?;
        let mut t = Trainer::new(model);
        let params: Vec<_> = records
            .iter()
            .filter(|(n, _)| !n.starts_with("optim.") && !n.starts_with("train."))
            .cloned()
            .collect();
        load_into_store(&params, &mut t.model.store, false)?;
        t.opt.load_state(&t.model.store, &records)?;
        t.step = records
            .iter()
            .find(|(n, _)| n == "train.step")
            .map_or(0, |(_, v)| v.item() as usize);
        Ok(t)
    }

    /// Starts stage 2 from stage-1 weights with a fresh optimiser.
    pub fn restart(model: Model) -> Self {
        Trainer::new(model)
    }
}

/// Frozen stage-1 outputs of one episode plus its supervision.
pub struct Stage2Episode {
    pub frames: Vec<EncodedFrame>,
    pub ids: Vec<usize>,
    pub proprio: Vec<[f64; 4]>,
    pub actions: Vec<[f64; 7]>,
}

pub fn build_stage2_cache(model: &Model, episodes: &[Episode]) -> anyhow::Result<Vec<Stage2Episode>> {
    episodes
        .par_iter()
        .map(|ep| {
            Ok(Stage2Episode {
                frames: model.encode_episode(ep)?,
                ids: tokenize(&ep.task)?,
                proprio: ep.frames.iter().map(|f| f.ann.proprio).collect(),
                actions: ep.frames.iter().map(|f| f.ann.action).collect(),
            })
        })
        .collect()
}

pub fn stage1_csv_header() -> &'static str {
    "step,lr,l_box,l_obj,l_seg,l_track,l_int,total,grad_norm"
}

pub fn write_stage1_row(w: &mut impl Write, r: &Stage1Row) -> std::io::Result<()> {
    let t = &r.terms;
    writeln!(
        w,
        "{},{:e},{},{},{},{},{},{},{}",
        r.step, r.lr, t.l_box, t.l_obj, t.l_seg, t.l_track, t.l_int, t.total, r.grad_norm
    )
}

pub fn stage2_csv_header() -> &'static str {
    "step,lr,action_ce,bin_accuracy,grad_norm"
}

pub fn write_stage2_row(w: &mut impl Write, r: &Stage2Row) -> std::io::Result<()> {
    writeln!(w, "{},{:e},{},{},{}", r.step, r.lr, r.ce, r.bin_accuracy, r.grad_norm)
}
