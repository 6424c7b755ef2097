//! Scenario configuration, scripted expert, no-op filtering and annotations.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slotforge_core::frontend::Frame;
use slotforge_core::losses::{downsample_mask, FrameTargets};

use crate::error::{Result, WorldError};
use crate::scene::{Role, Scene, Shape, Sprite, CANVAS, COLORS, GRIPPER_SIZE, MAX_STEP};
use crate::vocab::{mentions, task_string, ROBOT};

/// Mirrors the object-count and layout regimes of the four benchmark suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Goal,
    Object,
    Spatial,
    Long,
}

impl Subset {
    pub const ALL: [Subset; 4] = [Subset::Goal, Subset::Object, Subset::Spatial, Subset::Long];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Goal => "goal",
            Subset::Object => "object",
            Subset::Spatial => "spatial",
            Subset::Long => "long",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub subset: Subset,
    /// Sprites including source and target, excluding the gripper.
    pub min_objects: usize,
    pub max_objects: usize,
    pub sprite_size: (i32, i32),
    pub target_size: (i32, i32),
    /// Restrict placements to this many layouts; `None` draws a fresh one per episode.
    pub n_layouts: Option<usize>,
    pub gripper_instance: bool,
    /// Idle steps injected into the raw demonstration (removed by filtering).
    pub idle_frames: usize,
    pub noop_eps: f64,
    pub max_steps: usize,
}

impl ScenarioConfig {
    pub fn for_subset(subset: Subset) -> Self {
        let (min_objects, max_objects, sprite_size, target_size) = match subset {
            Subset::Goal => (4, 7, (6, 8), (11, 13)),
            Subset::Object => (8, 12, (6, 8), (11, 13)),
            Subset::Spatial => (6, 11, (6, 8), (11, 13)),
            Subset::Long => (20, 29, (5, 6), (9, 10)),
        };
        // Goal-style suites share one scene and vary only the instruction.
        let n_layouts = (subset == Subset::Goal).then_some(1);
        ScenarioConfig {
            subset,
            min_objects,
            max_objects,
            sprite_size,
            target_size,
            n_layouts,
            gripper_instance: true,
            idle_frames: 0,
            noop_eps: 1e-3,
            max_steps: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_objects < 2 || self.min_objects > self.max_objects || self.max_objects > 29 {
            return Err(WorldError::Infeasible(format!(
                "object count range {}..={} outside 2..=29",
                self.min_objects, self.max_objects
            )));
        }
        if self.sprite_size.0 < 3 || self.sprite_size.0 > self.sprite_size.1 || self.target_size.0 <= self.sprite_size.1 {
            return Err(WorldError::Infeasible("targets must be larger than every other sprite".into()));
        }
        if self.target_size.0 > self.target_size.1 || self.target_size.1 > 24 {
            return Err(WorldError::Infeasible("target size range invalid".into()));
        }
        if self.noop_eps < 0.0 {
            return Err(WorldError::Infeasible("no-op threshold must be non-negative".into()));
        }
        if self.n_layouts == Some(0) {
            return Err(WorldError::Infeasible("n_layouts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub id: String,
    pub noun: String,
    /// Normalized cxcywh of the visible mask.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub relevant: bool,
    #[serde(skip)]
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameAnnotation {
    pub t: usize,
    pub task: String,
    pub action: [f64; 7],
    pub proprio: [f64; 4],
    pub instances: Vec<InstanceAnnotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeFrame {
    pub rgb: Vec<u8>,
    pub ann: FrameAnnotation,
}

impl EpisodeFrame {
    pub fn frame(&self) -> Frame<f64> {
        Frame {
            height: CANVAS,
            width: CANVAS,
            rgb: self.rgb.iter().map(|&b| b as f64 / 255.0).collect(),
            depth: None,
            index: self.ann.t,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub name: String,
    pub seed: u64,
    pub subset: Subset,
    pub layout: Option<usize>,
    pub task: String,
    pub frames: Vec<EpisodeFrame>,
}

impl Episode {
    /// Episode-stable integer identity per instance id, in first-seen order.
    pub fn identities(&self) -> HashMap<String, usize> {
        let mut out = HashMap::new();
        for f in &self.frames {
            for inst in &f.ann.instances {
                let n = out.len();
                out.entry(inst.id.clone()).or_insert(n);
            }
        }
        out
    }

    /// Ground truth in model coordinates for frame `t`.
    pub fn targets(&self, t: usize, patch: usize) -> Result<FrameTargets<f64>> {
        let ids = self.identities();
        let ann = &self.frames[t].ann;
        let mut masks = Vec::with_capacity(ann.instances.len());
        for inst in &ann.instances {
            masks.push(downsample_mask(&inst.mask, CANVAS, CANVAS, patch)?);
        }
        Ok(FrameTargets {
            boxes: ann.instances.iter().map(|i| i.bbox).collect(),
            masks,
            relevant: ann.instances.iter().map(|i| i.relevant).collect(),
            identities: ann.instances.iter().map(|i| ids[&i.id]).collect(),
        })
    }
}

/// Unfiltered demonstration, as recorded step by step.
#[derive(Clone, Debug)]
pub struct RawEpisode {
    pub frames: Vec<EpisodeFrame>,
    pub idle_indices: Vec<usize>,
    pub initial_grip: f64,
}

/// Keeps frames whose motion ∞-norm (first six dimensions) reaches `eps`
/// or whose gripper command differs from the preceding gripper state;
/// `initial_grip` is that state for the first frame (its own command when `None`).
pub fn filter_noops(actions: &[[f64; 7]], initial_grip: Option<f64>, eps: f64) -> Result<Vec<usize>> {
    if eps < 0.0 || !eps.is_finite() {
        return Err(WorldError::Rejected(format!("invalid no-op threshold {eps}")));
    }
    let mut prev = initial_grip.or(actions.first().map(|a| a[6]));
    let mut keep = Vec::new();
    for (i, a) in actions.iter().enumerate() {
        let motion = a[..6].iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let changed = prev != Some(a[6]);
        if motion >= eps || changed {
            keep.push(i);
        }
        prev = Some(a[6]);
    }
    if keep.is_empty() {
        return Err(WorldError::Rejected("every action is a no-op".into()));
    }
    Ok(keep)
}

/// Next expert action: reach the source, grasp, carry it onto the target centre, release.
pub fn expert_action(scene: &Scene) -> [f64; 7] {
    let src = scene.source();
    let mv = |goal: (i32, i32), grip: f64| {
        let d = |g: i32, p: i32| (g - p).clamp(-MAX_STEP, MAX_STEP) as f64 / MAX_STEP as f64;
        [d(goal.0, scene.gripper.0), d(goal.1, scene.gripper.1), 0.0, 0.0, 0.0, 0.0, grip]
    };
    if scene.held == Some(src) {
        let goal = scene.sprites[scene.target()].center();
        let (sx, sy) = scene.sprites[src].center();
        // Gripper position that puts the source centre on the target centre.
        let want = (goal.0 - (sx - scene.gripper.0), goal.1 - (sy - scene.gripper.1));
        if want == scene.gripper {
            return [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0];
        }
        return mv(want, 1.0);
    }
    if scene.closed {
        // Grasped the wrong thing or nothing: let go.
        return [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0];
    }
    let goal = scene.sprites[src].center();
    if goal == scene.gripper {
        return [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    }
    mv(goal, -1.0)
}

fn overlaps(a: [i32; 4], b: [i32; 4], margin: i32) -> bool {
    a[0] < b[2] + margin && b[0] < a[2] + margin && a[1] < b[3] + margin && b[1] < a[3] + margin
}

fn place(rng: &mut ChaCha8Rng, sizes: &[i32]) -> Result<Vec<(i32, i32)>> {
    let lo = GRIPPER_SIZE / 2;
    let hi = CANVAS as i32 - GRIPPER_SIZE / 2;
    let mut placed: Vec<[i32; 4]> = Vec::new();
    for (k, &s) in sizes.iter().enumerate() {
        // Centres stay reachable by the gripper.
        let (xmin, xmax) = ((lo - s / 2).max(0), (hi - s / 2).min(CANVAS as i32 - s));
        let mut ok = None;
        for _ in 0..100 {
            let (x, y) = (rng.random_range(xmin..=xmax), rng.random_range(xmin..=xmax));
            let e = [x, y, x + s, y + s];
            if placed.iter().all(|p| !overlaps(*p, e, 1)) {
                ok = Some(e);
                break;
            }
        }
        let e = ok.ok_or_else(|| {
            WorldError::Infeasible(format!("no free spawn region for sprite {k} after 100 attempts"))
        })?;
        placed.push(e);
    }
    Ok(placed.iter().map(|e| (e[0], e[1])).collect())
}

/// Initial scene and task for `seed`.
pub fn initial_scene(seed: u64, cfg: &ScenarioConfig) -> Result<(Scene, String, Option<usize>)> {
    scene_variant(seed, cfg, None)
}

/// Scene of `seed` with the gripper start redrawn from `variant`; used for
/// repeated rollouts of one task.
pub fn rollout_scene(seed: u64, cfg: &ScenarioConfig, variant: u64) -> Result<(Scene, String, Option<usize>)> {
    scene_variant(seed, cfg, Some(variant))
}

type Spec = (Shape, usize, Role, i32);

/// Fresh objects per episode: the target first, distractors, the source last.
fn random_specs(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig) -> Vec<Spec> {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut shapes = Shape::ALL.to_vec();
    shapes.shuffle(rng);
    let (src_shape, dst_shape) = (shapes[0], shapes[1]);
    let others = &shapes[2..];
    let mut specs: Vec<Spec> = vec![(
        dst_shape,
        rng.random_range(0..COLORS.len()),
        Role::Target,
        rng.random_range(cfg.target_size.0..=cfg.target_size.1),
    )];
    for _ in 0..n - 2 {
        specs.push((
            others[rng.random_range(0..others.len())],
            rng.random_range(0..COLORS.len()),
            Role::Distractor,
            rng.random_range(cfg.sprite_size.0..=cfg.sprite_size.1),
        ));
    }
    specs.push((
        src_shape,
        rng.random_range(0..COLORS.len()),
        Role::Source,
        rng.random_range(cfg.sprite_size.0..=cfg.sprite_size.1),
    ));
    specs
}

/// Objects of a shared layout: one or two large placement regions followed
/// by small movable sprites. Shapes are distinct while the seven nouns last,
/// so relevance stays exact. Roles are provisional; the episode picks the
/// task pair.
fn shared_specs(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig) -> Vec<Spec> {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let targets = if n >= 4 { 2 } else { 1 };
    let mut shapes = Shape::ALL.to_vec();
    shapes.shuffle(rng);
    (0..n)
        .map(|i| {
            let shape = shapes[i % shapes.len()];
            let color = rng.random_range(0..COLORS.len());
            if i < targets {
                (shape, color, Role::Target, rng.random_range(cfg.target_size.0..=cfg.target_size.1))
            } else {
                (shape, color, Role::Distractor, rng.random_range(cfg.sprite_size.0..=cfg.sprite_size.1))
            }
        })
        .collect()
}

fn scene_variant(seed: u64, cfg: &ScenarioConfig, variant: Option<u64>) -> Result<(Scene, String, Option<usize>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (specs, positions, layout) = match cfg.n_layouts {
        None => {
            let specs = random_specs(&mut rng, cfg);
            let sizes: Vec<i32> = specs.iter().map(|s| s.3).collect();
            let positions = place(&mut rng, &sizes)?;
            (specs, positions, None)
        }
        Some(l) => {
            let layout = rng.random_range(0..l);
            let mut lr = ChaCha8Rng::seed_from_u64(0x1a7_0000 + layout as u64);
            let mut specs = shared_specs(&mut lr, cfg);
            let sizes: Vec<i32> = specs.iter().map(|s| s.3).collect();
            let positions = place(&mut lr, &sizes)?;
            // The episode only decides which pair the task is about.
            let targets = specs.iter().filter(|s| s.2 == Role::Target).count();
            let dst = rng.random_range(0..targets);
            let src = rng.random_range(targets..specs.len());
            for (i, s) in specs.iter_mut().enumerate() {
                s.2 = if i == dst {
                    Role::Target
                } else if i == src {
                    Role::Source
                } else {
                    Role::Distractor
                };
            }
            (specs, positions, Some(layout))
        }
    };
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let sprites: Vec<Sprite> = specs
        .iter()
        .zip(&positions)
        .map(|(&(shape, color, role, size), &(x, y))| {
            let c = counts.entry(shape.noun()).or_insert(0);
            *c += 1;
            Sprite {
                id: format!("{}{}", shape.noun(), c),
                shape,
                color,
                role,
                x,
                y,
                size,
            }
        })
        .collect();
    let src = &sprites[sprites.iter().position(|s| s.role == Role::Source).expect("source")];
    let dst = &sprites[sprites.iter().position(|s| s.role == Role::Target).expect("target")];
    let task = task_string((src.color_name(), src.noun()), (dst.color_name(), dst.noun()), cfg.gripper_instance);
    let lim = (GRIPPER_SIZE / 2, CANVAS as i32 - GRIPPER_SIZE / 2);
    if let Some(v) = variant {
        rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ v.wrapping_add(1));
    }
    let mut gripper;
    loop {
        gripper = (rng.random_range(lim.0..=lim.1), rng.random_range(lim.0..=lim.1));
        if gripper != src.center() {
            break;
        }
    }
    let scene = Scene {
        sprites,
        gripper,
        closed: false,
        held: None,
        grasp_offset: (0, 0),
        released: false,
        gripper_instance: cfg.gripper_instance,
    };
    Ok((scene, task, layout))
}

/// Visible-instance annotations of the current scene.
pub fn annotate(scene: &Scene, task: &str) -> (Vec<u8>, Vec<InstanceAnnotation>) {
    let r = scene.render();
    let n_sprites = scene.sprites.len();
    let mut out = Vec::new();
    let mut emit = |who: usize, id: &str, noun: &str| {
        let mask: Vec<bool> = r.owner.iter().map(|o| *o == Some(who)).collect();
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (x, y) = (p % CANVAS, p / CANVAS);
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1);
            y2 = y2.max(y + 1);
        }
        if x1 == usize::MAX {
            return; // fully occluded
        }
        let c = CANVAS as f64;
        out.push(InstanceAnnotation {
            id: id.to_string(),
            noun: noun.to_string(),
            bbox: [
                (x1 + x2) as f64 / 2.0 / c,
                (y1 + y2) as f64 / 2.0 / c,
                (x2 - x1) as f64 / c,
                (y2 - y1) as f64 / c,
            ],
            relevant: mentions(task, noun),
            mask,
        });
    };
    for (i, s) in scene.sprites.iter().enumerate() {
        emit(i, &s.id, s.noun());
    }
    if scene.gripper_instance {
        emit(n_sprites, &format!("{ROBOT}1"), ROBOT);
    }
    (r.rgb, out)
}

/// Records the expert demonstration step by step, before filtering.
pub fn generate_raw(seed: u64, cfg: &ScenarioConfig) -> Result<(RawEpisode, String, Option<usize>)> {
    let (mut scene, task, layout) = initial_scene(seed, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d1e_f00d);
    let mut frames = Vec::new();
    let mut idle_indices = Vec::new();
    let initial_grip = scene.grip_state();
    // Idle steps go before distinct expert steps, chosen from a dry run.
    let expert_len = {
        let mut dry = scene.clone();
        let mut n = 0;
        while !dry.released && n < cfg.max_steps {
            dry.step(&expert_action(&dry))?;
            n += 1;
        }
        if !dry.released {
            return Err(WorldError::Infeasible(format!("expert did not finish within {} steps", cfg.max_steps)));
        }
        n
    };
    let mut slots: Vec<usize> = (0..expert_len).collect();
    slots.shuffle(&mut rng);
    let mut idle_before: Vec<usize> = slots.into_iter().take(cfg.idle_frames).collect();
    idle_before.sort_unstable();
    let mut expert_steps = 0;
    while !scene.released {
        let (rgb, instances) = annotate(&scene, &task);
        let idle = idle_before.first() == Some(&expert_steps);
        let action = if idle {
            idle_before.remove(0);
            idle_indices.push(frames.len());
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, scene.grip_state()]
        } else {
            expert_steps += 1;
            expert_action(&scene)
        };
        frames.push(EpisodeFrame {
            rgb,
            ann: FrameAnnotation {
                t: frames.len(),
                task: task.clone(),
                action,
                proprio: scene.proprio(),
                instances,
            },
        });
        scene.step(&action)?;
    }
    Ok((
        RawEpisode {
            frames,
            idle_indices,
            initial_grip,
        },
        task,
        layout,
    ))
}

/// Expert demonstration with no-op frames removed.
pub fn generate_episode(seed: u64, cfg: &ScenarioConfig) -> Result<Episode> {
    let (raw, task, layout) = generate_raw(seed, cfg)?;
    let actions: Vec<[f64; 7]> = raw.frames.iter().map(|f| f.ann.action).collect();
    let keep = filter_noops(&actions, Some(raw.initial_grip), cfg.noop_eps)?;
    let mut frames: Vec<EpisodeFrame> = keep.iter().map(|&i| raw.frames[i].clone()).collect();
    for (t, f) in frames.iter_mut().enumerate() {
        f.ann.t = t;
    }
    if frames.len() < 2 {
        return Err(WorldError::Rejected("fewer than two frames after filtering".into()));
    }
    Ok(Episode {
        name: format!("{}_{seed:08}", cfg.subset.name()),
        seed,
        subset: cfg.subset,
        layout,
        task,
        frames,
    })
}
