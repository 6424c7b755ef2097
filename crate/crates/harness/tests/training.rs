use slotforge::config::RunConfig;
use slotforge::model::{Model, STAGE1_PREFIXES, STAGE2_PREFIXES};
use slotforge::train::{build_stage2_cache, generate_corpus, Trainer};

/// Small enough to train a few hundred steps inside the test suite.
fn tiny() -> RunConfig {
    RunConfig {
        episodes: 10,
        holdout: 2,
        num_slots: 8,
        keep: 3,
        num_relations: 4,
        slot_iters: 2,
        dim: 16,
        heads: 2,
        mlp_hidden: 32,
        decoder_layers: 1,
        batch: 4,
        clip_len: 3,
        iters1: 200,
        iters2: 200,
        lr1: 1e-3,
        lr2: 1e-3,
        warmup: 10,
        threads: 2,
        ..RunConfig::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn stage_params(m: &Model, prefixes: &[&str]) -> Vec<(String, Vec<u64>)> {
    m.store
        .iter()
        .filter(|(_, n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(_, n, t)| (n.to_string(), t.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn stage1_loss_decreases() {
    let cfg = tiny();
    let eps = generate_corpus(&cfg, cfg.episodes, false).unwrap();
    let mut tr = Trainer::new(Model::new(&cfg).unwrap());
    let mut totals = Vec::new();
    tr.train_stage1(&cfg, &eps, |r| totals.push(r.terms.total)).unwrap();
    assert_eq!(totals.len(), 200);
    assert!(totals.iter().all(|t| t.is_finite()));
    let (head, tail) = (mean(&totals[..20]), mean(&totals[180..]));
    assert!(tail < head, "smoothed loss {head} -> {tail}");
}

#[test]
fn without_tracking_and_carryover_a_clip_is_the_mean_of_its_frames() {
    let cfg = RunConfig {
        lambda_track: 0.0,
        carryover_on: false,
        ..tiny()
    };
    let mut model = Model::new(&cfg).unwrap();
    model.set_carryover(false);
    let ep = &generate_corpus(&cfg, 1, false).unwrap()[0];
    let (clip, terms) = model.stage1_clip(&cfg, ep, 1, 3, 99).unwrap();
    let singles: Vec<_> = (1..4).map(|t| model.stage1_clip(&cfg, ep, t, 1, 99).unwrap()).collect();
    let mean_total = mean(&singles.iter().map(|s| s.1.total).collect::<Vec<_>>());
    assert!((terms.total - mean_total).abs() < 1e-12);
    for id in model.store.ids() {
        let a = clip.get(id).unwrap_or(&[]);
        for (i, &g) in a.iter().enumerate() {
            let m = singles.iter().map(|s| s.0.get(id).map_or(0.0, |v| v[i])).sum::<f64>() / 3.0;
            assert!((g - m).abs() <= 1e-10 * (1.0 + m.abs()), "{} [{i}]: {g} vs {m}", model.store.name(id));
        }
    }
}

#[test]
fn gradients_do_not_depend_on_thread_count() {
    let cfg = tiny();
    let eps = generate_corpus(&cfg, 4, false).unwrap();
    let tr = Trainer::new(Model::new(&cfg).unwrap());
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| tr.stage1_gradients(&cfg, &eps, 3).unwrap().0)
    };
    let (a, b) = (run(1), run(3));
    for id in tr.model.store.ids() {
        assert_eq!(a.get(id), b.get(id));
    }
}

#[test]
fn resumed_training_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { iters1: 6, ..tiny() };
    let eps = generate_corpus(&cfg, 4, false).unwrap();
    let mut tr = Trainer::new(Model::new(&cfg).unwrap());
    for _ in 0..3 {
        tr.stage1_step(&cfg, &eps).unwrap();
    }
    let ck = dir.path().join("s1.ckpt");
    tr.save(&ck).unwrap();
    let mut resumed = Trainer::load(Model::new(&cfg).unwrap(), &ck).unwrap();
    assert_eq!(resumed.step, 3);
    let (ga, _) = tr.stage1_gradients(&cfg, &eps, 3).unwrap();
    let (gb, _) = resumed.stage1_gradients(&cfg, &eps, 3).unwrap();
    for id in tr.model.store.ids() {
        assert_eq!(ga.get(id), gb.get(id));
    }
    for _ in 0..3 {
        let a = tr.stage1_step(&cfg, &eps).unwrap();
        let b = resumed.stage1_step(&cfg, &eps).unwrap();
        assert_eq!(a.terms.total.to_bits(), b.terms.total.to_bits());
    }
    let all = [STAGE1_PREFIXES.as_slice(), STAGE2_PREFIXES.as_slice()].concat();
    assert_eq!(stage_params(&tr.model, &all), stage_params(&resumed.model, &all));
}

#[test]
fn stage2_leaves_stage1_weights_untouched() {
    let cfg = RunConfig { iters2: 100, ..tiny() };
    let eps = generate_corpus(&cfg, 4, false).unwrap();
    let model = Model::new(&cfg).unwrap();
    let before1 = stage_params(&model, &STAGE1_PREFIXES);
    let before2 = stage_params(&model, &STAGE2_PREFIXES);
    let cache = build_stage2_cache(&model, &eps).unwrap();
    let mut tr = Trainer::restart(model);
    tr.train_stage2(&cfg, &cache, |_| {}).unwrap();
    assert_eq!(tr.step, 100);
    assert_eq!(stage_params(&tr.model, &STAGE1_PREFIXES), before1);
    assert_ne!(stage_params(&tr.model, &STAGE2_PREFIXES), before2);
}

fn stage2_ce(relations_on: bool, steps: usize) -> Vec<f64> {
    let cfg = RunConfig {
        relations_on,
        iters2: steps,
        batch: 8,
        min_objects: 2,
        max_objects: 2,
        ..tiny()
    };
    let eps = generate_corpus(&cfg, cfg.episodes, false).unwrap();
    let mut model = Model::new(&cfg).unwrap();
    model.relations_on = relations_on;
    let cache = build_stage2_cache(&model, &eps).unwrap();
    let mut tr = Trainer::restart(model);
    let mut ce = Vec::new();
    tr.train_stage2(&cfg, &cache, |r| ce.push(r.ce)).unwrap();
    ce
}

#[test]
fn action_cross_entropy_drops_below_uniform() {
    let ln_k = (256f64).ln();
    let ce = stage2_ce(true, 500);
    // Summed over the seven dimensions, so uniform logits start near 7 ln K.
    assert!((ce[0] - 7.0 * ln_k).abs() < 2.0, "initial CE {} vs 7 ln K", ce[0]);
    let tail = mean(&ce[ce.len() - 20..]);
    assert!(tail < ln_k, "tail CE {tail}");
}

#[test]
fn object_only_mode_trains() {
    let ce = stage2_ce(false, 150);
    assert!(mean(&ce[130..]) < mean(&ce[..20]));
}
