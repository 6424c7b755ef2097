use slotforge_world::episode::{expert_action, generate_raw, initial_scene};
use slotforge_world::io::{load_episode, save_episode};
use slotforge_world::stats::{corpus_stats, render_table};
use slotforge_world::validate::{validate_episode, ValidatorConfig};
use slotforge_world::vocab::tokenize;
use slotforge_world::{filter_noops, generate_episode, ScenarioConfig, Subset, WorldError};

fn two_objects() -> ScenarioConfig {
    ScenarioConfig {
        min_objects: 2,
        max_objects: 2,
        ..ScenarioConfig::for_subset(Subset::Goal)
    }
}

#[test]
fn same_seed_same_episode() {
    let a = generate_episode(7, &two_objects()).unwrap();
    let b = generate_episode(7, &two_objects()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_episode(8, &two_objects()).unwrap());
}

#[test]
fn five_objects_flag_source_target_and_gripper() {
    let cfg = ScenarioConfig {
        min_objects: 5,
        max_objects: 5,
        ..ScenarioConfig::for_subset(Subset::Goal)
    };
    for seed in 0..10 {
        let ep = generate_episode(seed, &cfg).unwrap();
        let f = &ep.frames[0].ann;
        let rel: Vec<&str> = f.instances.iter().filter(|i| i.relevant).map(|i| i.noun.as_str()).collect();
        assert_eq!(rel.len(), 3, "{rel:?} for {}", ep.task);
        assert!(rel.contains(&"robot"));
        let no_robot = ScenarioConfig { gripper_instance: false, ..cfg.clone() };
        let ep = generate_episode(seed, &no_robot).unwrap();
        assert!(!ep.task.contains("robot"));
        assert_eq!(ep.frames[0].ann.instances.iter().filter(|i| i.relevant).count(), 2);
    }
}

#[test]
fn crowded_scenes_stay_disjoint() {
    let cfg = ScenarioConfig {
        min_objects: 29,
        max_objects: 29,
        ..ScenarioConfig::for_subset(Subset::Long)
    };
    let ep = generate_episode(3, &cfg).unwrap();
    assert_eq!(ep.identities().len(), 30);
    assert!(validate_episode(&ep, &ValidatorConfig::default()).is_empty());
}

#[test]
fn goal_episodes_share_one_scene() {
    let cfg = ScenarioConfig::for_subset(Subset::Goal);
    let scenes: Vec<_> = (0..12).map(|s| initial_scene(s, &cfg).unwrap()).collect();
    let looks = |sc: &slotforge_world::Scene| -> Vec<_> { sc.sprites.iter().map(|s| (s.id.clone(), s.color, s.x, s.y, s.size)).collect() };
    assert!(scenes.iter().all(|(sc, _, l)| looks(sc) == looks(&scenes[0].0) && *l == Some(0)));
    let tasks: std::collections::BTreeSet<&str> = scenes.iter().map(|(_, t, _)| t.as_str()).collect();
    assert!(tasks.len() > 1, "{tasks:?}");
    let fresh = ScenarioConfig { n_layouts: None, ..cfg };
    assert_ne!(looks(&initial_scene(0, &fresh).unwrap().0), looks(&initial_scene(1, &fresh).unwrap().0));
}

#[test]
fn spawn_exhaustion_is_reported() {
    let cfg = ScenarioConfig {
        min_objects: 29,
        max_objects: 29,
        sprite_size: (12, 12),
        target_size: (20, 20),
        ..ScenarioConfig::for_subset(Subset::Long)
    };
    assert!(matches!(generate_episode(0, &cfg), Err(WorldError::Infeasible(_))));
}

#[test]
fn all_zero_actions_are_rejected() {
    let acts = vec![[0.0; 7]; 5];
    assert!(matches!(filter_noops(&acts, Some(0.0), 1e-3), Err(WorldError::Rejected(_))));
}

#[test]
fn zero_threshold_keeps_everything() {
    let acts = vec![[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]; 6];
    assert_eq!(filter_noops(&acts, None, 0.0).unwrap(), (0..6).collect::<Vec<_>>());
}

#[test]
fn injected_idle_frames_are_exactly_removed() {
    let cfg = ScenarioConfig {
        idle_frames: 3,
        ..ScenarioConfig::for_subset(Subset::Goal)
    };
    for seed in 0..5 {
        let (raw, _, _) = generate_raw(seed, &cfg).unwrap();
        assert_eq!(raw.idle_indices.len(), 3);
        let acts: Vec<[f64; 7]> = raw.frames.iter().map(|f| f.ann.action).collect();
        let keep = filter_noops(&acts, Some(raw.initial_grip), 1e-3).unwrap();
        let removed: Vec<usize> = (0..acts.len()).filter(|i| !keep.contains(i)).collect();
        assert_eq!(removed, raw.idle_indices);
        let ep = generate_episode(seed, &cfg).unwrap();
        assert_eq!(ep.frames.len(), acts.len() - 3);
    }
}

#[test]
fn expert_always_succeeds() {
    for subset in Subset::ALL {
        let cfg = ScenarioConfig::for_subset(subset);
        for seed in 0..10 {
            let (mut scene, _, _) = initial_scene(seed, &cfg).unwrap();
            let mut steps = 0;
            while !scene.released {
                scene.step(&expert_action(&scene)).unwrap();
                steps += 1;
                assert!(steps < 200);
            }
            assert!(scene.success(), "{subset:?} seed {seed}");
        }
    }
}

#[test]
fn every_subset_validates() {
    let v = ValidatorConfig::default();
    let mut eps = Vec::new();
    for subset in Subset::ALL {
        let cfg = ScenarioConfig {
            n_layouts: Some(3),
            ..ScenarioConfig::for_subset(subset)
        };
        for seed in 0..8 {
            let ep = generate_episode(seed, &cfg).unwrap();
            let errs = validate_episode(&ep, &v);
            assert!(errs.is_empty(), "{subset:?}/{seed}: {errs:?}");
            tokenize(&ep.task).unwrap();
            eps.push(ep);
        }
    }
    let st = corpus_stats(&eps);
    assert_eq!(st.len(), 4);
    assert!(st["long"].objects.1 >= 21);
    assert!(st.values().all(|s| s.layouts <= 3));
    let table = render_table(&st);
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn validator_catches_corruption() {
    let v = ValidatorConfig::default();
    let ep = generate_episode(1, &ScenarioConfig::for_subset(Subset::Object)).unwrap();
    let mut bad = ep.clone();
    bad.frames[1].ann.instances[0].bbox[0] += 3.0 / 64.0;
    assert!(!validate_episode(&bad, &v).is_empty());
    let mut bad = ep.clone();
    bad.frames[1].ann.instances[0].relevant ^= true;
    assert!(!validate_episode(&bad, &v).is_empty());
    let mut bad = ep.clone();
    let noun = &mut bad.frames[1].ann.instances[0].noun;
    *noun = if noun == "bar" { "ring".into() } else { "bar".into() };
    assert!(!validate_episode(&bad, &v).is_empty());
    let mut bad = ep.clone();
    let m = bad.frames[0].ann.instances[0].mask.clone();
    for (k, on) in m.iter().enumerate() {
        if *on {
            bad.frames[0].ann.instances[1].mask[k] = true;
        }
    }
    assert!(!validate_episode(&bad, &v).is_empty());
    let mut bad = ep.clone();
    let mut idle = bad.frames[2].clone();
    idle.ann.action = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, bad.frames[2].ann.action[6]];
    bad.frames.insert(3, idle);
    for (t, f) in bad.frames.iter_mut().enumerate() {
        f.ann.t = t;
    }
    assert!(!validate_episode(&bad, &v).is_empty());
    let mut bad = ep;
    bad.frames.truncate(1);
    assert!(!validate_episode(&bad, &v).is_empty());
}

#[test]
fn serialization_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ep = generate_episode(7, &two_objects()).unwrap();
    let path = save_episode(dir.path(), &ep).unwrap();
    assert_eq!(load_episode(&path).unwrap(), ep);
    let mask = std::fs::read(dir.path().join(format!("{}/mask_000_{}.pgm", ep.name, ep.frames[0].ann.instances[0].id))).unwrap();
    let header: Vec<String> = String::from_utf8_lossy(&mask[..13]).split_whitespace().map(String::from).collect();
    assert_eq!(header, ["P5", "64", "64", "255"]);
    assert_eq!(mask.len(), 13 + 64 * 64);
    let frame = std::fs::read(dir.path().join(format!("{}/frame_000.ppm", ep.name))).unwrap();
    assert_eq!(&frame[..2], b"P6");
}

#[test]
fn frame_without_relevant_instances_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut ep = generate_episode(2, &two_objects()).unwrap();
    for inst in &mut ep.frames[0].ann.instances {
        inst.relevant = false;
    }
    ep.frames[1].ann.instances.clear();
    let path = save_episode(dir.path(), &ep).unwrap();
    assert_eq!(load_episode(&path).unwrap(), ep);
}

#[test]
fn malformed_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let ep = generate_episode(4, &two_objects()).unwrap();
    let path = save_episode(dir.path(), &ep).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[2] = lines[2].replace("\"action\"", "\"acton\"");
    std::fs::write(&path, lines.join("\n")).unwrap();
    match load_episode(&path) {
        Err(WorldError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn missing_mask_sidecar_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let ep = generate_episode(5, &two_objects()).unwrap();
    let path = save_episode(dir.path(), &ep).unwrap();
    let id = &ep.frames[0].ann.instances[0].id;
    std::fs::remove_file(dir.path().join(format!("{}/mask_000_{id}.pgm", ep.name))).unwrap();
    assert!(matches!(load_episode(&path), Err(WorldError::Sidecar { .. })));
}

#[test]
fn targets_match_annotations() {
    let ep = generate_episode(6, &ScenarioConfig::for_subset(Subset::Spatial)).unwrap();
    let tg = ep.targets(0, 8).unwrap();
    assert_eq!(tg.boxes.len(), ep.frames[0].ann.instances.len());
    assert!(tg.masks.iter().all(|m| m.len() == 64 && m.iter().any(|&v| v == 1.0)));
    let f = ep.frames[0].frame();
    assert_eq!(f.rgb.len(), 64 * 64 * 3);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn generated_episodes_satisfy_invariants(seed in 0u64..1_000_000, which in 0usize..4, idle in 0usize..4) {
            let cfg = ScenarioConfig { idle_frames: idle, ..ScenarioConfig::for_subset(Subset::ALL[which]) };
            let ep = generate_episode(seed, &cfg).unwrap();
            prop_assert!(validate_episode(&ep, &ValidatorConfig::default()).is_empty());
            let last = &ep.frames.last().unwrap().ann;
            prop_assert_eq!(last.action[6], -1.0);
        }
    }
}
