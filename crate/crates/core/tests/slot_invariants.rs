//! Attention normalization, initialization and equivariance properties.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotforge_core::frontend::{DenseTokens, PatchGrid};
use slotforge_core::nn::GruCell;
use slotforge_core::slot_attention::{SlotAttention, SlotAttentionConfig};
use slotforge_core::tensor::Tensor;
use slotforge_core::{Binder, ParamStore, Tape, Trainable};

fn setup(cfg: SlotAttentionConfig, seed: u64) -> (ParamStore<f64>, SlotAttention) {
    let mut store = ParamStore::new();
    let sa = SlotAttention::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, sa)
}

fn grid(n: usize) -> PatchGrid {
    PatchGrid { rows: 1, cols: n, patch: 1 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn attention_maps_are_normalized(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = r.random_range(1..70);
        let k = r.random_range(1..17);
        let cfg = SlotAttentionConfig { num_slots: k, dim: 8, mlp_hidden: 8, ..Default::default() };
        let (store, sa) = setup(cfg, seed);
        let scale = r.random_range(0.1..30.0);
        let v = Tensor::randn([n, 8], scale, &mut r);
        let s = Tensor::randn([k, 8], scale, &mut r);
        let tape = Tape::new();
        let bd = Binder::inference(&tape, &store);
        let dense = DenseTokens { tokens: bd.constant(v).unwrap(), grid: grid(n) };
        let (keys, vals) = sa.project_inputs(&bd, &dense).unwrap();
        let (_, maps) = sa.refine_step(&bd, bd.constant(s).unwrap(), keys, vals).unwrap();
        for i in 0..n {
            let row: f64 = maps.attn.row(i).iter().sum();
            prop_assert!((row - 1.0).abs() <= 1e-9, "row {i}: {row}");
        }
        for j in 0..k {
            let col: f64 = (0..n).map(|i| maps.weights.at(i, j)).sum();
            prop_assert!((col - 1.0).abs() <= 1e-9, "col {j}: {col}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_at_extremes(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = (r.random_range(1..6), r.random_range(1..9));
        let x = Tensor::new([m, n], (0..m * n).map(|_| r.random_range(-1e3..1e3)).collect()).unwrap();
        let tape = Tape::new();
        let s = tape.constant(x).unwrap().softmax(1).unwrap().value();
        for i in 0..m {
            let sum: f64 = s.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn initial_slot_permutation_permutes_outputs(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cfg = SlotAttentionConfig { num_slots: 4, dim: 6, residual_mlp: false, ..Default::default() };
        let (store, sa) = setup(cfg, seed);
        let v = Tensor::randn([10, 6], 1.0, &mut r);
        let s = Tensor::randn([4, 6], 1.0, &mut r);
        let perm = [2usize, 0, 3, 1];
        let run = |init: Tensor<f64>| {
            let tape = Tape::new();
            let bd = Binder::inference(&tape, &store);
            let dense = DenseTokens { tokens: bd.constant(v.clone()).unwrap(), grid: grid(10) };
            let (out, _) = sa.refine(&bd, &dense, bd.constant(init).unwrap(), 3).unwrap();
            (*out.value()).clone()
        };
        let base = run(s.clone());
        let permuted = run(s.select_rows(&perm).unwrap());
        prop_assert!(permuted.max_abs_diff(&base.select_rows(&perm).unwrap()) <= 1e-12);
    }
}

#[test]
fn identical_slots_attend_uniformly() {
    let (store, sa) = setup(SlotAttentionConfig { num_slots: 3, dim: 4, ..Default::default() }, 1);
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::new();
    let bd = Binder::inference(&tape, &store);
    let v = Tensor::randn([5, 4], 1.0, &mut r);
    let row = Tensor::randn([1, 4], 1.0, &mut r);
    let s = Tensor::new([3, 4], row.data().repeat(3)).unwrap();
    let dense = DenseTokens { tokens: bd.constant(v).unwrap(), grid: grid(5) };
    let (k, vv) = sa.project_inputs(&bd, &dense).unwrap();
    let (_, maps) = sa.refine_step(&bd, bd.constant(s).unwrap(), k, vv).unwrap();
    assert!(maps.attn.data().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn single_input_broadcasts_its_value() {
    let (mut store, sa) = setup(SlotAttentionConfig { num_slots: 3, dim: 4, residual_mlp: false, ..Default::default() }, 2);
    // Make the GRU pass its input through: update gate closed, candidate = tanh(input).
    store.zero_prefix("slot.gru");
    store.set(store.id("slot.gru.iz.b").unwrap(), Tensor::full([1, 4], -60.0)).unwrap();
    store.set(store.id("slot.gru.in.w").unwrap(), Tensor::eye(4)).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let tape = Tape::new();
    let bd = Binder::inference(&tape, &store);
    let v = Tensor::randn([1, 4], 1.0, &mut r);
    let dense = DenseTokens { tokens: bd.constant(v).unwrap(), grid: grid(1) };
    let (k, vv) = sa.project_inputs(&bd, &dense).unwrap();
    let (out, maps) = sa.refine_step(&bd, bd.constant(Tensor::randn([3, 4], 1.0, &mut r)).unwrap(), k, vv).unwrap();
    assert!(maps.weights.data().iter().all(|&w| (w - 1.0).abs() < 1e-15));
    let expect = vv.value().map(f64::tanh);
    for s in 0..3 {
        for c in 0..4 {
            assert!((out.value().at(s, c) - expect.at(0, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn one_step_encode_equals_init_plus_step() {
    let cfg = SlotAttentionConfig { num_slots: 2, dim: 4, iters: 1, ..Default::default() };
    let (store, sa) = setup(cfg, 3);
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let v = Tensor::randn([6, 4], 1.0, &mut r);
    let tape = Tape::new();
    let bd = Binder::inference(&tape, &store);
    let dense = DenseTokens { tokens: bd.constant(v).unwrap(), grid: grid(6) };
    let enc = sa.encode_frame(&bd, &dense, None, 0, 11).unwrap();
    let init = sa.random_init(&bd, 11).unwrap();
    let (k, vv) = sa.project_inputs(&bd, &dense).unwrap();
    let (step, _) = sa.refine_step(&bd, init, k, vv).unwrap();
    assert_eq!(*enc.slots.value(), *step.value());
}

#[test]
fn carryover_off_reinitializes_every_frame() {
    let cfg = SlotAttentionConfig { num_slots: 2, dim: 4, carryover: false, ..Default::default() };
    let (store, sa) = setup(cfg, 4);
    let v = Tensor::randn([6, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
    let tape = Tape::new();
    let bd = Binder::inference(&tape, &store);
    let dense = DenseTokens { tokens: bd.constant(v).unwrap(), grid: grid(6) };
    let f0 = sa.encode_frame(&bd, &dense, None, 0, 100).unwrap();
    let f1 = sa.encode_frame(&bd, &dense, Some(&f0.state), 1, 101).unwrap();
    assert_ne!(f1.initial, f0.state.slots);
    assert_ne!(f0.state.slots, f1.state.slots);
}

#[test]
fn carryover_chain_is_bitwise() {
    let (store, sa) = setup(SlotAttentionConfig { num_slots: 3, dim: 4, ..Default::default() }, 5);
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let tape = Tape::new();
    let bd = Binder::inference(&tape, &store);
    let mut prev = None;
    for t in 0..5 {
        let dense = DenseTokens { tokens: bd.constant(Tensor::randn([6, 4], 1.0, &mut r)).unwrap(), grid: grid(6) };
        let f = sa.encode_frame(&bd, &dense, prev.as_ref(), t, 0).unwrap();
        if let Some(p) = &prev {
            let p: &slotforge_core::slot_attention::SlotState<f64> = p;
            assert_eq!(f.initial.data(), p.slots.data());
        }
        prev = Some(f.state);
    }
}

#[test]
fn gru_zero_and_saturation() {
    let mut store = ParamStore::<f64>::new();
    let gru = GruCell::new(&mut store, "g", 3, &mut ChaCha8Rng::seed_from_u64(0));
    store.zero_prefix("g");
    let tape = Tape::new();
    let bd = Binder::inference(&tape, &store);
    let z = bd.constant(Tensor::zeros([2, 3])).unwrap();
    assert!(gru.forward(&bd, z, z).unwrap().value().data().iter().all(|&x| x == 0.0));
    drop(bd);
    store.set(store.id("g.iz.b").unwrap(), Tensor::full([1, 3], 60.0)).unwrap();
    let tape = Tape::new();
    let bd = Binder::inference(&tape, &store);
    let x = bd.constant(Tensor::randn([2, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1))).unwrap();
    let h = Tensor::randn([2, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let out = gru.forward(&bd, x, bd.constant(h.clone()).unwrap()).unwrap();
    assert!(out.value().max_abs_diff(&h) < 1e-12);
    let bad = bd.constant(Tensor::zeros([3, 3])).unwrap();
    assert!(gru.forward(&bd, x, bad).is_err());
}

#[test]
fn backward_is_deterministic() {
    let cfg = SlotAttentionConfig { num_slots: 4, dim: 8, ..Default::default() };
    let (store, sa) = setup(cfg, 6);
    let v = Tensor::randn([16, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(10));
    let run = || {
        let tape = Tape::new();
        let bd = Binder::new(&tape, &store, Trainable::All);
        let dense = DenseTokens { tokens: bd.constant(v.clone()).unwrap(), grid: grid(16) };
        let f = sa.encode_frame(&bd, &dense, None, 0, 3).unwrap();
        let loss = f.slots.square().unwrap().sum().unwrap();
        bd.param_grads(&tape.backward(loss).unwrap())
    };
    assert_eq!(run(), run());
}
