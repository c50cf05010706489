use rand::Rng;

use shufflemixer::attention::WindowGrid;
use shufflemixer::block::{Ablation, AsesMode, BlockConfig, ShuffleBlock, ShuffleMixerBlock, SliceMixer};
use shufflemixer::nn::{seeded_rng, Mode, ParamBuilder, ParamStore, Session};
use shufflemixer::Tensor;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn set(store: &mut ParamStore<f64>, suffix: &str, f: impl Fn(usize) -> f64) {
    let mut hit = false;
    for p in store.params_mut().iter_mut().filter(|p| p.name.ends_with(suffix)) {
        let shape = p.value.shape().to_vec();
        p.value = Tensor::from_fn(&shape, &f);
        hit = true;
    }
    assert!(hit, "no parameter ends with {suffix}");
}

fn identity(n: usize) -> impl Fn(usize) -> f64 {
    move |i| if i / n == i % n { 1.0 } else { 0.0 }
}

fn zero_branches(store: &mut ParamStore<f64>) {
    for p in store.params_mut() {
        if !p.name.contains("_norm.") {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn shuffle_block(ases: AsesMode, seed: u64) -> (ParamStore<f64>, ShuffleBlock) {
    let mut store = ParamStore::new();
    let block =
        ShuffleBlock::new(&mut ParamBuilder::new(&mut store, &mut seeded_rng(seed)), 8, 2, 4, 2, ases, true).unwrap();
    (store, block)
}

fn run_shuffle(store: &ParamStore<f64>, block: &ShuffleBlock, x: &Tensor<f64>, mode: Mode) -> Tensor<f64> {
    let grid = WindowGrid::new(x.shape()[1], x.shape()[2], 4).unwrap();
    let mut s = Session::new(store, mode, false);
    let xv = s.input(x.clone());
    let y = block.forward(&mut s, xv, &grid, 1).unwrap();
    s.g.value(y).clone()
}

#[test]
fn zero_branch_weights_make_the_shuffle_block_an_identity() {
    for ases in AsesMode::ALL {
        let (mut store, block) = shuffle_block(ases, 1);
        zero_branches(&mut store);
        let x = random(&[8, 8, 8, 8], 2);
        for mode in [Mode::Train, Mode::Eval] {
            assert_eq!(run_shuffle(&store, &block, &x, mode), x, "{}", ases.name());
        }
    }
}

#[test]
fn zero_branch_block_with_passthrough_mixer_is_an_identity() {
    let cfg = BlockConfig {
        channels: 8,
        heads: 2,
        window: 4,
        side: 8,
        mlp_ratio: 2,
        ases: AsesMode::On,
        ablation: Ablation::SingleView,
    };
    let mut store = ParamStore::new();
    let block = ShuffleMixerBlock::new(&mut ParamBuilder::new(&mut store, &mut seeded_rng(3)), cfg).unwrap();
    zero_branches(&mut store);
    set(&mut store, "mlp_cp.weight", |i| if i / 8 >= 16 && i / 8 - 16 == i % 8 { 1.0 } else { 0.0 });
    let x = random(&[1, 8, 8, 8, 8], 4);
    let mut s = Session::new(&store, Mode::Train, false);
    let xv = s.input(x.clone());
    let out = block.forward(&mut s, xv, None).unwrap();
    assert_eq!(s.g.value(out.volume), &x);
}

#[test]
fn zeroed_gates_halve_every_branch() {
    let (mut gated, block_on) = shuffle_block(AsesMode::On, 5);
    let (mut plain, block_off) = shuffle_block(AsesMode::Off, 6);
    for p in gated.params_mut() {
        if p.name.contains("gate.") {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    for p in plain.params_mut() {
        let src = gated.params().iter().find(|q| q.name == p.name).expect("shared parameter");
        let halve = p.name.contains("attn.proj.") || p.name.contains("mlp.fc2.");
        p.value = Tensor::from_fn(src.value.shape(), |i| src.value.data()[i] * if halve { 0.5 } else { 1.0 });
    }
    let x = random(&[4, 8, 8, 8], 7);
    for mode in [Mode::Train, Mode::Eval] {
        assert_eq!(run_shuffle(&gated, &block_on, &x, mode), run_shuffle(&plain, &block_off, &x, mode));
    }
}

fn mixer(seed: u64) -> (ParamStore<f64>, SliceMixer) {
    let mut store = ParamStore::new();
    let m = SliceMixer::axial(&mut ParamBuilder::new(&mut store, &mut seeded_rng(seed)), 4, 6, true);
    (store, m)
}

fn run_mixer(store: &ParamStore<f64>, m: &SliceMixer, z: &Tensor<f64>) -> Tensor<f64> {
    let mut s = Session::new(store, Mode::Eval, false);
    let zv = s.input(z.clone());
    let y = m.forward(&mut s, zv, 1).unwrap();
    s.g.value(y).clone()
}

/// Reorders the slices of a `[S, h, w, C]` stack.
fn reorder(t: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let n = t.len() / t.shape()[0];
    let data = order.iter().flat_map(|&s| t.data()[s * n..(s + 1) * n].to_vec()).collect();
    Tensor::new(t.shape(), data).unwrap()
}

#[test]
fn mixer_passes_its_input_through_a_selector_projection() {
    let (mut store, m) = mixer(8);
    set(&mut store, "mlp_st.weight", |_| 0.0);
    set(&mut store, "mlp_st.bias", |_| 0.0);
    set(&mut store, "mlp_sc.weight", |_| 0.0);
    set(&mut store, "mlp_sc.bias", |_| 0.0);
    set(&mut store, "mlp_cp.weight", |i| if i / 6 >= 12 && i / 6 - 12 == i % 6 { 1.0 } else { 0.0 });
    set(&mut store, "mlp_cp.bias", |_| 0.0);
    let z = random(&[4, 4, 4, 6], 9);
    assert_eq!(run_mixer(&store, &m, &z), z);
}

#[test]
fn slice_embedding_breaks_slice_permutation_symmetry() {
    let (mut store, m) = mixer(10);
    set(&mut store, "mlp_st.weight", identity(4));
    set(&mut store, "mlp_st.bias", |_| 0.0);
    let z = random(&[4, 4, 4, 6], 11);
    let order = [3, 1, 0, 2];

    set(&mut store, "ape_s", |_| 0.0);
    let permuted = run_mixer(&store, &m, &reorder(&z, &order));
    let expected = reorder(&run_mixer(&store, &m, &z), &order);
    let gap = permuted.data().iter().zip(expected.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-12, "{gap}");

    set(&mut store, "ape_s", |i| (i / 6) as f64 * 0.3);
    let permuted = run_mixer(&store, &m, &reorder(&z, &order));
    let expected = reorder(&run_mixer(&store, &m, &z), &order);
    let gap = permuted.data().iter().zip(expected.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap > 1e-3, "{gap}");
}

#[test]
fn shared_weights_accumulate_per_view_gradients() {
    let (store, block) = shuffle_block(AsesMode::On, 12);
    let grid = WindowGrid::new(8, 8, 4).unwrap();
    let stacks: Vec<_> = (0..3).map(|v| random(&[8, 8, 8, 8], 20 + v)).collect();
    let probes: Vec<_> = (0..3).map(|v| random(&[8, 8, 8, 8], 30 + v)).collect();
    let grads = |views: &[usize]| {
        let mut s = Session::new(&store, Mode::Eval, true);
        let mut terms = Vec::new();
        for &v in views {
            let x = s.input(stacks[v].clone());
            let y = block.forward(&mut s, x, &grid, 1).unwrap();
            let r = s.input(probes[v].clone());
            let yr = s.g.mul(y, r).unwrap();
            terms.push(s.g.sum_all(yr).unwrap());
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = s.g.add(loss, t).unwrap();
        }
        let tape = s.into_tape();
        let g = tape.g.backward(loss).unwrap();
        store
            .ids()
            .map(|id| tape.bound(id).and_then(|v| g.get(v).map(<[f64]>::to_vec)).unwrap_or_default())
            .collect::<Vec<_>>()
    };
    let joint = grads(&[0, 1, 2]);
    let parts: Vec<_> = (0..3).map(|v| grads(&[v])).collect();
    let mut checked = 0;
    for (i, j) in joint.iter().enumerate() {
        for (k, &value) in j.iter().enumerate() {
            let sum: f64 = parts.iter().map(|p| p[i][k]).sum();
            assert!((value - sum).abs() <= 1e-9 * (1.0 + sum.abs()), "param {i}[{k}]: {value} vs {sum}");
            checked += 1;
        }
    }
    assert_eq!(checked, store.scalar_count());
}
