use proptest::prelude::*;

use shufflemixer::io::{
    decode_checkpoint, decode_volume, encode_checkpoint, encode_volume, load_checkpoint, read_volume, save_checkpoint,
    store_records, write_volume, Record, Volume,
};
use shufflemixer::network::{build_model, PyramidConfig};
use shufflemixer::runconfig::RunConfig;
use shufflemixer::synth::{synth_dataset, Task};
use shufflemixer::Tensor;

fn shapes() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 1..5)
}

fn volumes() -> impl Strategy<Value = Volume> {
    prop_oneof![
        shapes().prop_flat_map(|s| {
            let n: usize = s.iter().product();
            prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n)
                .prop_map(move |d| Volume::F32(Tensor::new(&s, d).unwrap()))
        }),
        shapes().prop_flat_map(|s| {
            let n: usize = s.iter().product();
            prop::collection::vec(0u8..2, n).prop_map(move |data| Volume::U8 { shape: s.clone(), data })
        }),
    ]
}

fn records() -> impl Strategy<Value = Vec<Record>> {
    prop::collection::vec(
        ("[a-z][a-z0-9_.]{0,12}", shapes()).prop_flat_map(|(name, shape)| {
            let n: usize = shape.iter().product();
            prop::collection::vec(-1e3f32..1e3, n).prop_map(move |values| Record {
                name: name.clone(),
                shape: shape.clone(),
                values,
            })
        }),
        0..5,
    )
}

proptest! {
    #[test]
    fn volumes_round_trip_and_reject_damage(v in volumes(), cut in any::<prop::sample::Index>()) {
        let bytes = encode_volume(&v).unwrap();
        prop_assert_eq!(&decode_volume(&bytes).unwrap(), &v);
        let n = cut.index(bytes.len());
        prop_assert!(decode_volume(&bytes[..n]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        prop_assert!(decode_volume(&longer).is_err());
        let mut magic = bytes;
        magic[0] ^= 0x20;
        prop_assert!(decode_volume(&magic).is_err());
    }

    #[test]
    fn checkpoints_round_trip_and_reject_truncation(recs in records(), cut in any::<prop::sample::Index>()) {
        let bytes = encode_checkpoint(&recs).unwrap();
        prop_assert_eq!(&decode_checkpoint(&bytes).unwrap(), &recs);
        let n = cut.index(bytes.len());
        prop_assert!(decode_checkpoint(&bytes[..n]).is_err());
    }

    #[test]
    fn rendered_configs_parse_back(
        preset in prop::sample::select(vec!["tiny", "desk"]),
        steps in 1usize..1000,
        seed in any::<u64>(),
        lr in 1e-6f64..1e-1,
        ases in prop::sample::select(vec!["on", "off", "spatial-only", "channel-only"]),
        skip in prop::sample::select(vec!["crossmerge", "catlinear", "catskip", "crossskip", "catcrossskip"]),
        task in prop::sample::select(vec!["binary-sphere", "multi-blob-3"]),
    ) {
        let text = format!("preset={preset}\nsteps={steps}\nseed={seed}\nlr={lr}\nases={ases}\nskip={skip}\ntask={task}\n");
        let cfg = RunConfig::parse(&text).unwrap();
        cfg.validate().unwrap();
        prop_assert_eq!(cfg.lr, lr);
        prop_assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }
}

#[test]
fn files_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let sample = synth_dataset(Task::BinarySphere, 32, 1, 9).unwrap().remove(0);
    let image = Volume::F32(sample.volume.clone());
    let label = Volume::U8 { shape: vec![32; 3], data: sample.labels.clone() };
    for (name, v) in [("image.smvx", &image), ("label.smvx", &label)] {
        let path = dir.path().join(name);
        write_volume(&path, v).unwrap();
        assert_eq!(&read_volume(&path).unwrap(), v);
    }
    match read_volume(&dir.path().join("label.smvx")).unwrap() {
        Volume::U8 { data, .. } => assert!(data.iter().all(|&l| l <= 1)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoint_restores_every_parameter_and_statistic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = PyramidConfig::tiny();
    let mut a = build_model::<f32>(&cfg, 1).unwrap();
    for (i, st) in a.store.stats_mut().iter_mut().enumerate() {
        st.mean.iter_mut().for_each(|m| *m = i as f32 * 0.01);
        st.var.iter_mut().for_each(|v| *v = 1.0 + i as f32 * 0.02);
    }
    save_checkpoint(&path, &a.store).unwrap();
    let mut b = build_model::<f32>(&cfg, 2).unwrap();
    assert_ne!(a.store.flat_values(), b.store.flat_values());
    load_checkpoint(&path, &mut b.store).unwrap();
    assert_eq!(store_records(&a.store), store_records(&b.store));

    let mut other = build_model::<f32>(&PyramidConfig { ases: shufflemixer::block::AsesMode::Off, ..cfg }, 1).unwrap();
    assert!(load_checkpoint(&path, &mut other.store).is_err());
}
