use std::collections::BTreeMap;

use fewshot_core::dataset::{Dataset, Sample, TimeSeries};
use fewshot_core::episodes::{episode_at, EpisodeLabel, Mode, SamplerConfig};
use fewshot_core::labels::{decode_label, encode_label, ClassId, LabelVector};
use proptest::prelude::*;

fn dataset(groups: &[(u32, usize)]) -> Dataset {
    let mut samples = Vec::new();
    for &(c, n) in groups {
        for i in 0..n {
            samples.push(Sample {
                series: TimeSeries::new(vec![c as f64, i as f64]).unwrap(),
                label: decode_label(ClassId(c), 7).unwrap(),
                source_id: format!("c{c}_{i}"),
            });
        }
    }
    Dataset::new(7, samples).unwrap()
}

fn cfg(n: usize, k: usize, m: usize, mode: Mode, seed: u64) -> SamplerConfig {
    SamplerConfig {
        n_way: n,
        k_shot: k,
        m_query: m,
        mode,
        seed,
    }
}

#[test]
fn classes_are_drawn_uniformly() {
    let ds = dataset(&[(1, 4), (2, 4), (4, 4), (8, 4), (16, 4)]);
    let c = cfg(3, 1, 1, Mode::MultiClass, 99);
    let mut hits: BTreeMap<u32, usize> = BTreeMap::new();
    let draws = 10_000;
    for i in 0..draws {
        for raw in episode_at(&ds, &c, i).unwrap().label_map {
            *hits.entry(raw).or_default() += 1;
        }
    }
    for (raw, n) in hits {
        let rate = n as f64 / draws as f64;
        assert!((rate - 0.6).abs() < 0.05, "class {raw} drawn at rate {rate}");
    }
}

#[test]
fn samples_do_not_depend_on_raw_label_values() {
    let ds = dataset(&[(1, 8), (3, 8), (6, 8), (33, 8)]);
    // a bijection on width-7 class ids
    let perm = |c: ClassId| ClassId((c.0 * 5 + 11) % 128);
    let moved = ds.relabel(perm).unwrap();
    for mode in [Mode::MultiClass] {
        let c = cfg(3, 2, 3, mode, 4);
        for i in 0..50 {
            let a = episode_at(&ds, &c, i).unwrap();
            let b = episode_at(&moved, &c, i).unwrap();
            let picks = |e: &fewshot_core::episodes::Episode| {
                let mut v: Vec<_> = e
                    .support
                    .iter()
                    .chain(&e.query)
                    .map(|it| {
                        let EpisodeLabel::Class(l) = it.label else { unreachable!() };
                        (it.sample, e.raw_class(l))
                    })
                    .collect();
                v.sort();
                v
            };
            let expected: Vec<_> = picks(&a).into_iter().map(|(j, c)| (j, perm(c))).collect();
            assert_eq!(picks(&b), expected);
        }
    }
}

#[test]
fn label_mode_queries_avoid_supports() {
    let ds = dataset(&[(1, 40), (32, 40), (33, 40), (2, 40), (66, 80)]);
    let c = cfg(2, 10, 50, Mode::MultiLabel, 1);
    for i in 0..100 {
        let e = episode_at(&ds, &c, i).unwrap();
        e.check_invariants(&ds).unwrap();
        for it in e.support.iter().chain(&e.query) {
            let EpisodeLabel::Multi(l) = &it.label else { unreachable!() };
            let own = &ds.sample(it.sample).label;
            for atom in e.raw_atoms(l) {
                assert!(own.is_set(atom - 1));
            }
        }
    }
}

fn label_strategy() -> impl Strategy<Value = Vec<(u32, usize)>> {
    prop::collection::btree_map(1u32..128, 12usize..30, 3..8)
        .prop_map(|m| m.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn episodes_keep_their_contract(groups in label_strategy(), seed in any::<u64>(), multi in any::<bool>()) {
        let ds = dataset(&groups);
        let mode = if multi { Mode::MultiLabel } else { Mode::MultiClass };
        let n = if multi { 2 } else { 3 };
        let c = cfg(n, 3, 4, mode, seed);
        for i in 0..8 {
            match episode_at(&ds, &c, i) {
                Ok(e) => prop_assert_eq!(e.check_invariants(&ds), Ok(())),
                // label pools can run dry after the support draw
                Err(err) => prop_assert!(multi, "{}", err),
            }
        }
    }

    #[test]
    fn adapted_labels_match_a_direct_restriction(groups in label_strategy(), seed in any::<u64>()) {
        let ds = dataset(&groups);
        let c = cfg(2, 2, 3, Mode::MultiLabel, seed);
        if let Ok(e) = episode_at(&ds, &c, 0) {
            for it in e.support.iter().chain(&e.query) {
                let EpisodeLabel::Multi(l) = &it.label else { unreachable!() };
                let own: LabelVector = ds.sample(it.sample).label.clone();
                let direct: Vec<usize> = e.label_map.iter().enumerate()
                    .filter(|(_, &a)| own.is_set(a as usize - 1))
                    .map(|(i, _)| i)
                    .collect();
                prop_assert_eq!(l, &direct);
                prop_assert!(encode_label(&own).is_ok());
            }
        }
    }
}
