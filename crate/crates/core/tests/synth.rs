use std::collections::BTreeMap;

use fewshot_core::labels::{ClassId, LabelVector};
use fewshot_core::preprocess::{load_dir, PreprocessConfig};
use fewshot_core::synth::{
    base_curve, export_csv, generate, noiseless_curve, signature, SynthConfig,
};

fn config(counts: &[(u32, usize)], length: usize) -> SynthConfig {
    SynthConfig {
        seed: 11,
        samples_per_class: counts.iter().map(|&(c, n)| (ClassId(c), n)).collect(),
        length,
        ..SynthConfig::default()
    }
}

#[test]
fn mean_of_combined_class_matches_summed_signatures() {
    let n = 1000;
    let cfg = config(&[(33, n)], 920);
    let ds = generate(&cfg).unwrap();
    let base = base_curve(920);
    let (s1, s6) = (signature(1, 920), signature(6, 920));
    let tol = 3.0 * cfg.noise_std / (100f64).sqrt();
    for t in 0..920 {
        let mean: f64 = ds.samples().iter().map(|s| s.series.values()[t]).sum::<f64>() / n as f64;
        let expected = base[t] + s1[t] + s6[t];
        assert!((mean - expected).abs() < tol, "t={t}: {mean} vs {expected}");
    }
}

#[test]
fn default_dataset_is_deterministic_and_in_range() {
    let a = generate(&SynthConfig::default()).unwrap();
    let b = generate(&SynthConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2300);
    assert_eq!(a.series_len(), Some(920));
    for s in a.samples() {
        assert!(s.series.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let other = generate(&SynthConfig {
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    assert_ne!(a, other);
}

#[test]
fn nearest_centroid_separates_single_label_classes() {
    let ds = generate(&SynthConfig::default()).unwrap();
    let single: Vec<ClassId> = ds
        .classes()
        .iter()
        .copied()
        .filter(|c| c.0.count_ones() <= 1)
        .collect();
    assert_eq!(single.len(), 8);
    let mut centroids = BTreeMap::new();
    for &c in &single {
        let train = &ds.class_members(c)[..100];
        let mut mean = vec![0.0; 920];
        for &j in train {
            for (m, v) in mean.iter_mut().zip(ds.sample(j).series.values()) {
                *m += v / train.len() as f64;
            }
        }
        centroids.insert(c, mean);
    }
    let (mut correct, mut total) = (0, 0);
    for &c in &single {
        for &j in &ds.class_members(c)[100..] {
            let x = ds.sample(j).series.values();
            let best = centroids
                .iter()
                .map(|(k, m)| {
                    let d: f64 = m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
                    (d, *k)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1;
            correct += (best == c) as usize;
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.95, "nearest-centroid accuracy {acc}");
}

#[test]
fn csv_export_round_trips_through_preprocessing() {
    let ds = generate(&config(&[(0, 2), (10, 2), (33, 1), (64, 1)], 920)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let pre = PreprocessConfig::default();
    let digests = export_csv(&ds, dir.path(), &pre).unwrap();
    assert_eq!(digests.len(), 6);
    assert!(digests.iter().any(|d| d.file.contains("class24")));
    assert!(digests.iter().all(|d| d.sha256.len() == 64));
    let back = load_dir(dir.path(), &pre, 7).unwrap();
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.samples().iter().zip(back.samples()) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.source_id, b.source_id);
        assert_eq!(a.series.values(), b.series.values());
    }
}

#[test]
fn export_is_byte_deterministic() {
    let ds = generate(&config(&[(2, 2)], 40)).unwrap();
    let pre = PreprocessConfig {
        downsample_rate: 3,
        target_length: 40,
        clamp_floor: 0.0,
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(
        export_csv(&ds, d1.path(), &pre).unwrap(),
        export_csv(&ds, d2.path(), &pre).unwrap()
    );
    assert_eq!(load_dir(d1.path(), &pre, 7).unwrap(), ds);
}

#[test]
fn exporting_nothing_leaves_an_empty_directory() {
    let ds = generate(&config(&[], 920)).unwrap();
    assert!(ds.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("raw");
    assert!(export_csv(&ds, &out, &PreprocessConfig::default()).unwrap().is_empty());
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 0);
}

#[test]
fn export_rejects_length_mismatch() {
    let ds = generate(&config(&[(1, 1)], 100)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(export_csv(&ds, dir.path(), &PreprocessConfig::default()).is_err());
}

#[test]
fn noiseless_curves_compose_for_every_label() {
    for c in 0u32..128 {
        let label = fewshot_core::labels::decode_label(ClassId(c), 7).unwrap();
        let mut expected = base_curve(64);
        for a in label.supp() {
            for (e, s) in expected.iter_mut().zip(signature(a, 64)) {
                *e += s;
            }
        }
        assert_eq!(noiseless_curve(&label, 64), expected, "class {c}");
    }
    assert_eq!(noiseless_curve(&LabelVector::zeros(7), 64), base_curve(64));
}
