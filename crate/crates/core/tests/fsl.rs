use std::collections::BTreeSet;

use fewshot_autodiff::{Activation, BoundParams, ParamSet, Tape, Var};
use fewshot_core::backbones::{BackboneSpec, CnnSpec, ConvBlock, DenseBlock, Pooling};
use fewshot_core::dataset::Dataset;
use fewshot_core::episodes::{episode_at, Episode, EpisodeItem, EpisodeLabel, Mode, SamplerConfig};
use fewshot_core::fsl::*;
use fewshot_core::labels::ClassId;
use fewshot_core::rng;
use fewshot_core::synth::{generate, SynthConfig};
use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use rand::Rng as _;

const LEN: usize = 64;

fn toy_dataset() -> Dataset {
    generate(&SynthConfig {
        seed: 3,
        samples_per_class: [1u32, 2, 4, 33].iter().map(|&c| (ClassId(c), 20)).collect(),
        length: LEN,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn toy_cnn() -> BackboneSpec {
    let block = |channels, pooling| ConvBlock {
        channels,
        kernel_size: 3,
        pooling,
        pool_kernel: 2,
        activation: Activation::Elu,
        dropout: 0.0,
    };
    BackboneSpec::Cnn(CnnSpec {
        conv_blocks: vec![block(16, Pooling::Avg), block(16, Pooling::Max)],
        dense_blocks: vec![DenseBlock {
            features: 64,
            activation: Activation::Elu,
        }],
        repr_dim: 16,
        input_length: LEN,
    })
}

fn matrix(rows: usize, cols: usize, r: &mut rng::Rng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(&[rows, cols]), || r.random_range(-1.0..1.0))
}

fn constant(t: &Tape, a: &ArrayD<f64>) -> Var {
    t.constant(a.clone())
}

/// Mean squared error of a two-layer tanh network.
fn mse(t: &Tape, p: &BoundParams, x: &ArrayD<f64>, y: &ArrayD<f64>) -> fewshot_core::error::Result<Var> {
    let h = constant(t, x).matmul(p.get("w1")?)?.tanh();
    let out = h.matmul(p.get("w2")?)?;
    Ok(out.sub(&constant(t, y))?.square().mean())
}

#[test]
fn second_order_meta_gradient_matches_finite_differences() {
    let mut r = rng::rng(9);
    let (xs, ys, xq, yq) = (matrix(5, 3, &mut r), matrix(5, 2, &mut r), matrix(4, 3, &mut r), matrix(4, 2, &mut r));
    let mut theta = ParamSet::new();
    theta.insert("w1", matrix(3, 4, &mut r));
    theta.insert("w2", matrix(4, 2, &mut r));
    let (alpha, steps) = (0.3, 3);

    let support = |t: &Tape, p: &BoundParams| mse(t, p, &xs, &ys);
    let query = |t: &Tape, p: &BoundParams| {
        let l = mse(t, p, &xq, &yq)?;
        Ok((l.clone(), l))
    };
    let mg = meta_gradient(&theta, support, query, alpha, steps, Order::Second).unwrap();

    let outer = |th: &ParamSet| -> f64 {
        let (adapted, _) = adapt(th, |t: &Tape, p: &BoundParams| mse(t, p, &xs, &ys), alpha, steps).unwrap();
        let t = Tape::new();
        mse(&t, &adapted.bind(&t), &xq, &yq).unwrap().item()
    };
    let h = 1e-5;
    let mut checked = 0;
    for name in ["w1", "w2"] {
        let n = theta.get(name).unwrap().len();
        for i in 0..n {
            let mut plus = theta.clone();
            plus.get_mut(name).unwrap().as_slice_mut().unwrap()[i] += h;
            let mut minus = theta.clone();
            minus.get_mut(name).unwrap().as_slice_mut().unwrap()[i] -= h;
            let fd = (outer(&plus) - outer(&minus)) / (2.0 * h);
            let exact = mg.grads[name].as_slice().unwrap()[i];
            assert!((fd - exact).abs() < 1e-6, "{name}[{i}]: {exact} vs {fd}");
            checked += 1;
        }
    }
    assert_eq!(checked, 20);

    let fo = meta_gradient(
        &theta,
        |t: &Tape, p: &BoundParams| mse(t, p, &xs, &ys),
        |t: &Tape, p: &BoundParams| {
            let l = mse(t, p, &xq, &yq)?;
            Ok((l.clone(), l))
        },
        alpha,
        steps,
        Order::First,
    )
    .unwrap();
    assert_eq!(fo.query_loss, mg.query_loss);
    assert_ne!(fo.grads["w1"], mg.grads["w1"]);
}

fn maml_cfg() -> MamlConfig {
    MamlConfig {
        inner_lr: 1e-4,
        meta_lr: 1e-4,
        adaptation_steps: 5,
        order: Order::First,
    }
}

fn sampler(mode: Mode, n_way: usize) -> SamplerConfig {
    SamplerConfig {
        n_way,
        k_shot: 5,
        m_query: 5,
        mode,
        seed: 21,
    }
}

#[test]
fn maml_inference_leaves_meta_parameters_untouched() {
    let ds = toy_dataset();
    let spec = toy_cnn();
    for (mode, n) in [(Mode::MultiClass, 3), (Mode::MultiLabel, 2)] {
        let ep = episode_at(&ds, &sampler(mode, n), 0).unwrap();
        let mut meta = maml_init(&spec, n, &mut rng::rng(1)).unwrap();
        meta.insert("head.b", ArrayD::from_elem(IxDyn(&[n]), 0.25));
        let before = meta.to_bytes();
        let out = maml_infer_episode(&spec, &meta, &ds, &ep, &maml_cfg(), &mut rng::rng(2)).unwrap();
        assert_eq!(meta.to_bytes(), before);
        assert_eq!(out.predictions.len(), ep.query.len());
    }
}

#[test]
fn inner_steps_reduce_the_support_loss() {
    let ds = toy_dataset();
    let spec = toy_cnn();
    let ep = episode_at(&ds, &sampler(Mode::MultiClass, 3), 4).unwrap();
    let meta = maml_init(&spec, 3, &mut rng::rng(5)).unwrap();
    let support: Vec<usize> = ep.support.iter().map(|it| it.sample).collect();
    let labels: Vec<usize> = ep
        .support
        .iter()
        .map(|it| match it.label {
            EpisodeLabel::Class(c) => c,
            EpisodeLabel::Multi(_) => unreachable!(),
        })
        .collect();
    let loss = |t: &Tape, p: &BoundParams| {
        let x = fewshot_core::backbones::batch_input(t, &ds, &support)?;
        let h = spec.forward(p, &x, false, &mut rng::rng(0))?;
        let logits = fewshot_autodiff::nn::linear(&h, p.get("head.w")?, p.get("head.b")?)?;
        Ok(fewshot_autodiff::nn::cross_entropy_with_logits(&logits, &labels)?)
    };
    let (_, losses) = adapt(&meta, loss, 1e-4, 6).unwrap();
    assert!((losses[0] - 3f64.ln()).abs() < 1e-12, "{losses:?}");
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn maml_training_step_moves_parameters() {
    let ds = toy_dataset();
    let spec = toy_cnn();
    let ep = episode_at(&ds, &sampler(Mode::MultiClass, 3), 2).unwrap();
    let mut meta = maml_init(&spec, 3, &mut rng::rng(5)).unwrap();
    let before = meta.clone();
    let mut opt = fewshot_autodiff::Optimizer::new(fewshot_autodiff::OptimizerConfig {
        kind: fewshot_autodiff::OptimizerKind::Adam,
        learning_rate: 1e-4,
        weight_decay: 1e-6,
    });
    let out = maml_train_episode(&spec, &mut meta, &mut opt, &ds, &ep, &maml_cfg(), &mut rng::rng(6)).unwrap();
    assert!(out.loss.is_finite());
    assert_ne!(meta.get("block0.conv.w").unwrap(), before.get("block0.conv.w").unwrap());
    assert!(meta.shapes_match(&before));
}

/// Query set made of the support samples themselves, one shot per class.
fn self_query_episode(ds: &Dataset) -> Episode {
    let classes = [ClassId(1), ClassId(2), ClassId(4)];
    let support: Vec<EpisodeItem> = classes
        .iter()
        .enumerate()
        .map(|(i, &c)| EpisodeItem {
            sample: ds.class_members(c)[0],
            label: EpisodeLabel::Class(i),
        })
        .collect();
    Episode {
        mode: Mode::MultiClass,
        n_way: 3,
        k_shot: 1,
        m_query: 1,
        label_map: classes.iter().map(|c| c.0).collect(),
        query: support.clone(),
        support,
    }
}

#[test]
fn queries_identical_to_support_are_classified_exactly() {
    let ds = toy_dataset();
    let spec = toy_cnn();
    let params = spec.init(&mut rng::rng(8)).unwrap();
    let ep = self_query_episode(&ds);
    for cfg in [
        ProtoConfig {
            distance: Distance::Euclidean,
            normalize: false,
        },
        ProtoConfig {
            distance: Distance::Cosine,
            normalize: true,
        },
    ] {
        let out = proto_eval_episode(&spec, &params, &ds, &ep, &cfg, &mut rng::rng(0)).unwrap();
        assert_eq!(out.predictions, out.truth);
    }
}

#[test]
fn proto_training_lowers_the_episode_loss() {
    let ds = toy_dataset();
    let spec = toy_cnn();
    let mut params = spec.init(&mut rng::rng(8)).unwrap();
    let cfg = ProtoConfig {
        distance: Distance::Euclidean,
        normalize: false,
    };
    let ep = episode_at(&ds, &sampler(Mode::MultiClass, 3), 1).unwrap();
    let mut opt = fewshot_autodiff::Optimizer::new(fewshot_autodiff::OptimizerConfig {
        kind: fewshot_autodiff::OptimizerKind::Adam,
        learning_rate: 1e-4,
        weight_decay: 1e-6,
    });
    let first = proto_eval_episode(&spec, &params, &ds, &ep, &cfg, &mut rng::rng(0)).unwrap().loss;
    for _ in 0..5 {
        proto_train_episode(&spec, &mut params, &mut opt, &ds, &ep, &cfg, &mut rng::rng(0)).unwrap();
    }
    let last = proto_eval_episode(&spec, &params, &ds, &ep, &cfg, &mut rng::rng(0)).unwrap().loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn multilabel_proto_episode_runs() {
    let ds = toy_dataset();
    let spec = toy_cnn();
    let params = spec.init(&mut rng::rng(8)).unwrap();
    let ep = episode_at(&ds, &sampler(Mode::MultiLabel, 2), 0).unwrap();
    let cfg = ProtoConfig {
        distance: Distance::Euclidean,
        normalize: false,
    };
    let out = proto_eval_episode(&spec, &params, &ds, &ep, &cfg, &mut rng::rng(0)).unwrap();
    assert_eq!(out.predictions.len(), ep.query.len());
    for p in &out.predictions {
        let EpisodeLabel::Multi(atoms) = p else { panic!("{p:?}") };
        assert!(!atoms.is_empty() && atoms.iter().all(|&a| a < 2));
    }
}

fn label_strategy() -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::btree_set(0usize..5, 1..=3).prop_map(|s| s.into_iter().collect())
}

/// Every non-empty subset of every support label, by brute force over all
/// subsets of the atom universe.
fn brute_space(labels: &[Vec<usize>], universe: usize) -> BTreeSet<Vec<usize>> {
    (1u32..1 << universe)
        .map(|m| (0..universe).filter(|i| m >> i & 1 == 1).collect::<Vec<usize>>())
        .filter(|s| labels.iter().any(|l| s.iter().all(|a| l.contains(a))))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn label_combination_centroids_match_membership_means(
        labels in proptest::collection::vec(label_strategy(), 1..12),
        seed in any::<u64>(),
    ) {
        let d = 3;
        let mut r = rng::rng(seed);
        let emb = matrix(labels.len(), d, &mut r);
        let t = Tape::new();
        let space = LabelSpace::build(&labels).unwrap();
        let c = centroids_multilabel(&t.constant(emb.clone()), &labels, &space).unwrap().value().clone();
        let brute = brute_space(&labels, 5);
        prop_assert_eq!(space.combos().iter().cloned().collect::<BTreeSet<_>>(), brute);
        for (g, combo) in space.combos().iter().enumerate() {
            let rows: Vec<usize> = (0..labels.len())
                .filter(|&j| combo.iter().all(|a| labels[j].contains(a)))
                .collect();
            for k in 0..d {
                let m = rows.iter().map(|&j| emb[[j, k]]).sum::<f64>() / rows.len() as f64;
                prop_assert!((c[[g, k]] - m).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn argmax_ignores_positive_scaling(
        row in proptest::collection::vec(-5.0f64..5.0, 1..8),
        scale in 0.1f64..10.0,
    ) {
        let scaled: Vec<f64> = row.iter().map(|v| v * scale).collect();
        prop_assert_eq!(argmax_first(&row), argmax_first(&scaled));
    }

    #[test]
    fn class_centroids_follow_relabeling(
        labels in proptest::collection::vec(0usize..3, 6..10),
        seed in any::<u64>(),
    ) {
        prop_assume!((0..3).all(|c| labels.contains(&c)));
        let mut r = rng::rng(seed);
        let emb = matrix(labels.len(), 2, &mut r);
        let perm = [2usize, 0, 1];
        let t = Tape::new();
        let a = centroids_multiclass(&t.constant(emb.clone()), &labels, 3).unwrap().value().clone();
        let relabeled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let b = centroids_multiclass(&t.constant(emb), &relabeled, 3).unwrap().value().clone();
        for l in 0..3 {
            for k in 0..2 {
                prop_assert_eq!(a[[l, k]], b[[perm[l], k]]);
            }
        }
    }
}

#[test]
fn label_spaces_are_exhaustive_up_to_seven_atoms() {
    for width in 1..=7usize {
        for full in 1u32..1 << width {
            let label: Vec<usize> = (0..width).filter(|i| full >> i & 1 == 1).collect();
            let space = LabelSpace::build(std::slice::from_ref(&label)).unwrap();
            assert_eq!(space.len(), (1usize << label.len()) - 1);
            assert_eq!(
                space.combos().iter().cloned().collect::<BTreeSet<_>>(),
                brute_space(std::slice::from_ref(&label), width)
            );
        }
    }
}
