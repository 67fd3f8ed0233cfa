//! Prototypical networks (class prototypes and label-combination
//! prototypes) and MAML over any backbone.

use std::collections::{BTreeMap, BTreeSet};

use fewshot_autodiff::nn;
use fewshot_autodiff::{grad, Array, BoundParams, Optimizer, ParamSet, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbones::{batch_input, BackboneSpec};
use crate::dataset::Dataset;
use crate::episodes::{Episode, EpisodeItem, EpisodeLabel, Mode};
use crate::error::{CoreError, Result};
use crate::rng::Rng;

/// Shift applied to all-zero embeddings before normalization.
pub const ZERO_EPS: f64 = 1e-12;

/// Largest label cardinality whose power set is enumerated.
pub const MAX_POWERSET_ATOMS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtoConfig {
    pub distance: Distance,
    pub normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    First,
    Second,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MamlConfig {
    pub inner_lr: f64,
    pub meta_lr: f64,
    pub adaptation_steps: usize,
    pub order: Order,
}

pub const LR_RANGE: (f64, f64) = (1e-6, 1e-4);
pub const STEPS_RANGE: (usize, usize) = (5, 15);

impl MamlConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("maml.inner_lr", self.inner_lr), ("maml.meta_lr", self.meta_lr)] {
            if !(LR_RANGE.0..=LR_RANGE.1).contains(&v) {
                return Err(CoreError::config(field, format!("{v} outside [1e-6, 1e-4]")));
            }
        }
        if !(STEPS_RANGE.0..=STEPS_RANGE.1).contains(&self.adaptation_steps) {
            return Err(CoreError::config(
                "maml.adaptation_steps",
                format!("{} outside [5, 15]", self.adaptation_steps),
            ));
        }
        Ok(())
    }
}

/// Row `g` averages the rows of an `n`-row matrix listed in `groups[g]`.
fn averaging_matrix(groups: &[Vec<usize>], n: usize) -> Array {
    let mut a = ArrayD::zeros(IxDyn(&[groups.len(), n]));
    for (g, members) in groups.iter().enumerate() {
        let w = 1.0 / members.len() as f64;
        for &j in members {
            a[[g, j]] += w;
        }
    }
    a
}

/// Class means of `emb: (n, d)`; `labels[j] < n_way` is the class of row `j`.
pub fn centroids_multiclass(emb: &Var, labels: &[usize], n_way: usize) -> Result<Var> {
    let n = emb.shape()[0];
    if labels.len() != n {
        return Err(CoreError::Contract(format!("{} labels for {n} embeddings", labels.len())));
    }
    let mut groups = vec![Vec::new(); n_way];
    for (j, &l) in labels.iter().enumerate() {
        groups
            .get_mut(l)
            .ok_or_else(|| CoreError::Contract(format!("label {l} outside 0..{n_way}")))?
            .push(j);
    }
    if let Some(l) = groups.iter().position(Vec::is_empty) {
        return Err(CoreError::Contract(format!("class {l} has no support embedding")));
    }
    let a = emb.tape().constant(averaging_matrix(&groups, n));
    Ok(a.matmul(emb)?)
}

/// Negative distances from each query row to each centroid: squared
/// Euclidean, or cosine distance `1 - cos`.
pub fn proto_logits(query: &Var, centroids: &Var, cfg: &ProtoConfig) -> Result<Var> {
    if centroids.shape()[0] < 2 {
        return Err(CoreError::Contract("at least two centroids are required".into()));
    }
    let (q, c) = if cfg.normalize {
        (nn::l2_normalize(query, ZERO_EPS)?, nn::l2_normalize(centroids, ZERO_EPS)?)
    } else {
        (query.clone(), centroids.clone())
    };
    Ok(match cfg.distance {
        Distance::Euclidean => nn::squared_euclidean(&q, &c)?.neg(),
        Distance::Cosine => nn::cosine_similarity(&q, &c, ZERO_EPS)?.offset(-1.0),
    })
}

/// Index of the first maximal entry.
pub fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn rows(a: &Array) -> impl Iterator<Item = &[f64]> {
    let width = a.shape().get(1).copied().unwrap_or(1).max(1);
    a.as_slice().expect("standard layout").chunks(width)
}

/// Non-empty label combinations activated by a support set, ordered by
/// cardinality, then lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    combos: Vec<Vec<usize>>,
}

impl LabelSpace {
    /// Union over `labels` of the non-empty subsets of each label.
    pub fn build(labels: &[Vec<usize>]) -> Result<Self> {
        if labels.is_empty() {
            return Err(CoreError::Contract("empty support set".into()));
        }
        let mut all = BTreeSet::new();
        for l in labels {
            let atoms: Vec<usize> = l.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            if atoms.len() > MAX_POWERSET_ATOMS {
                return Err(CoreError::Contract(format!(
                    "label with {} atoms exceeds the power-set limit of {MAX_POWERSET_ATOMS}",
                    atoms.len()
                )));
            }
            for mask in 1u32..1 << atoms.len() {
                let subset: Vec<usize> = (0..atoms.len())
                    .filter(|i| mask >> i & 1 == 1)
                    .map(|i| atoms[i])
                    .collect();
                all.insert((subset.len(), subset));
            }
        }
        if all.is_empty() {
            return Err(CoreError::DegenerateEpisode(
                "support labels are all empty, no prototype can be formed".into(),
            ));
        }
        Ok(LabelSpace {
            combos: all.into_iter().map(|(_, s)| s).collect(),
        })
    }

    pub fn combos(&self) -> &[Vec<usize>] {
        &self.combos
    }

    pub fn len(&self) -> usize {
        self.combos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.combos.is_empty()
    }

    pub fn index_of(&self, combo: &[usize]) -> Option<usize> {
        self.combos.iter().position(|c| c == combo)
    }

    /// For each combination, the positions in `labels` that contain it.
    pub fn members(&self, labels: &[Vec<usize>]) -> Vec<Vec<usize>> {
        self.combos
            .iter()
            .map(|c| {
                labels
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| c.iter().all(|a| l.contains(a)))
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect()
    }
}

/// One prototype per combination of `space`: the mean embedding of the
/// samples whose label contains it.
pub fn centroids_multilabel(emb: &Var, labels: &[Vec<usize>], space: &LabelSpace) -> Result<Var> {
    let n = emb.shape()[0];
    if labels.len() != n {
        return Err(CoreError::Contract(format!("{} labels for {n} embeddings", labels.len())));
    }
    let groups = space.members(labels);
    if let Some(i) = groups.iter().position(Vec::is_empty) {
        return Err(CoreError::Contract(format!(
            "combination {:?} has no contributing sample",
            space.combos[i]
        )));
    }
    let a = emb.tape().constant(averaging_matrix(&groups, n));
    Ok(a.matmul(emb)?)
}

/// Combination of the nearest prototype for each row of `logits`.
pub fn predict_multilabel(logits: &Array, space: &LabelSpace) -> Vec<Vec<usize>> {
    rows(logits).map(|r| space.combos[argmax_first(r)].clone()).collect()
}

/// Query-set result of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub loss: f64,
    pub truth: Vec<EpisodeLabel>,
    pub predictions: Vec<EpisodeLabel>,
    /// Queries left out of the loss because their combination has no
    /// prototype.
    pub skipped: usize,
}

fn indices(items: &[EpisodeItem]) -> Vec<usize> {
    items.iter().map(|it| it.sample).collect()
}

fn class_labels(items: &[EpisodeItem]) -> Result<Vec<usize>> {
    items
        .iter()
        .map(|it| match it.label {
            EpisodeLabel::Class(l) => Ok(l),
            EpisodeLabel::Multi(_) => Err(CoreError::Contract("expected a class label".into())),
        })
        .collect()
}

fn multi_labels(items: &[EpisodeItem]) -> Result<Vec<Vec<usize>>> {
    items
        .iter()
        .map(|it| match &it.label {
            EpisodeLabel::Multi(l) => Ok(l.clone()),
            EpisodeLabel::Class(_) => Err(CoreError::Contract("expected a multi-label".into())),
        })
        .collect()
}

fn select_rows(x: &Var, from: usize, count: usize) -> Result<Var> {
    let d = x.shape()[1];
    let index: Vec<usize> = (from * d..(from + count) * d).collect();
    Ok(x.gather(index.into(), &[count, d])?)
}

/// Loss and query predictions of a prototypical network on one episode.
/// Support and query pass through the backbone as one batch.
pub fn proto_forward(
    backbone: &BackboneSpec,
    params: &BoundParams,
    ds: &Dataset,
    ep: &Episode,
    cfg: &ProtoConfig,
    train: bool,
    rng: &mut Rng,
) -> Result<(Var, Vec<EpisodeLabel>, usize)> {
    let tape = params.to_vec()[0].tape().clone();
    let (ns, nq) = (ep.support.len(), ep.query.len());
    let all: Vec<usize> = indices(&ep.support).into_iter().chain(indices(&ep.query)).collect();
    let emb = backbone.forward(params, &batch_input(&tape, ds, &all)?, train, rng)?;
    let support = select_rows(&emb, 0, ns)?;
    let query = select_rows(&emb, ns, nq)?;
    match ep.mode {
        Mode::MultiClass => {
            let centroids = centroids_multiclass(&support, &class_labels(&ep.support)?, ep.n_way)?;
            let logits = proto_logits(&query, &centroids, cfg)?;
            let loss = nn::cross_entropy_with_logits(&logits, &class_labels(&ep.query)?)?;
            let preds = rows(&logits.value())
                .map(|r| EpisodeLabel::Class(argmax_first(r)))
                .collect();
            Ok((loss, preds, 0))
        }
        Mode::MultiLabel => {
            let support_labels = multi_labels(&ep.support)?;
            let space = LabelSpace::build(&support_labels)?;
            let centroids = centroids_multilabel(&support, &support_labels, &space)?;
            let logits = proto_logits(&query, &centroids, cfg)?;
            let preds = predict_multilabel(&logits.value(), &space)
                .into_iter()
                .map(EpisodeLabel::Multi)
                .collect();
            let mut kept = Vec::new();
            let mut targets = Vec::new();
            for (i, l) in multi_labels(&ep.query)?.iter().enumerate() {
                if let Some(t) = space.index_of(l) {
                    kept.push(i);
                    targets.push(t);
                }
            }
            if kept.is_empty() {
                return Err(CoreError::DegenerateEpisode(
                    "no query combination occurs in the support label space".into(),
                ));
            }
            let skipped = nq - kept.len();
            let k = space.len();
            let index: Vec<usize> = kept.iter().flat_map(|&i| i * k..(i + 1) * k).collect();
            let kept_logits = logits.gather(index.into(), &[kept.len(), k])?;
            let loss = nn::cross_entropy_with_logits(&kept_logits, &targets)?;
            Ok((loss, preds, skipped))
        }
    }
}

fn query_truth(ep: &Episode) -> Vec<EpisodeLabel> {
    ep.query.iter().map(|it| it.label.clone()).collect()
}

fn check_finite(loss: &Var, what: &str) -> Result<f64> {
    let v = loss.item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CoreError::Numeric(format!("{what} is {v}")))
    }
}

/// One optimizer step on the episode loss.
pub fn proto_train_episode(
    backbone: &BackboneSpec,
    params: &mut ParamSet,
    opt: &mut Optimizer,
    ds: &Dataset,
    ep: &Episode,
    cfg: &ProtoConfig,
    rng: &mut Rng,
) -> Result<EpisodeOutcome> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let (loss, predictions, skipped) = proto_forward(backbone, &bound, ds, ep, cfg, true, rng)?;
    let value = check_finite(&loss, "episode loss")?;
    let grads = grad(&loss, &bound.to_vec(), false)?;
    let named = bound.names().map(String::from).zip(grads.iter().map(|g| (*g.value()).clone())).collect();
    opt.step(params, &named)?;
    Ok(EpisodeOutcome {
        loss: value,
        truth: query_truth(ep),
        predictions,
        skipped,
    })
}

pub fn proto_eval_episode(
    backbone: &BackboneSpec,
    params: &ParamSet,
    ds: &Dataset,
    ep: &Episode,
    cfg: &ProtoConfig,
    rng: &mut Rng,
) -> Result<EpisodeOutcome> {
    let tape = Tape::new();
    tape.set_recording(false);
    let (loss, predictions, skipped) = proto_forward(backbone, &params.bind(&tape), ds, ep, cfg, false, rng)?;
    Ok(EpisodeOutcome {
        loss: check_finite(&loss, "episode loss")?,
        truth: query_truth(ep),
        predictions,
        skipped,
    })
}

/// Names and shapes of the classification head appended for MAML.
pub fn head_layout(repr_dim: usize, n_way: usize) -> [(String, Vec<usize>); 2] {
    [
        ("head.w".into(), vec![repr_dim, n_way]),
        ("head.b".into(), vec![n_way]),
    ]
}

/// Backbone parameters plus a zero head. With a zero head the first inner
/// step turns the head rows into centered class means of the support
/// representations, whatever the scale of the inner learning rate.
pub fn maml_init(backbone: &BackboneSpec, n_way: usize, rng: &mut Rng) -> Result<ParamSet> {
    let mut p = backbone.init(rng)?;
    zero_head(&mut p, backbone.repr_dim(), n_way);
    Ok(p)
}

/// Every episode starts from a zero head: class slots are assigned per
/// episode, so a meta-learned head would tie slots to training classes.
fn zero_head(p: &mut ParamSet, repr_dim: usize, n_way: usize) {
    for (name, shape) in head_layout(repr_dim, n_way) {
        p.insert(name, ArrayD::zeros(IxDyn(&shape)));
    }
}

/// A loss evaluated at some parameter values on a given tape.
pub trait LossFn: FnMut(&Tape, &BoundParams) -> Result<Var> {}
impl<F: FnMut(&Tape, &BoundParams) -> Result<Var>> LossFn for F {}

/// Parameters after `steps` plain gradient steps of size `alpha` on
/// `support_loss`, and the loss before each step. No graph is kept.
pub fn adapt(theta: &ParamSet, mut support_loss: impl LossFn, alpha: f64, steps: usize) -> Result<(ParamSet, Vec<f64>)> {
    let mut theta = theta.clone();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let tape = Tape::new();
        let bound = theta.bind(&tape);
        let loss = support_loss(&tape, &bound)?;
        losses.push(check_finite(&loss, &format!("inner loss at step {step}"))?);
        let grads = grad(&loss, &bound.to_vec(), false)?;
        let names: Vec<String> = bound.names().map(String::from).collect();
        for (name, g) in names.iter().zip(&grads) {
            theta.get_mut(name)?.scaled_add(-alpha, &g.value());
        }
    }
    Ok((theta, losses))
}

#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub grads: BTreeMap<String, Array>,
    pub query_loss: f64,
    pub support_losses: Vec<f64>,
    pub query_logits: Array,
}

/// Gradient of the post-adaptation query loss with respect to the initial
/// parameters `theta0`. Second order differentiates through the inner
/// steps; first order uses the gradient at the adapted parameters.
pub fn meta_gradient(
    theta0: &ParamSet,
    mut support_loss: impl LossFn,
    mut query_loss: impl FnMut(&Tape, &BoundParams) -> Result<(Var, Var)>,
    alpha: f64,
    steps: usize,
    order: Order,
) -> Result<MetaGradient> {
    let names: Vec<String> = theta0.names().map(String::from).collect();
    match order {
        Order::First => {
            let (theta, support_losses) = adapt(theta0, support_loss, alpha, steps)?;
            let tape = Tape::new();
            let bound = theta.bind(&tape);
            let (loss, logits) = query_loss(&tape, &bound)?;
            let value = check_finite(&loss, "query loss")?;
            let grads = grad(&loss, &bound.to_vec(), false)?;
            Ok(MetaGradient {
                grads: names.into_iter().zip(grads.iter().map(|g| (*g.value()).clone())).collect(),
                query_loss: value,
                support_losses,
                query_logits: (*logits.value()).clone(),
            })
        }
        Order::Second => {
            let tape = Tape::new();
            let initial = theta0.bind(&tape);
            let leaves = initial.to_vec();
            let mut current = leaves.clone();
            let mut support_losses = Vec::with_capacity(steps);
            for step in 0..steps {
                let bound = BoundParams::from_vars(names.iter().cloned().zip(current.iter().cloned()).collect());
                let loss = support_loss(&tape, &bound)?;
                support_losses.push(check_finite(&loss, &format!("inner loss at step {step}"))?);
                let grads = grad(&loss, &current, true)?;
                current = current
                    .iter()
                    .zip(&grads)
                    .map(|(p, g)| p.sub(&g.scale(alpha)))
                    .collect::<std::result::Result<_, _>>()?;
            }
            let bound = BoundParams::from_vars(names.iter().cloned().zip(current).collect());
            let (loss, logits) = query_loss(&tape, &bound)?;
            let value = check_finite(&loss, "query loss")?;
            let grads = grad(&loss, &leaves, false)?;
            Ok(MetaGradient {
                grads: names.into_iter().zip(grads.iter().map(|g| (*g.value()).clone())).collect(),
                query_loss: value,
                support_losses,
                query_logits: (*logits.value()).clone(),
            })
        }
    }
}

/// The head reads unit-length representations.
fn maml_logits(backbone: &BackboneSpec, p: &BoundParams, x: &Var, train: bool, rng: &mut Rng) -> Result<Var> {
    let h = nn::l2_normalize(&backbone.forward(p, x, train, rng)?, ZERO_EPS)?;
    Ok(nn::linear(&h, p.get("head.w")?, p.get("head.b")?)?)
}

fn maml_loss(logits: &Var, items: &[EpisodeItem], mode: Mode, n_way: usize) -> Result<Var> {
    match mode {
        Mode::MultiClass => Ok(nn::cross_entropy_with_logits(logits, &class_labels(items)?)?),
        Mode::MultiLabel => {
            let mut y = ArrayD::zeros(IxDyn(&[items.len(), n_way]));
            for (i, l) in multi_labels(items)?.iter().enumerate() {
                for &a in l {
                    y[[i, a]] = 1.0;
                }
            }
            Ok(nn::binary_cross_entropy_with_logits(logits, &y)?)
        }
    }
}

/// Multi-class: first maximal logit. Multi-label: labels whose sigmoid
/// exceeds one half, so a sigmoid of exactly 0.5 predicts absence.
fn maml_predictions(logits: &Array, mode: Mode) -> Vec<EpisodeLabel> {
    rows(logits)
        .map(|r| match mode {
            Mode::MultiClass => EpisodeLabel::Class(argmax_first(r)),
            Mode::MultiLabel => EpisodeLabel::Multi((0..r.len()).filter(|&i| r[i] > 0.0).collect()),
        })
        .collect()
}

fn check_head(meta: &ParamSet, backbone: &BackboneSpec, ep: &Episode) -> Result<()> {
    let w = meta.get("head.w")?;
    if w.shape() != [backbone.repr_dim(), ep.n_way] {
        return Err(CoreError::Contract(format!(
            "head of shape {:?} does not fit a {}-way episode",
            w.shape(),
            ep.n_way
        )));
    }
    Ok(())
}

/// Adapts a copy of `meta` on the support set, evaluates the query loss and
/// applies the meta-gradient of the backbone parameters with `opt`. The
/// head of `meta` is not used.
#[allow(clippy::too_many_arguments)]
pub fn maml_train_episode(
    backbone: &BackboneSpec,
    meta: &mut ParamSet,
    opt: &mut Optimizer,
    ds: &Dataset,
    ep: &Episode,
    cfg: &MamlConfig,
    rng: &mut Rng,
) -> Result<EpisodeOutcome> {
    check_head(meta, backbone, ep)?;
    let (support_idx, query_idx) = (indices(&ep.support), indices(&ep.query));
    let (mut r1, mut r2) = (crate::rng::rng(rng.random()), crate::rng::rng(rng.random()));
    let support_loss = |tape: &Tape, p: &BoundParams| {
        let logits = maml_logits(backbone, p, &batch_input(tape, ds, &support_idx)?, true, &mut r1)?;
        maml_loss(&logits, &ep.support, ep.mode, ep.n_way)
    };
    let query_loss = |tape: &Tape, p: &BoundParams| {
        let logits = maml_logits(backbone, p, &batch_input(tape, ds, &query_idx)?, true, &mut r2)?;
        Ok((maml_loss(&logits, &ep.query, ep.mode, ep.n_way)?, logits))
    };
    let mut theta0 = meta.clone();
    zero_head(&mut theta0, backbone.repr_dim(), ep.n_way);
    let mut mg = meta_gradient(&theta0, support_loss, query_loss, cfg.inner_lr, cfg.adaptation_steps, cfg.order)?;
    for (name, _) in head_layout(backbone.repr_dim(), ep.n_way) {
        mg.grads.remove(&name);
    }
    opt.step(meta, &mg.grads)?;
    Ok(EpisodeOutcome {
        loss: mg.query_loss,
        truth: query_truth(ep),
        predictions: maml_predictions(&mg.query_logits, ep.mode),
        skipped: 0,
    })
}

/// Adapts a copy of `meta`, with a zero head, on the support set and
/// classifies the query set. `meta` is left untouched.
pub fn maml_infer_episode(
    backbone: &BackboneSpec,
    meta: &ParamSet,
    ds: &Dataset,
    ep: &Episode,
    cfg: &MamlConfig,
    rng: &mut Rng,
) -> Result<EpisodeOutcome> {
    check_head(meta, backbone, ep)?;
    let support_idx = indices(&ep.support);
    let support_loss = |tape: &Tape, p: &BoundParams| {
        let logits = maml_logits(backbone, p, &batch_input(tape, ds, &support_idx)?, false, rng)?;
        maml_loss(&logits, &ep.support, ep.mode, ep.n_way)
    };
    let mut theta0 = meta.clone();
    zero_head(&mut theta0, backbone.repr_dim(), ep.n_way);
    let (theta, _) = adapt(&theta0, support_loss, cfg.inner_lr, cfg.adaptation_steps)?;
    let tape = Tape::new();
    tape.set_recording(false);
    let p = theta.bind(&tape);
    let logits = maml_logits(backbone, &p, &batch_input(&tape, ds, &indices(&ep.query))?, false, rng)?;
    let loss = maml_loss(&logits, &ep.query, ep.mode, ep.n_way)?;
    Ok(EpisodeOutcome {
        loss: check_finite(&loss, "query loss")?,
        truth: query_truth(ep),
        predictions: maml_predictions(&logits.value(), ep.mode),
        skipped: 0,
    })
}
