//! Weighted metrics, early stopping, and the search-then-evaluate pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use fewshot_autodiff::{Activation, Optimizer, OptimizerConfig, OptimizerKind, ParamSet};
use rand::seq::IndexedRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneSpec, CnnSpec, ConvBlock, DenseBlock, InceptionSpec, Pooling, INPUT_LENGTH};
use crate::dataset::Dataset;
use crate::episodes::{episode_at, episode_stream, Episode, EpisodeLabel, Mode, SamplerConfig};
use crate::error::{CoreError, Result};
use crate::fsl::{
    maml_infer_episode, maml_init, maml_train_episode, proto_eval_episode, proto_train_episode, Distance,
    EpisodeOutcome, MamlConfig, Order, ProtoConfig, LR_RANGE, STEPS_RANGE,
};
use crate::rng::{self, derive, derive_named, Rng};

pub const PATIENCE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

impl ClassScores {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        ClassScores {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            support: tp + fn_,
        }
    }
}

/// Support-weighted mean of per-class scores; zero when nothing has support.
pub fn weighted_mean<'a>(scores: impl IntoIterator<Item = &'a ClassScores>) -> Scores {
    let mut total = 0usize;
    let mut acc = Scores::default();
    for s in scores {
        let w = s.support as f64;
        acc.precision += w * s.precision;
        acc.recall += w * s.recall;
        acc.f1 += w * s.f1;
        total += s.support;
    }
    if total == 0 {
        return Scores::default();
    }
    let t = total as f64;
    Scores {
        precision: acc.precision / t,
        recall: acc.recall / t,
        f1: acc.f1 / t,
    }
}

/// One-vs-rest scores for every key that is true or predicted somewhere.
pub fn one_vs_rest<K: Ord + Clone>(truth: &[K], pred: &[K]) -> BTreeMap<K, ClassScores> {
    let keys: BTreeSet<&K> = truth.iter().chain(pred).collect();
    keys.into_iter()
        .map(|k| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (t, p) in truth.iter().zip(pred) {
                match (t == k, p == k) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    (false, false) => {}
                }
            }
            (k.clone(), ClassScores::from_counts(tp, fp, fn_))
        })
        .collect()
}

/// Binary scores per atomic label over label sets.
pub fn per_atom(truth: &[BTreeSet<usize>], pred: &[BTreeSet<usize>]) -> BTreeMap<usize, ClassScores> {
    let atoms: BTreeSet<usize> = truth.iter().chain(pred).flatten().copied().collect();
    atoms
        .into_iter()
        .map(|a| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (t, p) in truth.iter().zip(pred) {
                match (t.contains(&a), p.contains(&a)) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    (false, false) => {}
                }
            }
            (a, ClassScores::from_counts(tp, fp, fn_))
        })
        .collect()
}

/// `(1,6)` style name of a set of 1-based atoms; `()` for the empty set.
pub fn atoms_name(atoms: &BTreeSet<usize>) -> String {
    let parts: Vec<String> = atoms.iter().map(|a| a.to_string()).collect();
    format!("({})", parts.join(","))
}

fn class_atoms(class: usize) -> BTreeSet<usize> {
    (0..usize::BITS as usize)
        .filter(|i| class >> i & 1 == 1)
        .map(|i| i + 1)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Mode,
    /// Classes in multi-class mode, atomic labels in multi-label mode.
    pub per_class: BTreeMap<String, ClassScores>,
    /// Exact label combinations scored as classes; multi-label mode only.
    pub per_combination: BTreeMap<String, ClassScores>,
    pub weighted: Scores,
    pub query_count: usize,
    pub episode_count: usize,
    pub skipped_query_count: usize,
}

/// Weighted precision, recall and F1 over raw labels: class ids in
/// multi-class mode, sets of 1-based atoms in multi-label mode.
pub fn weighted_metrics(truth: &[EpisodeLabel], pred: &[EpisodeLabel], mode: Mode) -> Result<MetricsReport> {
    if truth.len() != pred.len() {
        return Err(CoreError::Contract(format!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(CoreError::Contract("no labels to score".into()));
    }
    let (per_class, per_combination) = match mode {
        Mode::MultiClass => {
            let as_class = |l: &EpisodeLabel| match l {
                EpisodeLabel::Class(c) => Ok(*c),
                EpisodeLabel::Multi(_) => Err(CoreError::Contract("multi-label in multi-class scoring".into())),
            };
            let t = truth.iter().map(as_class).collect::<Result<Vec<_>>>()?;
            let p = pred.iter().map(as_class).collect::<Result<Vec<_>>>()?;
            let per_class: BTreeMap<String, ClassScores> = one_vs_rest(&t, &p)
                .into_iter()
                .map(|(c, s)| (atoms_name(&class_atoms(c)), s))
                .collect();
            (per_class, BTreeMap::new())
        }
        Mode::MultiLabel => {
            let as_set = |l: &EpisodeLabel| match l {
                EpisodeLabel::Multi(a) => Ok(a.iter().copied().collect::<BTreeSet<usize>>()),
                EpisodeLabel::Class(_) => Err(CoreError::Contract("class label in multi-label scoring".into())),
            };
            let t = truth.iter().map(as_set).collect::<Result<Vec<_>>>()?;
            let p = pred.iter().map(as_set).collect::<Result<Vec<_>>>()?;
            let per_class = per_atom(&t, &p)
                .into_iter()
                .map(|(a, s)| (atoms_name(&BTreeSet::from([a])), s))
                .collect();
            let per_combination = one_vs_rest(&t, &p)
                .into_iter()
                .map(|(c, s)| (atoms_name(&c), s))
                .collect();
            (per_class, per_combination)
        }
    };
    Ok(MetricsReport {
        mode,
        weighted: weighted_mean(per_class.values()),
        per_class,
        per_combination,
        query_count: truth.len(),
        episode_count: 0,
        skipped_query_count: 0,
    })
}

/// Maps an episode-local label to raw ids: the class id, or the 1-based
/// atoms.
pub fn raw_label(ep: &Episode, label: &EpisodeLabel) -> EpisodeLabel {
    match label {
        EpisodeLabel::Class(i) => EpisodeLabel::Class(ep.raw_class(*i).0 as usize),
        EpisodeLabel::Multi(v) => EpisodeLabel::Multi(ep.raw_atoms(v).into_iter().collect()),
    }
}

/// Tracks the best validation score; patience counts epochs without strict
/// improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records an epoch's validation score and loss and reports whether the
    /// epoch is the new best. Only a higher score resets the patience
    /// counter; an equal score with a lower loss becomes the best epoch
    /// without resetting it.
    pub fn observe(&mut self, epoch: usize, score: f64, loss: f64) -> bool {
        match self.best {
            Some((_, b, _)) if score > b => {
                self.best = Some((epoch, score, loss));
                self.since_best = 0;
                true
            }
            Some((_, b, l)) => {
                self.since_best += 1;
                if score == b && loss < l {
                    self.best = Some((epoch, score, loss));
                    return true;
                }
                false
            }
            None => {
                self.best = Some((epoch, score, loss));
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    /// Epoch and score of the best epoch so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best.map(|(e, s, _)| (e, s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ProtoMulticlass,
    ProtoMultilabel,
    MamlMulticlass,
    MamlMultilabel,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::ProtoMulticlass,
        Method::ProtoMultilabel,
        Method::MamlMulticlass,
        Method::MamlMultilabel,
    ];

    pub fn mode(self) -> Mode {
        match self {
            Method::ProtoMulticlass | Method::MamlMulticlass => Mode::MultiClass,
            Method::ProtoMultilabel | Method::MamlMultilabel => Mode::MultiLabel,
        }
    }

    pub fn is_maml(self) -> bool {
        matches!(self, Method::MamlMulticlass | Method::MamlMultilabel)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ProtoMulticlass => "proto_multiclass",
            Method::ProtoMultilabel => "proto_multilabel",
            Method::MamlMulticlass => "maml_multiclass",
            Method::MamlMultilabel => "maml_multilabel",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeCounts {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for EpisodeCounts {
    fn default() -> Self {
        EpisodeCounts {
            n_way: 3,
            k_shot: 10,
            m_query: 50,
            train: 60,
            val: 30,
            test: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub backbone: BackboneSpec,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub proto: ProtoConfig,
    pub maml: MamlConfig,
    pub episodes: EpisodeCounts,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::ProtoMulticlass,
            backbone: BackboneSpec::default_cnn(INPUT_LENGTH),
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            patience: PATIENCE,
            proto: ProtoConfig {
                distance: Distance::Euclidean,
                normalize: false,
            },
            maml: MamlConfig {
                inner_lr: 1e-4,
                meta_lr: 1e-4,
                adaptation_steps: 5,
                order: Order::First,
            },
            episodes: EpisodeCounts::default(),
            epochs: 200,
            seed: 0,
        }
    }
}

fn check_log_range(field: &str, v: f64) -> Result<()> {
    if !(LR_RANGE.0..=LR_RANGE.1).contains(&v) {
        return Err(CoreError::config(field, format!("{v} outside [1e-6, 1e-4]")));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Defaults for `method`, with two ways in multi-label mode.
    pub fn for_method(method: Method, backbone: BackboneSpec) -> Self {
        let mut cfg = ExperimentConfig {
            method,
            backbone,
            ..ExperimentConfig::default()
        };
        if method.mode() == Mode::MultiLabel {
            cfg.episodes.n_way = 2;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        check_log_range("learning_rate", self.learning_rate)?;
        check_log_range("weight_decay", self.weight_decay)?;
        if self.patience != PATIENCE {
            return Err(CoreError::config("patience", format!("{} must be {PATIENCE}", self.patience)));
        }
        self.maml.validate()?;
        self.sampler(0).validate()?;
        for (field, v) in [
            ("episodes.train", self.episodes.train),
            ("episodes.val", self.episodes.val),
            ("episodes.test", self.episodes.test),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return Err(CoreError::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_way: self.episodes.n_way,
            k_shot: self.episodes.k_shot,
            m_query: self.episodes.m_query,
            mode: self.method.mode(),
            seed,
        }
    }

    /// Optimizer of the outer loop; MAML steps with its meta learning rate.
    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: if self.method.is_maml() {
                self.maml.meta_lr
            } else {
                self.learning_rate
            },
            weight_decay: self.weight_decay,
        }
    }

    pub fn init_params(&self) -> Result<ParamSet> {
        let mut r = rng::rng(derive_named(self.seed, "init"));
        if self.method.is_maml() {
            maml_init(&self.backbone, self.episodes.n_way, &mut r)
        } else {
            self.backbone.init(&mut r)
        }
    }

    pub fn val_episodes(&self, ds: &Dataset) -> Result<Vec<Episode>> {
        episode_stream(ds, &self.sampler(derive_named(self.seed, "val")), self.episodes.val)
    }

    pub fn test_episodes(&self, ds: &Dataset) -> Result<Vec<Episode>> {
        episode_stream(ds, &self.sampler(derive_named(self.seed, "test")), self.episodes.test)
    }

    fn check_dataset(&self, ds: &Dataset, what: &str) -> Result<()> {
        match ds.series_len() {
            Some(l) if l == self.backbone.input_length() => Ok(()),
            Some(l) => Err(CoreError::config(
                "backbone.input_length",
                format!("is {}, {what} series have {l} points", self.backbone.input_length()),
            )),
            None => Err(CoreError::InsufficientSamples {
                label: format!("{what} split"),
                available: 0,
                required: 1,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub history: Vec<EpochRecord>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores `params` on the given episodes. Returns the metrics over all
/// pooled queries and the mean query loss.
pub fn evaluate(cfg: &ExperimentConfig, params: &ParamSet, ds: &Dataset, episodes: &[Episode]) -> Result<(MetricsReport, f64)> {
    let mut r = rng::rng(derive_named(cfg.seed, "eval"));
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    let mut losses = Vec::with_capacity(episodes.len());
    let mut skipped = 0;
    for (i, ep) in episodes.iter().enumerate() {
        let out: EpisodeOutcome = if cfg.method.is_maml() {
            maml_infer_episode(&cfg.backbone, params, ds, ep, &cfg.maml, &mut r)
        } else {
            proto_eval_episode(&cfg.backbone, params, ds, ep, &cfg.proto, &mut r)
        }
        .map_err(|e| e.context(format!("evaluation episode {i}")))?;
        truth.extend(out.truth.iter().map(|l| raw_label(ep, l)));
        pred.extend(out.predictions.iter().map(|l| raw_label(ep, l)));
        losses.push(out.loss);
        skipped += out.skipped;
    }
    let mut report = weighted_metrics(&truth, &pred, cfg.method.mode())?;
    report.episode_count = episodes.len();
    report.skipped_query_count = skipped;
    Ok((report, mean(losses)))
}

/// Trains for up to `cfg.epochs` epochs of `cfg.episodes.train` episodes and
/// keeps the parameters of the epoch with the best validation F1.
pub fn train_with_early_stop(cfg: &ExperimentConfig, train: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
    train_with_early_stop_observed(cfg, train, val, |_| {})
}

/// As [`train_with_early_stop`], calling `on_epoch` after every epoch.
pub fn train_with_early_stop_observed(
    cfg: &ExperimentConfig,
    train: &Dataset,
    val: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_dataset(train, "train")?;
    cfg.check_dataset(val, "validation")?;
    let val_eps = cfg.val_episodes(val)?;
    let mut params = cfg.init_params()?;
    let mut opt = Optimizer::new(cfg.optimizer_config());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut history = Vec::new();
    let train_seed = derive_named(cfg.seed, "train");
    let noise_seed = derive_named(cfg.seed, "noise");
    for epoch in 1..=cfg.epochs {
        let sampler = cfg.sampler(derive(train_seed, epoch as u64));
        let mut r = rng::rng(derive(noise_seed, epoch as u64));
        let mut losses = Vec::with_capacity(cfg.episodes.train);
        for i in 0..cfg.episodes.train {
            let at = |e: CoreError| e.context(format!("epoch {epoch}, training episode {i}"));
            let ep = episode_at(train, &sampler, i as u64).map_err(at)?;
            let out = if cfg.method.is_maml() {
                maml_train_episode(&cfg.backbone, &mut params, &mut opt, train, &ep, &cfg.maml, &mut r)
            } else {
                proto_train_episode(&cfg.backbone, &mut params, &mut opt, train, &ep, &cfg.proto, &mut r)
            }
            .map_err(at)?;
            losses.push(out.loss);
        }
        let (report, val_loss) =
            evaluate(cfg, &params, val, &val_eps).map_err(|e| e.context(format!("epoch {epoch}")))?;
        let record = EpochRecord {
            epoch,
            train_loss: mean(losses),
            val_loss,
            val_f1: report.weighted.f1,
        };
        on_epoch(&record);
        if stopper.observe(epoch, record.val_f1, record.val_loss) {
            best = params.clone();
        }
        history.push(record);
        if stopper.should_stop() {
            break;
        }
    }
    let (best_epoch, best_val_f1) = stopper.best().expect("at least one epoch ran");
    Ok(TrainOutcome {
        params: best,
        best_epoch,
        best_val_f1,
        history,
    })
}

fn log_uniform(r: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    10f64.powf(r.random_range(lo.log10()..=hi.log10()))
}

fn sample_dense(r: &mut Rng) -> Vec<DenseBlock> {
    (0..r.random_range(1..=3))
        .map(|_| DenseBlock {
            features: r.random_range(64..=256),
            activation: *Activation::ALL.choose(r).unwrap(),
        })
        .collect()
}

/// Draws an architecture of the same kind as `template` from the search
/// ranges, redrawing CNNs whose pooling would exhaust the series.
pub fn sample_backbone(template: &BackboneSpec, r: &mut Rng) -> Result<BackboneSpec> {
    let input_length = template.input_length();
    for _ in 0..1000 {
        let spec = match template {
            BackboneSpec::Cnn(t) => BackboneSpec::Cnn(CnnSpec {
                conv_blocks: (0..r.random_range(2..=6))
                    .map(|_| ConvBlock {
                        channels: r.random_range(16..=64),
                        kernel_size: r.random_range(2..=11),
                        pooling: *[Pooling::Max, Pooling::Avg].choose(r).unwrap(),
                        pool_kernel: r.random_range(2..=4),
                        activation: *Activation::ALL.choose(r).unwrap(),
                        dropout: t.conv_blocks.first().map_or(0.0, |b| b.dropout),
                    })
                    .collect(),
                dense_blocks: sample_dense(r),
                repr_dim: t.repr_dim,
                input_length,
            }),
            BackboneSpec::Inception(t) => BackboneSpec::Inception(InceptionSpec {
                module_count: r.random_range(2..=5),
                filters: r.random_range(4..=16),
                activation: *Activation::ALL.choose(r).unwrap_or(&t.activation),
                dense_blocks: sample_dense(r),
                repr_dim: r.random_range(64..=256),
                input_length,
            }),
        };
        if spec.validate().is_ok() {
            return Ok(spec);
        }
    }
    Err(CoreError::config(
        "backbone.input_length",
        format!("{input_length} is too short for the architecture ranges"),
    ))
}

/// One configuration drawn around `template`. Learning rates and weight
/// decay are log-uniform; the method, episode protocol and epoch budget
/// are kept. The trial's seed is `seed`.
pub fn sample_config(template: &ExperimentConfig, sample_architecture: bool, seed: u64) -> Result<ExperimentConfig> {
    let mut r = rng::rng(derive_named(seed, "hyperparameters"));
    let mut cfg = template.clone();
    cfg.seed = seed;
    cfg.learning_rate = log_uniform(&mut r, LR_RANGE);
    cfg.weight_decay = log_uniform(&mut r, LR_RANGE);
    cfg.optimizer = *OptimizerKind::ALL.choose(&mut r).unwrap();
    cfg.proto = ProtoConfig {
        distance: *[Distance::Euclidean, Distance::Cosine].choose(&mut r).unwrap(),
        normalize: r.random(),
    };
    cfg.maml = MamlConfig {
        inner_lr: log_uniform(&mut r, LR_RANGE),
        meta_lr: log_uniform(&mut r, LR_RANGE),
        adaptation_steps: r.random_range(STEPS_RANGE.0..=STEPS_RANGE.1),
        order: template.maml.order,
    };
    if sample_architecture {
        cfg.backbone = sample_backbone(&template.backbone, &mut r)?;
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub config: ExperimentConfig,
    pub val_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best_index: usize,
    pub best: ExperimentConfig,
    pub trials: Vec<TrialRecord>,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CoreError::config("workers", e.to_string()))
}

/// Picks the trial with the highest validation F1; the lowest index wins
/// ties. Failed trials are logged with their error and never selected.
pub fn select_best(trials: &[TrialRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for t in trials {
        if let Some(f) = t.val_f1 {
            if best.is_none_or(|(_, b)| f > b) {
                best = Some((t.index, f));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Seed of trial `index` under master seed `seed`.
pub fn trial_seed(seed: u64, index: usize) -> u64 {
    derive(derive_named(seed, "trial"), index as u64)
}

pub fn random_search(
    template: &ExperimentConfig,
    trials: usize,
    sample_architecture: bool,
    workers: usize,
    train: &Dataset,
    val: &Dataset,
) -> Result<SearchOutcome> {
    if trials == 0 {
        return Err(CoreError::config("trials", "must be at least 1"));
    }
    template.validate()?;
    let configs = (0..trials)
        .map(|i| sample_config(template, sample_architecture, trial_seed(template.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<TrialRecord> = pool(workers)?.install(|| {
        configs
            .into_par_iter()
            .enumerate()
            .map(|(index, config)| match train_with_early_stop(&config, train, val) {
                Ok(out) => TrialRecord {
                    index,
                    config,
                    val_f1: Some(out.best_val_f1),
                    best_epoch: Some(out.best_epoch),
                    history: out.history,
                    error: None,
                },
                Err(e) => TrialRecord {
                    index,
                    config,
                    val_f1: None,
                    best_epoch: None,
                    history: Vec::new(),
                    error: Some(e.to_string()),
                },
            })
            .collect()
    });
    let best_index = select_best(&records).ok_or_else(|| {
        let first = records.iter().find_map(|t| t.error.clone()).unwrap_or_default();
        CoreError::Numeric(format!("all {trials} trials failed; first error: {first}"))
    })?;
    Ok(SearchOutcome {
        best_index,
        best: records[best_index].config.clone(),
        trials: records,
    })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        let m = mean(values.iter().copied());
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Summary { mean: m, std }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub method: Method,
    pub backbone: String,
    pub precision: Summary,
    pub recall: Summary,
    pub f1: Summary,
    pub repeats: Vec<RepeatRecord>,
}

impl FinalReport {
    fn from_repeats(cfg: &ExperimentConfig, repeats: Vec<RepeatRecord>) -> Self {
        let pick = |f: fn(&Scores) -> f64| Summary::of(&repeats.iter().map(|r| f(&r.test.weighted)).collect::<Vec<_>>());
        FinalReport {
            method: cfg.method,
            backbone: cfg.backbone.name().into(),
            precision: pick(|s| s.precision),
            recall: pick(|s| s.recall),
            f1: pick(|s| s.f1),
            repeats,
        }
    }
}

/// Seed of repeat `index` under master seed `seed`.
pub fn repeat_seed(seed: u64, index: usize) -> u64 {
    derive(derive_named(seed, "repeat"), index as u64)
}

/// Retrains `cfg` from scratch once per repeat with derived seeds and scores
/// each model on fresh test episodes.
pub fn final_evaluation(
    cfg: &ExperimentConfig,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    repeats: usize,
    workers: usize,
) -> Result<FinalReport> {
    if repeats < 2 {
        return Err(CoreError::config("repeats", format!("{repeats} is below 2")));
    }
    let seeds: Vec<u64> = (0..repeats).map(|i| repeat_seed(cfg.seed, i)).collect();
    final_evaluation_with_seeds(cfg, train, val, test, &seeds, workers)
}

/// As [`final_evaluation`] with explicit per-repeat seeds.
pub fn final_evaluation_with_seeds(
    cfg: &ExperimentConfig,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    seeds: &[u64],
    workers: usize,
) -> Result<FinalReport> {
    cfg.validate()?;
    cfg.check_dataset(test, "test")?;
    let repeats = pool(workers)?.install(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(i, &seed)| {
                let run = ExperimentConfig { seed, ..cfg.clone() };
                let out = train_with_early_stop(&run, train, val)?;
                let (test, _) = evaluate(&run, &out.params, test, &run.test_episodes(test)?)?;
                Ok(RepeatRecord {
                    seed,
                    best_epoch: out.best_epoch,
                    best_val_f1: out.best_val_f1,
                    test,
                })
                .map_err(|e: CoreError| e.context(format!("repeat {i}")))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(FinalReport::from_repeats(cfg, repeats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(v: &[usize]) -> Vec<EpisodeLabel> {
        v.iter().map(|&c| EpisodeLabel::Class(c)).collect()
    }

    #[test]
    fn hand_example() {
        let r = weighted_metrics(&classes(&[0, 0, 1]), &classes(&[0, 1, 1]), Mode::MultiClass).unwrap();
        let f1s: Vec<f64> = r.per_class.values().map(|s| s.f1).collect();
        assert_eq!(f1s.len(), 2);
        for f in f1s {
            assert!((f - 2.0 / 3.0).abs() < 1e-15);
        }
        assert!((r.weighted.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.weighted.precision - (2.0 / 3.0 * 1.0 + 1.0 / 3.0 * 0.5)).abs() < 1e-15);
        assert!((r.weighted.recall - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.query_count, 3);
    }

    #[test]
    fn perfect_prediction() {
        let t = classes(&[1, 2, 4, 33, 1]);
        let r = weighted_metrics(&t, &t, Mode::MultiClass).unwrap();
        assert_eq!(r.weighted, Scores { precision: 1.0, recall: 1.0, f1: 1.0 });
        assert!(r.per_class.contains_key("(1,6)"));
    }

    #[test]
    fn predicted_only_class_has_no_weight() {
        let r = weighted_metrics(&classes(&[1, 1]), &classes(&[1, 2]), Mode::MultiClass).unwrap();
        assert_eq!(r.per_class["(2)"].support, 0);
        assert_eq!(r.per_class["(2)"].precision, 0.0);
        assert_eq!(r.weighted.precision, 1.0);
        assert_eq!(r.weighted.recall, 0.5);
    }

    #[test]
    fn multilabel_scores_atoms_and_combinations() {
        let m = |v: &[usize]| EpisodeLabel::Multi(v.to_vec());
        let truth = [m(&[1]), m(&[6]), m(&[1, 6])];
        let pred = [m(&[1]), m(&[1, 6]), m(&[1, 6])];
        let r = weighted_metrics(&truth, &pred, Mode::MultiLabel).unwrap();
        // atom 1: tp 2, fp 1; atom 6: tp 2
        assert_eq!(r.per_class["(1)"].support, 2);
        assert!((r.per_class["(1)"].precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class["(6)"].f1, 1.0);
        assert_eq!(r.per_combination["(6)"].recall, 0.0);
        assert_eq!(r.per_combination["(1,6)"].precision, 0.5);
        assert!((r.weighted.f1 - (0.8 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn bad_inputs() {
        assert!(weighted_metrics(&[], &[], Mode::MultiClass).is_err());
        assert!(weighted_metrics(&classes(&[1]), &classes(&[1, 2]), Mode::MultiClass).is_err());
        assert!(weighted_metrics(&classes(&[1]), &classes(&[1]), Mode::MultiLabel).is_err());
    }

    #[test]
    fn early_stopping_counts_non_improving_epochs() {
        let mut s = EarlyStopping::new(5);
        let mut stopped_after = None;
        for epoch in 1..=20 {
            s.observe(epoch, 1.0 - epoch as f64 * 0.01, 1.0);
            if s.should_stop() {
                stopped_after = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_after, Some(6));
        assert_eq!(s.best(), Some((1, 0.99)));

        let mut s = EarlyStopping::new(5);
        for epoch in 1..=20 {
            assert!(s.observe(epoch, epoch as f64, 1.0));
            assert!(!s.should_stop());
        }
        let mut s = EarlyStopping::new(2);
        s.observe(1, 0.5, 1.0);
        assert!(!s.observe(2, 0.5, 1.0));
        assert!(!s.should_stop());
        assert!(s.observe(3, 0.6, 1.0));
    }

    #[test]
    fn equal_score_with_lower_loss_takes_over_without_resetting_patience() {
        let mut s = EarlyStopping::new(3);
        assert!(s.observe(1, 1.0, 0.9));
        assert!(s.observe(2, 1.0, 0.5));
        assert!(!s.observe(3, 1.0, 0.7));
        assert!(!s.observe(4, 0.9, 0.1));
        assert!(s.should_stop());
        assert_eq!(s.best(), Some((2, 1.0)));
    }

    #[test]
    fn summary_of_two_repeats() {
        let s = Summary::of(&[0.9, 1.0]);
        assert!((s.mean - 0.95).abs() < 1e-15);
        assert!((s.std - 0.070_710_678_118_654_75).abs() < 1e-12);
        assert_eq!(s.to_string(), "0.950 ± 0.071");
        assert_eq!(Summary::of(&[0.7, 0.7]).std, 0.0);
    }

    #[test]
    fn config_validation_names_fields() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let bad = |f: fn(&mut ExperimentConfig), field: &str| {
            let mut c = ExperimentConfig::default();
            f(&mut c);
            let msg = c.validate().unwrap_err().to_string();
            assert!(msg.contains(field), "{msg} should name {field}");
        };
        bad(|c| c.learning_rate = 1e-3, "learning_rate");
        bad(|c| c.weight_decay = 0.0, "weight_decay");
        bad(|c| c.patience = 3, "patience");
        bad(|c| c.maml.adaptation_steps = 20, "adaptation_steps");
        bad(|c| c.episodes.test = 0, "episodes.test");
        bad(|c| c.epochs = 0, "epochs");
    }

    #[test]
    fn unknown_optimizer_is_rejected_when_parsing() {
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        v["optimizer"] = "adagrad".into();
        let err = serde_json::from_value::<ExperimentConfig>(v).unwrap_err().to_string();
        assert!(err.contains("adagrad"), "{err}");
    }

    #[test]
    fn config_json_round_trip() {
        let c = ExperimentConfig::for_method(Method::MamlMultilabel, BackboneSpec::default_inception(920));
        assert_eq!(c.episodes.n_way, 2);
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn sampled_configs_are_valid_and_seeded() {
        for (i, template) in [
            ExperimentConfig::default(),
            ExperimentConfig::for_method(Method::MamlMulticlass, BackboneSpec::default_inception(920)),
        ]
        .iter()
        .enumerate()
        {
            for t in 0..50 {
                let c = sample_config(template, true, trial_seed(i as u64, t)).unwrap();
                c.validate().unwrap();
                assert_eq!(c.method, template.method);
                assert_eq!(c.backbone.name(), template.backbone.name());
                assert_eq!(c, sample_config(template, true, trial_seed(i as u64, t)).unwrap());
            }
        }
        let fixed = sample_config(&ExperimentConfig::default(), false, 3).unwrap();
        assert_eq!(fixed.backbone, ExperimentConfig::default().backbone);
    }

    #[test]
    fn learning_rates_are_log_uniform() {
        let template = ExperimentConfig::default();
        let mut logs: Vec<f64> = (0..1000)
            .map(|t| sample_config(&template, false, trial_seed(17, t)).unwrap().learning_rate.log10())
            .collect();
        logs.sort_by(f64::total_cmp);
        // Kolmogorov-Smirnov distance to U(-6, -4); the 1% critical value
        // for n = 1000 is about 0.0515.
        let n = logs.len() as f64;
        let d = logs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = (x + 6.0) / 2.0;
                (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 0.0515, "KS distance {d}");
        assert!(logs.iter().all(|&x| (-6.0..=-4.0).contains(&x)));
    }

    #[test]
    fn best_trial_selection() {
        let rec = |index, val_f1| TrialRecord {
            index,
            config: ExperimentConfig::default(),
            val_f1,
            best_epoch: None,
            history: Vec::new(),
            error: None,
        };
        assert_eq!(select_best(&[rec(0, Some(0.4))]), Some(0));
        assert_eq!(select_best(&[rec(0, Some(0.5)), rec(1, Some(0.5)), rec(2, Some(0.5))]), Some(0));
        assert_eq!(select_best(&[rec(0, None), rec(1, Some(0.2)), rec(2, Some(0.3))]), Some(2));
        assert_eq!(select_best(&[rec(0, None)]), None);
    }
}
