//! Episode construction. Class-based sampling draws N exact label
//! combinations; label-based sampling draws N atomic labels from per-atom
//! pools, so a sample carrying several defects is eligible in each of them.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{CoreError, Result};
use crate::labels::{decode_label, encode_label, ClassId};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    MultiClass,
    MultiLabel,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::MultiClass => "multi_class",
            Mode::MultiLabel => "multi_label",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(CoreError::config("sampler.n_way", "must be at least 2"));
        }
        if self.k_shot < 1 {
            return Err(CoreError::config("sampler.k_shot", "must be at least 1"));
        }
        if self.m_query < 1 {
            return Err(CoreError::config("sampler.m_query", "must be at least 1"));
        }
        Ok(())
    }
}

/// Remapped label of one episode entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeLabel {
    Class(usize),
    /// Ascending remapped atomic indices.
    Multi(Vec<usize>),
}

/// An entry refers to a sample of the dataset the episode was drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeItem {
    pub sample: usize,
    pub label: EpisodeLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub mode: Mode,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    /// `label_map[i]` is the raw label remapped to `i`: a class id in
    /// multi-class mode, a 1-based atomic label in multi-label mode.
    pub label_map: Vec<u32>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

fn check_supply(label: String, available: usize, required: usize) -> Result<()> {
    if available < required {
        return Err(CoreError::InsufficientSamples {
            label,
            available,
            required,
        });
    }
    Ok(())
}

fn class_name(ds: &Dataset, c: ClassId) -> String {
    match decode_label(c, ds.width()) {
        Ok(v) => format!("class {c} {v}"),
        Err(_) => format!("class {c}"),
    }
}

/// Draws one class-based episode. Every class of `ds` must have at least
/// `k_shot + m_query` samples.
pub fn sample_episode_multiclass(
    ds: &Dataset,
    cfg: &SamplerConfig,
    rng: &mut rng::Rng,
) -> Result<Episode> {
    cfg.validate()?;
    let classes = ds.classes();
    if classes.len() < cfg.n_way {
        return Err(CoreError::NotEnoughLabels {
            kind: "classes",
            available: classes.len(),
            required: cfg.n_way,
        });
    }
    let need = cfg.k_shot + cfg.m_query;
    for &c in classes {
        check_supply(class_name(ds, c), ds.class_members(c).len(), need)?;
    }
    let chosen: Vec<ClassId> = index::sample(rng, classes.len(), cfg.n_way)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    let mut label_map: Vec<u32> = chosen.iter().map(|c| c.0).collect();
    label_map.sort_unstable();
    let remap = |c: ClassId| label_map.binary_search(&c.0).unwrap();

    let mut support = Vec::with_capacity(cfg.n_way * cfg.k_shot);
    let mut query = Vec::with_capacity(cfg.n_way * cfg.m_query);
    for &c in &chosen {
        let members = ds.class_members(c);
        let picks = index::sample(rng, members.len(), need).into_vec();
        let label = EpisodeLabel::Class(remap(c));
        for (n, &p) in picks.iter().enumerate() {
            let item = EpisodeItem {
                sample: members[p],
                label: label.clone(),
            };
            if n < cfg.k_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode {
        mode: Mode::MultiClass,
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        m_query: cfg.m_query,
        label_map,
        support,
        query,
    })
}

/// The sample's atoms restricted to `sorted_atoms` (0-based), as positions
/// in that list.
pub fn adapt(ds: &Dataset, sample: usize, sorted_atoms: &[usize]) -> Vec<usize> {
    let label = &ds.sample(sample).label;
    sorted_atoms
        .iter()
        .enumerate()
        .filter(|(_, &a)| label.is_set(a))
        .map(|(i, _)| i)
        .collect()
}

/// Draws one label-based episode. Supports are drawn per atomic pool and
/// may repeat a sample across pools; queries come from each pool minus every
/// support sample and are deduplicated.
pub fn sample_episode_multilabel(
    ds: &Dataset,
    cfg: &SamplerConfig,
    rng: &mut rng::Rng,
) -> Result<Episode> {
    cfg.validate()?;
    let available: Vec<usize> = (0..ds.width())
        .filter(|&a| !ds.atom_members(a).is_empty())
        .collect();
    if available.len() < cfg.n_way {
        return Err(CoreError::NotEnoughLabels {
            kind: "atomic labels",
            available: available.len(),
            required: cfg.n_way,
        });
    }
    for &a in &available {
        check_supply(
            format!("atomic label {}", a + 1),
            ds.atom_members(a).len(),
            cfg.k_shot + cfg.m_query,
        )?;
    }
    let chosen: Vec<usize> = index::sample(rng, available.len(), cfg.n_way)
        .into_iter()
        .map(|i| available[i])
        .collect();
    let mut sorted = chosen.clone();
    sorted.sort_unstable();

    let mut support = Vec::with_capacity(cfg.n_way * cfg.k_shot);
    for &a in &chosen {
        let pool = ds.atom_members(a);
        for p in index::sample(rng, pool.len(), cfg.k_shot) {
            support.push(EpisodeItem {
                sample: pool[p],
                label: EpisodeLabel::Multi(adapt(ds, pool[p], &sorted)),
            });
        }
    }
    let in_support: HashSet<usize> = support.iter().map(|it| it.sample).collect();
    let mut in_query = HashSet::new();
    let mut query = Vec::with_capacity(cfg.n_way * cfg.m_query);
    for &a in &chosen {
        let eligible: Vec<usize> = ds
            .atom_members(a)
            .iter()
            .copied()
            .filter(|j| !in_support.contains(j))
            .collect();
        check_supply(
            format!("atomic label {} after support draw", a + 1),
            eligible.len(),
            cfg.m_query,
        )?;
        for p in index::sample(rng, eligible.len(), cfg.m_query) {
            let j = eligible[p];
            if in_query.insert(j) {
                query.push(EpisodeItem {
                    sample: j,
                    label: EpisodeLabel::Multi(adapt(ds, j, &sorted)),
                });
            }
        }
    }
    Ok(Episode {
        mode: Mode::MultiLabel,
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        m_query: cfg.m_query,
        label_map: sorted.iter().map(|&a| a as u32 + 1).collect(),
        support,
        query,
    })
}

pub fn sample_episode(ds: &Dataset, cfg: &SamplerConfig, rng: &mut rng::Rng) -> Result<Episode> {
    match cfg.mode {
        Mode::MultiClass => sample_episode_multiclass(ds, cfg, rng),
        Mode::MultiLabel => sample_episode_multilabel(ds, cfg, rng),
    }
}

/// Episode `i` of the stream seeded by `cfg.seed`, reproducible on its own.
pub fn episode_at(ds: &Dataset, cfg: &SamplerConfig, i: u64) -> Result<Episode> {
    sample_episode(ds, cfg, &mut rng::rng(rng::derive(cfg.seed, i)))
}

pub fn episode_stream(ds: &Dataset, cfg: &SamplerConfig, count: usize) -> Result<Vec<Episode>> {
    if count == 0 {
        return Err(CoreError::config("episodes", "episode count must be at least 1"));
    }
    (0..count as u64)
        .map(|i| episode_at(ds, cfg, i).map_err(|e| e.context(format!("episode {i}"))))
        .collect()
}

impl Episode {
    /// Raw class id of a remapped class index.
    pub fn raw_class(&self, i: usize) -> ClassId {
        ClassId(self.label_map[i])
    }

    /// 1-based raw atomic labels of remapped indices.
    pub fn raw_atoms(&self, remapped: &[usize]) -> BTreeSet<usize> {
        remapped.iter().map(|&i| self.label_map[i] as usize).collect()
    }

    /// Checks the structural contract of the episode against the dataset it
    /// was drawn from. Returns a description of the first violation.
    pub fn check_invariants(&self, ds: &Dataset) -> std::result::Result<(), String> {
        let n = self.n_way;
        if self.label_map.len() != n {
            return Err(format!("label map has {} entries for {n} ways", self.label_map.len()));
        }
        if self.label_map.windows(2).any(|w| w[0] >= w[1]) {
            return Err("label map is not strictly ascending".into());
        }
        let support_ids: HashSet<usize> = self.support.iter().map(|it| it.sample).collect();
        if let Some(it) = self.query.iter().find(|it| support_ids.contains(&it.sample)) {
            return Err(format!("sample {} is in both support and query", it.sample));
        }
        let mut query_ids = HashSet::new();
        if let Some(it) = self.query.iter().find(|it| !query_ids.insert(it.sample)) {
            return Err(format!("sample {} repeats in the query set", it.sample));
        }
        for it in self.support.iter().chain(&self.query) {
            if it.sample >= ds.len() {
                return Err(format!("sample index {} out of range", it.sample));
            }
        }
        match self.mode {
            Mode::MultiClass => self.check_multiclass(ds, support_ids.len()),
            Mode::MultiLabel => self.check_multilabel(ds),
        }
    }

    fn check_multiclass(&self, ds: &Dataset, distinct_support: usize) -> std::result::Result<(), String> {
        let n = self.n_way;
        if self.support.len() != n * self.k_shot || distinct_support != self.support.len() {
            return Err(format!("support holds {} entries, expected {} distinct", self.support.len(), n * self.k_shot));
        }
        if self.query.len() != n * self.m_query {
            return Err(format!("query holds {} entries, expected {}", self.query.len(), n * self.m_query));
        }
        let mut support_counts = vec![0; n];
        let mut query_counts = vec![0; n];
        for (items, counts) in [(&self.support, &mut support_counts), (&self.query, &mut query_counts)] {
            for it in items {
                let EpisodeLabel::Class(l) = it.label else {
                    return Err("multi-label entry in a multi-class episode".into());
                };
                if l >= n {
                    return Err(format!("label {l} outside 0..{n}"));
                }
                let raw = encode_label(&ds.sample(it.sample).label).map_err(|e| e.to_string())?;
                if raw != self.raw_class(l) {
                    return Err(format!("sample {} has class {raw}, episode says {}", it.sample, self.raw_class(l)));
                }
                counts[l] += 1;
            }
        }
        if support_counts.iter().any(|&c| c != self.k_shot) || query_counts.iter().any(|&c| c != self.m_query) {
            return Err(format!("per-class counts {support_counts:?} / {query_counts:?}"));
        }
        Ok(())
    }

    fn check_multilabel(&self, ds: &Dataset) -> std::result::Result<(), String> {
        let n = self.n_way;
        if self.support.len() != n * self.k_shot {
            return Err(format!("support holds {} entries, expected {}", self.support.len(), n * self.k_shot));
        }
        if self.query.len() < self.m_query || self.query.len() > n * self.m_query {
            return Err(format!("query holds {} entries", self.query.len()));
        }
        let sorted: Vec<usize> = self.label_map.iter().map(|&a| a as usize - 1).collect();
        let mut active = vec![false; n];
        for (is_support, it) in self
            .support
            .iter()
            .map(|it| (true, it))
            .chain(self.query.iter().map(|it| (false, it)))
        {
            let EpisodeLabel::Multi(l) = &it.label else {
                return Err("multi-class entry in a multi-label episode".into());
            };
            if l.is_empty() || l.windows(2).any(|w| w[0] >= w[1]) || l.iter().any(|&i| i >= n) {
                return Err(format!("malformed label {l:?}"));
            }
            if *l != adapt(ds, it.sample, &sorted) {
                return Err(format!("sample {} carries {l:?}, not its adapted label", it.sample));
            }
            if is_support {
                for &i in l {
                    active[i] = true;
                }
            }
        }
        if let Some(i) = active.iter().position(|&a| !a) {
            return Err(format!("remapped label {i} is inactive in the support set"));
        }
        Ok(())
    }

    pub fn dump(&self, ds: &Dataset) -> EpisodeDump {
        let items = |items: &[EpisodeItem]| {
            items
                .iter()
                .map(|it| DumpItem {
                    source_id: ds.sample(it.sample).source_id.clone(),
                    label: it.label.clone(),
                })
                .collect()
        };
        EpisodeDump {
            mode: self.mode,
            n_way: self.n_way,
            k_shot: self.k_shot,
            m_query: self.m_query,
            label_map: self.label_map.clone(),
            support: items(&self.support),
            query: items(&self.query),
        }
    }
}

/// Audit form of an episode with source ids in place of sample positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDump {
    pub mode: Mode,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub label_map: Vec<u32>,
    pub support: Vec<DumpItem>,
    pub query: Vec<DumpItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpItem {
    pub source_id: String,
    pub label: EpisodeLabel,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::toy;
    use crate::dataset::{Sample, TimeSeries};
    use crate::labels::LabelVector;

    fn cfg(n: usize, k: usize, m: usize, mode: Mode) -> SamplerConfig {
        SamplerConfig {
            n_way: n,
            k_shot: k,
            m_query: m,
            mode,
            seed: 17,
        }
    }

    fn repeated(groups: &[(&[usize], usize)]) -> Dataset {
        let labels: Vec<&[usize]> = groups
            .iter()
            .flat_map(|&(atoms, n)| std::iter::repeat_n(atoms, n))
            .collect();
        toy(&labels)
    }

    #[test]
    fn multiclass_counts_and_map() {
        let ds = repeated(&[(&[1], 60), (&[], 60), (&[1, 6], 60)]);
        let ep = episode_at(&ds, &cfg(3, 10, 50, Mode::MultiClass), 0).unwrap();
        assert_eq!((ep.support.len(), ep.query.len()), (30, 150));
        assert_eq!(ep.label_map, vec![0, 1, 33]);
        ep.check_invariants(&ds).unwrap();
    }

    #[test]
    fn label_map_is_ascending_raw_ids() {
        let ds = repeated(&[(&[1, 2, 3], 3), (&[4], 3), (&[1, 4], 3)]);
        let ep = episode_at(&ds, &cfg(3, 1, 1, Mode::MultiClass), 5).unwrap();
        assert_eq!(ep.label_map, vec![7, 8, 9]);
    }

    #[test]
    fn deficient_class_is_named() {
        let ds = repeated(&[(&[1], 60), (&[2], 59), (&[3], 60)]);
        let err = episode_at(&ds, &cfg(3, 10, 50, Mode::MultiClass), 0).unwrap_err();
        assert!(err.to_string().contains("class 2 (2)"), "{err}");
    }

    #[test]
    fn adapting_drops_unsampled_atoms_then_remaps() {
        let samples = [&[1usize][..], &[1, 3, 9], &[1, 2]]
            .iter()
            .enumerate()
            .map(|(i, atoms)| Sample {
                series: TimeSeries::new(vec![i as f64]).unwrap(),
                label: LabelVector::from_atoms(9, atoms.iter().copied()).unwrap(),
                source_id: i.to_string(),
            })
            .collect();
        let ds = Dataset::new(9, samples).unwrap();
        let sampled = [0, 2, 6];
        let adapted: Vec<BTreeSet<usize>> = (0..3)
            .map(|j| adapt(&ds, j, &sampled).iter().map(|&i| sampled[i] + 1).collect())
            .collect();
        assert_eq!(
            adapted,
            vec![BTreeSet::from([1]), BTreeSet::from([1, 3]), BTreeSet::from([1])]
        );
        let remapped: Vec<Vec<usize>> = (0..3).map(|j| adapt(&ds, j, &sampled)).collect();
        assert_eq!(remapped, vec![vec![0], vec![0, 1], vec![0]]);
    }

    #[test]
    fn multilabel_pools_share_multi_defect_samples() {
        let ds = repeated(&[(&[1], 30), (&[6], 30), (&[1, 6], 30)]);
        let ep = episode_at(&ds, &cfg(2, 5, 10, Mode::MultiLabel), 3).unwrap();
        assert_eq!(ep.label_map, vec![1, 6]);
        ep.check_invariants(&ds).unwrap();
    }

    #[test]
    fn stream_is_deterministic() {
        let ds = repeated(&[(&[1], 20), (&[2], 20), (&[3], 20)]);
        let c = cfg(3, 2, 3, Mode::MultiClass);
        assert_eq!(episode_stream(&ds, &c, 3).unwrap(), episode_stream(&ds, &c, 3).unwrap());
        assert!(episode_stream(&ds, &c, 0).is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(cfg(1, 1, 1, Mode::MultiClass).validate().is_err());
        assert!(cfg(2, 0, 1, Mode::MultiClass).validate().is_err());
        assert!(cfg(2, 1, 0, Mode::MultiLabel).validate().is_err());
    }

    #[test]
    fn dump_uses_source_ids() {
        let ds = repeated(&[(&[1], 4), (&[2], 4)]);
        let ep = episode_at(&ds, &cfg(2, 1, 1, Mode::MultiClass), 0).unwrap();
        let json = serde_json::to_string(&ep.dump(&ds)).unwrap();
        assert!(json.contains("\"source_id\":\"s"), "{json}");
    }
}
