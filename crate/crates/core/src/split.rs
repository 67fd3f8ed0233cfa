//! Train / validation / test partitions whose atomic-label footprints are
//! pairwise disjoint, abandoning as few samples as possible when no exact
//! partition exists.
//!
//! Two labels sharing an atomic defect must land in the same slot, so the
//! labels left after abandonment fall into connected components (edges join
//! labels that share an atom) and only whole components are assigned. This
//! enumerates exactly the assignments that can be feasible.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::labels::{decode_label, ClassId};

/// Largest label set [`solve_split`] accepts.
pub const MAX_LABELS: usize = 20;
const MAX_COMPONENTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Train,
    Val,
    Test,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Train, Slot::Val, Slot::Test];
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Slot::Train => "train",
            Slot::Val => "val",
            Slot::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: BTreeSet<ClassId>,
    pub val: BTreeSet<ClassId>,
    pub test: BTreeSet<ClassId>,
    pub abandoned: BTreeSet<ClassId>,
    /// Target sample-count ratio of train : val : test.
    pub ratio: [f64; 3],
}

impl SplitSpec {
    pub fn slot(&self, s: Slot) -> &BTreeSet<ClassId> {
        match s {
            Slot::Train => &self.train,
            Slot::Val => &self.val,
            Slot::Test => &self.test,
        }
    }

    /// Sample counts per slot under `counts`.
    pub fn masses(&self, counts: &BTreeMap<ClassId, usize>) -> [usize; 3] {
        Slot::ALL.map(|s| mass(self.slot(s), counts))
    }
}

/// Two slots sharing a 1-based atomic label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub slots: (Slot, Slot),
    pub atom: usize,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} and {} share atomic label {}", self.slots.0, self.slots.1, self.atom)
    }
}

fn mass(labels: &BTreeSet<ClassId>, counts: &BTreeMap<ClassId, usize>) -> usize {
    labels.iter().map(|c| counts.get(c).copied().unwrap_or(0)).sum()
}

fn footprint(labels: &BTreeSet<ClassId>) -> u32 {
    labels.iter().fold(0, |acc, c| acc | c.0)
}

/// Every pair of slots sharing an atomic label. A class id placed in two
/// slots is also reported, with atom 0.
pub fn check_split(spec: &SplitSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, &a) in Slot::ALL.iter().enumerate() {
        for &b in &Slot::ALL[i + 1..] {
            let shared = footprint(spec.slot(a)) & footprint(spec.slot(b));
            for bit in 0..32 {
                if shared >> bit & 1 == 1 {
                    out.push(Violation {
                        slots: (a, b),
                        atom: bit + 1,
                    });
                }
            }
            if spec.slot(a).intersection(spec.slot(b)).next().is_some() {
                out.push(Violation { slots: (a, b), atom: 0 });
            }
        }
    }
    out
}

struct Component {
    labels: Vec<ClassId>,
    has_atoms: bool,
}

fn components(labels: &[ClassId]) -> Vec<Component> {
    let n = labels.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if labels[i].0 & labels[j].0 != 0 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<ClassId>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(labels[i]);
    }
    groups
        .into_values()
        .map(|labels| Component {
            has_atoms: labels.iter().any(|c| c.0 != 0),
            labels,
        })
        .collect()
}

/// Comparison key of a candidate; smaller is better.
#[derive(Debug, Clone, PartialEq)]
struct Score {
    abandoned_mass: usize,
    ratio_distance: f64,
    train_mass: usize,
    test: Vec<ClassId>,
    val: Vec<ClassId>,
    abandoned: Vec<ClassId>,
}

impl Score {
    fn better_than(&self, other: &Score) -> bool {
        use std::cmp::Ordering::*;
        let ord = self
            .abandoned_mass
            .cmp(&other.abandoned_mass)
            .then(self.ratio_distance.total_cmp(&other.ratio_distance))
            .then(other.train_mass.cmp(&self.train_mass))
            .then(self.test.cmp(&other.test))
            .then(self.val.cmp(&other.val))
            .then(self.abandoned.cmp(&other.abandoned));
        ord == Less
    }
}

fn ratio_distance(masses: [usize; 3], ratio: [f64; 3]) -> f64 {
    let total: usize = masses.iter().sum();
    let rsum: f64 = ratio.iter().sum();
    if total == 0 {
        return f64::INFINITY;
    }
    (0..3)
        .map(|i| (masses[i] as f64 / total as f64 - ratio[i] / rsum).abs())
        .sum()
}

fn score(spec: &SplitSpec, counts: &BTreeMap<ClassId, usize>) -> Score {
    let masses = spec.masses(counts);
    Score {
        abandoned_mass: mass(&spec.abandoned, counts),
        ratio_distance: ratio_distance(masses, spec.ratio),
        train_mass: masses[0],
        test: spec.test.iter().copied().collect(),
        val: spec.val.iter().copied().collect(),
        abandoned: spec.abandoned.iter().copied().collect(),
    }
}

/// Whether every slot holds at least one label with a defect, and no two
/// slots share one.
pub fn is_feasible(spec: &SplitSpec) -> bool {
    Slot::ALL.iter().all(|&s| footprint(spec.slot(s)) != 0) && check_split(spec).is_empty()
}

fn validate_inputs(labels: &BTreeSet<ClassId>, ratio: [f64; 3], width: usize) -> Result<()> {
    if labels.len() > MAX_LABELS {
        return Err(CoreError::SearchSpaceTooLarge {
            labels: labels.len(),
            cap: MAX_LABELS,
        });
    }
    if ratio.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(CoreError::config("split.ratio", "entries must be positive"));
    }
    for &c in labels {
        decode_label(c, width)?;
    }
    Ok(())
}

/// Finds the feasible split that abandons the fewest samples, using at most
/// `max_abandoned` abandoned labels. Ties go to the split closest to `ratio`
/// (L1 distance of normalized slot sizes), then to the largest train slot,
/// then to the lexicographically smallest test and validation label lists.
///
/// A split is feasible when the three footprints are pairwise disjoint and
/// each slot contains at least one defect label.
pub fn solve_split(
    labels: &BTreeSet<ClassId>,
    counts: &BTreeMap<ClassId, usize>,
    ratio: [f64; 3],
    max_abandoned: usize,
    width: usize,
) -> Result<SplitSpec> {
    validate_inputs(labels, ratio, width)?;
    let all: Vec<ClassId> = labels.iter().copied().collect();
    let mut best: Option<(Score, SplitSpec)> = None;

    for k in 0..=max_abandoned.min(all.len()) {
        for_each_combination(all.len(), k, &mut |chosen| -> Result<()> {
            let abandoned: BTreeSet<ClassId> = chosen.iter().map(|&i| all[i]).collect();
            let kept: Vec<ClassId> = all.iter().copied().filter(|c| !abandoned.contains(c)).collect();
            let comps = components(&kept);
            if comps.iter().filter(|c| c.has_atoms).count() < 3 {
                return Ok(());
            }
            if comps.len() > MAX_COMPONENTS {
                return Err(CoreError::SearchSpaceTooLarge {
                    labels: labels.len(),
                    cap: MAX_LABELS,
                });
            }
            let mut assignment = vec![0usize; comps.len()];
            loop {
                let mut slots = [BTreeSet::new(), BTreeSet::new(), BTreeSet::new()];
                for (comp, &s) in comps.iter().zip(&assignment) {
                    slots[s].extend(comp.labels.iter().copied());
                }
                let [train, val, test] = slots;
                let spec = SplitSpec {
                    train,
                    val,
                    test,
                    abandoned: abandoned.clone(),
                    ratio,
                };
                if Slot::ALL.iter().all(|&s| footprint(spec.slot(s)) != 0) {
                    let sc = score(&spec, counts);
                    if best.as_ref().is_none_or(|(b, _)| sc.better_than(b)) {
                        best = Some((sc, spec));
                    }
                }
                if !advance(&mut assignment, 3) {
                    break;
                }
            }
            Ok(())
        })?;
    }
    best.map(|(_, spec)| spec).ok_or_else(|| {
        CoreError::Infeasible(format!(
            "no assignment with at most {max_abandoned} abandoned labels gives three disjoint non-empty footprints"
        ))
    })
}

/// Odometer increment in base `base`; false once every digit wrapped.
fn advance(digits: &mut [usize], base: usize) -> bool {
    for d in digits.iter_mut() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}

fn for_each_combination(
    n: usize,
    k: usize,
    f: &mut dyn FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx)?;
        let Some(i) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
            return Ok(());
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}
