//! Samples, datasets and their binary container.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::labels::{check_width, decode_label, encode_label, ClassId, LabelVector};

/// A univariate series. Cheap to clone; the values are shared.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    values: Arc<[f64]>,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(CoreError::Format("empty series".into()));
        }
        Ok(TimeSeries {
            values: values.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub series: TimeSeries,
    pub label: LabelVector,
    pub source_id: String,
}

/// Summary entry per class, as written next to the binary container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class: ClassId,
    pub label: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    width: usize,
    samples: Vec<Sample>,
    classes: Vec<ClassId>,
    index: BTreeMap<ClassId, Vec<usize>>,
    label_index: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(width: usize, samples: Vec<Sample>) -> Result<Self> {
        check_width(width)?;
        let mut index: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        let mut classes = Vec::new();
        let mut label_index = vec![Vec::new(); width];
        let mut length = None;
        for (j, s) in samples.iter().enumerate() {
            if s.label.width() != width {
                return Err(CoreError::InvalidLabel(format!(
                    "sample {:?} has label width {}, dataset width is {width}",
                    s.source_id,
                    s.label.width()
                )));
            }
            if *length.get_or_insert(s.series.len()) != s.series.len() {
                return Err(CoreError::Format(format!(
                    "sample {:?} has length {}, expected {}",
                    s.source_id,
                    s.series.len(),
                    length.unwrap()
                )));
            }
            let c = encode_label(&s.label)?;
            let slot = index.entry(c).or_default();
            if slot.is_empty() {
                classes.push(c);
            }
            slot.push(j);
            for a in s.label.atoms() {
                label_index[a].push(j);
            }
        }
        Ok(Dataset {
            width,
            samples,
            classes,
            index,
            label_index,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, j: usize) -> &Sample {
        &self.samples[j]
    }

    /// Common series length, if any sample exists.
    pub fn series_len(&self) -> Option<usize> {
        self.samples.first().map(|s| s.series.len())
    }

    /// Class ids in order of first appearance.
    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    /// Positions of the samples labeled exactly `c`.
    pub fn class_members(&self, c: ClassId) -> &[usize] {
        self.index.get(&c).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Positions of the samples whose label has 0-based atom `a` set.
    pub fn atom_members(&self, a: usize) -> &[usize] {
        self.label_index.get(a).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        self.index.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    pub fn class_summary(&self) -> Vec<ClassCount> {
        self.index
            .iter()
            .map(|(&c, v)| ClassCount {
                class: c,
                label: decode_label(c, self.width)
                    .map(|l| l.token())
                    .unwrap_or_default(),
                count: v.len(),
            })
            .collect()
    }

    /// The samples whose class is in `keep`, in their original order.
    pub fn subset(&self, keep: &[ClassId]) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .filter(|s| keep.contains(&encode_label(&s.label).expect("validated on construction")))
            .cloned()
            .collect();
        Dataset::new(self.width, samples)
    }

    /// Applies `f` to every class id; used to check that nothing depends on
    /// the numeric values of raw labels.
    pub fn relabel(&self, f: impl Fn(ClassId) -> ClassId) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let c = f(encode_label(&s.label)?);
                Ok(Sample {
                    label: decode_label(c, self.width)?,
                    ..s.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.width, samples)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.width as u32);
        put_u32(&mut out, self.samples.len() as u32);
        for s in &self.samples {
            put_u32(&mut out, encode_label(&s.label).expect("validated").0);
            put_u32(&mut out, s.source_id.len() as u32);
            out.extend_from_slice(s.source_id.as_bytes());
            put_u32(&mut out, s.series.len() as u32);
            for v in s.series.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CoreError::Format("not a dataset container".into()));
        }
        let width = r.u32()? as usize;
        let n = r.u32()? as usize;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let label = decode_label(ClassId(r.u32()?), width)?;
            let len = r.u32()? as usize;
            let source_id = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CoreError::Format("source id is not UTF-8".into()))?;
            let len = r.u32()? as usize;
            let values = (0..len)
                .map(|_| r.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                series: TimeSeries::new(values)?,
                label,
                source_id,
            });
        }
        if r.pos != bytes.len() {
            return Err(CoreError::Format("trailing bytes in dataset container".into()));
        }
        Dataset::new(width, samples)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
            .map_err(|e| e.context(format!("reading {}", path.display())))
    }
}

const MAGIC: &[u8; 8] = b"FSLDATA1";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(CoreError::Format("truncated dataset container".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn toy(labels: &[&[usize]]) -> Dataset {
        let samples = labels
            .iter()
            .enumerate()
            .map(|(i, atoms)| Sample {
                series: TimeSeries::new(vec![i as f64, 0.5]).unwrap(),
                label: LabelVector::from_atoms(7, atoms.iter().copied()).unwrap(),
                source_id: format!("s{i}"),
            })
            .collect();
        Dataset::new(7, samples).unwrap()
    }

    #[test]
    fn indices_follow_labels() {
        let ds = toy(&[&[1], &[], &[1, 6], &[6], &[1]]);
        assert_eq!(ds.classes(), &[ClassId(1), ClassId(0), ClassId(33), ClassId(32)]);
        assert_eq!(ds.class_members(ClassId(1)), &[0, 4]);
        assert_eq!(ds.atom_members(0), &[0, 2, 4]);
        assert_eq!(ds.atom_members(5), &[2, 3]);
        // every sample sits in exactly one class bucket
        let total: usize = ds.class_counts().values().sum();
        assert_eq!(total, ds.len());
    }

    #[test]
    fn subset_keeps_order() {
        let ds = toy(&[&[1], &[2], &[1], &[3]]);
        let sub = ds.subset(&[ClassId(1), ClassId(4)]).unwrap();
        let ids: Vec<_> = sub.samples().iter().map(|s| s.source_id.as_str()).collect();
        assert_eq!(ids, ["s0", "s2", "s3"]);
    }

    #[test]
    fn container_round_trip() {
        let ds = toy(&[&[1], &[], &[2, 4]]);
        assert_eq!(Dataset::from_bytes(&ds.to_bytes()).unwrap(), ds);
        let bytes = ds.to_bytes();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rejects_mixed_lengths() {
        let mut samples = toy(&[&[1], &[2]]).samples().to_vec();
        samples[1].series = TimeSeries::new(vec![1.0]).unwrap();
        assert!(Dataset::new(7, samples).is_err());
    }
}
