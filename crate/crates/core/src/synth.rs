//! Synthetic fastening curves with additive, per-defect signatures.
//!
//! Every sample is a sigmoid torque rise plus one fixed signature for each of
//! its active atomic labels, plus Gaussian noise, clamped to [0, 1]. Shapes are
//! defined on normalized time so any series length works.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Sample, TimeSeries};
use crate::error::{CoreError, Result};
use crate::labels::{check_width, decode_label, ClassId, LabelVector};
use crate::preprocess::{Column, PreprocessConfig};
use crate::rng;

/// Atomic labels that have a signature.
pub const SIGNATURE_COUNT: usize = 7;

/// Sample counts per class of the reference collection.
pub fn reference_counts() -> BTreeMap<ClassId, usize> {
    let mut m = BTreeMap::new();
    m.insert(ClassId(0), 200);
    for i in 0..7 {
        m.insert(ClassId(1 << i), 200);
    }
    for c in [33, 10, 66, 20, 68, 98, 84] {
        m.insert(ClassId(c), 100);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub width: usize,
    pub samples_per_class: BTreeMap<ClassId, usize>,
    pub noise_std: f64,
    pub length: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            width: 7,
            samples_per_class: reference_counts(),
            noise_std: 0.02,
            length: 920,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check_width(self.width)?;
        if self.width > SIGNATURE_COUNT {
            return Err(CoreError::config(
                "synth.width",
                format!("{} exceeds the {SIGNATURE_COUNT} available signatures", self.width),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(CoreError::config("synth.noise_std", "must be finite and non-negative"));
        }
        if self.length < 2 {
            return Err(CoreError::config("synth.length", "must be at least 2"));
        }
        for &c in self.samples_per_class.keys() {
            decode_label(c, self.width)
                .map_err(|e| e.context(format!("synth.samples_per_class[{c}]")))?;
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gauss(u: f64, center: f64, w: f64) -> f64 {
    let z = (u - center) / w;
    (-z * z).exp()
}

/// Normalized time of point `t` in a series of `len` points.
fn unit(t: usize, len: usize) -> f64 {
    t as f64 / (len - 1) as f64
}

pub fn base_curve(len: usize) -> Vec<f64> {
    (0..len)
        .map(|t| 0.08 + 0.52 * sigmoid((unit(t, len) - 0.38) / 0.05))
        .collect()
}

/// The signature of 1-based atomic label `atom`.
pub fn signature(atom: usize, len: usize) -> Vec<f64> {
    assert!((1..=SIGNATURE_COUNT).contains(&atom), "no signature for atom {atom}");
    (0..len)
        .map(|t| {
            let u = unit(t, len);
            match atom {
                // localized bump: a raised segment with sharp edges
                1 => 0.12 * (sigmoid((u - 0.19) / 0.006) - sigmoid((u - 0.26) / 0.006)),
                // dip
                2 => -0.15 * gauss(u, 0.55, 0.033),
                // slope change
                3 => 0.10 * (u - 0.65).max(0.0) / 0.35,
                // plateau shift
                4 => -0.10 * sigmoid((u - 0.75) / 0.015),
                // oscillation burst
                5 => 0.08 * (2.0 * PI * (u - 0.45) / 0.022).sin() * gauss(u, 0.45, 0.04),
                // early peak: sharp rise, slower decay
                6 => {
                    let d = (u - 0.10) / 0.012;
                    if d > 0.0 {
                        0.22 * d * (1.0 - d).exp()
                    } else {
                        0.0
                    }
                }
                // tail spike
                _ => 0.20 * gauss(u, 0.955, 0.009),
            }
        })
        .collect()
}

/// Base curve plus the signatures of every active atom, before noise and
/// clamping.
pub fn noiseless_curve(label: &LabelVector, len: usize) -> Vec<f64> {
    let mut out = base_curve(len);
    for a in label.atoms() {
        for (o, s) in out.iter_mut().zip(signature(a + 1, len)) {
            *o += s;
        }
    }
    out
}

/// Source id of the `i`-th sample of a class, e.g. `class16_0001`.
pub fn source_id(label: &LabelVector, i: usize) -> String {
    format!("class{}_{:04}", label.token(), i)
}

/// Samples are ordered by source id, which is also the order in which
/// exported files are read back.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| CoreError::config("synth.noise_std", e.to_string()))?;
    let mut samples = Vec::new();
    for (&c, &count) in &cfg.samples_per_class {
        let label = decode_label(c, cfg.width)?;
        let clean = noiseless_curve(&label, cfg.length);
        let mut r = rng::rng(rng::derive(cfg.seed, c.0 as u64));
        for i in 0..count {
            let values = clean
                .iter()
                .map(|&v| (v + noise.sample(&mut r)).clamp(0.0, 1.0))
                .collect();
            samples.push(Sample {
                series: TimeSeries::new(values)?,
                label: label.clone(),
                source_id: source_id(&label, i),
            });
        }
    }
    samples.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    Dataset::new(cfg.width, samples)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub files: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes one raw recording per sample such that `preprocess::load_dir` with
/// the same `pre` config gives back the dataset. Each value is repeated
/// `downsample_rate` times, and two trailing rows at torque 0 and 1 pin the
/// min-max range; decimation and truncation drop them again.
pub fn export_csv(ds: &Dataset, dir: &Path, pre: &PreprocessConfig) -> Result<Vec<FileDigest>> {
    pre.validate()?;
    if let Some(len) = ds.series_len() {
        if len != pre.target_length {
            return Err(CoreError::config(
                "preprocess.target_length",
                format!("is {}, series have {len} points", pre.target_length),
            ));
        }
    }
    if ds.samples().iter().flat_map(|s| s.series.values()).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(CoreError::Contract("exported values must lie in [0, 1]".into()));
    }
    fs::create_dir_all(dir)?;
    let mut digests = Vec::with_capacity(ds.len());
    for s in ds.samples() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Column::ALL.iter().map(|c| c.name()))?;
        let torque = s
            .series
            .values()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, pre.downsample_rate))
            .chain([0.0, 1.0]);
        for (row, v) in torque.enumerate() {
            w.write_record([
                format!("{:.3}", row as f64 * 0.001),
                "300".to_string(),
                v.to_string(),
                format!("{:.1}", row as f64 * 0.5),
                "1".to_string(),
                "2.5".to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| CoreError::Io(e.into_error()))?;
        let file = format!("{}.csv", s.source_id);
        fs::write(dir.join(&file), &bytes)?;
        digests.push(FileDigest {
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    Ok(digests)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(counts: &[(u32, usize)], noise: f64, len: usize) -> SynthConfig {
        SynthConfig {
            seed: 5,
            width: 7,
            samples_per_class: counts.iter().map(|&(c, n)| (ClassId(c), n)).collect(),
            noise_std: noise,
            length: len,
        }
    }

    #[test]
    fn reference_counts_total() {
        let m = reference_counts();
        assert_eq!(m.len(), 15);
        assert_eq!(m.values().sum::<usize>(), 2300);
        assert_eq!(m[&ClassId(33)], 100);
    }

    #[test]
    fn noiseless_is_base_plus_signatures() {
        let len = 300;
        let label = LabelVector::from_atoms(7, [1, 6]).unwrap();
        let base = base_curve(len);
        let (s1, s6) = (signature(1, len), signature(6, len));
        let c = noiseless_curve(&label, len);
        for t in 0..len {
            assert_eq!(c[t], base[t] + s1[t] + s6[t]);
        }
        assert_eq!(noiseless_curve(&LabelVector::zeros(7), len), base);
    }

    #[test]
    fn zero_noise_in_order_class_is_the_base_curve() {
        let ds = generate(&small(&[(0, 3)], 0.0, 100)).unwrap();
        for s in ds.samples() {
            assert_eq!(s.series.values(), base_curve(100).as_slice());
        }
    }

    #[test]
    fn signatures_are_distinct() {
        let len = 920;
        for a in 1..=7 {
            for b in a + 1..=7 {
                let d: f64 = signature(a, len)
                    .iter()
                    .zip(signature(b, len))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                assert!(d > 0.5, "signatures {a} and {b} too close: {d}");
            }
        }
    }

    #[test]
    fn ids_and_values() {
        let ds = generate(&small(&[(33, 2), (10, 1)], 0.02, 50)).unwrap();
        let ids: Vec<_> = ds.samples().iter().map(|s| s.source_id.as_str()).collect();
        assert_eq!(ids, ["class16_0000", "class16_0001", "class24_0000"]);
        assert!(ds
            .samples()
            .iter()
            .all(|s| s.series.values().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn validation() {
        assert!(SynthConfig::default().validate().is_ok());
        assert!(small(&[(128, 1)], 0.02, 10).validate().is_err());
        assert!(small(&[(1, 1)], -1.0, 10).validate().is_err());
        assert!(small(&[(1, 1)], f64::NAN, 10).validate().is_err());
        assert!(small(&[(1, 1)], 0.0, 1).validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = SynthConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<SynthConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
