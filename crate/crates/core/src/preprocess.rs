//! Raw screwdriver recordings to fixed-length normalized torque series:
//! extract torque, clamp negatives, min-max normalize, decimate, then
//! truncate or zero-pad.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample, TimeSeries};
use crate::error::{CoreError, Result};
use crate::labels::parse_class_token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Column {
    Time,
    RotationalSpeed,
    Torque,
    Angle,
    ProgramStep,
    Current,
}

impl Column {
    pub const ALL: [Column; 6] = [
        Column::Time,
        Column::RotationalSpeed,
        Column::Torque,
        Column::Angle,
        Column::ProgramStep,
        Column::Current,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Column::Time => "time",
            Column::RotationalSpeed => "rotational_speed",
            Column::Torque => "torque",
            Column::Angle => "angle",
            Column::ProgramStep => "program_step",
            Column::Current => "current",
        }
    }

    pub fn from_header(h: &str) -> Option<Column> {
        let h = h.trim();
        Column::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(h))
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Columns of one recording; all present columns have the same length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawRecording {
    columns: BTreeMap<Column, Vec<f64>>,
}

impl RawRecording {
    pub fn new(columns: BTreeMap<Column, Vec<f64>>) -> Result<Self> {
        let mut lengths = columns.iter().map(|(c, v)| (c, v.len()));
        if let Some((first, n)) = lengths.next() {
            if let Some((c, m)) = lengths.find(|&(_, m)| m != n) {
                return Err(CoreError::Format(format!(
                    "column {c} has {m} rows, column {first} has {n}"
                )));
            }
        }
        Ok(RawRecording { columns })
    }

    /// A recording with only a torque column.
    pub fn from_torque(torque: Vec<f64>) -> Self {
        RawRecording {
            columns: BTreeMap::from([(Column::Torque, torque)]),
        }
    }

    pub fn column(&self, c: Column) -> Option<&[f64]> {
        self.columns.get(&c).map(Vec::as_slice)
    }

    pub fn rows(&self) -> usize {
        self.columns.values().next().map_or(0, Vec::len)
    }

    /// Reads a CSV whose header names columns (any case, any order). Unknown
    /// columns are ignored.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        let headers = reader.headers()?.clone();
        let mapping: Vec<Option<Column>> = headers.iter().map(Column::from_header).collect();
        let mut columns: BTreeMap<Column, Vec<f64>> = mapping
            .iter()
            .flatten()
            .map(|&c| (c, Vec::new()))
            .collect();
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            for (field, col) in record.iter().zip(&mapping) {
                let Some(col) = col else { continue };
                let v: f64 = field.parse().map_err(|_| {
                    CoreError::Format(format!(
                        "{}: row {}: column {col}: {field:?} is not a number",
                        path.display(),
                        row + 1
                    ))
                })?;
                columns.get_mut(col).unwrap().push(v);
            }
        }
        RawRecording::new(columns)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub downsample_rate: usize,
    pub target_length: usize,
    pub clamp_floor: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            downsample_rate: 20,
            target_length: 920,
            clamp_floor: 0.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_rate < 1 {
            return Err(CoreError::config("preprocess.downsample_rate", "must be at least 1"));
        }
        if self.target_length < 1 {
            return Err(CoreError::config("preprocess.target_length", "must be at least 1"));
        }
        if !self.clamp_floor.is_finite() {
            return Err(CoreError::config("preprocess.clamp_floor", "must be finite"));
        }
        Ok(())
    }
}

pub fn extract_torque(r: &RawRecording) -> Result<Vec<f64>> {
    match r.column(Column::Torque) {
        None => Err(CoreError::Format("recording has no torque column".into())),
        Some([]) => Err(CoreError::Format("torque column is empty".into())),
        Some(t) => Ok(t.to_vec()),
    }
}

/// Values below `floor` are replaced by `floor`.
pub fn clamp_invalid(x: &[f64], floor: f64) -> Vec<f64> {
    x.iter().map(|&v| v.max(floor)).collect()
}

/// Maps the range of `x` onto [0, 1]; a constant series maps to zeros.
pub fn minmax_normalize(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; x.len()];
    }
    let span = hi - lo;
    x.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Keeps every `downsample_rate`-th point from index 0, then keeps the head
/// or zero-pads to exactly `target_length`.
pub fn resample_to_length(x: &[f64], cfg: &PreprocessConfig) -> Result<TimeSeries> {
    cfg.validate()?;
    let mut out: Vec<f64> = x
        .iter()
        .step_by(cfg.downsample_rate)
        .take(cfg.target_length)
        .copied()
        .collect();
    out.resize(cfg.target_length, 0.0);
    TimeSeries::new(out)
}

pub fn preprocess(r: &RawRecording, cfg: &PreprocessConfig) -> Result<TimeSeries> {
    let torque = extract_torque(r)?;
    let clamped = clamp_invalid(&torque, cfg.clamp_floor);
    resample_to_length(&minmax_normalize(&clamped), cfg)
}

/// Preprocesses every `*.csv` file in `dir`, labeling each by the
/// `class<digits>` token of its filename. Files are read in name order and
/// the file stem becomes the sample's source id.
pub fn load_dir(dir: &Path, cfg: &PreprocessConfig, width: usize) -> Result<Dataset> {
    cfg.validate()?;
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    paths.retain(|p| {
        p.extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    });
    paths.sort();
    let mut samples = Vec::with_capacity(paths.len());
    for path in paths {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CoreError::Format(format!("unreadable file name {}", path.display())))?
            .to_string();
        let label = parse_class_token(&stem, width)?;
        let series = preprocess(&RawRecording::read_csv(&path)?, cfg)
            .map_err(|e| e.context(path.display().to_string()))?;
        samples.push(Sample {
            series,
            label,
            source_id: stem,
        });
    }
    Dataset::new(width, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(rate: usize, target: usize) -> PreprocessConfig {
        PreprocessConfig {
            downsample_rate: rate,
            target_length: target,
            clamp_floor: 0.0,
        }
    }

    #[test]
    fn extract_is_a_projection() {
        let r = RawRecording::from_torque(vec![-0.5, 1.0]);
        assert_eq!(extract_torque(&r).unwrap(), vec![-0.5, 1.0]);
        assert!(extract_torque(&RawRecording::from_torque(vec![])).is_err());
        assert!(extract_torque(&RawRecording::default()).is_err());
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_invalid(&[-1.0, 2.0], 0.0), vec![0.0, 2.0]);
        assert_eq!(clamp_invalid(&[-3.0, -1.0, 5.0], 0.0), vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            minmax_normalize(&[0.0, 1.0, 2.0, 3.0, 4.0]),
            vec![0.0, 0.25, 0.5, 0.75, 1.0]
        );
        assert_eq!(minmax_normalize(&[5.0, 5.0, 5.0]), vec![0.0; 3]);
        assert_eq!(minmax_normalize(&[0.0, 0.5, 1.0]), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn resample_counts() {
        let long: Vec<f64> = (0..20000).map(|i| i as f64).collect();
        let s = resample_to_length(&long, &cfg(20, 920)).unwrap();
        assert_eq!(s.len(), 920);
        assert_eq!(s.values()[919], 919.0 * 20.0);

        let short: Vec<f64> = vec![1.0; 10000];
        let s = resample_to_length(&short, &cfg(20, 920)).unwrap();
        assert_eq!(s.values().iter().filter(|&&v| v == 1.0).count(), 500);
        assert!(s.values()[500..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pipeline_example() {
        let r = RawRecording::from_torque(vec![-1.0, 0.0, 2.0, 4.0]);
        assert_eq!(preprocess(&r, &cfg(1, 4)).unwrap().values(), &[0.0, 0.0, 0.5, 1.0]);
        let r = RawRecording::from_torque(vec![-1.0, -2.0]);
        assert_eq!(preprocess(&r, &cfg(1, 3)).unwrap().values(), &[0.0; 3]);
    }

    #[test]
    fn reads_csv_case_insensitively() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m6_class16_0001.csv");
        fs::write(
            &path,
            "Time,Rotational_Speed,TORQUE,Angle,Program_Step,Current\n0,100,-1,0,1,2\n1,100,3,1,1,2\n",
        )
        .unwrap();
        let r = RawRecording::read_csv(&path).unwrap();
        assert_eq!(r.column(Column::Torque).unwrap(), &[-1.0, 3.0]);
        assert_eq!(r.rows(), 2);
        let ds = load_dir(dir.path(), &cfg(1, 3), 7).unwrap();
        assert_eq!(ds.sample(0).label.token(), "16");
        assert_eq!(ds.sample(0).series.values(), &[0.0, 1.0, 0.0]);
        assert_eq!(ds.sample(0).source_id, "m6_class16_0001");
    }

    #[test]
    fn bad_cell_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("class1.csv");
        fs::write(&path, "torque\n1\nabc\n").unwrap();
        let err = RawRecording::read_csv(&path).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
    }

    proptest! {
        #[test]
        fn outputs_have_target_length_and_unit_range(
            x in prop::collection::vec(-100.0f64..100.0, 1..300),
            rate in 1usize..30,
            target in 1usize..64,
        ) {
            let s = preprocess(&RawRecording::from_torque(x), &cfg(rate, target)).unwrap();
            prop_assert_eq!(s.len(), target);
            prop_assert!(s.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn preprocessing_is_idempotent_on_unit_series(
            mut x in prop::collection::vec(0.0f64..1.0, 3..50),
        ) {
            x[0] = 0.0;
            x[1] = 1.0;
            let c = cfg(1, x.len());
            let once = preprocess(&RawRecording::from_torque(x.clone()), &c).unwrap();
            prop_assert_eq!(once.values(), &x[..]);
        }

        #[test]
        fn clamp_only_raises_negatives(x in prop::collection::vec(-5.0f64..5.0, 0..50)) {
            let y = clamp_invalid(&x, 0.0);
            for (a, b) in x.iter().zip(&y) {
                if *a < 0.0 { prop_assert_eq!(*b, 0.0) } else { prop_assert_eq!(a, b) }
            }
        }
    }
}
