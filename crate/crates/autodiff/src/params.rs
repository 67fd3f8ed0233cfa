//! Named parameter collections and their on-disk container.
//!
//! The container is a flat little-endian binary file (`name`, `shape`,
//! row-major `f64` values per entry) accompanied by a JSON manifest that
//! lists the same entries with byte offsets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::tape::{Array, Tape, Var};

const MAGIC: &[u8; 8] = b"FSLPARAM";
pub const FORMAT_VERSION: u32 = 1;

/// Parameters keyed by name, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Array>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.params
            .get(name)
            .ok_or_else(|| AutodiffError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array> {
        self.params
            .get_mut(name)
            .ok_or_else(|| AutodiffError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.var(v.clone())))
                .collect(),
        }
    }

    /// Same names with the same shapes.
    pub fn shapes_match(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_elements() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, value) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(AutodiffError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(AutodiffError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let count = r.u32()?;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| AutodiffError::Format("parameter name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.insert(name, ArrayD::from_shape_vec(IxDyn(&shape), values).unwrap());
        }
        if r.pos != bytes.len() {
            return Err(AutodiffError::Format("trailing bytes".into()));
        }
        Ok(ParamSet { params })
    }

    pub fn manifest(&self) -> ParamManifest {
        let mut offset = 16;
        let entries = self
            .params
            .iter()
            .map(|(name, value)| {
                offset += 4 + name.len() + 4 + 8 * value.ndim();
                let entry = ManifestEntry {
                    name: name.clone(),
                    shape: value.shape().to_vec(),
                    offset,
                };
                offset += 8 * value.len();
                entry
            })
            .collect();
        ParamManifest {
            format: "fewshot-params".into(),
            version: FORMAT_VERSION,
            entries,
        }
    }

    /// Writes `<stem>.bin` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.bin")), self.to_bytes())?;
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&self.manifest())?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let params = Self::from_bytes(&fs::read(dir.join(format!("{stem}.bin")))?)?;
        let manifest: ParamManifest =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        if manifest != params.manifest() {
            return Err(AutodiffError::Format(
                "manifest does not describe the binary container".into(),
            ));
        }
        Ok(params)
    }
}

impl FromIterator<(String, Array)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Array)>>(iter: I) -> Self {
        ParamSet {
            params: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub format: String,
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the first value in the binary container.
    pub offset: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| AutodiffError::Format("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parameters bound to one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        BoundParams { vars }
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| AutodiffError::MissingParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Variables in name order, matching [`ParamSet::names`].
    pub fn to_vec(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Current values as a detached [`ParamSet`].
    pub fn snapshot(&self) -> ParamSet {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), (*v.value()).clone()))
            .collect()
    }
}
