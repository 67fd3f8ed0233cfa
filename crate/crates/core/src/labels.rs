//! Binary defect-indicator labels and their integer class ids.
//!
//! Atomic defect indices are 1-based at every public boundary (`supp`,
//! filenames, reports) and 0-based in storage.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Width of the screw-fastening defect taxonomy.
pub const DEFAULT_WIDTH: usize = 7;

/// Largest width whose class ids fit the encoding.
pub const MAX_WIDTH: usize = 30;

/// Integer id of a label combination: bit `i - 1` is set for atomic label `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct LabelVector {
    bits: Vec<bool>,
}

impl TryFrom<Vec<u8>> for LabelVector {
    type Error = CoreError;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        LabelVector::from_bits(&bits)
    }
}

impl From<LabelVector> for Vec<u8> {
    fn from(v: LabelVector) -> Self {
        v.bits.iter().map(|&b| b as u8).collect()
    }
}

impl LabelVector {
    /// The all-zero ("in order") label.
    pub fn zeros(width: usize) -> Self {
        LabelVector {
            bits: vec![false; width],
        }
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        if bits.is_empty() {
            return Err(CoreError::InvalidLabel("empty label vector".into()));
        }
        if let Some(&bad) = bits.iter().find(|&&b| b > 1) {
            return Err(CoreError::InvalidLabel(format!("entry {bad} is not 0 or 1")));
        }
        Ok(LabelVector {
            bits: bits.iter().map(|&b| b == 1).collect(),
        })
    }

    /// Builds a label from 1-based atomic indices.
    pub fn from_atoms(width: usize, atoms: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v = LabelVector::zeros(width);
        for a in atoms {
            if a == 0 || a > width {
                return Err(CoreError::InvalidLabel(format!(
                    "atomic label {a} outside 1..={width}"
                )));
            }
            v.bits[a - 1] = true;
        }
        Ok(v)
    }

    pub fn width(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b as u8).collect()
    }

    /// Whether 0-based position `i` is set.
    pub fn is_set(&self, i: usize) -> bool {
        self.bits.get(i).copied().unwrap_or(false)
    }

    /// 1-based indices of the set positions.
    pub fn supp(&self) -> BTreeSet<usize> {
        self.atoms().map(|i| i + 1).collect()
    }

    /// 0-based indices of the set positions, ascending.
    pub fn atoms(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn is_zero(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Compact name used in filenames and reports: the 1-based atoms as
    /// digits (`"24"`), or `"0"` for the all-zero label. Atoms above 9 are
    /// written in parentheses to stay unambiguous.
    pub fn token(&self) -> String {
        if self.is_zero() {
            return "0".into();
        }
        self.supp()
            .iter()
            .map(|&a| if a < 10 { a.to_string() } else { format!("({a})") })
            .collect()
    }
}

impl fmt::Display for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let atoms: Vec<String> = self.supp().iter().map(|a| a.to_string()).collect();
        write!(f, "({})", atoms.join(","))
    }
}

pub fn check_width(width: usize) -> Result<()> {
    if width == 0 || width > MAX_WIDTH {
        return Err(CoreError::InvalidWidth {
            width,
            max: MAX_WIDTH,
        });
    }
    Ok(())
}

pub fn encode_label(v: &LabelVector) -> Result<ClassId> {
    check_width(v.width())?;
    Ok(ClassId(v.atoms().map(|i| 1u32 << i).sum()))
}

pub fn decode_label(c: ClassId, width: usize) -> Result<LabelVector> {
    check_width(width)?;
    if (c.0 as u64) >> width != 0 {
        return Err(CoreError::InvalidClass {
            class: c.0 as u64,
            width,
        });
    }
    Ok(LabelVector {
        bits: (0..width).map(|i| (c.0 >> i) & 1 == 1).collect(),
    })
}

/// Parses the `class<digits>` token out of a filename such as
/// `run_class24_0003.csv`. Each digit names one 1-based atomic label; a lone
/// `0` is the all-zero label.
pub fn parse_class_token(name: &str, width: usize) -> Result<LabelVector> {
    let lower = name.to_ascii_lowercase();
    let mut search = 0;
    while let Some(found) = lower[search..].find("class") {
        let start = search + found + "class".len();
        let digits: String = lower[start..]
            .chars()
            .take_while(|c| c.is_ascii_digit())
            .collect();
        if !digits.is_empty() {
            if digits == "0" {
                return Ok(LabelVector::zeros(width));
            }
            let atoms: Vec<usize> = digits.bytes().map(|b| (b - b'0') as usize).collect();
            if atoms.contains(&0) {
                return Err(CoreError::InvalidLabel(format!(
                    "`class{digits}` in {name:?} mixes 0 with defect labels"
                )));
            }
            let mut seen = BTreeSet::new();
            if !atoms.iter().all(|a| seen.insert(*a)) {
                return Err(CoreError::InvalidLabel(format!(
                    "`class{digits}` in {name:?} repeats a label"
                )));
            }
            return LabelVector::from_atoms(width, atoms);
        }
        search = start;
    }
    Err(CoreError::Format(format!("no `class<digits>` token in {name:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(bits: &[u8]) -> LabelVector {
        LabelVector::from_bits(bits).unwrap()
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_label(&v(&[0, 0, 0, 0, 0, 0, 0])).unwrap(), ClassId(0));
        assert_eq!(encode_label(&v(&[1, 0, 0, 0, 0, 1, 0])).unwrap(), ClassId(33));
        assert_eq!(encode_label(&v(&[0, 1, 0, 1, 0, 0, 0])).unwrap(), ClassId(10));
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_label(ClassId(0), 7).unwrap(), v(&[0; 7]));
        assert_eq!(decode_label(ClassId(33), 7).unwrap(), v(&[1, 0, 0, 0, 0, 1, 0]));
        assert_eq!(decode_label(ClassId(10), 7).unwrap(), v(&[0, 1, 0, 1, 0, 0, 0]));
    }

    #[test]
    fn encoding_is_a_bijection_on_width_seven() {
        // independent oracle: weight each position by an explicitly built power of two
        let mut seen = BTreeSet::new();
        for c in 0..128u32 {
            let bits: Vec<u8> = (0..7).map(|i| ((c / 2u32.pow(i)) % 2) as u8).collect();
            let mut weight = 1;
            let mut want = 0;
            for &b in &bits {
                want += weight * b as u32;
                weight *= 2;
            }
            let label = v(&bits);
            let id = encode_label(&label).unwrap();
            assert_eq!(id.0, want);
            assert_eq!(decode_label(id, 7).unwrap(), label);
            assert!(seen.insert(id));
        }
    }

    #[test]
    fn supp_is_one_based() {
        assert!(v(&[0; 7]).supp().is_empty());
        assert_eq!(v(&[1, 0, 0, 0, 0, 1, 0]).supp(), BTreeSet::from([1, 6]));
        assert_eq!(v(&[0, 0, 1, 0, 1, 0, 1]).supp(), BTreeSet::from([3, 5, 7]));
    }

    #[test]
    fn width_limits() {
        assert!(encode_label(&LabelVector::zeros(31)).is_err());
        assert!(encode_label(&LabelVector::zeros(30)).is_ok());
        assert!(decode_label(ClassId(128), 7).is_err());
    }

    #[test]
    fn class_tokens() {
        let w = DEFAULT_WIDTH;
        assert_eq!(
            parse_class_token("class24_0001.csv", w).unwrap(),
            LabelVector::from_atoms(w, [2, 4]).unwrap()
        );
        assert!(parse_class_token("CLASS0.csv", w).unwrap().is_zero());
        assert_eq!(parse_class_token("x_class357", w).unwrap().token(), "357");
        assert!(parse_class_token("class8", w).is_err());
        assert!(parse_class_token("class10", w).is_err());
        assert!(parse_class_token("sample.csv", w).is_err());
        assert_eq!(LabelVector::from_atoms(w, [1, 6]).unwrap().to_string(), "(1,6)");
    }

    #[test]
    fn serde_uses_bit_arrays() {
        let label = LabelVector::from_atoms(7, [2, 4]).unwrap();
        let json = serde_json::to_string(&label).unwrap();
        assert_eq!(json, "[0,1,0,1,0,0,0]");
        assert_eq!(serde_json::from_str::<LabelVector>(&json).unwrap(), label);
        assert!(serde_json::from_str::<LabelVector>("[0,2]").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_any_width(width in 1usize..=30, raw in any::<u32>()) {
            let c = ClassId(raw & ((1u64 << width) - 1) as u32);
            let v = decode_label(c, width).unwrap();
            prop_assert_eq!(encode_label(&v).unwrap(), c);
            prop_assert_eq!(v.supp().len() as u32, c.0.count_ones());
        }

        #[test]
        fn token_round_trips(mask in 0u32..128) {
            let v = decode_label(ClassId(mask), 7).unwrap();
            prop_assert_eq!(parse_class_token(&format!("class{}", v.token()), 7).unwrap(), v);
        }
    }
}
