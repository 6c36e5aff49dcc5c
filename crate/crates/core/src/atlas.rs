//! Region-to-circuit assignment.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Circuit {
    Dmn,
    Sn,
    Fpn,
    Ln,
    Rn,
}

impl Circuit {
    pub const ALL: [Circuit; 5] = [Circuit::Dmn, Circuit::Sn, Circuit::Fpn, Circuit::Ln, Circuit::Rn];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Circuit::Dmn => "DMN",
            Circuit::Sn => "SN",
            Circuit::Fpn => "FPN",
            Circuit::Ln => "LN",
            Circuit::Rn => "RN",
        }
    }
}

impl fmt::Display for Circuit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Circuit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "DMN" => Ok(Circuit::Dmn),
            "SN" => Ok(Circuit::Sn),
            "FPN" => Ok(Circuit::Fpn),
            "LN" | "LIN" => Ok(Circuit::Ln),
            "RN" => Ok(Circuit::Rn),
            other => Err(Error::Data(format!("unknown circuit `{other}`"))),
        }
    }
}

/// Every region belongs to exactly one circuit; every circuit has at least
/// two regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitAtlas {
    assignment: Vec<Circuit>,
}

impl CircuitAtlas {
    pub fn new(assignment: Vec<Circuit>) -> Result<Self> {
        let atlas = CircuitAtlas { assignment };
        atlas.validate()?;
        Ok(atlas)
    }

    /// Contiguous, near-equal partition of `n` regions in circuit order.
    pub fn even(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| Circuit::ALL[i * 5 / n.max(1)]).collect())
    }

    fn validate(&self) -> Result<()> {
        for c in Circuit::ALL {
            let count = self.assignment.iter().filter(|&&a| a == c).count();
            if count < 2 {
                return Err(Error::Invariant(format!(
                    "circuit {c} has {count} region(s); at least 2 required"
                )));
            }
        }
        Ok(())
    }

    pub fn n_regions(&self) -> usize {
        self.assignment.len()
    }

    pub fn circuit_of(&self, region: usize) -> Circuit {
        self.assignment[region]
    }

    /// Region indices of `c`, ascending.
    pub fn members(&self, c: Circuit) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == c).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, c) in self.assignment.iter().enumerate() {
            s.push_str(&format!("{i},{c}\n"));
        }
        s
    }

    /// Parses `region_index,circuit_name` lines. Blank lines and `#` comments
    /// are skipped. Indices must cover `0..n` exactly once.
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, Circuit)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::Data(format!("{origin}:{}: {m}", lineno + 1));
            let (idx, name) = line
                .split_once(',')
                .ok_or_else(|| err("expected `region_index,circuit_name`".into()))?;
            let idx: usize = idx.trim().parse().map_err(|_| err(format!("bad region index `{idx}`")))?;
            let circuit = name.parse::<Circuit>().map_err(|e| err(e.to_string()))?;
            pairs.push((idx, circuit));
        }
        let n = pairs.len();
        let mut slots: Vec<Option<Circuit>> = vec![None; n];
        for (idx, c) in pairs {
            if idx >= n || slots[idx].is_some() {
                return Err(Error::Data(format!(
                    "{origin}: region indices must cover 0..{n} exactly once (offending index {idx})"
                )));
            }
            slots[idx] = Some(c);
        }
        Self::new(slots.into_iter().map(Option::unwrap).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_partition_desk() {
        let a = CircuitAtlas::even(16).unwrap();
        let sizes: Vec<usize> = Circuit::ALL.iter().map(|&c| a.members(c).len()).collect();
        assert_eq!(sizes, vec![4, 3, 3, 3, 3]);
        assert_eq!(sizes.iter().sum::<usize>(), 16);
    }

    #[test]
    fn text_roundtrip() {
        let a = CircuitAtlas::even(116).unwrap();
        assert_eq!(CircuitAtlas::from_text(&a.to_text(), "mem").unwrap(), a);
    }

    #[test]
    fn rejects_small_circuits_and_gaps() {
        assert!(CircuitAtlas::even(9).is_err());
        let text = "0,DMN\n1,DMN\n3,SN\n";
        assert!(CircuitAtlas::from_text(text, "t").is_err());
        assert!(CircuitAtlas::from_text("0,XYZ\n", "t").is_err());
    }
}
