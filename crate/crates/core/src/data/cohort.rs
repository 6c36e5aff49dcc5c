//! Subjects, cohorts and the on-disk cohort directory format.
//!
//! A cohort directory holds `cohort.json` (an array of subject records),
//! one headerless CSV per subject (rows = regions, columns = time points)
//! and `atlas.txt`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::atlas::CircuitAtlas;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "cohort.json";
pub const ATLAS_FILE: &str = "atlas.txt";
pub const MIN_REGIONS: usize = 6;
pub const MIN_TIMEPOINTS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub site: String,
    /// 0 = healthy control, 1 = MDD.
    pub label: u8,
    /// `n x T` BOLD matrix.
    pub bold: Tensor,
    pub age: f64,
    pub sex: u8,
    pub education: f64,
}

impl Subject {
    pub fn n_regions(&self) -> usize {
        self.bold.rows()
    }

    pub fn n_timepoints(&self) -> usize {
        self.bold.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t) = (self.n_regions(), self.n_timepoints());
        if n < MIN_REGIONS || t < MIN_TIMEPOINTS {
            return Err(Error::Data(format!(
                "subject {}: need at least {MIN_REGIONS} regions and {MIN_TIMEPOINTS} time points, got {n}x{t}",
                self.id
            )));
        }
        if self.label > 1 || self.sex > 1 {
            return Err(Error::Data(format!("subject {}: label and sex must be 0 or 1", self.id)));
        }
        if !self.bold.all_finite() || !self.age.is_finite() || !self.education.is_finite() {
            return Err(Error::Data(format!("subject {}: non-finite values", self.id)));
        }
        for r in 0..n {
            let row = self.bold.row_slice(r);
            if row.iter().all(|&v| v == row[0]) {
                return Err(Error::Data(format!("subject {}: region {r} has zero variance", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub subjects: Vec<Subject>,
    pub atlas: CircuitAtlas,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    site: String,
    label: u8,
    age: f64,
    sex: u8,
    education: f64,
    series_path: String,
}

impl Cohort {
    /// Validates every subject and cross-subject consistency.
    pub fn new(subjects: Vec<Subject>, atlas: CircuitAtlas) -> Result<Self> {
        let cohort = Cohort { subjects, atlas };
        cohort.validate()?;
        Ok(cohort)
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .subjects
            .first()
            .ok_or_else(|| Error::Data("cohort has no subjects".into()))?;
        let (n, t) = (first.n_regions(), first.n_timepoints());
        if self.atlas.n_regions() != n {
            return Err(Error::Data(format!(
                "atlas covers {} regions but subjects have {n}",
                self.atlas.n_regions()
            )));
        }
        let mut ids = HashSet::new();
        for s in &self.subjects {
            s.validate()?;
            if (s.n_regions(), s.n_timepoints()) != (n, t) {
                return Err(Error::Data(format!(
                    "subject {}: shape {}x{} differs from cohort shape {n}x{t}",
                    s.id,
                    s.n_regions(),
                    s.n_timepoints()
                )));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate subject id {}", s.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn n_regions(&self) -> usize {
        self.subjects[0].n_regions()
    }

    pub fn n_timepoints(&self) -> usize {
        self.subjects[0].n_timepoints()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    /// Distinct sites in first-appearance order.
    pub fn sites(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.subjects {
            if !out.contains(&s.site) {
                out.push(s.site.clone());
            }
        }
        out
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.id == id)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Vec::with_capacity(self.subjects.len());
        for s in &self.subjects {
            let file = format!("{}.csv", s.id);
            let path = dir.join(&file);
            std::fs::write(&path, series_to_csv(&s.bold)).map_err(|e| Error::io(&path, e))?;
            manifest.push(ManifestEntry {
                id: s.id.clone(),
                site: s.site.clone(),
                label: s.label,
                age: s.age,
                sex: s.sex,
                education: s.education,
                series_path: file,
            });
        }
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.atlas.save(&dir.join(ATLAS_FILE))
    }

    /// Loads a cohort directory. Without `atlas.txt` the regions are split
    /// evenly across circuits.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| {
            Error::Data(format!("{}:{}: malformed manifest: {e}", path.display(), e.line()))
        })?;
        let mut subjects = Vec::with_capacity(manifest.len());
        let mut expected: Option<(usize, usize)> = None;
        for entry in manifest {
            let series_path = resolve(dir, &entry.series_path);
            let bold = read_series(&series_path, &entry.id, expected)?;
            expected.get_or_insert((bold.rows(), bold.cols()));
            subjects.push(Subject {
                id: entry.id,
                site: entry.site,
                label: entry.label,
                bold,
                age: entry.age,
                sex: entry.sex,
                education: entry.education,
            });
        }
        let n = subjects.first().map(|s| s.n_regions()).unwrap_or(0);
        let atlas_path = dir.join(ATLAS_FILE);
        let atlas = if atlas_path.exists() {
            CircuitAtlas::load(&atlas_path)?
        } else {
            CircuitAtlas::even(n)?
        };
        Self::new(subjects, atlas)
    }
}

fn resolve(dir: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

pub fn series_to_csv(bold: &Tensor) -> String {
    let mut s = String::new();
    for i in 0..bold.rows() {
        let row: Vec<String> = bold.row_slice(i).iter().map(|v| format!("{v}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Reads a headerless numeric CSV. When `expected` is given the row and
/// column counts must match it.
pub fn read_series(path: &Path, subject: &str, expected: Option<(usize, usize)>) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}:{} (subject {subject})", path.display(), lineno + 1);
        let vals = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Data(format!("{}: {e}", at())))?;
        let want = cols.or(expected.map(|e| e.1));
        if let Some(w) = want {
            if vals.len() != w {
                return Err(Error::Data(format!("{}: expected {w} columns, found {}", at(), vals.len())));
            }
        }
        cols = Some(vals.len());
        data.extend(vals);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Data(format!("{}: empty series file (subject {subject})", path.display())))?;
    if let Some((r, _)) = expected {
        if rows != r {
            return Err(Error::Data(format!(
                "{}: expected {r} rows, found {rows} (subject {subject})",
                path.display()
            )));
        }
    }
    Ok(Tensor::matrix(rows, cols, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_cohort, SynthSpec};

    fn small() -> Cohort {
        let mut spec = SynthSpec::desk(0.8, 3);
        spec.site_sizes = vec![4, 4];
        spec.n_timepoints = 40;
        generate_cohort(&spec).unwrap()
    }

    #[test]
    fn save_load_roundtrip() {
        let c = small();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(Cohort::load(dir.path()).unwrap(), c);
    }

    #[test]
    fn missing_series_names_path() {
        let c = small();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        let victim = dir.path().join(format!("{}.csv", c.subjects[2].id));
        std::fs::remove_file(&victim).unwrap();
        let err = Cohort::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&victim.display().to_string()), "{err}");
    }

    #[test]
    fn short_row_names_subject() {
        let c = small();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        let s = &c.subjects[1];
        let path = dir.path().join(format!("{}.csv", s.id));
        let truncated = Tensor::from_fn(s.n_regions(), s.n_timepoints() - 1, |i, j| s.bold.get(i, j));
        std::fs::write(&path, series_to_csv(&truncated)).unwrap();
        let err = Cohort::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&s.id), "{err}");
        assert!(err.contains(":1"), "{err}");
    }

    #[test]
    fn malformed_manifest_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(MANIFEST_FILE), "[\n{\"id\": 3}\n]").unwrap();
        let err = Cohort::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("cohort.json:2"), "{err}");
    }
}
