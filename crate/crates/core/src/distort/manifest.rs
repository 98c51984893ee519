//! Dataset manifest: a `#`-prefixed header block (format tag, generator
//! seed, severity levels, one `class` line per distortion class with its
//! parameter table) followed by a CSV table with columns
//! `path,reference_id,distortion_index,severity_level,score`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FORMAT_TAG: &str = "qualnet-manifest v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub reference_id: String,
    /// 1-based index into the class dictionary.
    pub distortion_index: usize,
    pub severity_level: usize,
    /// Proxy ground-truth score (higher = worse).
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEntry {
    pub name: String,
    /// Per-level parameters of each component type, in component order.
    pub parameters: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub classes: Vec<ClassEntry>,
    pub levels: usize,
    pub seed: u64,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// 1-based index of a class by name; errors if absent or ambiguous.
    pub fn class_index(&self, name: &str) -> Result<usize> {
        let hits: Vec<usize> = self
            .classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.name == name)
            .map(|(i, _)| i + 1)
            .collect();
        match hits.as_slice() {
            [i] => Ok(*i),
            [] => Err(Error::Data(format!("class `{name}` not in dictionary"))),
            _ => Err(Error::Data(format!("class `{name}` appears {} times in dictionary", hits.len()))),
        }
    }

    /// Distinct reference ids in first-appearance order.
    pub fn reference_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.reference_id.clone()))
            .map(|r| r.reference_id.clone())
            .collect()
    }

    /// Same header, records filtered.
    pub fn with_records(&self, records: Vec<ImageRecord>) -> Self {
        Self {
            classes: self.classes.clone(),
            levels: self.levels,
            seed: self.seed,
            records,
        }
    }

    /// Checks indices and the (reference, class, level) uniqueness and
    /// completeness invariants.
    pub fn validate(&self) -> Result<()> {
        let m = self.classes.len();
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if r.distortion_index == 0 || r.distortion_index > m {
                return Err(Error::Data(format!("{}: distortion index {} outside 1..={m}", r.path, r.distortion_index)));
            }
            if r.severity_level > self.levels {
                return Err(Error::Data(format!("{}: severity {} above {}", r.path, r.severity_level, self.levels)));
            }
            if !seen.insert((r.reference_id.clone(), r.distortion_index, r.severity_level)) {
                return Err(Error::Data(format!(
                    "duplicate record for ({}, {}, {})",
                    r.reference_id, r.distortion_index, r.severity_level
                )));
            }
        }
        let combos: BTreeSet<(usize, usize)> = seen.iter().map(|(_, c, l)| (*c, *l)).collect();
        for id in self.reference_ids() {
            let n = seen.iter().filter(|(r, _, _)| *r == id).count();
            if n != combos.len() {
                return Err(Error::Data(format!("reference {id} has {n} of {} (class, level) records", combos.len())));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# {FORMAT_TAG}").unwrap();
        writeln!(out, "# seed {}", self.seed).unwrap();
        writeln!(out, "# levels {}", self.levels).unwrap();
        for (i, c) in self.classes.iter().enumerate() {
            let params = serde_json::to_string(&c.parameters).expect("finite parameters");
            writeln!(out, "# class {} {} {}", i + 1, c.name, params).unwrap();
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).unwrap();
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8"));
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(&format!("# {FORMAT_TAG}")) {
            return Err(bad("missing manifest format tag".into()));
        }
        let mut seed = None;
        let mut levels = None;
        let mut classes = Vec::new();
        for line in text.lines().skip(1).take_while(|l| l.starts_with('#')) {
            let fields: Vec<&str> = line.trim_start_matches('#').trim().splitn(4, ' ').collect();
            match fields.as_slice() {
                ["seed", v] => seed = Some(v.parse().map_err(|_| bad(format!("bad seed `{v}`")))?),
                ["levels", v] => levels = Some(v.parse().map_err(|_| bad(format!("bad levels `{v}`")))?),
                ["class", idx, name, params] => {
                    let idx: usize = idx.parse().map_err(|_| bad(format!("bad class index `{idx}`")))?;
                    if idx != classes.len() + 1 {
                        return Err(bad(format!("class indices must run 1..m in order, found {idx}")));
                    }
                    let parameters = serde_json::from_str(params).map_err(|e| bad(format!("class {idx}: {e}")))?;
                    classes.push(ClassEntry {
                        name: name.to_string(),
                        parameters,
                    });
                }
                _ => return Err(bad(format!("unrecognized header line `{line}`"))),
            }
        }
        let body: String = text.lines().skip_while(|l| l.starts_with('#')).collect::<Vec<_>>().join("\n");
        let mut reader = csv::Reader::from_reader(body.as_bytes());
        let records = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ImageRecord>, _>>()
            .map_err(|e| bad(format!("bad record: {e}")))?;
        let manifest = Self {
            classes,
            levels: levels.ok_or_else(|| bad("missing levels".into()))?,
            seed: seed.ok_or_else(|| bad("missing seed".into()))?,
            records,
        };
        manifest.validate().map_err(|e| bad(e.to_string()))?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// A manifest together with the directory its image paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, manifest })
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn with_manifest(&self, manifest: DatasetManifest) -> Self {
        Self {
            root: self.root.clone(),
            manifest,
        }
    }
}
