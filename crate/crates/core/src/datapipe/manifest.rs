use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Dev,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Dev => "dev",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "dev" => Ok(Split::Dev),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest line. Field order is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
    pub label: Label,
    pub individual_id: String,
    pub attack_type: String,
    pub split: Split,
    pub group_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SplitTally {
    pub train: usize,
    pub test: usize,
    pub dev: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkManifest {
    pub records: Vec<Record>,
    /// Directory that relative record paths are resolved against.
    pub root: PathBuf,
    pub modality: Option<String>,
    pub sensor: Option<String>,
}

impl BenchmarkManifest {
    pub fn new(records: Vec<Record>, root: impl Into<PathBuf>) -> Result<Self> {
        let manifest = Self {
            records,
            root: root.into(),
            modality: None,
            sensor: None,
        };
        manifest.check_integrity()?;
        Ok(manifest)
    }

    /// Unique paths, one label and one individual per group, at least one
    /// training or test record.
    pub fn check_integrity(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::ManifestIntegrity("manifest has no samples".into()));
        }
        let mut paths = HashSet::new();
        for r in &self.records {
            if !paths.insert(r.path.as_str()) {
                return Err(Error::ManifestIntegrity(format!("duplicate path {:?}", r.path)));
            }
        }
        let mut groups: HashMap<&str, &Record> = HashMap::new();
        for r in &self.records {
            match groups.get(r.group_id.as_str()) {
                Some(first) if first.label != r.label => {
                    return Err(Error::ManifestIntegrity(format!(
                        "group {:?} mixes labels ({} and {})",
                        r.group_id, first.label, r.label
                    )))
                }
                Some(first) if first.individual_id != r.individual_id => {
                    return Err(Error::ManifestIntegrity(format!(
                        "group {:?} mixes individuals ({:?} and {:?})",
                        r.group_id, first.individual_id, r.individual_id
                    )))
                }
                Some(_) => {}
                None => {
                    groups.insert(&r.group_id, r);
                }
            }
        }
        let tally = self.tally();
        if tally.train == 0 && tally.test == 0 {
            return Err(Error::ManifestIntegrity(
                "manifest has neither train nor test samples".into(),
            ));
        }
        Ok(())
    }

    pub fn tally(&self) -> SplitTally {
        let mut t = SplitTally::default();
        for r in &self.records {
            match r.split {
                Split::Train => t.train += 1,
                Split::Test => t.test += 1,
                Split::Dev => t.dev += 1,
            }
        }
        t
    }

    pub fn split(&self, split: Split) -> Vec<Record> {
        self.records.iter().filter(|r| r.split == split).cloned().collect()
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Sample counts per individual and attack type.
    pub fn composition(records: &[Record]) -> BTreeMap<&str, BTreeMap<&str, usize>> {
        let mut out: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
        for r in records {
            *out.entry(&r.individual_id)
                .or_default()
                .entry(&r.attack_type)
                .or_default() += 1;
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
        file.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::file(path, e))
    }
}

/// Parses JSON Lines text. Blank lines are skipped.
pub fn parse_manifest(text: &str, root: impl Into<PathBuf>) -> Result<BenchmarkManifest> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    BenchmarkManifest::new(records, root)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<BenchmarkManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, root)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(path: &str, label: &str, ind: &str, split: &str, group: &str) -> String {
        format!(
            r#"{{"path":"{path}","label":"{label}","individual_id":"{ind}","attack_type":"{}","split":"{split}","group_id":"{group}"}}"#,
            if label == "fake" { "print" } else { "none" }
        )
    }

    #[test]
    fn valid_manifest() {
        let text = [
            line("a.pgm", "real", "i1", "train", "g1"),
            line("b.pgm", "fake", "i1", "train", "g2"),
            line("c.pgm", "real", "i2", "test", "g3"),
            line("d.pgm", "fake", "i2", "dev", "g4"),
        ]
        .join("\n");
        let m = parse_manifest(&text, "/data").unwrap();
        assert_eq!(m.records.len(), 4);
        assert_eq!(
            m.tally(),
            SplitTally {
                train: 2,
                test: 1,
                dev: 1
            }
        );
        assert_eq!(m.resolve(&m.records[0]), PathBuf::from("/data/a.pgm"));
    }

    #[test]
    fn serialized_key_order() {
        let m = parse_manifest(&line("a.pgm", "real", "i1", "train", "g1"), ".").unwrap();
        assert_eq!(m.to_jsonl().unwrap().trim(), line("a.pgm", "real", "i1", "train", "g1"));
    }

    #[test]
    fn empty_is_integrity_error() {
        assert!(matches!(parse_manifest("", "."), Err(Error::ManifestIntegrity(_))));
        assert!(matches!(parse_manifest("\n\n", "."), Err(Error::ManifestIntegrity(_))));
    }

    #[test]
    fn duplicate_path_named() {
        let text = [
            line("a.pgm", "real", "i1", "train", "g1"),
            line("a.pgm", "fake", "i1", "train", "g2"),
        ]
        .join("\n");
        match parse_manifest(&text, ".") {
            Err(Error::ManifestIntegrity(msg)) => assert!(msg.contains("a.pgm")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mixed_group_rejected() {
        let text = [
            line("a.pgm", "real", "i1", "train", "g1"),
            line("b.pgm", "fake", "i1", "train", "g1"),
        ]
        .join("\n");
        assert!(matches!(parse_manifest(&text, "."), Err(Error::ManifestIntegrity(_))));
    }

    #[test]
    fn malformed_line_reports_number() {
        let text = format!("{}\n{{not json}}\n", line("a.pgm", "real", "i1", "train", "g1"));
        assert!(matches!(parse_manifest(&text, "."), Err(Error::Parse { line: 2, .. })));
    }
}
