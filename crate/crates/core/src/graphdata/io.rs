use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::GraphInstance;
use crate::datagen::{DatasetSpec, Split};
use crate::error::{DiscError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One graph per line. Blank lines are ignored.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<GraphInstance>> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let g: GraphInstance = serde_json::from_str(&line).map_err(|e| DiscError::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        g.validate().map_err(|e| DiscError::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        out.push(g);
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(mut w: W, graphs: &[GraphInstance]) -> Result<()> {
    for g in graphs {
        serde_json::to_writer(&mut w, g)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, graphs: &[GraphInstance]) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), graphs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub splits: BTreeMap<Split, SplitEntry>,
    pub spec: DatasetSpec,
    pub spec_hash: String,
    pub seed: u64,
}

impl SplitManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.as_ref().join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn split_path(&self, dir: impl AsRef<Path>, split: Split) -> Result<PathBuf> {
        let entry = self.splits.get(&split).ok_or_else(|| {
            DiscError::invalid("manifest", format!("no `{}` split", split.name()))
        })?;
        Ok(dir.as_ref().join(&entry.path))
    }

    pub fn load_split(&self, dir: impl AsRef<Path>, split: Split) -> Result<Vec<GraphInstance>> {
        load_dataset(self.split_path(dir, split)?)
    }

    /// Every referenced file exists and holds the declared number of records.
    pub fn verify(&self, dir: impl AsRef<Path>) -> Result<()> {
        for (split, entry) in &self.splits {
            let path = dir.as_ref().join(&entry.path);
            let file = File::open(&path).map_err(|e| {
                DiscError::invalid(
                    format!("manifest.{}", split.name()),
                    format!("{}: {e}", path.display()),
                )
            })?;
            let lines = BufReader::new(file)
                .lines()
                .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
                .count();
            if lines != entry.size {
                return Err(DiscError::invalid(
                    format!("manifest.{}", split.name()),
                    format!("declares {} graphs, file has {lines}", entry.size),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::graph;
    use super::super::EdgeTag;
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut a = graph("a", 4, &[(0, 1), (2, 3), (1, 3)], 2);
        a.x[3] = 0.1 + 0.2;
        a.x[7] = 1.0 / 3.0;
        a.edge_tag = Some(vec![EdgeTag::Causal, EdgeTag::Bias, EdgeTag::Mixed]);
        a.edge_weight = Some(vec![0.25, 1.0, 0.123456789012345678]);
        a.biased = Some(true);
        let b = graph("b", 2, &[(0, 1)], 1);
        save_dataset(&path, &[a.clone(), b.clone()]).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded, vec![a, b]);
        assert_eq!(loaded[0].x[3].to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn reversed_duplicate_edge_is_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let ok = serde_json::to_string(&graph("ok", 2, &[(0, 1)], 0)).unwrap();
        let bad = r#"{"id":"bad","num_nodes":3,"x":[0,0,0,0,0, 0,0,0,0,0, 0,0,0,0,0],"edges":[[0,1],[1,0]],"y":0,"bias_label":0}"#;
        std::fs::write(&path, format!("{ok}\n{bad}\n")).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("edges"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\": \n").unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(matches!(err, DiscError::Parse { line: 1, .. }));
    }
}
