use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Output files collected in memory and written together, so a failed run
/// leaves nothing behind and every file appears whole.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: impl Into<String>, content: impl Into<Vec<u8>>) {
        self.files.push((name.into(), content.into()));
    }

    pub fn names(&self) -> Vec<String> {
        self.files.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Writes each file to a temporary name in `dir`, then renames it into
    /// place.
    pub fn commit(self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut staged = Vec::with_capacity(self.files.len());
        for (name, content) in &self.files {
            let target = dir.join(name);
            let parent = target.parent().unwrap_or(dir);
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            let mut tmp = tempfile::NamedTempFile::new_in(parent)
                .with_context(|| format!("staging {}", target.display()))?;
            tmp.write_all(content)
                .with_context(|| format!("writing {}", target.display()))?;
            staged.push((tmp, target));
        }
        let mut written = Vec::with_capacity(staged.len());
        for (tmp, target) in staged {
            tmp.persist(&target)
                .with_context(|| format!("moving output into {}", target.display()))?;
            written.push(target);
        }
        Ok(written)
    }
}

/// Provenance of one run. Holds nothing that varies between identical
/// reruns (no timestamps, no output paths), so reruns are byte-identical.
#[derive(Debug, Serialize)]
pub struct Manifest<C: Serialize> {
    pub command: &'static str,
    pub version: &'static str,
    pub inputs: Vec<String>,
    pub seed: u64,
    pub config: C,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knots: Option<Vec<f64>>,
    pub rhat: Vec<NamedValue>,
    pub max_rhat: Option<f64>,
    pub acceptance: Vec<Vec<NamedValue>>,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

pub fn named(v: &[(String, f64)]) -> Vec<NamedValue> {
    v.iter()
        .map(|(name, value)| NamedValue {
            name: name.clone(),
            value: *value,
        })
        .collect()
}

impl<C: Serialize> Manifest<C> {
    pub fn new(command: &'static str, inputs: Vec<String>, seed: u64, config: C) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            inputs,
            seed,
            config,
            knots: None,
            rhat: Vec::new(),
            max_rhat: None,
            acceptance: Vec::new(),
            warnings: Vec::new(),
            note: None,
            outputs: Vec::new(),
        }
    }

    /// Adds `manifest.json` (listing every other output) and commits.
    pub fn finish(mut self, mut outputs: Outputs, dir: &Path) -> Result<Vec<PathBuf>> {
        self.outputs = outputs.names();
        self.outputs.push("manifest.json".into());
        let mut json = serde_json::to_string_pretty(&self).context("serializing manifest")?;
        json.push('\n');
        outputs.add("manifest.json", json);
        outputs.commit(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_writes_whole_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut o = Outputs::default();
        o.add("a.csv", "x\n1\n");
        o.add("sub/b.csv", "y\n");
        let written = o.commit(dir.path()).unwrap();
        assert_eq!(written.len(), 2);
        assert_eq!(std::fs::read_to_string(dir.path().join("a.csv")).unwrap(), "x\n1\n");
        assert_eq!(std::fs::read_to_string(dir.path().join("sub/b.csv")).unwrap(), "y\n");
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 2);
    }
}
