//! Stage sidecars: `stage.manifest` in each stage directory records the
//! stage's config hash, its upstream hashes and a sha256 per artifact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use guide_core::framing::sha256_hex;
use guide_core::{Error, Result};

pub const MANIFEST_FILE: &str = "stage.manifest";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub upstream: BTreeMap<String, String>,
    /// File name to sha256.
    pub files: BTreeMap<String, String>,
    /// Free-form facts, e.g. the base model checksum.
    pub facts: BTreeMap<String, String>,
}

impl StageManifest {
    pub fn new(stage: &str, config_hash: &str) -> Self {
        StageManifest { stage: stage.into(), config_hash: config_hash.into(), ..Default::default() }
    }

    pub fn upstream(mut self, stage: &str, hash: &str) -> Self {
        self.upstream.insert(stage.into(), hash.into());
        self
    }

    pub fn fact(mut self, key: &str, value: impl ToString) -> Self {
        self.facts.insert(key.into(), value.to_string());
        self
    }

    /// Hashes `names` inside `dir` and writes the manifest last, so a stage
    /// interrupted half-way never looks complete.
    pub fn seal(mut self, dir: &Path, names: &[&str]) -> Result<Self> {
        for name in names {
            let bytes = fs::read(dir.join(name))?;
            self.files.insert(name.to_string(), sha256_hex(&bytes));
        }
        fs::write(dir.join(MANIFEST_FILE), self.render())?;
        Ok(self)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "stage = {}", self.stage).unwrap();
        writeln!(out, "config_hash = {}", self.config_hash).unwrap();
        for (k, v) in &self.upstream {
            writeln!(out, "upstream.{k} = {v}").unwrap();
        }
        for (k, v) in &self.files {
            writeln!(out, "sha256.{k} = {v}").unwrap();
        }
        for (k, v) in &self.facts {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = StageManifest::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("bad manifest line `{line}`")))?;
            let v = v.to_string();
            if let Some(s) = k.strip_prefix("upstream.") {
                m.upstream.insert(s.into(), v);
            } else if let Some(f) = k.strip_prefix("sha256.") {
                m.files.insert(f.into(), v);
            } else if k == "stage" {
                m.stage = v;
            } else if k == "config_hash" {
                m.config_hash = v;
            } else {
                m.facts.insert(k.into(), v);
            }
        }
        if m.stage.is_empty() || m.config_hash.is_empty() {
            return Err(Error::Format("manifest lacks stage or config_hash".into()));
        }
        Ok(m)
    }
}

/// Output directory of one stage.
#[derive(Clone, Debug)]
pub struct StageDir {
    pub stage: &'static str,
    pub dir: PathBuf,
}

impl StageDir {
    pub fn new(root: &Path, stage: &'static str) -> Self {
        StageDir { stage, dir: root.join(stage) }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Removes stale contents so a failed rerun cannot leave a valid-looking
    /// mixture behind.
    pub fn reset(&self) -> Result<()> {
        if self.dir.exists() {
            fs::remove_dir_all(&self.dir)?;
        }
        fs::create_dir_all(&self.dir)?;
        Ok(())
    }

    pub fn manifest(&self) -> Result<StageManifest> {
        let path = self.path(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|_| {
            Error::Data(format!("{} has no {} output; run `{}` first", self.dir.display(), self.stage, command(self.stage)))
        })?;
        StageManifest::parse(&text)
    }

    /// Checks the manifest hash and every artifact checksum.
    pub fn verify(&self, expected_hash: &str) -> Result<StageManifest> {
        let m = self.manifest()?;
        if m.stage != self.stage {
            return Err(Error::Checksum(format!("{} holds a `{}` manifest", self.dir.display(), m.stage)));
        }
        if m.config_hash != expected_hash {
            return Err(Error::Checksum(format!(
                "{} output was produced under a different configuration; rerun `{}`",
                self.stage,
                command(self.stage)
            )));
        }
        for (name, sha) in &m.files {
            let bytes = fs::read(self.path(name)).map_err(|e| Error::Data(format!("{}: {e}", self.path(name).display())))?;
            if &sha256_hex(&bytes) != sha {
                return Err(Error::Checksum(format!("{} was modified after the {} stage wrote it", self.path(name).display(), self.stage)));
            }
        }
        Ok(m)
    }

    /// True when a verified output already exists.
    pub fn is_fresh(&self, expected_hash: &str) -> bool {
        self.verify(expected_hash).is_ok()
    }
}

fn command(stage: &str) -> &str {
    match stage {
        "base" => "train-base",
        "curriculum" => "build-curriculum",
        "meta" => "train-meta",
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut m = StageManifest::new("base", "abc").upstream("data", "d1").fact("model_checksum", "ff");
        m.files.insert("model.gnn".into(), "00".into());
        assert_eq!(StageManifest::parse(&m.render()).unwrap(), m);
    }

    #[test]
    fn verify_detects_tampering() {
        let tmp = tempfile::tempdir().unwrap();
        let sd = StageDir::new(tmp.path(), "base");
        sd.reset().unwrap();
        fs::write(sd.path("model.gnn"), b"weights").unwrap();
        StageManifest::new("base", "h1").seal(&sd.dir, &["model.gnn"]).unwrap();
        sd.verify("h1").unwrap();
        assert_eq!(sd.verify("h2").unwrap_err().exit_code(), 3);
        fs::write(sd.path("model.gnn"), b"weightz").unwrap();
        assert!(matches!(sd.verify("h1"), Err(Error::Checksum(_))));
        let other = StageDir::new(tmp.path(), "meta");
        assert!(matches!(other.verify("h1"), Err(Error::Data(_))));
    }
}
