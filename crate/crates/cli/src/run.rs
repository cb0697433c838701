//! Output directories with an artifact list and a `.partial` marker.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};

pub const MANIFEST: &str = "manifest.json";
pub const PARTIAL: &str = ".partial";

/// Tracks the stage and the files written into one output directory.
///
/// The `.partial` marker exists from creation until [`RunDir::finish`]
/// writes the manifest, so an interrupted or failed run is always marked.
pub struct RunDir {
    dir: PathBuf,
    stage: &'static str,
    artifacts: Vec<(String, Vec<String>)>,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        let _ = fs::remove_file(dir.join(MANIFEST));
        let run = RunDir {
            dir: dir.to_path_buf(),
            stage: "start",
            artifacts: Vec::new(),
        };
        run.write_marker(None)
            .with_context(|| format!("output directory {} is not writable", dir.display()))?;
        Ok(run)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn stage(&mut self, name: &'static str) -> Result<()> {
        log::info!("stage {name}");
        self.stage = name;
        self.write_marker(None)
    }

    pub fn current_stage(&self) -> &'static str {
        self.stage
    }

    /// Register files of one artifact, by absolute or directory-relative path.
    pub fn record(&mut self, kind: &str, paths: &[PathBuf]) {
        let rel = paths
            .iter()
            .map(|p| p.strip_prefix(&self.dir).unwrap_or(p).display().to_string())
            .collect();
        self.artifacts.push((kind.to_string(), rel));
    }

    pub fn write_text(&mut self, kind: &str, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.record(kind, &[path]);
        Ok(())
    }

    pub fn artifacts_json(&self) -> Value {
        Value::Array(
            self.artifacts
                .iter()
                .map(|(kind, paths)| json!({ "kind": kind, "paths": paths }))
                .collect(),
        )
    }

    fn write_marker(&self, error: Option<&str>) -> Result<()> {
        let marker = json!({
            "stage": self.stage,
            "error": error,
            "artifacts": self.artifacts_json(),
        });
        fs::write(self.dir.join(PARTIAL), serde_json::to_string_pretty(&marker)?)?;
        Ok(())
    }

    /// Record the failure in the marker; written artifacts stay in place.
    pub fn fail(&self, error: &anyhow::Error) {
        if let Err(e) = self.write_marker(Some(&format!("{error:#}"))) {
            log::error!("could not update {}: {e:#}", PARTIAL);
        }
    }

    /// Write the manifest with the artifact list added and drop the marker.
    pub fn finish(self, mut manifest: Value) -> Result<PathBuf> {
        manifest["artifacts"] = self.artifacts_json();
        let path = self.path(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        fs::remove_file(self.dir.join(PARTIAL))?;
        Ok(path)
    }
}

/// Run `body`, naming the failing stage in the error and in the marker.
pub fn staged<F>(mut run: RunDir, body: F) -> Result<PathBuf>
where
    F: FnOnce(&mut RunDir) -> Result<Value>,
{
    match body(&mut run) {
        Ok(manifest) => run.finish(manifest),
        Err(e) => {
            let e = e.context(format!("stage {} failed", run.current_stage()));
            run.fail(&e);
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marker_lives_until_finish() {
        let tmp = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(tmp.path()).unwrap();
        assert!(tmp.path().join(PARTIAL).exists());
        run.write_text("note", "a.txt", "x").unwrap();
        let m = run.finish(json!({"kind": "test"})).unwrap();
        assert!(!tmp.path().join(PARTIAL).exists());
        let v: Value = serde_json::from_str(&fs::read_to_string(m).unwrap()).unwrap();
        assert_eq!(v["artifacts"][0]["paths"][0], "a.txt");
    }

    #[test]
    fn failure_names_the_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let run = RunDir::create(tmp.path()).unwrap();
        let err = staged(run, |r| {
            r.stage("affine")?;
            anyhow::bail!("boom")
        })
        .unwrap_err();
        assert!(format!("{err:#}").contains("stage affine failed"));
        let marker: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join(PARTIAL)).unwrap()).unwrap();
        assert_eq!(marker["stage"], "affine");
        assert!(marker["error"].as_str().unwrap().contains("boom"));
    }
}
