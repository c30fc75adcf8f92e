//! Output directory of one CLI run and its reproduction manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub struct RunDir {
    root: PathBuf,
    command: String,
    config: Option<String>,
    inputs: Vec<(PathBuf, String)>,
    artifacts: Vec<PathBuf>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("missing file: {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunDir {
    pub fn create(root: PathBuf, command: String) -> Result<Self> {
        fs::create_dir_all(&root).with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(Self {
            root,
            command,
            config: None,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn join(&self, name: impl AsRef<Path>) -> PathBuf {
        self.root.join(name)
    }

    /// Records the configuration text verbatim and writes it to `config.txt`.
    pub fn set_config(&mut self, text: &str) -> Result<()> {
        self.config = Some(text.to_string());
        self.write("config.txt", text.as_bytes())?;
        Ok(())
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.inputs.push((path.to_path_buf(), hash));
        Ok(())
    }

    pub fn write(&mut self, name: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        self.track(path.clone());
        Ok(path)
    }

    /// Registers a file written by someone else.
    pub fn track(&mut self, path: PathBuf) {
        if !self.artifacts.contains(&path) {
            self.artifacts.push(path);
        }
    }

    /// Writes `manifest.txt`: the command line, the configuration, input
    /// hashes and artifact hashes.
    pub fn finish(self) -> Result<PathBuf> {
        let mut out = format!("command: {}\n", self.command);
        out.push_str("config:\n");
        match &self.config {
            Some(text) => {
                out.push_str("--- begin config ---\n");
                out.push_str(text);
                if !text.is_empty() && !text.ends_with('\n') {
                    out.push('\n');
                }
                out.push_str("--- end config ---\n");
            }
            None => out.push_str("  (none)\n"),
        }
        out.push_str("inputs:\n");
        for (path, hash) in &self.inputs {
            out.push_str(&format!("  sha256:{hash}  {}\n", path.display()));
        }
        out.push_str("artifacts:\n");
        for path in &self.artifacts {
            let rel = path.strip_prefix(&self.root).unwrap_or(path);
            out.push_str(&format!("  sha256:{}  {}\n", sha256_file(path)?, rel.display()));
        }
        let path = self.root.join("manifest.txt");
        fs::write(&path, out)?;
        Ok(path)
    }
}
