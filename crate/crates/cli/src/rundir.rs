use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use tttlab_core::config::ExperimentConfig;

use crate::{CliError, CliResult, Common};

/// A resolved config and the directory its artifacts go to.
pub struct RunDir {
    pub config: ExperimentConfig,
    pub root: PathBuf,
    verbatim: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.display().to_string()))
    }
}

impl RunDir {
    pub fn open(c: &Common) -> CliResult<Self> {
        let (config, verbatim) = match &c.config {
            Some(p) => {
                require(p)?;
                let text = fs::read_to_string(p)?;
                (ExperimentConfig::parse(&text, &p.display().to_string(), &c.set)?, text)
            }
            None => {
                let text = ExperimentConfig::default()
                    .to_json_pretty()
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                (ExperimentConfig::parse(&text, "<defaults>", &c.set)?, text + "\n")
            }
        };
        let root = c.out.clone().unwrap_or_else(|| config.output_dir.clone());
        Ok(Self { config, root, verbatim })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Creates `rel` under the run directory and returns its path.
    pub fn dir(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p)?;
        Ok(p)
    }

    /// Records the config file as given, the resolved config after
    /// overrides, and the hash of the resolved config.
    pub fn record_config(&self) -> CliResult<()> {
        fs::create_dir_all(&self.root)?;
        let resolved = self.config.to_json_pretty().map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
        fs::write(self.path("config.json"), &self.verbatim)?;
        fs::write(self.path("config.resolved.json"), &resolved)?;
        fs::write(
            self.path("config.sha256"),
            format!("{}  config.resolved.json\n", sha256_hex(resolved.as_bytes())),
        )?;
        Ok(())
    }

    pub fn seeds(&self, only: Option<u64>) -> Vec<u64> {
        match only {
            Some(s) => vec![s],
            None => self.config.seeds.clone(),
        }
    }

    pub fn model_path(&self, seed: u64) -> PathBuf {
        self.path(&format!("models/seed{seed}.ckpt"))
    }
}
