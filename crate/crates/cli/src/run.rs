//! Run directories, config echoes and input hashes.

use std::collections::BTreeMap;
use std::io::{ErrorKind, Read};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `{root}/{timestamp}-{label}`, adding a counter when two runs
    /// start within the same second.
    pub fn create(root: &Path, label: &str) -> Result<RunDir> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        for n in 0.. {
            let name = match n {
                0 => format!("{stamp}-{label}"),
                _ => format!("{stamp}-{label}-{n}"),
            };
            let path = root.join(name);
            match std::fs::create_dir(&path) {
                Ok(()) => return Ok(RunDir { path }),
                Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e).with_context(|| format!("creating {}", path.display())),
            }
        }
        unreachable!()
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let path = self.file(name);
        write_json(&path, value)?;
        Ok(path)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputFile {
    pub fn hash(path: &Path) -> Result<InputFile> {
        let mut file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = file.read(&mut buf).with_context(|| format!("reading {}", path.display()))?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        let sha256 = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok(InputFile { path: path.to_path_buf(), sha256 })
    }
}

/// What a run needs to be repeated: the resolved configuration, the exact
/// inputs and the program that ran it.
#[derive(Debug, Serialize)]
pub struct ConfigEcho<'a> {
    pub program: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub args: Vec<String>,
    pub config: &'a RunConfig,
    pub inputs: BTreeMap<&'a str, InputFile>,
}

impl<'a> ConfigEcho<'a> {
    pub fn new(command: &'a str, config: &'a RunConfig) -> Self {
        ConfigEcho {
            program: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            args: std::env::args().collect(),
            config,
            inputs: BTreeMap::new(),
        }
    }

    pub fn input(mut self, role: &'a str, path: &Path) -> Result<Self> {
        self.inputs.insert(role, InputFile::hash(path)?);
        Ok(self)
    }
}
