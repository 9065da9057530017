//! Run directories: every output of a subcommand lives under one directory
//! next to a `run.json` manifest listing the files with their checksums.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hdnetbev::dataset::sha256_hex;
use hdnetbev::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RUN_MANIFEST: &str = "run.json";
pub const RUN_MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct RunManifest {
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    /// Resolved configuration or command parameters.
    pub config: Value,
    /// Input files and directories as given.
    pub inputs: BTreeMap<String, String>,
    /// Output file name relative to the run directory -> SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub struct RunDir {
    pub path: PathBuf,
    command: String,
    config: Value,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl RunDir {
    /// Creates the directory. Call only after validation succeeded.
    pub fn create(path: &Path, command: &str, config: Value) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        Ok(RunDir {
            path: path.to_path_buf(),
            command: command.into(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn input(&mut self, key: &str, path: &Path) {
        self.inputs.insert(key.into(), path.display().to_string());
    }

    /// Records a file already written under the run directory.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let p = self.file(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        self.outputs.insert(name.into(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.file(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.outputs.insert(name.into(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("value serializes");
        self.write(name, text.as_bytes())
    }

    pub fn finish(self) -> Result<RunManifest> {
        let m = RunManifest {
            version: RUN_MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let p = self.path.join(RUN_MANIFEST);
        fs::write(&p, serde_json::to_string_pretty(&m).expect("manifest serializes")).map_err(|e| Error::io(&p, e))?;
        Ok(m)
    }
}

pub fn load_run_manifest(dir: &Path) -> Result<RunManifest> {
    let p = dir.join(RUN_MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(&dir.path().join("r"), "test", Value::Null).unwrap();
        run.write("a.txt", b"hello").unwrap();
        fs::write(run.file("b.bin"), [1u8, 2]).unwrap();
        run.record("b.bin").unwrap();
        run.input("data", Path::new("/x"));
        run.finish().unwrap();
        let m = load_run_manifest(&dir.path().join("r")).unwrap();
        assert_eq!(m.outputs.len(), 2);
        assert_eq!(m.outputs["a.txt"], sha256_hex(b"hello"));
        assert_eq!(m.inputs["data"], "/x");
    }
}
