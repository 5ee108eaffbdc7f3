//! Run manifests written next to every artifact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a 64 over the file contents.
pub fn file_digest(path: &Path) -> io::Result<u64> {
    let mut r = BufReader::new(File::open(path)?);
    let mut h = FNV_OFFSET;
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        for &b in &buf[..n] {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub fnv1a64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<InputDigest>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            config: BTreeMap::new(),
            inputs: Vec::new(),
            seed: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_secs: 0.0,
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.config
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable flag"));
        self
    }

    pub fn input(&mut self, path: &Path) -> io::Result<&mut Self> {
        let d = file_digest(path)?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            fnv1a64: format!("{d:016x}"),
        });
        Ok(self)
    }

    pub fn write_for(&self, artifact: &Path) -> io::Result<PathBuf> {
        let p = manifest_path(artifact);
        let f = File::create(&p)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(p)
    }
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}
