//! Structured-text inputs of the commands.

use med2t::train::ModelConfig;
use med2t::Error;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use std::fs;
use std::path::{Path, PathBuf};

/// Paths of one training pair. Relative paths are taken from the config's directory.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairPaths {
    pub mri: PathBuf,
    pub ct: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub data: Vec<PairPaths>,
    #[serde(default)]
    pub model: ModelConfig,
}

impl TrainRun {
    /// Resolves relative paths and checks that every file exists.
    pub fn resolve(&mut self, base: &Path) -> Result<(), Error> {
        if self.data.is_empty() {
            return Err(Error::Config("data: at least one pair is required".into()));
        }
        for (i, p) in self.data.iter_mut().enumerate() {
            for (key, path) in [("mri", &mut p.mri), ("ct", &mut p.ct)].into_iter().chain(p.mask.as_mut().map(|m| ("mask", m))) {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
                if !path.is_file() {
                    return Err(Error::Data(format!("data[{i}].{key}: no such file {}", path.display())));
                }
            }
        }
        Ok(())
    }
}

/// Reads a JSON file into `T`; errors name the offending key.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        Error::Config(format!("{}: key `{key}`: {inner}", path.display()))
    })
}

/// Parses `d,h,w`.
pub fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected d,h,w, got `{s}`"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("`{p}` is not a positive integer"))?;
        if *o == 0 {
            return Err("stride components must be positive".into());
        }
    }
    Ok(out)
}
