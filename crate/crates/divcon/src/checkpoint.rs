//! Parameter files with JSON sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use divcon_core::io::ParamStore;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save<M: Serialize>(path: &Path, params: &ParamStore<f64>, meta: &M) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    params.save(path).map_err(|e| Error::core_at(path, e))?;
    write_json(&sidecar(path), meta)
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<(ParamStore<f64>, M)> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let params = ParamStore::load(path).map_err(|e| Error::core_at(path, e))?;
    Ok((params, read_json(&sidecar(path))?))
}

pub fn write_json<M: Serialize + ?Sized>(path: &Path, value: &M) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<M: DeserializeOwned>(path: &Path) -> Result<M> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
