//! Parameter checkpoints: one container file per tensor plus a text manifest.
//!
//! `manifest.txt` holds `name = file` lines for tensors and `@key = value`
//! lines for metadata such as layer dilations.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{GrfpError, Result};
use crate::io::{load_tensor_any, save_tensor, write_atomic, EXTENSION};
use crate::tensor::{Real, Tensor};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub meta: BTreeMap<String, String>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new() -> Self {
        Checkpoint {
            tensors: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| GrfpError::contract(format!("checkpoint lacks parameter {name}")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| GrfpError::contract(format!("checkpoint lacks metadata {key}")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GrfpError::io(dir, e))?;
        let mut manifest = String::new();
        for (key, value) in &self.meta {
            manifest.push_str(&format!("@{key} = {value}\n"));
        }
        for (name, t) in &self.tensors {
            let file = format!("{name}.{EXTENSION}");
            save_tensor(t, &dir.join(&file))?;
            manifest.push_str(&format!("{name} = {file}\n"));
        }
        write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| GrfpError::io(&path, e))?;
        let mut ck = Checkpoint::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                GrfpError::contract(format!("{}:{}: expected key = value", path.display(), lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key.strip_prefix('@') {
                Some(meta) => {
                    ck.meta.insert(meta.to_string(), value.to_string());
                }
                None => {
                    let t = load_tensor_any(&dir.join(value))?;
                    ck.tensors.insert(key.to_string(), t);
                }
            }
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::<f32>::new();
        ck.insert("W_xh", Tensor::from_fn(&[3, 3, 2, 2], |k| k as f32));
        ck.insert("lambda", Tensor::scalar(2.0));
        ck.meta.insert("reset_channels".into(), "1".into());
        ck.save(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(text.contains("lambda = lambda.GRFPTNSR"));
        assert_eq!(Checkpoint::<f32>::load(dir.path()).unwrap(), ck);
        assert!(ck.tensor("missing").is_err());
    }
}
