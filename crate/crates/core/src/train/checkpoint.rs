//! Parameter checkpoints: a directory of TNSR files plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{read_tnsr, write_tnsr};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "unetmm-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub step: usize,
    pub model: ModelConfig,
    pub params: Vec<ManifestEntry>,
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}

pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, params: &ParamSet, step: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(params.len());
    for (_, p) in params.iter() {
        let file = format!("{}.tnsr", p.name);
        write_tnsr(&dir.join(&file), &p.tensor)?;
        entries.push(ManifestEntry { name: p.name.clone(), shape: p.tensor.shape().dims(), file });
    }
    let manifest = Manifest { format: FORMAT.into(), step, model: cfg.clone(), params: entries };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    let path = manifest_path(dir);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.clone(), msg: e.to_string() })?;
    if m.format != FORMAT {
        return Err(Error::Format { path, msg: format!("unsupported checkpoint format `{}`", m.format) });
    }
    Ok(m)
}

/// Loads the checkpoint in `dir` into `params`, which must have exactly the
/// manifest's names and shapes.
pub fn load_checkpoint(dir: &Path, params: &mut ParamSet) -> Result<Manifest> {
    let m = read_manifest(dir)?;
    let expected: Vec<(String, [usize; 4])> =
        params.iter().map(|(_, p)| (p.name.clone(), p.tensor.shape().dims())).collect();
    let found: Vec<(String, [usize; 4])> = m.params.iter().map(|e| (e.name.clone(), e.shape)).collect();
    if expected != found {
        return Err(Error::config(format!(
            "checkpoint does not match the model\n{}",
            manifest_diff(&expected, &found)
        )));
    }
    for e in &m.params {
        let t = read_tnsr(&dir.join(&e.file))?;
        if t.shape().dims() != e.shape {
            return Err(Error::Format {
                path: dir.join(&e.file),
                msg: format!("tensor shape {} does not match manifest {:?}", t.shape(), e.shape),
            });
        }
        let id = params.id_of(&e.name).expect("names compared above");
        params.set_value(id, t)?;
    }
    Ok(m)
}

/// Lines prefixed `- expected` / `+ found` for every mismatching entry.
pub fn manifest_diff(expected: &[(String, [usize; 4])], found: &[(String, [usize; 4])]) -> String {
    let mut out = Vec::new();
    for e in expected {
        if !found.contains(e) {
            out.push(format!("- expected {} {:?}", e.0, e.1));
        }
    }
    for f in found {
        if !expected.contains(f) {
            out.push(format!("+ found    {} {:?}", f.0, f.1));
        }
    }
    if out.is_empty() {
        out.push("parameter order differs".into());
    }
    out.join("\n")
}
