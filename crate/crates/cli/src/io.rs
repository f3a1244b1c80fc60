use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};

use doge_core::model::{parse_lp, IlpInstance};

/// An error caused by the user's input rather than by the program.
#[derive(Debug)]
pub struct BadInput(String);

impl BadInput {
    pub fn new(msg: impl Into<String>) -> BadInput {
        BadInput(msg.into())
    }
}

impl fmt::Display for BadInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadInput {}

/// Reads a `.lp` or JSON instance.
pub fn load_instance(path: &Path) -> Result<IlpInstance> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BadInput::new(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "lp") {
        parse_lp(&text)
    } else {
        IlpInstance::from_json(&text)
    };
    parsed.map_err(|e| BadInput::new(format!("{}: {e}", path.display())).into())
}

/// Every `.json` and `.lp` instance in `dir` except the manifest, by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, IlpInstance)>> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| BadInput::new(format!("{}: {e}", dir.display())))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry
            .with_context(|| format!("listing {}", dir.display()))?
            .path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let is_manifest = path.file_name().is_some_and(|n| n == "manifest.json");
        if path.is_file() && (ext == "json" || ext == "lp") && !is_manifest {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("instance")
                .to_string();
            Ok((name, load_instance(&p)?))
        })
        .collect()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
