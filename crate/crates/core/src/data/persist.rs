use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, ImagePair, ImageSource, SplitRole, SyntheticSpec};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One line of a persisted dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub ground: String,
    pub aerial: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SyntheticSpec>,
}

/// Writes every pair as PNG files under `ground/` and `aerial/` plus a
/// line-delimited JSON manifest. Returns the manifest path.
pub fn save_dataset(dir: &Path, split: &DatasetSplit, spec: Option<&SyntheticSpec>) -> Result<std::path::PathBuf> {
    for sub in ["ground", "aerial"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = Vec::new();
    for pair in split.pairs() {
        let entry = ManifestEntry {
            id: pair.id.clone(),
            ground: format!("ground/{}.png", pair.id),
            aerial: format!("aerial/{}.png", pair.id),
            spec: spec.cloned(),
        };
        pair.ground.load()?.save_png(&dir.join(&entry.ground))?;
        pair.aerial.load()?.save_png(&dir.join(&entry.aerial))?;
        serde_json::to_writer(&mut manifest, &entry).expect("manifest entry serializes");
        manifest.push(b'\n');
    }
    let mut f = File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(&manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path, role: SplitRole) -> Result<DatasetSplit> {
    let path = dir.join(MANIFEST_FILE);
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Row {
            row: i + 1,
            message: e.to_string(),
        })?;
        for rel in [&entry.ground, &entry.aerial] {
            if !dir.join(rel).is_file() {
                return Err(Error::Row {
                    row: i + 1,
                    message: format!("missing file {}", dir.join(rel).display()),
                });
            }
        }
        pairs.push(ImagePair {
            id: entry.id,
            ground: ImageSource::File(dir.join(entry.ground)),
            aerial: ImageSource::File(dir.join(entry.aerial)),
        });
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("{} lists no image pairs", path.display())));
    }
    DatasetSplit::new(pairs, role)
}
