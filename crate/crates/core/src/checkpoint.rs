//! Training checkpoints: parameters, optimizer moments, epoch counter and
//! RNG position in one named-tensor archive.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::training::Adam;

pub const LATEST_FILE: &str = "latest";

pub fn checkpoint_file_name(epoch: usize) -> String {
    format!("ckpt_{epoch:04}.bin")
}

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub model: Model,
    pub optimizer: Adam,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Generator state positioned just after the last completed epoch.
    pub rng: ChaCha8Rng,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.model == other.model
            && self.optimizer == other.optimizer
            && self.epoch == other.epoch
            && RngState::of(&self.rng) == RngState::of(&other.rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    /// Decimal, since JSON numbers cannot hold a `u128` exactly.
    word_pos: String,
}

impl RngState {
    fn of(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: usize,
    adam_step: u64,
    rng: RngState,
    config: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut store = ParamStore::new();
        for (prefix, src) in [
            (PARAM, &self.model.params),
            (MOMENT1, &self.optimizer.m),
            (MOMENT2, &self.optimizer.v),
        ] {
            for (name, t) in src.iter() {
                store.insert(format!("{prefix}{name}"), t.clone());
            }
        }
        let header = Header {
            epoch: self.epoch,
            adam_step: self.optimizer.t,
            rng: RngState::of(&self.rng),
            config: self.config.to_toml(),
        };
        let meta = serde_json::to_string(&header).expect("header serializes");
        store.to_archive_bytes(Some(&meta))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, meta) = ParamStore::from_archive_bytes(bytes)?;
        let meta = meta.ok_or_else(|| Error::Checkpoint("archive has no checkpoint header".into()))?;
        let header: Header =
            serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let config = Config::parse(&header.config)?;
        let (mut params, mut m, mut v) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
        for (name, t) in store.iter() {
            let (dst, rest) = if let Some(rest) = name.strip_prefix(PARAM) {
                (&mut params, rest)
            } else if let Some(rest) = name.strip_prefix(MOMENT1) {
                (&mut m, rest)
            } else if let Some(rest) = name.strip_prefix(MOMENT2) {
                (&mut v, rest)
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
            };
            dst.insert(rest, t.clone());
        }
        let model = Model::new(config.model.clone(), params)?;
        let optimizer = Adam::from_parts(&config.train, m, v, header.adam_step, &model.params)?;
        Ok(Self { config, model, optimizer, epoch: header.epoch, rng: header.rng.restore()? })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Writes `ckpt_{epoch}.bin` into `dir` and points `latest` at it.
    pub fn save_in(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name = checkpoint_file_name(self.epoch);
        let path = dir.join(&name);
        self.save(&path)?;
        let marker = dir.join(LATEST_FILE);
        std::fs::write(&marker, format!("{name}\n")).map_err(|e| Error::io(&marker, e))?;
        Ok(path)
    }

    /// Resolves a checkpoint file, or the `latest` marker of a directory.
    pub fn resolve(path: &Path) -> Result<PathBuf> {
        if !path.is_dir() {
            return Ok(path.to_path_buf());
        }
        let marker = path.join(LATEST_FILE);
        let name = std::fs::read_to_string(&marker).map_err(|e| Error::io(&marker, e))?;
        Ok(path.join(name.trim()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let config = Config::preset("toy").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Model::init_with_rng(config.model.clone(), &mut rng).unwrap();
        let _: u64 = rng.random();
        let optimizer = Adam::new(&config.train, &model.params);
        Checkpoint { config, model, optimizer, epoch: 3, rng }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rng_position_survives() {
        let ck = sample();
        let mut a = ck.rng.clone();
        let mut b = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap().rng;
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn latest_marker_resolves() {
        let dir = tempfile::tempdir().unwrap();
        let path = sample().save_in(dir.path()).unwrap();
        assert_eq!(Checkpoint::resolve(dir.path()).unwrap(), path);
        assert!(path.ends_with("ckpt_0003.bin"));
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(matches!(Checkpoint::from_bytes(b"not an archive"), Err(Error::Checkpoint(_))));
    }
}
