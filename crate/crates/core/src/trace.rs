//! Recorded single-image generations and their directory layout.
//!
//! ```text
//! <dir>/z_{t}.azt                 frame-1 latent at t, [1, c, h, w], t = T ..= 0
//! <dir>/kv_t{t}_b{block}_k.azt    spatial keys of block `block` at t = T ..= 1, [hw, c]
//! <dir>/kv_t{t}_b{block}_v.azt    spatial values
//! <dir>/manifest.json             see [`Manifest`]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::SpatialKv;
use crate::denoiser::Arch;
use crate::error::{Error, Result};
use crate::tensor::{encode, read_tensor, write_atomic, Tensor};

pub const MANIFEST: &str = "manifest.json";
pub const TRACE_FORMAT: &str = "anchorvid-trace/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceKind {
    /// Sampled from noise by the image model.
    Generated,
    /// Fabricated from a given latent by DDIM inversion; carries no K/V.
    Inverted,
}

/// Intermediate latents `z_T^1 ... z_0^1` of one image and the spatial K/V
/// seen at each denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub kind: TraceKind,
    pub prompt: String,
    pub seed: u64,
    pub model_seed: u64,
    pub arch: Arch,
    pub schedule_hash: String,
    /// `t -> z_t^1`.
    pub latents: BTreeMap<usize, Tensor>,
    /// `t -> per-block K/V`, encoder blocks first.
    pub kv_caches: BTreeMap<usize, Vec<SpatialKv>>,
}

impl GenerationTrace {
    pub fn steps(&self) -> usize {
        self.latents.keys().next_back().copied().unwrap_or(0)
    }

    pub fn latent(&self, t: usize) -> Result<&Tensor> {
        self.latents.get(&t).ok_or(Error::MissingLatent(t))
    }

    /// `[1, c, h, w]` of the stored latents.
    pub fn latent_dims(&self) -> Result<&[usize]> {
        Ok(self.latent(0)?.dims())
    }

    pub fn kv(&self, t: usize) -> Option<&[SpatialKv]> {
        self.kv_caches.get(&t).map(Vec::as_slice)
    }

    /// Every latent from `T` to `0` is present and shares one shape.
    pub fn validate(&self) -> Result<()> {
        let steps = self.steps();
        let dims = self.latent_dims()?.to_vec();
        for t in 0..=steps {
            let z = self.latent(t)?;
            if z.dims() != dims.as_slice() || dims[0] != 1 {
                return Err(Error::TraceMismatch(format!(
                    "latent z_{t} has dims {:?}, expected [1, ..] matching {dims:?}",
                    z.dims()
                )));
            }
        }
        if self.kind == TraceKind::Generated {
            for t in 1..=steps {
                match self.kv(t) {
                    Some(kv) if kv.len() == self.arch.total_blocks() => {}
                    _ => {
                        return Err(Error::TraceMismatch(format!(
                            "generated trace lacks complete K/V caches at t = {t}"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    fn files(&self) -> Vec<(String, &Tensor)> {
        let mut files = Vec::new();
        for (t, z) in self.latents.iter().rev() {
            files.push((format!("z_{t}.azt"), z));
        }
        for (t, kvs) in self.kv_caches.iter().rev() {
            for (b, kv) in kvs.iter().enumerate() {
                files.push((format!("kv_t{t}_b{b}_k.azt"), &kv.k));
                files.push((format!("kv_t{t}_b{b}_v.azt"), &kv.v));
            }
        }
        files
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: TRACE_FORMAT.to_string(),
            kind: self.kind,
            prompt: self.prompt.clone(),
            seed: self.seed,
            model_seed: self.model_seed,
            arch: self.arch,
            steps: self.steps(),
            schedule_hash: self.schedule_hash.clone(),
            files: self
                .files()
                .into_iter()
                .map(|(name, t)| FileEntry {
                    name,
                    dims: t.dims().to_vec(),
                    sha256: hex::encode(Sha256::digest(encode(t))),
                })
                .collect(),
        }
    }

    /// Writes every tensor and then the manifest. Returns the manifest checksum.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<String> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in self.files() {
            write_atomic(&dir.join(name), &encode(t))?;
        }
        let bytes = self.manifest().to_bytes();
        write_atomic(&dir.join(MANIFEST), &bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Loads a trace and verifies every file against the manifest.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = Manifest::read(dir)?;
        if manifest.format != TRACE_FORMAT {
            return Err(Error::TraceMismatch(format!(
                "unknown trace format {:?}",
                manifest.format
            )));
        }
        let mut latents = BTreeMap::new();
        let mut kv_parts: BTreeMap<(usize, usize), (Option<Tensor>, Option<Tensor>)> =
            BTreeMap::new();
        for entry in &manifest.files {
            let path = dir.join(&entry.name);
            let t = read_tensor(&path)?;
            if t.dims() != entry.dims.as_slice() {
                return Err(Error::TraceMismatch(format!(
                    "{} has dims {:?}, manifest says {:?}",
                    entry.name,
                    t.dims(),
                    entry.dims
                )));
            }
            if hex::encode(Sha256::digest(encode(&t))) != entry.sha256 {
                return Err(Error::TraceMismatch(format!(
                    "{} does not match its manifest checksum",
                    entry.name
                )));
            }
            match parse_name(&entry.name) {
                Some(FileName::Latent(step)) => {
                    latents.insert(step, t);
                }
                Some(FileName::Kv {
                    t: step,
                    block,
                    key,
                }) => {
                    let slot = kv_parts.entry((step, block)).or_default();
                    if key {
                        slot.0 = Some(t);
                    } else {
                        slot.1 = Some(t);
                    }
                }
                None => {
                    return Err(Error::TraceMismatch(format!(
                        "unexpected file {} in manifest",
                        entry.name
                    )))
                }
            }
        }
        let mut kv_caches: BTreeMap<usize, Vec<SpatialKv>> = BTreeMap::new();
        for ((step, block), parts) in kv_parts {
            let (Some(k), Some(v)) = parts else {
                return Err(Error::TraceMismatch(format!(
                    "K/V pair for t = {step}, block {block} is incomplete"
                )));
            };
            let list = kv_caches.entry(step).or_default();
            if list.len() != block {
                return Err(Error::TraceMismatch(format!(
                    "K/V blocks at t = {step} are not contiguous"
                )));
            }
            list.push(SpatialKv { k, v });
        }
        let trace = Self {
            kind: manifest.kind,
            prompt: manifest.prompt,
            seed: manifest.seed,
            model_seed: manifest.model_seed,
            arch: manifest.arch,
            schedule_hash: manifest.schedule_hash,
            latents,
            kv_caches,
        };
        if trace.steps() != manifest.steps {
            return Err(Error::TraceMismatch(format!(
                "manifest declares {} steps, files cover {}",
                manifest.steps,
                trace.steps()
            )));
        }
        trace.validate()?;
        Ok(trace)
    }
}

enum FileName {
    Latent(usize),
    Kv { t: usize, block: usize, key: bool },
}

fn parse_name(name: &str) -> Option<FileName> {
    let stem = name.strip_suffix(".azt")?;
    if let Some(t) = stem.strip_prefix("z_") {
        return t.parse().ok().map(FileName::Latent);
    }
    let rest = stem.strip_prefix("kv_t")?;
    let (t, rest) = rest.split_once("_b")?;
    let (block, which) = rest.split_once('_')?;
    let key = match which {
        "k" => true,
        "v" => false,
        _ => return None,
    };
    Some(FileName::Kv {
        t: t.parse().ok()?,
        block: block.parse().ok()?,
        key,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub sha256: String,
}

/// `manifest.json`. Keys serialize in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub kind: TraceKind,
    pub prompt: String,
    pub seed: u64,
    pub model_seed: u64,
    pub arch: Arch,
    pub steps: usize,
    pub schedule_hash: String,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|source| Error::Json { path, source })
    }
}

/// Hex SHA-256 of a trace directory's `manifest.json`.
pub fn manifest_checksum(dir: impl AsRef<Path>) -> Result<String> {
    let path = dir.as_ref().join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{randn, SeededRng};

    fn toy_trace(kind: TraceKind) -> GenerationTrace {
        let arch = Arch {
            encoder_blocks: 1,
            decoder_blocks: 1,
            channels: 2,
            cond_dim: 2,
            max_frames: 4,
        };
        let mut rng = SeededRng::new(1);
        let latents = (0..=3)
            .map(|t| (t, randn(&mut rng, vec![1, 2, 2, 2]).unwrap()))
            .collect();
        let kv_caches = if kind == TraceKind::Generated {
            (1..=3)
                .map(|t| {
                    let kv = (0..2)
                        .map(|_| SpatialKv {
                            k: randn(&mut rng, vec![4, 2]).unwrap(),
                            v: randn(&mut rng, vec![4, 2]).unwrap(),
                        })
                        .collect();
                    (t, kv)
                })
                .collect()
        } else {
            BTreeMap::new()
        };
        GenerationTrace {
            kind,
            prompt: "p".into(),
            seed: 4,
            model_seed: 5,
            arch,
            schedule_hash: "abc".into(),
            latents,
            kv_caches,
        }
    }

    #[test]
    fn save_load_round_trip() {
        for kind in [TraceKind::Generated, TraceKind::Inverted] {
            let dir = tempfile::tempdir().unwrap();
            let trace = toy_trace(kind);
            let sum = trace.save(dir.path()).unwrap();
            assert_eq!(sum, manifest_checksum(dir.path()).unwrap());
            let back = GenerationTrace::load(dir.path()).unwrap();
            assert_eq!(back, trace);
            let n = std::fs::read_dir(dir.path()).unwrap().count();
            let expected = 4 + if kind == TraceKind::Generated { 12 } else { 0 } + 1;
            assert_eq!(n, expected);
        }
    }

    #[test]
    fn tampered_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        toy_trace(TraceKind::Generated).save(dir.path()).unwrap();
        let z = Tensor::zeros(vec![1, 2, 2, 2]).unwrap();
        crate::tensor::write_tensor(dir.path().join("z_2.azt"), &z).unwrap();
        assert!(matches!(
            GenerationTrace::load(dir.path()),
            Err(Error::TraceMismatch(_))
        ));
    }

    #[test]
    fn missing_latent_is_reported() {
        let mut trace = toy_trace(TraceKind::Inverted);
        trace.latents.remove(&1);
        assert!(matches!(trace.validate(), Err(Error::MissingLatent(1))));
    }

    #[test]
    fn file_names_parse() {
        assert!(matches!(parse_name("z_12.azt"), Some(FileName::Latent(12))));
        assert!(matches!(
            parse_name("kv_t3_b1_v.azt"),
            Some(FileName::Kv {
                t: 3,
                block: 1,
                key: false
            })
        ));
        assert!(parse_name("kv_t3_b1_q.azt").is_none());
        assert!(parse_name("manifest.json").is_none());
    }
}
