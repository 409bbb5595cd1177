//! Fingerprint-keyed files for corrector sets and reference solutions.
//!
//! Entries are never trusted by name alone: a corrector file counts as a hit
//! only when its header matches the requested meshes, `k`, linearization and
//! fingerprint. Unreadable entries are reported and treated as misses.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::coefficient::CombinedCoefficient;
use crate::corrector::{assemble_corrector_set, CorrectorHeader, CorrectorSet, LinearizationData};
use crate::error::Result;
use crate::fem::NodalVector;
use crate::interpolation::TransferOperators;
use crate::solver::{read_solution, write_solution, IterationOptions};

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Lookup<T> {
    Hit(T),
    Miss,
}

#[derive(Debug, Clone)]
pub struct Cache {
    root: PathBuf,
}

/// One file found by [`Cache::entries`].
#[derive(Debug, Clone)]
pub struct Entry {
    pub path: PathBuf,
    pub bytes: u64,
    /// Header of a corrector file; `None` for solutions and unreadable files.
    pub header: Option<CorrectorHeader>,
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corrector_path(&self, pair_coarse: usize, pair_fine: usize, k: usize, lin: &LinearizationData) -> PathBuf {
        self.root.join("correctors").join(format!(
            "H{pair_coarse}_h{pair_fine}_k{k}_{}_{}.lodc",
            lin.kind.name(),
            hex(&lin.fingerprint)
        ))
    }

    pub fn load_correctors(&self, transfer: &TransferOperators, k: usize, lin: &LinearizationData) -> Lookup<CorrectorSet> {
        let pair = transfer.pair();
        let path = self.corrector_path(pair.coarse.n(), pair.fine.n(), k, lin);
        let Ok(bytes) = std::fs::read(&path) else {
            return Lookup::Miss;
        };
        let expected = CorrectorHeader {
            version: crate::corrector::CORRECTOR_VERSION,
            coarse_n: pair.coarse.n(),
            fine_n: pair.fine.n(),
            k,
            kind: lin.kind,
            fingerprint: lin.fingerprint,
        };
        match CorrectorHeader::parse(&bytes) {
            Ok(h) if h == expected => {}
            Ok(_) => return Lookup::Miss,
            Err(e) => {
                log::warn!("ignoring cache entry {}: {e}", path.display());
                return Lookup::Miss;
            }
        }
        match CorrectorSet::from_bytes(&bytes) {
            Ok(set) => Lookup::Hit(set),
            Err(e) => {
                log::warn!("ignoring cache entry {}: {e}", path.display());
                Lookup::Miss
            }
        }
    }

    pub fn store_correctors(&self, set: &CorrectorSet, lin: &LinearizationData) -> Result<PathBuf> {
        let path = self.corrector_path(set.pair.coarse.n(), set.pair.fine.n(), set.k, lin);
        set.write(&path)?;
        Ok(path)
    }

    /// Loads or assembles and stores.
    pub fn correctors(&self, transfer: &TransferOperators, lin: &LinearizationData, k: usize) -> Result<CorrectorSet> {
        if let Lookup::Hit(set) = self.load_correctors(transfer, k, lin) {
            log::debug!("corrector cache hit (H=1/{}, k={k})", transfer.pair().coarse.n());
            return Ok(set);
        }
        let set = assemble_corrector_set(transfer, k, lin)?;
        self.store_correctors(&set, lin)?;
        Ok(set)
    }

    /// Key of a reference solution: coefficient, load and stopping rule.
    pub fn reference_key(coeff: &CombinedCoefficient, load: &NodalVector, options: IterationOptions) -> String {
        let mut h = Sha256::new();
        h.update(coeff.fingerprint_bytes());
        for v in load.values() {
            h.update(v.to_le_bytes());
        }
        h.update(options.tol.to_le_bytes());
        h.update((options.max_iter as u64).to_le_bytes());
        hex(&h.finalize())
    }

    pub fn reference_path(&self, key: &str) -> PathBuf {
        self.root.join("reference").join(format!("{key}.lodu"))
    }

    pub fn load_reference(&self, key: &str) -> Lookup<NodalVector> {
        let path = self.reference_path(key);
        if !path.exists() {
            return Lookup::Miss;
        }
        match read_solution(&path) {
            Ok(u) => Lookup::Hit(u),
            Err(e) => {
                log::warn!("ignoring cache entry {}: {e}", path.display());
                Lookup::Miss
            }
        }
    }

    pub fn store_reference(&self, key: &str, u: &NodalVector) -> Result<()> {
        write_solution(&self.reference_path(key), u)
    }

    /// All cache files, sorted by path.
    pub fn entries(&self) -> Result<Vec<Entry>> {
        let mut out = Vec::new();
        for sub in ["correctors", "reference"] {
            let dir = self.root.join(sub);
            if !dir.is_dir() {
                continue;
            }
            for item in std::fs::read_dir(&dir)? {
                let path = item?.path();
                if !path.is_file() {
                    continue;
                }
                let bytes = std::fs::metadata(&path)?.len();
                let header = if sub == "correctors" {
                    std::fs::read(&path).ok().and_then(|b| CorrectorHeader::parse(&b).ok())
                } else {
                    None
                };
                out.push(Entry { path, bytes, header });
            }
        }
        out.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(out)
    }

    /// Removes every cache file; returns how many were deleted.
    pub fn clear(&self) -> Result<usize> {
        let entries = self.entries()?;
        for e in &entries {
            std::fs::remove_file(&e.path)?;
        }
        Ok(entries.len())
    }
}
