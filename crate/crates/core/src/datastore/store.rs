use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::block::SparseBlock;
use crate::error::{Error, Result};
use crate::ndmath::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// One perturbed population: a cell type under a perturbation, measured in a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub cell_type: usize,
    pub perturbation: usize,
    pub batch: usize,
}

impl Condition {
    pub fn control_key(&self) -> ControlKey {
        ControlKey {
            cell_type: self.cell_type,
            batch: self.batch,
        }
    }
}

/// Controls are pooled per cell type and batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ControlKey {
    pub cell_type: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueSpace {
    /// Raw non-negative counts, before preprocessing.
    Counts,
    /// Log-transformed expression ready for modeling.
    Log,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub offset: u64,
    pub cells: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupEntry {
    #[serde(flatten)]
    pub condition: Condition,
    #[serde(flatten)]
    pub shard: ShardEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlEntry {
    #[serde(flatten)]
    pub key: ControlKey,
    #[serde(flatten)]
    pub shard: ShardEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub space: ValueSpace,
    pub genes: Vec<String>,
    pub cell_types: Vec<String>,
    pub perturbations: Vec<String>,
    pub batches: Vec<String>,
    pub groups: Vec<GroupEntry>,
    pub controls: Vec<ControlEntry>,
}

impl Manifest {
    pub fn vocab(&self) -> crate::transport::Vocab {
        crate::transport::Vocab {
            cell_types: self.cell_types.len(),
            perturbations: self.perturbations.len(),
            batches: self.batches.len(),
        }
    }

    pub fn conditions(&self) -> Vec<Condition> {
        self.groups.iter().map(|g| g.condition).collect()
    }

    pub fn group(&self, c: &Condition) -> Option<&GroupEntry> {
        self.groups.iter().find(|g| g.condition == *c)
    }

    pub fn control(&self, k: &ControlKey) -> Option<&ControlEntry> {
        self.controls.iter().find(|g| g.key == *k)
    }

    /// Checks id ranges, key collisions and label uniqueness.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Ingestion(m));
        if self.version != MANIFEST_VERSION {
            return bad(format!("manifest version {} not supported", self.version));
        }
        for (what, labels) in [
            ("gene", &self.genes),
            ("cell type", &self.cell_types),
            ("perturbation", &self.perturbations),
            ("batch", &self.batches),
        ] {
            let uniq: BTreeSet<&String> = labels.iter().collect();
            if uniq.len() != labels.len() {
                return bad(format!("duplicate {what} label"));
            }
        }
        let (kc, kp, kb) = (self.cell_types.len(), self.perturbations.len(), self.batches.len());
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            let c = g.condition;
            if c.cell_type >= kc || c.perturbation >= kp || c.batch >= kb {
                return bad(format!("condition {c:?} outside the label tables"));
            }
            if !seen.insert(c) {
                return bad(format!("condition {c:?} listed twice"));
            }
        }
        let mut seen = BTreeSet::new();
        for g in &self.controls {
            if g.key.cell_type >= kc || g.key.batch >= kb {
                return bad(format!("control key {:?} outside the label tables", g.key));
            }
            if !seen.insert(g.key) {
                return bad(format!("control key {:?} listed twice", g.key));
            }
        }
        Ok(())
    }

    pub fn condition_name(&self, c: &Condition) -> String {
        format!(
            "{}|{}|{}",
            self.cell_types[c.cell_type], self.perturbations[c.perturbation], self.batches[c.batch]
        )
    }
}

/// A whole dataset held in memory as sparse blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub space: ValueSpace,
    pub genes: Vec<String>,
    pub cell_types: Vec<String>,
    pub perturbations: Vec<String>,
    pub batches: Vec<String>,
    pub groups: BTreeMap<Condition, SparseBlock>,
    pub controls: BTreeMap<ControlKey, SparseBlock>,
}

impl Dataset {
    pub fn to_dense(&self) -> DenseData {
        DenseData {
            genes: self.genes.len(),
            groups: self.groups.iter().map(|(k, b)| (*k, b.to_dense())).collect(),
            controls: self.controls.iter().map(|(k, b)| (*k, b.to_dense())).collect(),
        }
    }
}

/// Dense cells × genes matrices, the form used for sampling and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseData {
    pub genes: usize,
    pub groups: BTreeMap<Condition, Tensor>,
    pub controls: BTreeMap<ControlKey, Tensor>,
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_shard(dir: &Path, file: String, block: &SparseBlock) -> Result<ShardEntry> {
    let bytes = block.encode();
    write_atomic(&dir.join(&file), &bytes)?;
    Ok(ShardEntry {
        file,
        offset: 0,
        cells: block.rows() as u64,
        crc32: block.checksum(),
    })
}

/// Writes one shard per condition and per control key, then the manifest.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<Manifest> {
    let g = data.genes.len();
    for b in data.groups.values().chain(data.controls.values()) {
        if b.cols() != g {
            return Err(Error::Ingestion(format!("block with {} genes in a {g}-gene dataset", b.cols())));
        }
    }
    let mut groups = Vec::new();
    for (c, b) in &data.groups {
        let file = format!(
            "groups/c{}_p{}_b{}.vcsb",
            c.cell_type, c.perturbation, c.batch
        );
        groups.push(GroupEntry {
            condition: *c,
            shard: write_shard(dir, file, b)?,
        });
    }
    let mut controls = Vec::new();
    for (k, b) in &data.controls {
        let file = format!("controls/c{}_b{}.vcsb", k.cell_type, k.batch);
        controls.push(ControlEntry {
            key: *k,
            shard: write_shard(dir, file, b)?,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        space: data.space,
        genes: data.genes.clone(),
        cell_types: data.cell_types.clone(),
        perturbations: data.perturbations.clone(),
        batches: data.batches.clone(),
        groups,
        controls,
    };
    manifest.validate()?;
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Read access to a dataset directory.
#[derive(Debug, Clone)]
pub struct Store {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Store {
    /// Loads and validates the manifest; every referenced shard must exist.
    pub fn open(dir: &Path) -> Result<Store> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        let files = manifest
            .groups
            .iter()
            .map(|g| &g.shard.file)
            .chain(manifest.controls.iter().map(|c| &c.shard.file));
        for f in files {
            if !dir.join(f).is_file() {
                return Err(Error::Ingestion(format!("manifest references missing shard {f}")));
            }
        }
        Ok(Store {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    fn read_shard(&self, entry: &ShardEntry) -> Result<SparseBlock> {
        let path = self.dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let block = SparseBlock::decode(&bytes, &path)?;
        let corrupt = |detail: String| Error::Corruption {
            path: path.clone(),
            detail,
        };
        if block.checksum() != entry.crc32 {
            return Err(corrupt("checksum differs from the manifest".into()));
        }
        if block.rows() as u64 != entry.cells || block.cols() != self.manifest.genes.len() {
            return Err(corrupt(format!(
                "shard is {}×{}, manifest expects {}×{}",
                block.rows(),
                block.cols(),
                entry.cells,
                self.manifest.genes.len()
            )));
        }
        Ok(block)
    }

    pub fn read_group(&self, c: &Condition) -> Result<SparseBlock> {
        let entry = self
            .manifest
            .group(c)
            .ok_or_else(|| Error::Lookup(format!("no group for condition {c:?}")))?;
        self.read_shard(&entry.shard)
    }

    pub fn read_controls(&self, k: &ControlKey) -> Result<SparseBlock> {
        let entry = self
            .manifest
            .control(k)
            .ok_or_else(|| Error::Lookup(format!("no controls for {k:?}")))?;
        self.read_shard(&entry.shard)
    }

    pub fn load(&self) -> Result<Dataset> {
        let m = &self.manifest;
        let mut groups = BTreeMap::new();
        for g in &m.groups {
            groups.insert(g.condition, self.read_shard(&g.shard)?);
        }
        let mut controls = BTreeMap::new();
        for c in &m.controls {
            controls.insert(c.key, self.read_shard(&c.shard)?);
        }
        Ok(Dataset {
            space: m.space,
            genes: m.genes.clone(),
            cell_types: m.cell_types.clone(),
            perturbations: m.perturbations.clone(),
            batches: m.batches.clone(),
            groups,
            controls,
        })
    }
}
