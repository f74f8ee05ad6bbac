use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{parse_cif, CrystalStructure, StructureError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub id: String,
    pub structure: CrystalStructure,
    pub label: Option<f64>,
}

/// An immutable collection of structures with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    kind: DatasetKind,
    entries: Vec<Entry>,
}

impl Dataset {
    /// Validates id uniqueness and label presence against `kind`.
    pub fn new(kind: DatasetKind, entries: Vec<Entry>) -> Result<Self, StructureError> {
        let mut seen = HashSet::new();
        for (line, e) in entries.iter().enumerate() {
            if !seen.insert(e.id.as_str()) {
                return Err(StructureError::DuplicateId(e.id.clone()));
            }
            let ok = match kind {
                DatasetKind::Labeled => e.label.is_some_and(f64::is_finite),
                DatasetKind::Unlabeled => e.label.is_none(),
            };
            if !ok {
                return Err(StructureError::UnparseableLabel {
                    line: line + 1,
                    text: format!("{}: {:?}", e.id, e.label),
                });
            }
        }
        Ok(Self { kind, entries })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Option<Vec<f64>> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Drops labels, keeping structures and ids.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            kind: DatasetKind::Unlabeled,
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    label: None,
                    ..e.clone()
                })
                .collect(),
        }
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            kind: self.kind,
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }
}

fn read_structure(path: &Path) -> Result<CrystalStructure, StructureError> {
    let text = fs::read_to_string(path)?;
    parse_cif(&text).map_err(|e| StructureError::InFile {
        path: path.display().to_string(),
        source: Box::new(e),
    })
}

/// Loads `*.cif` files from `root`. With an index (`id,label` lines, no
/// header) the dataset is labeled and restricted to the indexed ids.
/// Entries are sorted by id.
pub fn load_dataset(root: &Path, index_file: Option<&Path>) -> Result<Dataset, StructureError> {
    match index_file {
        Some(index) => {
            let text = fs::read_to_string(index)?;
            let mut labels: BTreeMap<String, f64> = BTreeMap::new();
            for (n, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() {
                    continue;
                }
                let (id, label) =
                    line.split_once(',')
                        .ok_or_else(|| StructureError::MalformedIndexLine {
                            line: n + 1,
                            text: raw.to_string(),
                        })?;
                let id = id.trim().to_string();
                let label: f64 = label
                    .trim()
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| StructureError::UnparseableLabel {
                        line: n + 1,
                        text: raw.to_string(),
                    })?;
                if labels.insert(id.clone(), label).is_some() {
                    return Err(StructureError::DuplicateId(id));
                }
            }
            let mut entries = Vec::with_capacity(labels.len());
            for (id, label) in labels {
                let path = root.join(format!("{id}.cif"));
                if !path.is_file() {
                    return Err(StructureError::IndexReferencesMissingFile(
                        path.display().to_string(),
                    ));
                }
                entries.push(Entry {
                    structure: read_structure(&path)?,
                    id,
                    label: Some(label),
                });
            }
            Dataset::new(DatasetKind::Labeled, entries)
        }
        None => {
            let mut paths: Vec<_> = fs::read_dir(root)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "cif"))
                .collect();
            paths.sort();
            let mut entries = Vec::with_capacity(paths.len());
            for path in paths {
                let id = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                entries.push(Entry {
                    structure: read_structure(&path)?,
                    id,
                    label: None,
                });
            }
            entries.sort_by(|a, b| a.id.cmp(&b.id));
            Dataset::new(DatasetKind::Unlabeled, entries)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Train, validation, and test fractions.
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(fractions: [f64; 3], seed: u64) -> Result<Self, StructureError> {
        let spec = Self { fractions, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), StructureError> {
        let sum: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(StructureError::InvalidSplit(self.fractions));
        }
        Ok(())
    }

    /// Partition sizes for `n` items: `floor(f * n)` for train and
    /// validation, the remainder for test.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        // the small offset keeps e.g. 0.29 * 100 from flooring to 28
        let take = |f: f64| ((f * n as f64 + 1e-9).floor() as usize).min(n);
        let train = take(self.fractions[0]);
        let val = take(self.fractions[1]).min(n - train);
        [train, val, n - train - val]
    }
}

/// Shuffles with a PRNG seeded from `spec.seed`, then cuts into train,
/// validation, and test partitions.
pub fn split_dataset(
    d: &Dataset,
    spec: &SplitSpec,
) -> Result<(Dataset, Dataset, Dataset), StructureError> {
    if d.is_empty() {
        return Err(StructureError::EmptyDataset);
    }
    spec.validate()?;
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let [train, val, _] = spec.sizes(d.len());
    Ok((
        d.subset(&order[..train]),
        d.subset(&order[train..train + val]),
        d.subset(&order[train + val..]),
    ))
}
