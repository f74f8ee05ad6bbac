//! Crystal structures, CIF reading/writing, and labeled/unlabeled datasets.

mod cif;
mod dataset;
pub mod elements;

pub use cif::{parse_cif, write_cif, SymmetryOp};
pub use dataset::{load_dataset, split_dataset, Dataset, DatasetKind, Entry, SplitSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, Mat3, Vec3};

#[derive(Debug, Error)]
pub enum StructureError {
    #[error("missing cell parameter `{0}`")]
    MissingCellParameter(String),
    #[error("invalid value for `{tag}`: {value:?}")]
    InvalidNumber { tag: String, value: String },
    #[error("no atom_site loop with fractional coordinates found")]
    MissingAtomLoop,
    #[error("unknown element symbol {symbol:?} (line {line})")]
    UnknownElementSymbol { symbol: String, line: usize },
    #[error("malformed symmetry operation {op:?} (line {line})")]
    MalformedSymmetryOp { op: String, line: usize },
    #[error("site {label:?} has occupancy {occupancy}; only fully occupied sites are supported")]
    PartialOccupancy { label: String, occupancy: f64 },
    #[error("unterminated quoted string on line {0}")]
    UnterminatedQuote(usize),
    #[error("cell volume must be positive, got {0}")]
    NonPositiveVolume(f64),
    #[error("atomic number {0} outside 1..=100")]
    InvalidAtomicNumber(u8),
    #[error("structure has no sites")]
    NoSites,
    #[error("non-finite fractional coordinate")]
    NonFiniteCoordinate,

    #[error("index references missing file {0}")]
    IndexReferencesMissingFile(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("unparseable label on index line {line}: {text:?}")]
    UnparseableLabel { line: usize, text: String },
    #[error("malformed index line {line}: {text:?}")]
    MalformedIndexLine { line: usize, text: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split fractions {0:?} must be nonnegative and sum to 1")]
    InvalidSplit([f64; 3]),
    #[error("failed to parse {path}: {source}")]
    InFile {
        path: String,
        #[source]
        source: Box<StructureError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub atomic_number: u8,
    pub frac: Vec3,
}

/// A periodic crystal: lattice rows are the cell vectors `a`, `b`, `c` in Å.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrystalStructure {
    lattice: Mat3,
    sites: Vec<Site>,
}

/// Maps a fractional coordinate into `[0, 1)`.
pub fn wrap_unit(x: f64) -> f64 {
    let w = x - x.floor();
    // x slightly below an integer can round up to exactly 1.0
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

impl CrystalStructure {
    /// Builds a structure, wrapping every fractional coordinate into `[0, 1)`.
    pub fn new(lattice: Mat3, sites: Vec<Site>) -> Result<Self, StructureError> {
        let volume = geometry::det(&lattice);
        if !(volume > 0.0) {
            return Err(StructureError::NonPositiveVolume(volume));
        }
        if sites.is_empty() {
            return Err(StructureError::NoSites);
        }
        let mut wrapped = Vec::with_capacity(sites.len());
        for site in sites {
            if !(1..=elements::MAX_ATOMIC_NUMBER).contains(&site.atomic_number) {
                return Err(StructureError::InvalidAtomicNumber(site.atomic_number));
            }
            if site.frac.iter().any(|x| !x.is_finite()) {
                return Err(StructureError::NonFiniteCoordinate);
            }
            wrapped.push(Site {
                atomic_number: site.atomic_number,
                frac: site.frac.map(wrap_unit),
            });
        }
        Ok(Self {
            lattice,
            sites: wrapped,
        })
    }

    pub fn lattice(&self) -> &Mat3 {
        &self.lattice
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn volume(&self) -> f64 {
        geometry::det(&self.lattice)
    }

    /// Returns a copy with new fractional coordinates (same lattice and species).
    pub fn with_frac_coords(&self, frac: &[Vec3]) -> Result<Self, StructureError> {
        assert_eq!(frac.len(), self.sites.len());
        let sites = self
            .sites
            .iter()
            .zip(frac)
            .map(|(s, f)| Site {
                atomic_number: s.atomic_number,
                frac: *f,
            })
            .collect();
        Self::new(self.lattice, sites)
    }

    pub fn with_lattice(&self, lattice: Mat3) -> Result<Self, StructureError> {
        Self::new(lattice, self.sites.clone())
    }

    /// Lattice lengths `(a, b, c)` in Å and angles `(alpha, beta, gamma)` in degrees.
    pub fn cell_parameters(&self) -> ([f64; 3], [f64; 3]) {
        let l = &self.lattice;
        let len = |v: &Vec3| geometry::norm(v);
        let angle = |u: &Vec3, v: &Vec3| {
            (geometry::dot(u, v) / (len(u) * len(v)))
                .clamp(-1.0, 1.0)
                .acos()
                .to_degrees()
        };
        (
            [len(&l[0]), len(&l[1]), len(&l[2])],
            [angle(&l[1], &l[2]), angle(&l[0], &l[2]), angle(&l[0], &l[1])],
        )
    }
}
