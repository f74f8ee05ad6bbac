//! Crystal graphs: element-indexed nodes and Gaussian-expanded edge distances.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{build_neighbor_list, GeometryError, NeighborConfig, NeighborList};
use crate::structure_io::CrystalStructure;

#[derive(Debug, Error)]
pub enum FeaturizeError {
    #[error("invalid Gaussian basis: {0}")]
    InvalidBasis(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Evenly spaced Gaussian centers `d_min, d_min + step, ..` up to `d_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBasis {
    pub d_min: f64,
    pub d_max: f64,
    pub step: f64,
    pub var: f64,
}

impl Default for GaussianBasis {
    fn default() -> Self {
        Self {
            d_min: 0.0,
            d_max: 8.0,
            step: 0.2,
            var: 0.2 * 0.2,
        }
    }
}

impl GaussianBasis {
    pub fn validate(&self) -> Result<(), FeaturizeError> {
        let ok = self.d_min < self.d_max
            && self.step > 0.0
            && self.var > 0.0
            && [self.d_min, self.d_max, self.step, self.var]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(FeaturizeError::InvalidBasis(format!("{self:?}")))
        }
    }

    /// Number of centers, `floor((d_max - d_min) / step) + 1`.
    pub fn len(&self) -> usize {
        ((self.d_max - self.d_min) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn center(&self, k: usize) -> f64 {
        self.d_min + k as f64 * self.step
    }
}

/// `exp(-(d - mu_k)^2 / var)` for every center `mu_k`.
pub fn gaussian_expand(d: f64, basis: &GaussianBasis) -> Vec<f64> {
    (0..basis.len())
        .map(|k| {
            let x = d - basis.center(k);
            (-x * x / basis.var).exp()
        })
        .collect()
}

mod bits {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[bool], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&b| b as u8).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!(
                    "mask value {other} is not 0 or 1"
                ))),
            })
            .collect()
    }
}

/// Model input. Masking never removes nodes or edges; the encoder reads a
/// masked node's features or a masked edge's features as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrystalGraph {
    pub node_elem: Vec<u8>,
    #[serde(with = "bits")]
    pub node_mask: Vec<bool>,
    /// Directed `(src, dst)` pairs; messages flow from `dst` into `src`.
    pub edges: Vec<(usize, usize)>,
    pub edge_feat: Vec<Vec<f64>>,
    #[serde(with = "bits")]
    pub edge_mask: Vec<bool>,
}

impl CrystalGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_elem.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn active_nodes(&self) -> usize {
        self.node_mask.iter().filter(|m| **m).count()
    }

    pub fn active_edges(&self) -> usize {
        self.edge_mask.iter().filter(|m| **m).count()
    }

    pub fn edge_feat_dim(&self) -> Option<usize> {
        self.edge_feat.first().map(Vec::len)
    }

    /// Checks index ranges, mask lengths and feature widths.
    pub fn validate(&self, edge_feat_dim: usize) -> Result<(), String> {
        let n = self.num_nodes();
        if self.node_mask.len() != n {
            return Err(format!("node_mask has {} entries for {n} nodes", self.node_mask.len()));
        }
        let e = self.num_edges();
        if self.edge_feat.len() != e || self.edge_mask.len() != e {
            return Err(format!(
                "{e} edges but {} feature rows and {} mask entries",
                self.edge_feat.len(),
                self.edge_mask.len()
            ));
        }
        if let Some(&(s, d)) = self.edges.iter().find(|(s, d)| *s >= n || *d >= n) {
            return Err(format!("edge ({s}, {d}) out of range for {n} nodes"));
        }
        if let Some(row) = self.edge_feat.iter().find(|r| r.len() != edge_feat_dim) {
            return Err(format!(
                "edge feature row has {} components, expected {edge_feat_dim}",
                row.len()
            ));
        }
        Ok(())
    }
}

/// Neighbor search and distance expansion settings used to turn a
/// structure into a graph.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GraphConfig {
    pub neighbors: NeighborConfig,
    pub basis: GaussianBasis,
}

impl GraphConfig {
    pub fn validate(&self) -> Result<(), FeaturizeError> {
        self.neighbors.validate()?;
        self.basis.validate()
    }
}

pub fn build_graph(s: &CrystalStructure, nl: &NeighborList, basis: &GaussianBasis) -> CrystalGraph {
    CrystalGraph {
        node_elem: s.sites().iter().map(|site| site.atomic_number).collect(),
        node_mask: vec![true; s.num_sites()],
        edges: nl.edges.iter().map(|e| (e.src, e.dst)).collect(),
        edge_feat: nl
            .edges
            .iter()
            .map(|e| gaussian_expand(e.distance, basis))
            .collect(),
        edge_mask: vec![true; nl.len()],
    }
}

/// Neighbor search followed by [`build_graph`].
pub fn structure_to_graph(
    s: &CrystalStructure,
    cfg: &GraphConfig,
) -> Result<CrystalGraph, FeaturizeError> {
    cfg.basis.validate()?;
    let nl = build_neighbor_list(s, &cfg.neighbors)?;
    Ok(build_graph(s, &nl, &cfg.basis))
}

/// One JSON object per line: the graph fields plus its dataset id.
pub fn graph_to_json_line(id: &str, g: &CrystalGraph) -> String {
    #[derive(Serialize)]
    struct Line<'a> {
        id: &'a str,
        #[serde(flatten)]
        graph: &'a CrystalGraph,
    }
    serde_json::to_string(&Line { id, graph: g }).expect("graph serialization cannot fail")
}

pub fn graph_from_json_line(line: &str) -> Result<(String, CrystalGraph), serde_json::Error> {
    #[derive(Deserialize)]
    struct Line {
        id: String,
        #[serde(flatten)]
        graph: CrystalGraph,
    }
    let parsed: Line = serde_json::from_str(line)?;
    Ok((parsed.id, parsed.graph))
}
