//! Stochastic views of a crystal: random perturbation, atom masking, and
//! edge masking.
//!
//! Perturbation moves atoms and therefore runs before neighbor search.
//! Masking only flips mask bits on an already built graph.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::{structure_to_graph, CrystalGraph, FeaturizeError, GraphConfig};
use crate::geometry::{self, GeometryError};
use crate::structure_io::CrystalStructure;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("at least one augmentation must be enabled")]
    NoAugmentationEnabled,
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enable_perturb: bool,
    pub enable_atom_mask: bool,
    pub enable_edge_mask: bool,
    /// Upper bound of the per-atom displacement, Å.
    pub max_displacement: f64,
    pub mask_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enable_perturb: true,
            enable_atom_mask: true,
            enable_edge_mask: true,
            max_displacement: 0.05,
            mask_fraction: 0.10,
        }
    }
}

impl AugmentConfig {
    /// Random perturbation only.
    pub fn perturb_only() -> Self {
        Self {
            enable_atom_mask: false,
            enable_edge_mask: false,
            ..Self::default()
        }
    }

    /// Atom and edge masking, no perturbation.
    pub fn masking_only() -> Self {
        Self {
            enable_perturb: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.max_displacement >= 0.0) || !self.max_displacement.is_finite() {
            return Err(AugmentError::InvalidConfig(format!(
                "max_displacement must be >= 0, got {}",
                self.max_displacement
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(AugmentError::InvalidConfig(format!(
                "mask_fraction must lie in [0, 1], got {}",
                self.mask_fraction
            )));
        }
        Ok(())
    }

    pub fn any_enabled(&self) -> bool {
        self.enable_perturb || self.enable_atom_mask || self.enable_edge_mask
    }
}

/// Number of items to mask: `round_half_up(fraction * n)`, at least one
/// whenever `fraction > 0` and `n > 0`.
pub fn mask_count(n: usize, fraction: f64) -> usize {
    if fraction <= 0.0 || n == 0 {
        return 0;
    }
    let rounded = (fraction * n as f64 + 0.5 + 1e-9).floor() as usize;
    rounded.clamp(1, n)
}

/// Displaces every site by `r * u` in Cartesian space, `r ~ U[0, max_disp]`
/// and `u` uniform on the unit sphere. The lattice is untouched.
pub fn random_perturb<R: Rng + ?Sized>(
    s: &CrystalStructure,
    rng: &mut R,
    max_disp: f64,
) -> Result<CrystalStructure, AugmentError> {
    if max_disp == 0.0 {
        return Ok(s.clone());
    }
    let inv = geometry::inverse(s.lattice())?;
    let moved: Vec<_> = s
        .sites()
        .iter()
        .map(|site| {
            let r = max_disp * rng.random::<f64>();
            let dir: [f64; 3] = UnitSphere.sample(rng);
            let shift = geometry::frac_to_cart_unchecked(&inv, &dir.map(|c| r * c));
            [
                site.frac[0] + shift[0],
                site.frac[1] + shift[1],
                site.frac[2] + shift[2],
            ]
        })
        .collect();
    s.with_frac_coords(&moved)
        .map_err(|e| AugmentError::InvalidConfig(e.to_string()))
}

pub fn mask_atoms<R: Rng + ?Sized>(g: &CrystalGraph, rng: &mut R, fraction: f64) -> CrystalGraph {
    let mut out = g.clone();
    let n = g.num_nodes();
    for i in index::sample(rng, n, mask_count(n, fraction)) {
        out.node_mask[i] = false;
    }
    out
}

pub fn mask_edges<R: Rng + ?Sized>(g: &CrystalGraph, rng: &mut R, fraction: f64) -> CrystalGraph {
    let mut out = g.clone();
    let n = g.num_edges();
    for i in index::sample(rng, n, mask_count(n, fraction)) {
        out.edge_mask[i] = false;
    }
    out
}

/// One augmented graph: perturb, build the graph, then mask atoms and edges.
pub fn augmented_graph<R: Rng + ?Sized>(
    s: &CrystalStructure,
    cfg: &AugmentConfig,
    graph_cfg: &GraphConfig,
    rng: &mut R,
) -> Result<CrystalGraph, AugmentError> {
    let perturbed;
    let source = if cfg.enable_perturb {
        perturbed = random_perturb(s, rng, cfg.max_displacement)?;
        &perturbed
    } else {
        s
    };
    let mut g = structure_to_graph(source, graph_cfg)?;
    if cfg.enable_atom_mask {
        g = mask_atoms(&g, rng, cfg.mask_fraction);
    }
    if cfg.enable_edge_mask {
        g = mask_edges(&g, rng, cfg.mask_fraction);
    }
    Ok(g)
}

/// Two independently augmented views of the same structure.
pub fn make_views<R: Rng + ?Sized>(
    s: &CrystalStructure,
    cfg: &AugmentConfig,
    graph_cfg: &GraphConfig,
    rng: &mut R,
) -> Result<(CrystalGraph, CrystalGraph), AugmentError> {
    if !cfg.any_enabled() {
        return Err(AugmentError::NoAugmentationEnabled);
    }
    cfg.validate()?;
    let a = augmented_graph(s, cfg, graph_cfg, rng)?;
    let b = augmented_graph(s, cfg, graph_cfg, rng)?;
    Ok((a, b))
}
