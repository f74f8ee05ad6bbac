//! Lattice arithmetic and periodic neighbor search.
//!
//! Lattices are row-major: row `i` is the `i`-th cell vector, and a
//! fractional row vector `f` maps to Cartesian `f · L`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::structure_io::CrystalStructure;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("lattice is singular (determinant {0})")]
    SingularLattice(f64),
    #[error("invalid neighbor configuration: {0}")]
    InvalidConfig(String),
}

const SINGULAR_DET: f64 = 1e-12;

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn det(m: &Mat3) -> f64 {
    dot(&m[0], &cross(&m[1], &m[2]))
}

/// Inverse of a 3×3 matrix via the adjugate.
pub fn inverse(m: &Mat3) -> Result<Mat3, GeometryError> {
    let d = det(m);
    if d.abs() < SINGULAR_DET || !d.is_finite() {
        return Err(GeometryError::SingularLattice(d));
    }
    // columns of the inverse are the cross products of rows, scaled by 1/det
    let c0 = cross(&m[1], &m[2]);
    let c1 = cross(&m[2], &m[0]);
    let c2 = cross(&m[0], &m[1]);
    let mut inv = [[0.0; 3]; 3];
    for r in 0..3 {
        inv[r] = [c0[r] / d, c1[r] / d, c2[r] / d];
    }
    Ok(inv)
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Row vector times matrix, with no singularity check.
pub fn frac_to_cart_unchecked(lattice: &Mat3, frac: &Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for (k, f) in frac.iter().enumerate() {
        for (o, l) in out.iter_mut().zip(&lattice[k]) {
            *o += f * l;
        }
    }
    out
}

pub fn frac_to_cart(lattice: &Mat3, frac: &Vec3) -> Result<Vec3, GeometryError> {
    check_lattice(lattice)?;
    Ok(frac_to_cart_unchecked(lattice, frac))
}

pub fn cart_to_frac(lattice: &Mat3, cart: &Vec3) -> Result<Vec3, GeometryError> {
    let inv = inverse(lattice)?;
    Ok(frac_to_cart_unchecked(&inv, cart))
}

fn check_lattice(lattice: &Mat3) -> Result<(), GeometryError> {
    let d = det(lattice);
    if d.abs() < SINGULAR_DET || !d.is_finite() {
        Err(GeometryError::SingularLattice(d))
    } else {
        Ok(())
    }
}

fn image_offset(fa: &Vec3, fb: &Vec3, image: &[i32; 3]) -> Vec3 {
    [
        (fb[0] - fa[0]) + image[0] as f64,
        (fb[1] - fa[1]) + image[1] as f64,
        (fb[2] - fa[2]) + image[2] as f64,
    ]
}

/// Distance in Å from `fa` to the copy of `fb` translated by `image`.
pub fn periodic_distance(
    lattice: &Mat3,
    fa: &Vec3,
    fb: &Vec3,
    image: [i32; 3],
) -> Result<f64, GeometryError> {
    check_lattice(lattice)?;
    Ok(norm(&frac_to_cart_unchecked(
        lattice,
        &image_offset(fa, fb, &image),
    )))
}

/// Spacing between adjacent lattice planes normal to each reciprocal axis.
pub fn interplanar_spacings(lattice: &Mat3) -> Result<Vec3, GeometryError> {
    let inv = inverse(lattice)?;
    // reciprocal vector i (without 2π) is column i of the inverse
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let col = [inv[0][i], inv[1][i], inv[2][i]];
        *o = 1.0 / norm(&col);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborConfig {
    pub cutoff: f64,
    pub max_neighbors: usize,
}

impl Default for NeighborConfig {
    fn default() -> Self {
        Self {
            cutoff: 8.0,
            max_neighbors: 12,
        }
    }
}

impl NeighborConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.cutoff > 0.0) || !self.cutoff.is_finite() {
            return Err(GeometryError::InvalidConfig(format!(
                "cutoff must be positive, got {}",
                self.cutoff
            )));
        }
        if self.max_neighbors == 0 {
            return Err(GeometryError::InvalidConfig(
                "max_neighbors must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborEdge {
    pub src: usize,
    pub dst: usize,
    pub distance: f64,
    pub image: [i32; 3],
}

/// Directed edges grouped by source; each group is sorted by
/// `(distance, dst, image)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborList {
    pub edges: Vec<NeighborEdge>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

fn edge_order(a: &NeighborEdge, b: &NeighborEdge) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.dst.cmp(&b.dst))
        .then(a.image.cmp(&b.image))
}

/// Finds, for every site, the nearest `max_neighbors` periodic images within
/// `cutoff`. The zero-distance self pair is excluded; other images of the
/// site itself count as neighbors.
pub fn build_neighbor_list(
    s: &CrystalStructure,
    cfg: &NeighborConfig,
) -> Result<NeighborList, GeometryError> {
    cfg.validate()?;
    let lattice = s.lattice();
    let spacings = interplanar_spacings(lattice)?;
    // fractional differences lie in (-1, 1), hence the extra image per axis
    let bounds = spacings.map(|d| (cfg.cutoff / d).ceil() as i32 + 1);
    let mut images = Vec::new();
    for i in -bounds[0]..=bounds[0] {
        for j in -bounds[1]..=bounds[1] {
            for k in -bounds[2]..=bounds[2] {
                images.push([i, j, k]);
            }
        }
    }

    let sites = s.sites();
    let mut edges = Vec::new();
    let mut candidates = Vec::new();
    for (src, a) in sites.iter().enumerate() {
        candidates.clear();
        for (dst, b) in sites.iter().enumerate() {
            for image in &images {
                let d = norm(&frac_to_cart_unchecked(
                    lattice,
                    &image_offset(&a.frac, &b.frac, image),
                ));
                if d > 0.0 && d <= cfg.cutoff {
                    candidates.push(NeighborEdge {
                        src,
                        dst,
                        distance: d,
                        image: *image,
                    });
                }
            }
        }
        candidates.sort_by(edge_order);
        edges.extend(candidates.iter().take(cfg.max_neighbors).copied());
    }
    Ok(NeighborList { edges })
}
