//! Synthetic cubic ABX3 perovskites with an analytic label, for demos and
//! tests that need a learnable dataset without external data.
//!
//! Each cell has A at the corner, B at the body center, and X on the face
//! centers. With `chi` the composition-weighted mean Pauling
//! electronegativity `(chi_A + chi_B + 3 chi_X) / 5` and `a` the lattice
//! constant in Å, the label is
//!
//! `-1.5 + 0.8 (chi - 2.2) + 0.6 (a - 4) - 0.5 (a - 4)^2`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::structure_io::{elements, write_cif, CrystalStructure, Site, StructureError};

/// A-site palette with Pauling electronegativities.
pub const A_SITES: [(&str, f64); 7] = [
    ("K", 0.82),
    ("Rb", 0.82),
    ("Cs", 0.79),
    ("Sr", 0.95),
    ("Ba", 0.89),
    ("Ca", 1.00),
    ("La", 1.10),
];

pub const B_SITES: [(&str, f64); 6] = [
    ("Ti", 1.54),
    ("Zr", 1.33),
    ("Sn", 1.96),
    ("Pb", 2.33),
    ("Nb", 1.60),
    ("Ta", 1.50),
];

pub const X_SITES: [(&str, f64); 5] = [
    ("O", 3.44),
    ("F", 3.98),
    ("Cl", 3.16),
    ("Br", 2.96),
    ("I", 2.66),
];

pub const MIN_LATTICE: f64 = 3.5;
pub const MAX_LATTICE: f64 = 4.5;

pub fn toy_label(mean_electronegativity: f64, a: f64) -> f64 {
    let da = a - 4.0;
    -1.5 + 0.8 * (mean_electronegativity - 2.2) + 0.6 * da - 0.5 * da * da
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEntry {
    pub id: String,
    pub formula: String,
    pub structure: CrystalStructure,
    pub label: f64,
}

pub fn perovskite(a_site: &str, b_site: &str, x_site: &str, a: f64) -> Result<CrystalStructure, StructureError> {
    let z = |s: &str| {
        elements::atomic_number(s).ok_or_else(|| StructureError::UnknownElementSymbol {
            symbol: s.to_string(),
            line: 0,
        })
    };
    let (za, zb, zx) = (z(a_site)?, z(b_site)?, z(x_site)?);
    let site = |atomic_number, frac| Site {
        atomic_number,
        frac,
    };
    CrystalStructure::new(
        [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]],
        vec![
            site(za, [0.0, 0.0, 0.0]),
            site(zb, [0.5, 0.5, 0.5]),
            site(zx, [0.5, 0.5, 0.0]),
            site(zx, [0.5, 0.0, 0.5]),
            site(zx, [0.0, 0.5, 0.5]),
        ],
    )
}

/// `n` entries, deterministic in `seed`, with ids `toy_0000`, `toy_0001`, ...
pub fn gen_toy(n: usize, seed: u64) -> Result<Vec<ToyEntry>, StructureError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (a_el, chi_a) = A_SITES[rng.random_range(0..A_SITES.len())];
            let (b_el, chi_b) = B_SITES[rng.random_range(0..B_SITES.len())];
            let (x_el, chi_x) = X_SITES[rng.random_range(0..X_SITES.len())];
            let a = rng.random_range(MIN_LATTICE..=MAX_LATTICE);
            let chi = (chi_a + chi_b + 3.0 * chi_x) / 5.0;
            Ok(ToyEntry {
                id: format!("toy_{i:04}"),
                formula: format!("{a_el}{b_el}{x_el}3"),
                structure: perovskite(a_el, b_el, x_el, a)?,
                label: toy_label(chi, a),
            })
        })
        .collect()
}

/// Index file written next to the CIFs by [`write_toy`].
pub const INDEX_FILE: &str = "id_prop.csv";

/// Writes `<id>.cif` per entry and an `id,label` index.
pub fn write_toy(entries: &[ToyEntry], out: &Path) -> Result<(), StructureError> {
    fs::create_dir_all(out)?;
    let mut index = String::new();
    for e in entries {
        fs::write(out.join(format!("{}.cif", e.id)), write_cif(&e.structure, &e.formula))?;
        index.push_str(&format!("{},{:?}\n", e.id, e.label));
    }
    fs::write(out.join(INDEX_FILE), index)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure_io::parse_cif;

    #[test]
    fn label_formula_at_reference_point() {
        assert_eq!(toy_label(2.2, 4.0), -1.5);
        assert!((toy_label(2.7, 4.5) - (-1.5 + 0.4 + 0.3 - 0.125)).abs() < 1e-15);
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(gen_toy(5, 3).unwrap(), gen_toy(5, 3).unwrap());
        assert_ne!(gen_toy(5, 3).unwrap(), gen_toy(5, 4).unwrap());
    }

    #[test]
    fn single_entry_round_trips_through_cif() {
        let e = &gen_toy(1, 0).unwrap()[0];
        let text = write_cif(&e.structure, &e.formula);
        assert_eq!(parse_cif(&text).unwrap(), e.structure);
        let a = e.structure.lattice()[0][0];
        assert!((MIN_LATTICE..=MAX_LATTICE).contains(&a));
        assert_eq!(e.structure.num_sites(), 5);
    }
}
