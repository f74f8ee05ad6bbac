//! A CIF reader for the subset needed to build crystal graphs: cell
//! parameters, `atom_site` loops, and explicit `_symmetry_equiv_pos_as_xyz`
//! operator lists. Everything else in the file is skipped.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::elements;
use super::{wrap_unit, CrystalStructure, Site, StructureError};
use crate::geometry::{self, Mat3, Vec3};

const LENGTH_TAGS: [&str; 3] = ["_cell_length_a", "_cell_length_b", "_cell_length_c"];
const ANGLE_TAGS: [&str; 3] = [
    "_cell_angle_alpha",
    "_cell_angle_beta",
    "_cell_angle_gamma",
];
const FRACT_TAGS: [&str; 3] = [
    "_atom_site_fract_x",
    "_atom_site_fract_y",
    "_atom_site_fract_z",
];
const SYMOP_TAG: &str = "_symmetry_equiv_pos_as_xyz";

/// Positions generated by symmetry closer than this (Å, periodic) are merged.
pub const DUPLICATE_TOLERANCE: f64 = 1e-3;
const OCCUPANCY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
struct Token {
    text: String,
    line: usize,
    quoted: bool,
}

impl Token {
    fn is_tag(&self) -> bool {
        !self.quoted && self.text.starts_with('_')
    }

    fn is_reserved(&self) -> bool {
        if self.quoted {
            return false;
        }
        let lower = self.text.to_ascii_lowercase();
        lower == "loop_" || lower.starts_with("data_") || lower.starts_with("save_")
    }
}

fn tokenize(text: &str) -> Result<Vec<Token>, StructureError> {
    let mut tokens = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((idx, raw)) = lines.next() {
        let line = idx + 1;
        // semicolon-delimited text field
        if raw.starts_with(';') {
            let mut field = raw[1..].to_string();
            let mut closed = false;
            for (_, next) in lines.by_ref() {
                if next.starts_with(';') {
                    closed = true;
                    break;
                }
                field.push('\n');
                field.push_str(next);
            }
            if !closed {
                return Err(StructureError::UnterminatedQuote(line));
            }
            tokens.push(Token {
                text: field,
                line,
                quoted: true,
            });
            continue;
        }
        let chars: Vec<char> = raw.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if c == '#' {
                break;
            } else if c == '\'' || c == '"' {
                // a quote closes only when followed by whitespace or end of line
                let mut j = i + 1;
                loop {
                    if j >= chars.len() {
                        return Err(StructureError::UnterminatedQuote(line));
                    }
                    if chars[j] == c && (j + 1 == chars.len() || chars[j + 1].is_whitespace()) {
                        break;
                    }
                    j += 1;
                }
                tokens.push(Token {
                    text: chars[i + 1..j].iter().collect(),
                    line,
                    quoted: true,
                });
                i = j + 1;
            } else {
                let start = i;
                while i < chars.len() && !chars[i].is_whitespace() {
                    i += 1;
                }
                tokens.push(Token {
                    text: chars[start..i].iter().collect(),
                    line,
                    quoted: false,
                });
            }
        }
    }
    Ok(tokens)
}

struct Loop {
    tags: Vec<String>,
    rows: Vec<Vec<Token>>,
}

impl Loop {
    fn column(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }
}

#[derive(Default)]
struct DataBlock {
    items: HashMap<String, Token>,
    loops: Vec<Loop>,
}

/// Reads the first data block. Tags are compared case-insensitively.
fn parse_block(tokens: Vec<Token>) -> DataBlock {
    let mut block = DataBlock::default();
    let mut seen_data = false;
    let mut iter = tokens.into_iter().peekable();
    while let Some(tok) = iter.next() {
        let lower = tok.text.to_ascii_lowercase();
        if !tok.quoted && lower.starts_with("data_") {
            if seen_data {
                break;
            }
            seen_data = true;
        } else if !tok.quoted && lower == "loop_" {
            let mut tags = Vec::new();
            while let Some(next) = iter.peek() {
                if next.is_tag() {
                    tags.push(next.text.to_ascii_lowercase());
                    iter.next();
                } else {
                    break;
                }
            }
            let mut values = Vec::new();
            while let Some(next) = iter.peek() {
                if next.is_tag() || next.is_reserved() {
                    break;
                }
                values.push(iter.next().unwrap());
            }
            if tags.is_empty() {
                continue;
            }
            // trailing partial rows are dropped
            let rows = values
                .chunks_exact(tags.len())
                .map(|c| c.to_vec())
                .collect();
            block.loops.push(Loop { tags, rows });
        } else if tok.is_tag() {
            if let Some(next) = iter.peek() {
                if !next.is_tag() && !next.is_reserved() {
                    let value = iter.next().unwrap();
                    block.items.insert(lower, value);
                }
            }
        }
    }
    block
}

/// Parses a CIF number, dropping a trailing standard uncertainty such as `4.0(2)`.
fn parse_number(tag: &str, tok: &Token) -> Result<Option<f64>, StructureError> {
    let text = tok.text.trim();
    if text == "?" || text == "." {
        return Ok(None);
    }
    let core = match text.find('(') {
        Some(pos) => &text[..pos],
        None => text,
    };
    core.parse::<f64>()
        .map(Some)
        .map_err(|_| StructureError::InvalidNumber {
            tag: tag.to_string(),
            value: tok.text.clone(),
        })
}

fn cos_deg(angle: f64) -> f64 {
    if angle == 90.0 {
        0.0
    } else {
        angle.to_radians().cos()
    }
}

/// Lattice from cell lengths and angles: `a` along x, `b` in the xy-plane.
pub fn lattice_from_parameters(lengths: [f64; 3], angles: [f64; 3]) -> Mat3 {
    let [a, b, c] = lengths;
    let (ca, cb, cg) = (cos_deg(angles[0]), cos_deg(angles[1]), cos_deg(angles[2]));
    let sg = if angles[2] == 90.0 {
        1.0
    } else {
        angles[2].to_radians().sin()
    };
    let cx = c * cb;
    let cy = c * (ca - cb * cg) / sg;
    let cz = (c * c - cx * cx - cy * cy).max(0.0).sqrt();
    [[a, 0.0, 0.0], [b * cg, b * sg, 0.0], [cx, cy, cz]]
}

/// An affine operation on fractional coordinates: `x' = R x + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryOp {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl SymmetryOp {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Parses a Jones-faithful triplet such as `-y+1/2, x, z-1/4`.
    pub fn parse(text: &str) -> Option<Self> {
        let parts: Vec<&str> = text.split(',').collect();
        if parts.len() != 3 {
            return None;
        }
        let mut op = Self {
            rotation: [[0.0; 3]; 3],
            translation: [0.0; 3],
        };
        for (row, part) in parts.iter().enumerate() {
            let (coeffs, shift) = parse_component(part)?;
            op.rotation[row] = coeffs;
            op.translation[row] = shift;
        }
        Some(op)
    }

    pub fn apply(&self, frac: &Vec3) -> Vec3 {
        let mut out = self.translation;
        for (o, row) in out.iter_mut().zip(&self.rotation) {
            *o += geometry::dot(row, frac);
        }
        out
    }
}

fn parse_component(text: &str) -> Option<([f64; 3], f64)> {
    let compact: String = text
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| c.to_ascii_lowercase())
        .collect();
    if compact.is_empty() {
        return None;
    }
    let chars: Vec<char> = compact.chars().collect();
    let mut coeffs = [0.0; 3];
    let mut shift = 0.0;
    let mut i = 0;
    while i < chars.len() {
        let mut sign = 1.0;
        if chars[i] == '+' || chars[i] == '-' {
            if chars[i] == '-' {
                sign = -1.0;
            }
            i += 1;
        }
        let start = i;
        while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.' || chars[i] == '/') {
            i += 1;
        }
        let number = if i > start {
            let literal: String = chars[start..i].iter().collect();
            Some(parse_fraction(&literal)?)
        } else {
            None
        };
        if i < chars.len() && chars[i] == '*' {
            i += 1;
        }
        let axis = match chars.get(i) {
            Some('x') => Some(0),
            Some('y') => Some(1),
            Some('z') => Some(2),
            _ => None,
        };
        match (number, axis) {
            (n, Some(ax)) => {
                coeffs[ax] += sign * n.unwrap_or(1.0);
                i += 1;
            }
            (Some(n), None) => shift += sign * n,
            (None, None) => return None,
        }
    }
    Some((coeffs, shift))
}

fn parse_fraction(literal: &str) -> Option<f64> {
    match literal.split_once('/') {
        Some((num, den)) => {
            let n: f64 = num.parse().ok()?;
            let d: f64 = den.parse().ok()?;
            if d == 0.0 {
                None
            } else {
                Some(n / d)
            }
        }
        None => literal.parse().ok(),
    }
}

/// Smallest Cartesian distance between two fractional positions over
/// periodic images.
fn periodic_separation(lattice: &Mat3, a: &Vec3, b: &Vec3) -> f64 {
    let mut delta = [0.0; 3];
    for k in 0..3 {
        let d = b[k] - a[k];
        delta[k] = d - d.round();
    }
    let mut best = f64::INFINITY;
    for i in -1..=1 {
        for j in -1..=1 {
            for k in -1..=1 {
                let shifted = [delta[0] + i as f64, delta[1] + j as f64, delta[2] + k as f64];
                best = best.min(geometry::norm(&geometry::frac_to_cart_unchecked(
                    lattice, &shifted,
                )));
            }
        }
    }
    best
}

/// Parses CIF text into a [`CrystalStructure`], expanding any explicit
/// symmetry operator list and merging coincident positions.
pub fn parse_cif(text: &str) -> Result<CrystalStructure, StructureError> {
    let block = parse_block(tokenize(text)?);

    let mut lengths = [0.0; 3];
    let mut angles = [0.0; 3];
    for (tags, out) in [(&LENGTH_TAGS, &mut lengths), (&ANGLE_TAGS, &mut angles)] {
        for (tag, slot) in tags.iter().zip(out.iter_mut()) {
            let tok = block
                .items
                .get(*tag)
                .ok_or_else(|| StructureError::MissingCellParameter(tag.to_string()))?;
            *slot = parse_number(tag, tok)?
                .ok_or_else(|| StructureError::MissingCellParameter(tag.to_string()))?;
        }
    }
    let lattice = lattice_from_parameters(lengths, angles);

    let atoms = block
        .loops
        .iter()
        .find(|l| FRACT_TAGS.iter().all(|t| l.column(t).is_some()))
        .ok_or(StructureError::MissingAtomLoop)?;
    let symbol_col = atoms
        .column("_atom_site_type_symbol")
        .or_else(|| atoms.column("_atom_site_label"))
        .ok_or(StructureError::MissingAtomLoop)?;
    let label_col = atoms.column("_atom_site_label").unwrap_or(symbol_col);
    let occupancy_col = atoms.column("_atom_site_occupancy");
    let fract_cols: Vec<usize> = FRACT_TAGS
        .iter()
        .map(|t| atoms.column(t).unwrap())
        .collect();

    let mut base_sites = Vec::with_capacity(atoms.rows.len());
    for row in &atoms.rows {
        let sym_tok = &row[symbol_col];
        let z = elements::element_from_site_token(&sym_tok.text).ok_or_else(|| {
            StructureError::UnknownElementSymbol {
                symbol: sym_tok.text.clone(),
                line: sym_tok.line,
            }
        })?;
        if let Some(col) = occupancy_col {
            if let Some(occ) = parse_number("_atom_site_occupancy", &row[col])? {
                if (occ - 1.0).abs() > OCCUPANCY_TOLERANCE {
                    return Err(StructureError::PartialOccupancy {
                        label: row[label_col].text.clone(),
                        occupancy: occ,
                    });
                }
            }
        }
        let mut frac = [0.0; 3];
        for (k, &col) in fract_cols.iter().enumerate() {
            frac[k] = parse_number(FRACT_TAGS[k], &row[col])?.ok_or_else(|| {
                StructureError::InvalidNumber {
                    tag: FRACT_TAGS[k].to_string(),
                    value: row[col].text.clone(),
                }
            })?;
        }
        base_sites.push(Site {
            atomic_number: z,
            frac,
        });
    }
    if base_sites.is_empty() {
        return Err(StructureError::MissingAtomLoop);
    }

    let mut op_tokens: Vec<&Token> = Vec::new();
    if let Some(l) = block.loops.iter().find(|l| l.column(SYMOP_TAG).is_some()) {
        let col = l.column(SYMOP_TAG).unwrap();
        op_tokens.extend(l.rows.iter().map(|r| &r[col]));
    } else if let Some(tok) = block.items.get(SYMOP_TAG) {
        op_tokens.push(tok);
    }
    let mut ops = Vec::with_capacity(op_tokens.len());
    for tok in op_tokens {
        let op = SymmetryOp::parse(&tok.text).ok_or_else(|| StructureError::MalformedSymmetryOp {
            op: tok.text.clone(),
            line: tok.line,
        })?;
        ops.push(op);
    }
    if ops.is_empty() {
        ops.push(SymmetryOp::identity());
    }

    let mut sites: Vec<Site> = Vec::new();
    for base in &base_sites {
        for op in &ops {
            let frac = op.apply(&base.frac).map(wrap_unit);
            let duplicate = sites.iter().any(|s| {
                s.atomic_number == base.atomic_number
                    && periodic_separation(&lattice, &s.frac, &frac) < DUPLICATE_TOLERANCE
            });
            if !duplicate {
                sites.push(Site {
                    atomic_number: base.atomic_number,
                    frac,
                });
            }
        }
    }
    CrystalStructure::new(lattice, sites)
}

/// Serializes a structure as a P1 CIF. Values use the shortest decimal
/// representation that reads back to the same `f64`.
pub fn write_cif(structure: &CrystalStructure, name: &str) -> String {
    let (lengths, angles) = structure.cell_parameters();
    let mut out = String::new();
    let _ = writeln!(out, "data_{name}");
    let _ = writeln!(out, "_symmetry_space_group_name_H-M   'P 1'");
    for (tag, v) in LENGTH_TAGS.iter().zip(lengths) {
        let _ = writeln!(out, "{tag}   {v:?}");
    }
    for (tag, v) in ANGLE_TAGS.iter().zip(angles) {
        let _ = writeln!(out, "{tag}   {v:?}");
    }
    out.push_str("loop_\n _symmetry_equiv_pos_as_xyz\n  'x, y, z'\n");
    out.push_str("loop_\n _atom_site_type_symbol\n _atom_site_label\n");
    out.push_str(" _atom_site_fract_x\n _atom_site_fract_y\n _atom_site_fract_z\n _atom_site_occupancy\n");
    for (i, site) in structure.sites().iter().enumerate() {
        let sym = elements::symbol(site.atomic_number).expect("validated atomic number");
        let [x, y, z] = site.frac;
        let _ = writeln!(out, "  {sym} {sym}{i} {x:?} {y:?} {z:?} 1");
    }
    out
}
