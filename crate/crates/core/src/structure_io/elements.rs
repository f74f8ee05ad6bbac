/// Element symbols indexed by `Z - 1`, covering hydrogen through fermium.
pub const SYMBOLS: [&str; 100] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", //
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca", //
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", //
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", //
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", //
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", //
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", //
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", //
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", //
    "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",
];

pub const MAX_ATOMIC_NUMBER: u8 = 100;

/// Looks up an atomic number from an exact (case-sensitive) element symbol.
pub fn atomic_number(symbol: &str) -> Option<u8> {
    SYMBOLS
        .iter()
        .position(|s| *s == symbol)
        .map(|i| (i + 1) as u8)
}

pub fn symbol(z: u8) -> Option<&'static str> {
    if (1..=MAX_ATOMIC_NUMBER).contains(&z) {
        Some(SYMBOLS[z as usize - 1])
    } else {
        None
    }
}

/// Resolves the element of a CIF site from its type symbol or label.
///
/// Labels such as `Na1`, `O2-` or `Fe3+` carry the element as a leading
/// alphabetic run; a two-letter match is preferred over a one-letter one.
pub fn element_from_site_token(token: &str) -> Option<u8> {
    let letters: String = token
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .take(2)
        .collect();
    if letters.is_empty() {
        return None;
    }
    let normalize = |s: &str| {
        let mut chars = s.chars();
        let first = chars.next().map(|c| c.to_ascii_uppercase());
        first
            .into_iter()
            .chain(chars.map(|c| c.to_ascii_lowercase()))
            .collect::<String>()
    };
    if letters.len() == 2 {
        if let Some(z) = atomic_number(&normalize(&letters)) {
            return Some(z);
        }
    }
    atomic_number(&normalize(&letters[..1]))
}
