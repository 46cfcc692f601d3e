/// Static data for one chemical element.
#[derive(Debug)]
pub struct ElementInfo {
    pub symbol: &'static str,
    pub number: u8,
    /// Standard atomic weight.
    pub mass: f64,
    /// Allowed neutral valences, ascending. Empty means unchecked.
    pub valences: &'static [u8],
}

macro_rules! elements {
    ($( $sym:literal $num:literal $mass:literal [$($v:literal),*] ;)*) => {
        static ELEMENTS: &[ElementInfo] = &[
            $( ElementInfo { symbol: $sym, number: $num, mass: $mass, valences: &[$($v),*] }, )*
        ];
    };
}

elements! {
    "H" 1 1.008 [1];
    "Li" 3 6.94 [];
    "B" 5 10.81 [3];
    "C" 6 12.011 [4];
    "N" 7 14.007 [3];
    "O" 8 15.999 [2];
    "F" 9 18.998 [1];
    "Na" 11 22.990 [];
    "Mg" 12 24.305 [];
    "Al" 13 26.982 [];
    "Si" 14 28.085 [4];
    "P" 15 30.974 [3, 5];
    "S" 16 32.06 [2, 4, 6];
    "Cl" 17 35.45 [1];
    "K" 19 39.098 [];
    "Ca" 20 40.078 [];
    "Ti" 22 47.867 [];
    "Cr" 24 51.996 [];
    "Mn" 25 54.938 [];
    "Fe" 26 55.845 [];
    "Co" 27 58.933 [];
    "Ni" 28 58.693 [];
    "Cu" 29 63.546 [];
    "Zn" 30 65.38 [];
    "Ga" 31 69.723 [];
    "Ge" 32 72.630 [];
    "As" 33 74.922 [3, 5];
    "Se" 34 78.971 [2, 4, 6];
    "Br" 35 79.904 [1];
    "Rb" 37 85.468 [];
    "Sr" 38 87.62 [];
    "Tc" 43 98.0 [];
    "Ag" 47 107.868 [];
    "In" 49 114.818 [];
    "Sn" 50 118.710 [];
    "Sb" 51 121.760 [];
    "Te" 52 127.60 [2, 4, 6];
    "I" 53 126.904 [1];
    "Cs" 55 132.905 [];
    "Ba" 56 137.327 [];
    "Gd" 64 157.25 [];
    "Pt" 78 195.084 [];
    "Au" 79 196.967 [];
    "Hg" 80 200.592 [];
    "Bi" 83 208.980 [];
}

/// Elements that may be written without brackets.
const ORGANIC: &[&str] = &["B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"];
/// Elements that may carry the aromatic (lowercase) flag.
const AROMATIC: &[&str] = &["B", "C", "N", "O", "P", "S", "Se", "As", "Te"];
/// Aromatic elements with a bare lowercase form outside brackets.
const AROMATIC_ORGANIC: &[&str] = &["B", "C", "N", "O", "P", "S"];

/// Index into the element table; cheap to copy and compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Element(u8);

impl Element {
    pub fn from_symbol(symbol: &str) -> Option<Element> {
        ELEMENTS
            .iter()
            .position(|e| e.symbol == symbol)
            .map(|i| Element(i as u8))
    }

    pub fn info(self) -> &'static ElementInfo {
        &ELEMENTS[self.0 as usize]
    }

    pub fn symbol(self) -> &'static str {
        self.info().symbol
    }

    pub fn atomic_number(self) -> u8 {
        self.info().number
    }

    pub fn mass(self) -> f64 {
        self.info().mass
    }

    pub fn is_hydrogen(self) -> bool {
        self.info().number == 1
    }

    pub fn is_carbon(self) -> bool {
        self.info().number == 6
    }

    pub fn is_halogen(self) -> bool {
        matches!(self.info().number, 9 | 17 | 35 | 53)
    }

    pub fn is_organic_subset(self) -> bool {
        ORGANIC.contains(&self.symbol())
    }

    pub fn can_be_aromatic(self) -> bool {
        AROMATIC.contains(&self.symbol())
    }

    pub fn has_bare_aromatic_form(self) -> bool {
        AROMATIC_ORGANIC.contains(&self.symbol())
    }

    /// Valences allowed at a given formal charge, ascending. `None` when the
    /// element is not valence-checked.
    pub fn allowed_valences(self, charge: i32) -> Option<Vec<u32>> {
        let info = self.info();
        if info.valences.is_empty() {
            return None;
        }
        let shift = |v: u8| -> i32 {
            let v = v as i32;
            match info.number {
                1 | 6 | 14 | 32 => v - charge.abs(),
                5 => v - charge,
                _ => v + charge,
            }
        };
        let mut out: Vec<u32> = info
            .valences
            .iter()
            .map(|&v| shift(v).max(0) as u32)
            .collect();
        out.dedup();
        Some(out)
    }
}
