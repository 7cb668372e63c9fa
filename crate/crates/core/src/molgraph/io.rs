//! XYZ and MOL V2000 readers/writers.

use std::fmt::Write as _;

use super::{Atom, Bond, BondOrder, Element, MolecularGraph};
use crate::error::{Error, Result};
use crate::geom::{Conformation, Vec3};

/// Distance-cutoff bond perception for XYZ input: atoms `i`, `j` are bonded
/// iff `|r_i - r_j| < scale * (R_i + R_j)` with tabulated covalent radii.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BondInference {
    pub scale: f64,
}

impl Default for BondInference {
    fn default() -> Self {
        BondInference { scale: 1.3 }
    }
}

impl BondInference {
    pub fn cutoff(&self, a: Element, b: Element) -> f64 {
        self.scale * (a.covalent_radius() + b.covalent_radius())
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("expected a number, got `{}`", tok.trim())))?;
    if !v.is_finite() {
        return Err(parse_err(line, "non-finite coordinate"));
    }
    Ok(v)
}

/// Parses one XYZ frame with the default bond inference.
pub fn parse_xyz(text: &str) -> Result<(MolecularGraph, Conformation)> {
    parse_xyz_with(text, &BondInference::default())
}

pub fn parse_xyz_with(
    text: &str,
    inference: &BondInference,
) -> Result<(MolecularGraph, Conformation)> {
    let lines: Vec<&str> = text.lines().collect();
    let (frame, rest) = read_xyz_frame(&lines, 0)?;
    if rest < lines.len() && lines[rest..].iter().any(|l| !l.trim().is_empty()) {
        // trailing non-blank rows mean the header undercounts
        let extra = lines[rest..]
            .iter()
            .filter(|l| !l.trim().is_empty())
            .count();
        return Err(Error::CountMismatch {
            declared: frame.0.len(),
            found: frame.0.len() + extra,
        });
    }
    build_from_xyz(frame, inference)
}

/// Parses a concatenation of XYZ frames. Bonds are perceived per frame.
pub fn parse_multi_xyz(text: &str) -> Result<Vec<(MolecularGraph, Conformation)>> {
    let inference = BondInference::default();
    xyz_frames(text)?
        .into_iter()
        .map(|f| build_from_xyz(f, &inference))
        .collect()
}

/// Elements and coordinates of every XYZ frame, without bond perception.
pub fn read_xyz_frames(text: &str) -> Result<Vec<(Vec<Element>, Conformation)>> {
    Ok(xyz_frames(text)?
        .into_iter()
        .map(|(e, c)| (e, Conformation::new(c)))
        .collect())
}

fn xyz_frames(text: &str) -> Result<Vec<XyzFrame>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < lines.len() {
        if lines[pos].trim().is_empty() {
            pos += 1;
            continue;
        }
        let (frame, next) = read_xyz_frame(&lines, pos)?;
        out.push(frame);
        pos = next;
    }
    Ok(out)
}

type XyzFrame = (Vec<Element>, Vec<Vec3>);

fn read_xyz_frame(lines: &[&str], start: usize) -> Result<(XyzFrame, usize)> {
    let header = lines
        .get(start)
        .ok_or_else(|| parse_err(start + 1, "missing atom count"))?;
    let declared: usize = header
        .trim()
        .parse()
        .map_err(|_| parse_err(start + 1, format!("bad atom count `{}`", header.trim())))?;
    let first_row = start + 2;
    let mut elements = Vec::with_capacity(declared);
    let mut coords = Vec::with_capacity(declared);
    for k in 0..declared {
        let lineno = first_row + k;
        let row = match lines.get(lineno) {
            Some(r) if !r.trim().is_empty() => r,
            _ => {
                return Err(Error::CountMismatch { declared, found: k });
            }
        };
        let toks: Vec<&str> = row.split_whitespace().collect();
        if toks.len() < 4 {
            return Err(parse_err(lineno + 1, "expected `element x y z`"));
        }
        elements.push(Element::from_symbol(toks[0])?);
        coords.push(Vec3::new(
            parse_f64(toks[1], lineno + 1)?,
            parse_f64(toks[2], lineno + 1)?,
            parse_f64(toks[3], lineno + 1)?,
        ));
    }
    Ok(((elements, coords), first_row + declared))
}

fn build_from_xyz(
    (elements, coords): XyzFrame,
    inference: &BondInference,
) -> Result<(MolecularGraph, Conformation)> {
    let n = elements.len();
    let mut bonds = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if (coords[i] - coords[j]).norm() < inference.cutoff(elements[i], elements[j]) {
                bonds.push(Bond::new(i, j, BondOrder::Single));
            }
        }
    }
    let atoms = elements.into_iter().map(Atom::new).collect();
    let g = MolecularGraph::new(atoms, bonds)?;
    Ok((g, Conformation::new(coords)))
}

/// Fixed-column field, 1-based inclusive columns; short lines yield "".
fn column(line: &str, first: usize, last: usize) -> &str {
    let start = (first - 1).min(line.len());
    let end = last.min(line.len());
    line.get(start..end).unwrap_or("").trim()
}

fn charge_from_code(code: i32) -> Option<i8> {
    match code {
        0 => Some(0),
        1 => Some(3),
        2 => Some(2),
        3 => Some(1),
        5 => Some(-1),
        6 => Some(-2),
        7 => Some(-3),
        _ => None,
    }
}

fn charge_to_code(charge: i8) -> i32 {
    match charge {
        3 => 1,
        2 => 2,
        1 => 3,
        -1 => 5,
        -2 => 6,
        -3 => 7,
        _ => 0,
    }
}

/// Parses a single MOL V2000 block.
pub fn parse_molfile(text: &str) -> Result<(MolecularGraph, Conformation)> {
    let lines: Vec<&str> = text.lines().collect();
    parse_mol_lines(&lines, 0)
}

/// Parses MOL blocks separated by `$$$$` lines.
pub fn parse_sdf(text: &str) -> Result<Vec<(MolecularGraph, Conformation)>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    let mut start = 0;
    for (idx, line) in lines.iter().enumerate() {
        if line.trim() == "$$$$" {
            if lines[start..idx].iter().any(|l| !l.trim().is_empty()) {
                out.push(parse_mol_lines(&lines[start..idx], start)?);
            }
            start = idx + 1;
        }
    }
    if lines[start..].iter().any(|l| !l.trim().is_empty()) {
        out.push(parse_mol_lines(&lines[start..], start)?);
    }
    Ok(out)
}

fn parse_mol_lines(lines: &[&str], offset: usize) -> Result<(MolecularGraph, Conformation)> {
    let counts_no = offset + 4;
    let counts = lines
        .get(3)
        .ok_or_else(|| parse_err(counts_no, "missing counts line"))?;
    let n_atoms: usize = column(counts, 1, 3)
        .parse()
        .map_err(|_| parse_err(counts_no, format!("malformed counts line `{counts}`")))?;
    let n_bonds: usize = column(counts, 4, 6)
        .parse()
        .map_err(|_| parse_err(counts_no, format!("malformed counts line `{counts}`")))?;

    let mut atoms = Vec::with_capacity(n_atoms);
    let mut coords = Vec::with_capacity(n_atoms);
    for k in 0..n_atoms {
        let idx = 4 + k;
        let lineno = offset + idx + 1;
        let line = lines.get(idx).ok_or(Error::CountMismatch {
            declared: n_atoms,
            found: k,
        })?;
        let x = parse_f64(column(line, 1, 10), lineno)?;
        let y = parse_f64(column(line, 11, 20), lineno)?;
        let z = parse_f64(column(line, 21, 30), lineno)?;
        let symbol = column(line, 32, 34);
        let element = Element::from_symbol(symbol)?;
        let charge_field = column(line, 37, 39);
        let charge = if charge_field.is_empty() {
            0
        } else {
            let code: i32 = charge_field
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad charge field `{charge_field}`")))?;
            charge_from_code(code)
                .ok_or_else(|| parse_err(lineno, format!("bad charge code {code}")))?
        };
        atoms.push(Atom::with_charge(element, charge)?);
        coords.push(Vec3::new(x, y, z));
    }

    let mut bonds = Vec::with_capacity(n_bonds);
    for k in 0..n_bonds {
        let idx = 4 + n_atoms + k;
        let lineno = offset + idx + 1;
        let line = lines
            .get(idx)
            .ok_or_else(|| parse_err(lineno, format!("missing bond row {}", k + 1)))?;
        let parse_idx = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| parse_err(lineno, format!("malformed bond row `{line}`")))
        };
        let i = parse_idx(column(line, 1, 3))?;
        let j = parse_idx(column(line, 4, 6))?;
        let code: u8 = column(line, 7, 9)
            .parse()
            .map_err(|_| parse_err(lineno, format!("malformed bond row `{line}`")))?;
        for atom in [i, j] {
            if atom == 0 || atom > n_atoms {
                return Err(Error::AtomOutOfRange {
                    bond: k,
                    atom,
                    count: n_atoms,
                });
            }
        }
        let order = BondOrder::from_mol_code(code)
            .ok_or_else(|| parse_err(lineno, format!("unsupported bond order code {code}")))?;
        bonds.push(Bond::new(i - 1, j - 1, order));
    }

    // Charges may also come from `M  CHG` property lines.
    for line in lines.iter().skip(4 + n_atoms + n_bonds) {
        if line.starts_with("M  END") {
            break;
        }
        if line.starts_with("M  CHG") {
            let toks: Vec<&str> = line.split_whitespace().skip(3).collect();
            for pair in toks.chunks(2) {
                if let [a, c] = pair {
                    let a: usize = a.parse().map_err(|_| parse_err(0, "bad M  CHG entry"))?;
                    let c: i8 = c.parse().map_err(|_| parse_err(0, "bad M  CHG entry"))?;
                    if a == 0 || a > atoms.len() {
                        return Err(parse_err(0, "M  CHG atom out of range"));
                    }
                    atoms[a - 1] = Atom::with_charge(atoms[a - 1].element, c)?;
                }
            }
        }
    }

    let g = MolecularGraph::new(atoms, bonds)?;
    Ok((g, Conformation::new(coords)))
}

/// Writes a MOL V2000 block (no trailing `$$$$`).
pub fn write_molfile(g: &MolecularGraph, c: &Conformation, name: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{name}");
    let _ = writeln!(s, "  confae");
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:>3}{:>3}  0  0  0  0  0  0  0  0999 V2000",
        g.num_atoms(),
        g.num_bonds()
    );
    for (atom, p) in g.atoms().iter().zip(c.coords()) {
        let _ = writeln!(
            s,
            "{:>10.4}{:>10.4}{:>10.4} {:<3} 0{:>3}  0  0  0  0  0  0  0  0  0  0",
            p.x,
            p.y,
            p.z,
            atom.element.symbol(),
            charge_to_code(atom.formal_charge)
        );
    }
    for b in g.bonds() {
        let _ = writeln!(
            s,
            "{:>3}{:>3}{:>3}  0",
            b.i + 1,
            b.j + 1,
            b.order.mol_code()
        );
    }
    let _ = writeln!(s, "M  END");
    s
}

/// Writes one XYZ frame with 6 decimals.
pub fn write_xyz(g: &MolecularGraph, c: &Conformation, comment: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", g.num_atoms());
    let _ = writeln!(s, "{}", comment.replace('\n', " "));
    for (atom, p) in g.atoms().iter().zip(c.coords()) {
        let _ = writeln!(
            s,
            "{:<2} {:>12.6} {:>12.6} {:>12.6}",
            atom.element.symbol(),
            p.x,
            p.y,
            p.z
        );
    }
    s
}

pub fn write_multi_xyz<'a>(
    g: &MolecularGraph,
    frames: impl IntoIterator<Item = (&'a Conformation, String)>,
) -> String {
    frames
        .into_iter()
        .map(|(c, comment)| write_xyz(g, c, &comment))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const WATER: &str =
        "3\nwater\nO 0.000 0.000 0.000\nH 0.957 0.000 0.000\nH -0.240 0.927 0.000\n";

    #[test]
    fn xyz_water_bonds() {
        let (g, c) = parse_xyz(WATER).unwrap();
        assert_eq!(g.num_atoms(), 3);
        assert_eq!(g.num_bonds(), 2);
        assert!(g.are_bonded(0, 1) && g.are_bonded(0, 2) && !g.are_bonded(1, 2));
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn xyz_count_mismatch() {
        let text = "5\nshort\nC 0 0 0\nC 1.5 0 0\nH 2 1 0\nH -0.5 1 0\n";
        assert!(matches!(
            parse_xyz(text),
            Err(Error::CountMismatch {
                declared: 5,
                found: 4
            })
        ));
    }

    #[test]
    fn xyz_fragments_rejected() {
        let text = "4\ntwo molecules\nH 0 0 0\nH 0.74 0 0\nH 10 0 0\nH 10.74 0 0\n";
        assert!(matches!(
            parse_xyz(text),
            Err(Error::Disconnected { components: 2 })
        ));
    }

    #[test]
    fn xyz_unknown_element() {
        let text = "2\n\nXe 0 0 0\nH 1 0 0\n";
        assert!(matches!(parse_xyz(text), Err(Error::UnknownElement(_))));
    }

    #[test]
    fn molfile_malformed_counts() {
        let text = "name\n  prog\n\n  x  y  0  0  0  0  0  0  0  0999 V2000\n";
        assert!(matches!(
            parse_molfile(text),
            Err(Error::Parse { line: 4, .. })
        ));
    }

    #[test]
    fn multi_xyz_frames() {
        let text = format!("{WATER}{WATER}");
        let frames = parse_multi_xyz(&text).unwrap();
        assert_eq!(frames.len(), 2);
    }
}
