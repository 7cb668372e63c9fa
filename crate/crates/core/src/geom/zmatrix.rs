//! Internal-to-Cartesian reconstruction along a spanning-tree placement order.

use std::collections::VecDeque;

use super::internal::InternalCoordinates;
use super::{Conformation, Vec3, DEGENERACY_TOL};
use crate::error::{Error, Result};
use crate::molgraph::MolecularGraph;

/// Atoms a placed atom is positioned against: its bonded parent `p`, then
/// `g` bonded to `p`, then `gg` bonded to `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum References {
    Origin,
    Distance { p: usize },
    Angle { p: usize, g: usize },
    Dihedral { p: usize, g: usize, gg: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Placement {
    pub atom: usize,
    pub refs: References,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PlacementPlan {
    pub placements: Vec<Placement>,
}

impl PlacementPlan {
    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    pub fn order(&self) -> Vec<usize> {
        self.placements.iter().map(|p| p.atom).collect()
    }
}

/// Deterministic placement order.
///
/// Atoms are visited by breadth-first rank from the lowest-index heavy atom
/// (neighbors in index order). An atom is placed against its BFS parent,
/// grandparent and great-grandparent; when one of those is missing the
/// lowest-index placed neighbor of the previous reference is used instead.
/// Atoms that do not yet have a complete bonded reference path are deferred
/// until one exists. The second and third atoms are non-terminal whenever
/// possible.
pub fn build_placement_plan(g: &MolecularGraph) -> Result<PlacementPlan> {
    let n = g.num_atoms();
    if n < 2 {
        return Err(Error::InvalidGraph(format!(
            "placement needs at least 2 atoms, got {n}"
        )));
    }
    let root = g
        .atoms()
        .iter()
        .position(|a| a.element.is_heavy())
        .unwrap_or(0);

    let mut rank = vec![usize::MAX; n];
    let mut parent = vec![usize::MAX; n];
    let mut by_rank = Vec::with_capacity(n);
    rank[root] = 0;
    by_rank.push(root);
    let mut queue = VecDeque::from([root]);
    while let Some(a) = queue.pop_front() {
        for &b in g.neighbors(a) {
            if rank[b] == usize::MAX {
                rank[b] = by_rank.len();
                parent[b] = a;
                by_rank.push(b);
                queue.push_back(b);
            }
        }
    }
    if by_rank.len() != n {
        return Err(Error::Disconnected { components: 2 });
    }

    let mut placed = vec![false; n];
    let mut placements = Vec::with_capacity(n);
    placed[root] = true;
    placements.push(Placement {
        atom: root,
        refs: References::Origin,
    });

    let placed_parent = |x: usize, placed: &[bool]| -> Option<usize> {
        let p = parent[x];
        (p != usize::MAX && placed[p]).then_some(p)
    };

    let try_place = |x: usize, placed: &[bool], count: usize| -> Option<Placement> {
        let p = placed_parent(x, placed)?;
        if count == 1 {
            return Some(Placement {
                atom: x,
                refs: References::Distance { p },
            });
        }
        let mut g_candidates: Vec<usize> = Vec::new();
        if let Some(gp) = placed_parent(p, placed) {
            g_candidates.push(gp);
        }
        for &nb in g.neighbors(p) {
            if placed[nb] && nb != x && !g_candidates.contains(&nb) {
                g_candidates.push(nb);
            }
        }
        if count == 2 {
            return g_candidates.first().map(|&gref| Placement {
                atom: x,
                refs: References::Angle { p, g: gref },
            });
        }
        for &gref in &g_candidates {
            let mut gg_candidates: Vec<usize> = Vec::new();
            if let Some(ggp) = placed_parent(gref, placed) {
                gg_candidates.push(ggp);
            }
            gg_candidates.extend(g.neighbors(gref).iter().copied().filter(|&nb| placed[nb]));
            if let Some(gg) = gg_candidates.into_iter().find(|&gg| gg != p && gg != x) {
                return Some(Placement {
                    atom: x,
                    refs: References::Dihedral { p, g: gref, gg },
                });
            }
        }
        None
    };

    while placements.len() < n {
        let count = placements.len();
        let open = || by_rank.iter().copied().filter(|&x| !placed[x]);
        // the second and third atoms prefer non-terminal atoms so that the
        // first three do not form a star with only terminal ends
        let chosen = if count <= 2 {
            open()
                .filter(|&x| g.degree(x) >= 2)
                .find_map(|x| try_place(x, &placed, count))
                .or_else(|| open().find_map(|x| try_place(x, &placed, count)))
        } else {
            open().find_map(|x| try_place(x, &placed, count))
        };
        let Some(pl) = chosen else {
            let stuck: Vec<usize> = (0..n).filter(|&a| !placed[a]).collect();
            return Err(Error::InvalidGraph(format!(
                "no bonded dihedral path available to place atoms {stuck:?}"
            )));
        };
        placed[pl.atom] = true;
        placements.push(pl);
    }
    Ok(PlacementPlan { placements })
}

/// Positions `d` so that `|d - c| = length`, angle `b-c-d` equals `angle` and
/// torsion `a-b-c-d` equals `torsion`.
pub fn place_atom(
    a: &Vec3,
    b: &Vec3,
    c: &Vec3,
    length: f64,
    angle: f64,
    torsion: f64,
) -> Result<Vec3> {
    let bc = c - b;
    let nbc = bc.norm();
    if nbc < DEGENERACY_TOL {
        return Err(Error::Degenerate("coincident reference atoms".into()));
    }
    let bc = bc / nbc;
    let n = (b - a).cross(&bc);
    let nn = n.norm();
    if nn < DEGENERACY_TOL {
        return Err(Error::Degenerate("collinear reference atoms".into()));
    }
    let n = n / nn;
    let m = n.cross(&bc);
    let local = Vec3::new(
        -length * angle.cos(),
        length * angle.sin() * torsion.cos(),
        length * angle.sin() * torsion.sin(),
    );
    Ok(c + bc * local.x + m * local.y + n * local.z)
}

fn check_angle(atom: usize, angle: f64) -> Result<f64> {
    if !(angle > 0.0 && angle < std::f64::consts::PI) {
        return Err(Error::PlacementAngle { atom, angle });
    }
    Ok(angle)
}

/// Rebuilds Cartesian coordinates from the plan's subset of `ic`.
///
/// The first atom sits at the origin, the second on +x and the third in the
/// xy half-plane with y > 0.
pub fn to_cartesian(plan: &PlacementPlan, ic: &InternalCoordinates) -> Result<Conformation> {
    let n = plan.len();
    let index = ic.index();
    let mut pos: Vec<Option<Vec3>> = vec![None; n];
    let get = |pos: &[Option<Vec3>], a: usize| -> Result<Vec3> {
        pos.get(a)
            .copied()
            .flatten()
            .ok_or_else(|| Error::InvalidArgument(format!("reference atom {a} not yet placed")))
    };
    for pl in &plan.placements {
        let x = pl.atom;
        if x >= n {
            return Err(Error::InvalidArgument(format!("atom {x} out of range")));
        }
        let p = match pl.refs {
            References::Origin => Vec3::zeros(),
            References::Distance { p } => {
                get(&pos, p)? + Vec3::new(index.distance(x, p)?, 0.0, 0.0)
            }
            References::Angle { p, g } => {
                let d = index.distance(x, p)?;
                let phi = check_angle(x, index.angle(x, p, g)?)?;
                let pp = get(&pos, p)?;
                let u = (get(&pos, g)? - pp).normalize();
                // in-plane perpendicular on the +y side
                let mut w = Vec3::new(-u.y, u.x, 0.0);
                if w.y < 0.0 || (w.y == 0.0 && w.x < 0.0) {
                    w = -w;
                }
                if w.norm() < DEGENERACY_TOL {
                    return Err(Error::Degenerate("second atom off the x axis".into()));
                }
                pp + (u * phi.cos() + w.normalize() * phi.sin()) * d
            }
            References::Dihedral { p, g, gg } => {
                let d = index.distance(x, p)?;
                let phi = check_angle(x, index.angle(x, p, g)?)?;
                let psi = index.dihedral(x, p, g, gg)?;
                place_atom(&get(&pos, gg)?, &get(&pos, g)?, &get(&pos, p)?, d, phi, psi)?
            }
        };
        pos[x] = Some(p);
    }
    let coords = pos
        .into_iter()
        .enumerate()
        .map(|(a, p)| {
            p.ok_or_else(|| Error::InvalidArgument(format!("atom {a} missing from plan")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Conformation::new(coords))
}
