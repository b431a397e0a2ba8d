//! Atom positions for rings and open chains.
//!
//! Coordinates are in micrometres. A geometry can also be read from a JSON
//! file so that arbitrary layouts (e.g. a folded loop-chain) can be supplied.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boundary condition of the chain. Controls both the blockade constraint on
/// the pair `(L-1, 0)` and the bond set used for domain-wall counting.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Periodic,
    Open,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomGeometry {
    pub positions: Vec<[f64; 2]>,
    pub boundary: Boundary,
    /// Nearest-neighbour spacing `a` in micrometres.
    pub spacing: f64,
}

impl AtomGeometry {
    /// Builds a geometry from explicit coordinates, rejecting coincident atoms.
    pub fn from_positions(positions: Vec<[f64; 2]>, boundary: Boundary, spacing: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidGeometry("no atoms".into()));
        }
        if !(spacing > 0.0) {
            return Err(Error::InvalidGeometry(format!("spacing must be positive, got {spacing}")));
        }
        let geom = Self { positions, boundary, spacing };
        for j in 0..geom.len() {
            for k in (j + 1)..geom.len() {
                if geom.distance(j, k) <= 0.0 {
                    return Err(Error::InvalidGeometry(format!("atoms {j} and {k} coincide")));
                }
            }
        }
        Ok(geom)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn distance(&self, j: usize, k: usize) -> f64 {
        let [xj, yj] = self.positions[j];
        let [xk, yk] = self.positions[k];
        (xj - xk).hypot(yj - yk)
    }

    /// Reads a geometry file: `{"positions": [[x, y], ...], "boundary": "periodic"|"open"}`.
    /// The spacing is taken as the smallest pairwise distance unless given.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct GeometryFile {
            positions: Vec<[f64; 2]>,
            boundary: Boundary,
            #[serde(default)]
            spacing_um: Option<f64>,
        }
        let text = std::fs::read_to_string(path)?;
        let file: GeometryFile = serde_json::from_str(&text)?;
        let spacing = match file.spacing_um {
            Some(a) => a,
            None => min_pair_distance(&file.positions)
                .ok_or_else(|| Error::InvalidGeometry("need at least two atoms to infer spacing".into()))?,
        };
        Self::from_positions(file.positions, file.boundary, spacing)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let value = serde_json::json!({
            "positions": self.positions,
            "boundary": self.boundary,
            "spacing_um": self.spacing,
        });
        std::fs::write(path, serde_json::to_string_pretty(&value)?)?;
        Ok(())
    }
}

fn min_pair_distance(positions: &[[f64; 2]]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for (j, a) in positions.iter().enumerate() {
        for b in &positions[j + 1..] {
            let d = (a[0] - b[0]).hypot(a[1] - b[1]);
            best = Some(best.map_or(d, |m| m.min(d)));
        }
    }
    best
}

/// Regular `L`-gon with side length `a`, periodic boundary.
pub fn ring_positions(n_sites: usize, a: f64) -> Result<AtomGeometry> {
    if n_sites < 3 {
        return Err(Error::InvalidGeometry(format!("a ring needs at least 3 atoms, got {n_sites}")));
    }
    if !(a > 0.0) {
        return Err(Error::InvalidGeometry(format!("spacing must be positive, got {a}")));
    }
    // circumradius of a regular polygon with side a
    let radius = a / (2.0 * (PI / n_sites as f64).sin());
    let positions = (0..n_sites)
        .map(|j| {
            let theta = 2.0 * PI * j as f64 / n_sites as f64;
            [radius * theta.cos(), radius * theta.sin()]
        })
        .collect();
    Ok(AtomGeometry { positions, boundary: Boundary::Periodic, spacing: a })
}

/// Collinear, equally spaced atoms with open boundaries.
pub fn chain_positions(n_sites: usize, a: f64) -> Result<AtomGeometry> {
    if n_sites < 2 {
        return Err(Error::InvalidGeometry(format!("a chain needs at least 2 atoms, got {n_sites}")));
    }
    if !(a > 0.0) {
        return Err(Error::InvalidGeometry(format!("spacing must be positive, got {a}")));
    }
    let positions = (0..n_sites).map(|j| [a * j as f64, 0.0]).collect();
    Ok(AtomGeometry { positions, boundary: Boundary::Open, spacing: a })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn square_has_unit_sides_and_root_two_diagonal() {
        let g = ring_positions(4, 1.0).unwrap();
        assert_eq!(g.boundary, Boundary::Periodic);
        for j in 0..4 {
            assert_abs_diff_eq!(g.distance(j, (j + 1) % 4), 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(g.distance(0, 2), 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn triangle_is_equilateral() {
        let g = ring_positions(3, 2.0).unwrap();
        for (j, k) in [(0, 1), (1, 2), (0, 2)] {
            assert_abs_diff_eq!(g.distance(j, k), 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ring_of_24_has_exact_chords() {
        let g = ring_positions(24, 6.2).unwrap();
        for j in 0..24 {
            assert!((g.distance(j, (j + 1) % 24) - 6.2).abs() < 1e-9);
        }
    }

    #[test]
    fn ring_rejects_fewer_than_three() {
        assert!(matches!(ring_positions(2, 1.0), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn chain_distances() {
        let g = chain_positions(2, 6.2).unwrap();
        assert_abs_diff_eq!(g.distance(0, 1), 6.2, epsilon = 1e-12);
        let g = chain_positions(5, 1.0).unwrap();
        assert_abs_diff_eq!(g.distance(0, 4), 4.0, epsilon = 1e-12);
        let g = chain_positions(58, 6.2).unwrap();
        assert_eq!(g.len(), 58);
        assert!(g.positions.iter().all(|p| p[1] == 0.0));
        assert_eq!(g.boundary, Boundary::Open);
    }

    #[test]
    fn coincident_atoms_rejected() {
        let err = AtomGeometry::from_positions(vec![[0.0, 0.0], [0.0, 0.0]], Boundary::Open, 1.0);
        assert!(err.is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("geom.json");
        let g = ring_positions(6, 6.2).unwrap();
        g.save(&path).unwrap();
        let back = AtomGeometry::load(&path).unwrap();
        assert_eq!(back.boundary, Boundary::Periodic);
        assert_abs_diff_eq!(back.spacing, 6.2);
        for (a, b) in g.positions.iter().zip(&back.positions) {
            assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-12);
            assert_abs_diff_eq!(a[1], b[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn file_without_spacing_infers_minimum_distance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("geom.json");
        std::fs::write(&path, r#"{"positions": [[0,0],[3,0],[3,5]], "boundary": "open"}"#).unwrap();
        let g = AtomGeometry::load(&path).unwrap();
        assert_abs_diff_eq!(g.spacing, 3.0);
    }
}
