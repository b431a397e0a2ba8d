//! Matrix-free action of the time-dependent Rydberg Hamiltonian
//!
//! ```text
//! H(t)/hbar = Omega(t)/2 sum_j X_j - Delta(t) sum_j n_j + C6 sum_{j<k} n_j n_k / r_jk^6
//! ```
//!
//! in a (possibly blockade-constrained) basis. The diagonal interaction and
//! occupation numbers are precomputed per basis state; the drive term is
//! applied by visiting single-bit flips that stay inside the basis.

use std::ops::{Add, Mul};
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::basis::ConstrainedBasis;
use crate::error::{Error, Result};
use crate::geometry::{AtomGeometry, Boundary};
use crate::protocol::{DriveProtocol, RydbergParams};

/// Pair distance used for the interaction tail on a periodic chain.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RingDistance {
    /// Euclidean distance between the atom positions.
    #[default]
    Chord,
    /// `a * min(|j - k|, L - |j - k|)`, as for a straight chain with periodic images.
    MinimalImage,
}

#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct HamiltonianOptions {
    /// Drop pair interactions beyond this distance (um). `None` sums all pairs.
    pub cutoff_um: Option<f64>,
    /// Ignored for open boundaries.
    pub ring_distance: RingDistance,
}

/// Basis-index connectivity of single-bit flips, in compressed-row form.
///
/// Holds only which states are connected; the coupling strength is applied
/// at evaluation time from `Omega(t)`.
#[derive(Clone, Debug)]
struct FlipTable {
    offsets: Vec<usize>,
    targets: Vec<u32>,
}

impl FlipTable {
    fn build(basis: &ConstrainedBasis) -> Self {
        let mut offsets = Vec::with_capacity(basis.dim() + 1);
        let mut targets = Vec::with_capacity(basis.dim() * basis.n_sites() / 2);
        offsets.push(0);
        for &s in basis.states() {
            for j in 0..basis.n_sites() {
                if let Some(k) = basis.find(s ^ (1u64 << j)) {
                    targets.push(k as u32);
                }
            }
            offsets.push(targets.len());
        }
        Self { offsets, targets }
    }

    fn row(&self, i: usize) -> &[u32] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }
}

#[derive(Clone, Debug)]
pub struct RydbergHamiltonian {
    basis: Arc<ConstrainedBasis>,
    geometry: AtomGeometry,
    params: RydbergParams,
    protocol: DriveProtocol,
    diag_interaction: Vec<f64>,
    occupation: Vec<u32>,
    flips: FlipTable,
}

/// Precomputes diagonal terms and flip connectivity for `basis`.
pub fn build_hamiltonian(
    basis: Arc<ConstrainedBasis>,
    geometry: &AtomGeometry,
    params: &RydbergParams,
    protocol: DriveProtocol,
) -> Result<RydbergHamiltonian> {
    build_hamiltonian_with(basis, geometry, params, protocol, HamiltonianOptions::default())
}

pub fn build_hamiltonian_with(
    basis: Arc<ConstrainedBasis>,
    geometry: &AtomGeometry,
    params: &RydbergParams,
    protocol: DriveProtocol,
    options: HamiltonianOptions,
) -> Result<RydbergHamiltonian> {
    let n = basis.n_sites();
    if geometry.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: geometry.len() });
    }
    params.validate()?;

    // pair couplings C6 / r^6, zero beyond the cutoff
    let mut coupling = vec![0.0; n * n];
    for j in 0..n {
        for k in (j + 1)..n {
            let r = match (geometry.boundary, options.ring_distance) {
                (Boundary::Periodic, RingDistance::MinimalImage) => geometry.spacing * (k - j).min(n + j - k) as f64,
                _ => geometry.distance(j, k),
            };
            if options.cutoff_um.map_or(true, |rc| r <= rc) {
                let v = params.c6 / r.powi(6);
                coupling[j * n + k] = v;
                coupling[k * n + j] = v;
            }
        }
    }

    let mut diag_interaction = Vec::with_capacity(basis.dim());
    let mut occupation = Vec::with_capacity(basis.dim());
    let mut sites = Vec::with_capacity(n);
    for &s in basis.states() {
        sites.clear();
        sites.extend((0..n).filter(|&j| (s >> j) & 1 == 1));
        let mut v = 0.0;
        for (a, &j) in sites.iter().enumerate() {
            for &k in &sites[a + 1..] {
                v += coupling[j * n + k];
            }
        }
        diag_interaction.push(v);
        occupation.push(s.count_ones());
    }

    let flips = FlipTable::build(&basis);
    Ok(RydbergHamiltonian {
        basis,
        geometry: geometry.clone(),
        params: *params,
        protocol,
        diag_interaction,
        occupation,
        flips,
    })
}

impl RydbergHamiltonian {
    pub fn basis(&self) -> &Arc<ConstrainedBasis> {
        &self.basis
    }

    pub fn geometry(&self) -> &AtomGeometry {
        &self.geometry
    }

    pub fn params(&self) -> &RydbergParams {
        &self.params
    }

    pub fn protocol(&self) -> &DriveProtocol {
        &self.protocol
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    /// Interaction energy of every basis state, rad/us.
    pub fn diag_interaction(&self) -> &[f64] {
        &self.diag_interaction
    }

    /// Number of excited atoms in every basis state.
    pub fn occupation(&self) -> &[u32] {
        &self.occupation
    }

    /// Same Hamiltonian driven by a different protocol; reuses all precomputed tables.
    pub fn with_protocol(&self, protocol: DriveProtocol) -> Self {
        Self { protocol, ..self.clone() }
    }

    /// `(Omega(t), Delta(t))` in rad/us.
    pub fn drive_at(&self, t: f64) -> Result<(f64, f64)> {
        Ok((self.protocol.omega_at(t)?, self.protocol.delta_at(t)?))
    }

    /// Diagonal energy of basis state `i` at detuning `delta`.
    pub fn diag_energy(&self, i: usize, delta: f64) -> f64 {
        self.diag_interaction[i] - delta * self.occupation[i] as f64
    }

    /// `out = H(omega, delta) x` using the cached flip connectivity.
    pub fn apply_fixed<T>(&self, omega: f64, delta: f64, x: &[T], out: &mut [T])
    where
        T: Copy + Default + Add<Output = T> + Mul<f64, Output = T>,
    {
        assert_eq!(x.len(), self.dim());
        assert_eq!(out.len(), self.dim());
        let half = 0.5 * omega;
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = T::default();
            for &k in self.flips.row(i) {
                acc = acc + x[k as usize];
            }
            *o = x[i] * self.diag_energy(i, delta) + acc * half;
        }
    }

    /// Same as [`apply_fixed`](Self::apply_fixed) but looks up every flipped
    /// state in the basis on the fly instead of using the cached table.
    pub fn apply_fixed_lookup(&self, omega: f64, delta: f64, x: &[Complex64], out: &mut [Complex64]) {
        assert_eq!(x.len(), self.dim());
        assert_eq!(out.len(), self.dim());
        let half = 0.5 * omega;
        let n = self.basis.n_sites();
        for (i, (&s, o)) in self.basis.states().iter().zip(out.iter_mut()).enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..n {
                if let Some(k) = self.basis.find(s ^ (1u64 << j)) {
                    acc += x[k];
                }
            }
            *o = x[i] * self.diag_energy(i, delta) + acc * half;
        }
    }

    /// `out = (H(t)/hbar) psi`, rad/us.
    pub fn apply_into(&self, t: f64, psi: &[Complex64], out: &mut [Complex64]) -> Result<()> {
        if psi.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: psi.len() });
        }
        if out.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: out.len() });
        }
        let (omega, delta) = self.drive_at(t)?;
        self.apply_fixed(omega, delta, psi, out);
        Ok(())
    }

    /// `<psi| H(omega, delta) |psi>`.
    pub fn expectation(&self, omega: f64, delta: f64, psi: &[Complex64]) -> f64 {
        let mut h_psi = vec![Complex64::default(); psi.len()];
        self.apply_fixed(omega, delta, psi, &mut h_psi);
        psi.iter().zip(&h_psi).map(|(a, b)| (a.conj() * b).re).sum()
    }

    /// Materialises `H(omega, delta)` as a dense real symmetric matrix.
    /// Intended for small bases (validation and dense oracles).
    pub fn dense_matrix(&self, omega: f64, delta: f64) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            m[(i, i)] = self.diag_energy(i, delta);
            for &k in self.flips.row(i) {
                m[(i, k as usize)] += 0.5 * omega;
            }
        }
        m
    }
}

/// `(H(t)/hbar) psi` as a fresh vector.
pub fn apply_h(h: &RydbergHamiltonian, t: f64, psi: &[Complex64]) -> Result<Vec<Complex64>> {
    let mut out = vec![Complex64::default(); h.dim()];
    h.apply_into(t, psi, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{cyclic_shift, enumerate_basis};
    use crate::geometry::{chain_positions, ring_positions};
    use crate::protocol::build_kz_protocol;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_state(dim: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..dim).map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect()
    }

    fn ring_h(l: usize, constrained: bool) -> RydbergHamiltonian {
        let p = RydbergParams::default();
        let basis = Arc::new(enumerate_basis(l, Boundary::Periodic, constrained).unwrap());
        let geom = ring_positions(l, 6.2).unwrap();
        build_hamiltonian(basis, &geom, &p, build_kz_protocol(2.0, &p, 0.5).unwrap()).unwrap()
    }

    fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
        a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
    }

    #[test]
    fn pair_interaction_value() {
        let p = RydbergParams::default();
        let basis = Arc::new(enumerate_basis(2, Boundary::Open, false).unwrap());
        let geom = chain_positions(2, 6.2).unwrap();
        let h = build_hamiltonian(basis.clone(), &geom, &p, build_kz_protocol(1.0, &p, 0.5).unwrap()).unwrap();
        let both = basis.find(0b11).unwrap();
        assert_relative_eq!(6.2f64.powi(6), 56_800.235_584, epsilon = 1e-6);
        assert_relative_eq!(h.diag_interaction()[both] / (2.0 * PI), 862_690.0 / 56_800.235_584, epsilon = 1e-9);
        assert!((h.diag_interaction()[both] / (2.0 * PI) - 15.19).abs() < 0.01);
        assert_eq!(h.diag_energy(0, 0.0), 0.0);
        let single = basis.find(0b01).unwrap();
        assert_relative_eq!(h.diag_energy(single, 3.0), -3.0);
    }

    #[test]
    fn zero_rabi_is_diagonal_scaling() {
        let h = ring_h(6, true);
        let x = random_state(h.dim(), 1);
        let mut y = vec![Complex64::default(); h.dim()];
        h.apply_fixed(0.0, 1.7, &x, &mut y);
        for i in 0..h.dim() {
            assert_relative_eq!((y[i] - x[i] * h.diag_energy(i, 1.7)).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn single_atom_two_level() {
        let p = RydbergParams::default();
        let basis = Arc::new(enumerate_basis(1, Boundary::Open, false).unwrap());
        let geom = AtomGeometry::from_positions(vec![[0.0, 0.0]], Boundary::Open, 1.0).unwrap();
        let proto = DriveProtocol::constant(2.0, 0.0, 1.0).unwrap();
        let h = build_hamiltonian(basis, &geom, &p, proto).unwrap();
        let out = apply_h(&h, 0.5, &[Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]).unwrap();
        assert_relative_eq!(out[0].norm(), 0.0);
        assert_relative_eq!(out[1].re, 1.0);
    }

    #[test]
    fn hermitian_on_random_vectors() {
        for constrained in [true, false] {
            let h = ring_h(8, constrained);
            let phi = random_state(h.dim(), 2);
            let psi = random_state(h.dim(), 3);
            let h_psi = apply_h(&h, 1.3, &psi).unwrap();
            let h_phi = apply_h(&h, 1.3, &phi).unwrap();
            let lhs = dot(&phi, &h_psi);
            let rhs = dot(&psi, &h_phi).conj();
            assert!((lhs - rhs).norm() <= 1e-12 * lhs.norm().max(1.0));
        }
    }

    #[test]
    fn matches_dense_matrix_built_independently() {
        // Dense oracle assembled straight from the bit representation.
        let p = RydbergParams::default();
        for (l, boundary, constrained) in [(6, Boundary::Periodic, true), (7, Boundary::Open, false), (10, Boundary::Periodic, true), (9, Boundary::Periodic, false)] {
            let basis = Arc::new(enumerate_basis(l, boundary, constrained).unwrap());
            let geom = match boundary {
                Boundary::Periodic => ring_positions(l, 6.2).unwrap(),
                Boundary::Open => chain_positions(l, 6.2).unwrap(),
            };
            let h = build_hamiltonian(basis.clone(), &geom, &p, build_kz_protocol(1.0, &p, 0.5).unwrap()).unwrap();
            let (omega, delta) = (3.1, -2.2);
            let d = basis.dim();
            let mut dense = vec![vec![0.0; d]; d];
            for (i, &s) in basis.states().iter().enumerate() {
                let mut e = 0.0;
                for j in 0..l {
                    if (s >> j) & 1 == 1 {
                        e -= delta;
                        for k in (j + 1)..l {
                            if (s >> k) & 1 == 1 {
                                e += p.c6 / geom.distance(j, k).powi(6);
                            }
                        }
                    }
                }
                dense[i][i] = e;
                for (k, &u) in basis.states().iter().enumerate() {
                    if (s ^ u).count_ones() == 1 {
                        dense[i][k] = omega / 2.0;
                    }
                }
            }
            let x = random_state(d, 4);
            let mut y = vec![Complex64::default(); d];
            h.apply_fixed(omega, delta, &x, &mut y);
            let mut y_lookup = vec![Complex64::default(); d];
            h.apply_fixed_lookup(omega, delta, &x, &mut y_lookup);
            let norm: f64 = y.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            for i in 0..d {
                let expect: Complex64 = (0..d).map(|k| x[k] * dense[i][k]).sum();
                assert!((y[i] - expect).norm() <= 1e-12 * norm, "L={l} row {i}");
                assert!((y_lookup[i] - expect).norm() <= 1e-12 * norm);
            }
            let m = h.dense_matrix(omega, delta);
            for i in 0..d {
                for k in 0..d {
                    assert!((m[(i, k)] - dense[i][k]).abs() <= 1e-9 * dense[i][i].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn constrained_apply_equals_projected_full_operator() {
        let l = 8;
        let hc = ring_h(l, true);
        let hf = ring_h(l, false);
        let (omega, delta) = (hc.params().omega_max, 4.0);
        let x = random_state(hc.dim(), 5);
        // embed into the full space, apply, project back
        let mut xf = vec![Complex64::default(); hf.dim()];
        for (i, &s) in hc.basis().states().iter().enumerate() {
            xf[hf.basis().find(s).unwrap()] = x[i];
        }
        let mut yf = vec![Complex64::default(); hf.dim()];
        hf.apply_fixed(omega, delta, &xf, &mut yf);
        let mut yc = vec![Complex64::default(); hc.dim()];
        hc.apply_fixed(omega, delta, &x, &mut yc);
        for (i, &s) in hc.basis().states().iter().enumerate() {
            let projected = yf[hf.basis().find(s).unwrap()];
            assert!((projected - yc[i]).norm() < 1e-10);
        }
    }

    #[test]
    fn ring_interaction_is_translation_invariant() {
        let h = ring_h(12, true);
        let b = h.basis();
        for (i, &s) in b.states().iter().enumerate() {
            let k = b.find(cyclic_shift(s, 12)).unwrap();
            assert_relative_eq!(h.diag_interaction()[i], h.diag_interaction()[k], max_relative = 1e-12);
        }
    }

    #[test]
    fn constrained_diagonal_keeps_long_range_tail() {
        let h = ring_h(8, true);
        let b = h.basis();
        let nnn = b.find(0b101).unwrap();
        let expect = h.params().c6 / (h.geometry().distance(0, 2)).powi(6);
        assert_relative_eq!(h.diag_interaction()[nnn], expect, max_relative = 1e-12);
    }

    #[test]
    fn minimal_image_uses_shorter_arc() {
        let p = RydbergParams::default();
        let basis = Arc::new(enumerate_basis(6, Boundary::Periodic, true).unwrap());
        let geom = ring_positions(6, 6.2).unwrap();
        let opts = HamiltonianOptions { ring_distance: RingDistance::MinimalImage, ..Default::default() };
        let h = build_hamiltonian_with(basis.clone(), &geom, &p, build_kz_protocol(1.0, &p, 0.5).unwrap(), opts).unwrap();
        let chord = build_hamiltonian(basis.clone(), &geom, &p, build_kz_protocol(1.0, &p, 0.5).unwrap()).unwrap();
        // atoms 0 and 3 are opposite: arc 3a, chord 2a on a hexagon
        let i = basis.states().iter().position(|&s| s == 0b001001).unwrap();
        assert_relative_eq!(h.diag_interaction()[i], p.c6 / (3.0f64 * 6.2).powi(6), max_relative = 1e-12);
        assert_relative_eq!(chord.diag_interaction()[i], p.c6 / (2.0f64 * 6.2).powi(6), max_relative = 1e-12);
        let open = chain_positions(6, 6.2).unwrap();
        let ob = Arc::new(enumerate_basis(6, Boundary::Open, true).unwrap());
        let a = build_hamiltonian_with(ob.clone(), &open, &p, build_kz_protocol(1.0, &p, 0.5).unwrap(), opts).unwrap();
        let b = build_hamiltonian(ob, &open, &p, build_kz_protocol(1.0, &p, 0.5).unwrap()).unwrap();
        assert_eq!(a.diag_interaction(), b.diag_interaction());
    }

    #[test]
    fn cutoff_drops_distant_pairs() {
        let p = RydbergParams::default();
        let basis = Arc::new(enumerate_basis(8, Boundary::Periodic, true).unwrap());
        let geom = ring_positions(8, 6.2).unwrap();
        let h = build_hamiltonian_with(basis.clone(), &geom, &p, build_kz_protocol(1.0, &p, 0.5).unwrap(), HamiltonianOptions { cutoff_um: Some(7.0), ..Default::default() }).unwrap();
        assert!(h.diag_interaction().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn errors() {
        let p = RydbergParams::default();
        let basis = Arc::new(enumerate_basis(4, Boundary::Periodic, true).unwrap());
        let geom = ring_positions(5, 6.2).unwrap();
        assert!(build_hamiltonian(basis, &geom, &p, build_kz_protocol(1.0, &p, 0.5).unwrap()).is_err());
        let h = ring_h(4, true);
        assert!(matches!(apply_h(&h, 0.1, &[Complex64::default(); 3]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(apply_h(&h, 100.0, &vec![Complex64::default(); h.dim()]), Err(Error::OutOfDomain { .. })));
    }
}
