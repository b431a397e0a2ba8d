//! Computational basis over `L` two-level atoms, optionally restricted to the
//! blockade subspace (no two neighbouring atoms excited).
//!
//! Bit `j` of a state word is the occupation `n_j` of atom `j`; bit 0 is atom 0.

use crate::error::{Error, Result};
use crate::geometry::Boundary;

/// Largest basis the toolkit will enumerate.
pub const MAX_DIM: u64 = 1 << 28;
/// Widest chain a single `u64` state word can hold.
pub const MAX_SITES: usize = 63;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstrainedBasis {
    n_sites: usize,
    boundary: Boundary,
    constrained: bool,
    states: Vec<u64>,
}

impl ConstrainedBasis {
    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn constrained(&self) -> bool {
        self.constrained
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[u64] {
        &self.states
    }

    pub fn state(&self, index: usize) -> u64 {
        self.states[index]
    }

    /// Ordinal of `mask`, or `None` if the bitmask is not a basis state.
    pub fn find(&self, mask: u64) -> Option<usize> {
        self.states.binary_search(&mask).ok()
    }

    /// Whether `mask` satisfies this basis' blockade rule and width.
    pub fn is_legal(&self, mask: u64) -> bool {
        if self.n_sites < 64 && mask >> self.n_sites != 0 {
            return false;
        }
        !self.constrained || !has_adjacent_pair(mask, self.n_sites, self.boundary)
    }

    /// Bitmask with every site set.
    pub fn full_mask(&self) -> u64 {
        low_mask(self.n_sites)
    }
}

fn low_mask(n_sites: usize) -> u64 {
    if n_sites >= 64 {
        u64::MAX
    } else {
        (1u64 << n_sites) - 1
    }
}

/// True if two neighbouring bits are both set (wrapping `(L-1, 0)` iff periodic).
pub fn has_adjacent_pair(mask: u64, n_sites: usize, boundary: Boundary) -> bool {
    if mask & (mask >> 1) != 0 {
        return true;
    }
    boundary == Boundary::Periodic
        && n_sites >= 2
        && mask & 1 != 0
        && (mask >> (n_sites - 1)) & 1 != 0
}

/// Closed-form basis size; used to refuse oversized requests before allocating.
pub fn predicted_dim(n_sites: usize, boundary: Boundary, constrained: bool) -> u128 {
    if !constrained {
        return 1u128 << n_sites;
    }
    // open chains: F(L+2); rings: Lucas L(L) (with L(1) = 1 for the lone site)
    let fib = |n: usize| -> u128 {
        let (mut a, mut b) = (0u128, 1u128);
        for _ in 0..n {
            let c = a + b;
            a = b;
            b = c;
        }
        a
    };
    match boundary {
        Boundary::Open => fib(n_sites + 2),
        Boundary::Periodic if n_sites == 1 => 2,
        Boundary::Periodic if n_sites == 2 => 3,
        Boundary::Periodic => fib(n_sites - 1) + fib(n_sites + 1),
    }
}

/// Enumerates every legal bitmask in increasing order.
pub fn enumerate_basis(n_sites: usize, boundary: Boundary, constrained: bool) -> Result<ConstrainedBasis> {
    if n_sites == 0 {
        return Err(Error::InvalidParameter("basis needs at least one site".into()));
    }
    if n_sites > MAX_SITES {
        return Err(Error::Capacity(format!("{n_sites} sites exceed the {MAX_SITES}-bit state word")));
    }
    let expected = predicted_dim(n_sites, boundary, constrained);
    if expected > MAX_DIM as u128 {
        return Err(Error::Capacity(format!(
            "basis of {n_sites} sites would hold {expected} states (limit {MAX_DIM})"
        )));
    }
    let mut states = Vec::with_capacity(expected as usize);
    if constrained {
        // Visit masks in increasing order, jumping over blocks that already
        // contain an adjacent pair in their high bits.
        let end = 1u64 << n_sites;
        let mut mask = 0u64;
        while mask < end {
            let clash = mask & (mask >> 1);
            if clash != 0 {
                // every mask sharing bits >= b is illegal; skip to the next prefix
                let b = clash.trailing_zeros();
                mask = (mask | ((1u64 << (b + 1)) - 1)) + 1;
                continue;
            }
            if !has_adjacent_pair(mask, n_sites, boundary) {
                states.push(mask);
            }
            mask += 1;
        }
    } else {
        states.extend(0..(1u64 << n_sites));
    }
    debug_assert_eq!(states.len() as u128, expected);
    Ok(ConstrainedBasis { n_sites, boundary, constrained, states })
}

/// Ordinal of `mask` in `basis`.
pub fn state_index(basis: &ConstrainedBasis, mask: u64) -> Result<usize> {
    basis.find(mask).ok_or(Error::NotInBasis { mask })
}

/// Rotates the occupation pattern by one site: atom `j` moves to `j+1 mod L`.
pub fn cyclic_shift(mask: u64, n_sites: usize) -> u64 {
    let top = (mask >> (n_sites - 1)) & 1;
    ((mask << 1) & low_mask(n_sites)) | top
}

/// Mirrors the pattern: atom `j` moves to `L-1-j`.
pub fn reflect(mask: u64, n_sites: usize) -> u64 {
    mask.reverse_bits() >> (64 - n_sites)
}
