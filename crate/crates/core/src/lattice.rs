//! Periodic boxes in `Z^d` and their index maps.
//!
//! Sites are numbered in lexicographic coordinate order: the last
//! coordinate varies fastest. All arithmetic on displacements is done
//! modulo the side lengths.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest volume accepted by [`LatticeTorus::new`].
pub const DEFAULT_VOLUME_CAP: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeTorus {
    sides: Vec<usize>,
    strides: Vec<usize>,
    volume: usize,
}

impl LatticeTorus {
    pub fn new(sides: &[usize]) -> Result<Self> {
        Self::with_cap(sides, DEFAULT_VOLUME_CAP)
    }

    pub fn with_cap(sides: &[usize], cap: usize) -> Result<Self> {
        if sides.is_empty() {
            return Err(Error::Geometry("dimension must be at least 1".into()));
        }
        if let Some(axis) = sides.iter().position(|&s| s == 0) {
            return Err(Error::Geometry(format!("side {axis} has length zero")));
        }
        let volume = sides
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .ok_or(Error::VolumeCap {
                volume: usize::MAX,
                cap,
            })?;
        if volume > cap {
            return Err(Error::VolumeCap { volume, cap });
        }
        let mut strides = vec![1; sides.len()];
        for axis in (0..sides.len() - 1).rev() {
            strides[axis] = strides[axis + 1] * sides[axis + 1];
        }
        Ok(Self {
            sides: sides.to_vec(),
            strides,
            volume,
        })
    }

    /// Cube of side `side` in dimension `dim`.
    pub fn cube(dim: usize, side: usize) -> Result<Self> {
        Self::new(&vec![side; dim])
    }

    pub fn dim(&self) -> usize {
        self.sides.len()
    }

    pub fn sides(&self) -> &[usize] {
        &self.sides
    }

    pub fn volume(&self) -> usize {
        self.volume
    }

    pub fn min_side(&self) -> usize {
        *self.sides.iter().min().expect("non-empty sides")
    }

    pub fn coords(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        self.coords_into(index, &mut out);
        out
    }

    pub fn coords_into(&self, mut index: usize, out: &mut [usize]) {
        debug_assert!(index < self.volume);
        for (axis, c) in out.iter_mut().enumerate() {
            *c = index / self.strides[axis];
            index %= self.strides[axis];
        }
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.dim());
        coords
            .iter()
            .zip(&self.sides)
            .zip(&self.strides)
            .map(|((&c, &s), &st)| (c % s) * st)
            .sum()
    }

    /// Index of the wrapped difference `x_j - x_i`.
    pub fn displacement_index(&self, i: usize, j: usize) -> usize {
        let mut out = 0;
        let (mut i, mut j) = (i, j);
        for axis in 0..self.dim() {
            let st = self.strides[axis];
            let (ci, cj) = (i / st, j / st);
            i %= st;
            j %= st;
            let s = self.sides[axis];
            out += ((cj + s - ci) % s) * st;
        }
        out
    }

    /// Index of `x_i + x_shift`.
    pub fn translate(&self, i: usize, shift: usize) -> usize {
        let mut out = 0;
        let (mut i, mut shift) = (i, shift);
        for axis in 0..self.dim() {
            let st = self.strides[axis];
            let (ci, cs) = (i / st, shift / st);
            i %= st;
            shift %= st;
            out += ((ci + cs) % self.sides[axis]) * st;
        }
        out
    }

    /// Component-wise minimal periodic difference between two sites.
    pub fn wrapped_difference(&self, i: usize, j: usize) -> Vec<usize> {
        let d = self.coords(self.displacement_index(i, j));
        d.iter()
            .zip(&self.sides)
            .map(|(&c, &s)| c.min(s - c))
            .collect()
    }

    /// Squared Euclidean torus distance; an integer, so it can key radius shells.
    pub fn distance_sq(&self, i: usize, j: usize) -> usize {
        self.displacement_norm_sq(self.displacement_index(i, j))
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        (self.distance_sq(i, j) as f64).sqrt()
    }

    /// Squared norm of the displacement with linear index `disp`, wrapped.
    pub fn displacement_norm_sq(&self, mut disp: usize) -> usize {
        let mut acc = 0;
        for axis in 0..self.dim() {
            let st = self.strides[axis];
            let c = disp / st;
            disp %= st;
            let w = c.min(self.sides[axis] - c);
            acc += w * w;
        }
        acc
    }

    /// Lattice momentum `k_i = 2 pi n_i / L_i` of a mode index tuple.
    pub fn momentum(&self, mode: &[usize]) -> Result<Vec<f64>> {
        self.check_mode(mode)?;
        Ok(mode
            .iter()
            .zip(&self.sides)
            .map(|(&n, &l)| 2.0 * PI * n as f64 / l as f64)
            .collect())
    }

    fn check_mode(&self, mode: &[usize]) -> Result<()> {
        if mode.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "mode has {} components, torus has dimension {}",
                mode.len(),
                self.dim()
            )));
        }
        for (axis, (&n, &l)) in mode.iter().zip(&self.sides).enumerate() {
            if n >= l {
                return Err(Error::ModeOutOfRange {
                    axis,
                    index: n,
                    side: l,
                });
            }
        }
        Ok(())
    }

    /// Fourier symbol of `-Delta`: `2 sum_i (1 - cos k_i)`.
    pub fn laplacian_symbol(&self, mode: &[usize]) -> Result<f64> {
        Ok(self.momentum(mode)?.iter().map(|k| 2.0 * (1.0 - k.cos())).sum())
    }

    /// Symbol of `-Delta` for every mode, in site order (mode tuples are
    /// numbered like coordinates).
    pub fn laplacian_symbols(&self) -> Vec<f64> {
        let per_axis: Vec<Vec<f64>> = self
            .sides
            .iter()
            .map(|&l| {
                (0..l)
                    .map(|n| 2.0 * (1.0 - (2.0 * PI * n as f64 / l as f64).cos()))
                    .collect()
            })
            .collect();
        let mut coords = vec![0; self.dim()];
        (0..self.volume)
            .map(|m| {
                self.coords_into(m, &mut coords);
                coords
                    .iter()
                    .enumerate()
                    .map(|(axis, &n)| per_axis[axis][n])
                    .sum()
            })
            .collect()
    }

    /// Neighbours `x +- e_axis` of site `i` (possibly equal to each other or to `i`).
    pub fn neighbours(&self, i: usize, axis: usize) -> (usize, usize) {
        let st = self.strides[axis];
        let s = self.sides[axis];
        let c = (i / st) % s;
        let base = i - c * st;
        (base + ((c + 1) % s) * st, base + ((c + s - 1) % s) * st)
    }
}

/// Builds a torus from a dimension and side list, checking they agree.
pub fn build_torus(dim: usize, sides: &[usize]) -> Result<LatticeTorus> {
    if dim == 0 {
        return Err(Error::Geometry("dimension must be at least 1".into()));
    }
    if sides.len() != dim {
        return Err(Error::Geometry(format!(
            "{} sides given for dimension {dim}",
            sides.len()
        )));
    }
    LatticeTorus::new(sides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smallest_torus() {
        let t = build_torus(1, &[2]).unwrap();
        assert_eq!(t.volume(), 2);
        assert_eq!(t.distance(0, 1), 1.0);
    }

    #[test]
    fn cube_volume() {
        assert_eq!(build_torus(3, &[4, 4, 4]).unwrap().volume(), 64);
    }

    #[test]
    fn periodic_wrap() {
        let t = build_torus(3, &[8, 8, 8]).unwrap();
        let a = t.index(&[0, 0, 0]);
        let b = t.index(&[7, 0, 0]);
        assert_eq!(t.distance(a, b), 1.0);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(build_torus(2, &[4, 0]).is_err());
        assert!(build_torus(0, &[]).is_err());
        assert!(build_torus(2, &[4]).is_err());
        assert!(matches!(
            LatticeTorus::with_cap(&[100, 100, 100], 1000),
            Err(Error::VolumeCap { .. })
        ));
    }

    #[test]
    fn symbol_values() {
        let t = build_torus(1, &[2]).unwrap();
        assert!((t.laplacian_symbol(&[1]).unwrap() - 4.0).abs() < 1e-15);
        let t = build_torus(3, &[4, 4, 4]).unwrap();
        assert_eq!(t.laplacian_symbol(&[0, 0, 0]).unwrap(), 0.0);
        assert!((t.laplacian_symbol(&[2, 2, 2]).unwrap() - 12.0).abs() < 1e-14);
        assert!(matches!(
            t.laplacian_symbol(&[4, 0, 0]),
            Err(Error::ModeOutOfRange { axis: 0, .. })
        ));
    }

    #[test]
    fn symbol_table_matches_pointwise() {
        let t = build_torus(2, &[3, 4]).unwrap();
        let table = t.laplacian_symbols();
        for (m, &s) in table.iter().enumerate() {
            assert!((s - t.laplacian_symbol(&t.coords(m)).unwrap()).abs() < 1e-14);
        }
    }

    fn torus_strategy() -> impl Strategy<Value = LatticeTorus> {
        prop::collection::vec(1usize..7, 1..4).prop_map(|s| LatticeTorus::new(&s).unwrap())
    }

    proptest! {
        #[test]
        fn volume_is_product(t in torus_strategy()) {
            prop_assert_eq!(t.volume(), t.sides().iter().product::<usize>());
        }

        #[test]
        fn index_maps_are_inverse(t in torus_strategy(), seed in 0usize..10_000) {
            let i = seed % t.volume();
            prop_assert_eq!(t.index(&t.coords(i)), i);
        }

        #[test]
        fn metric_axioms(t in torus_strategy(), a in 0usize..10_000, b in 0usize..10_000, c in 0usize..10_000) {
            let n = t.volume();
            let (a, b, c) = (a % n, b % n, c % n);
            prop_assert_eq!(t.distance_sq(a, a), 0);
            prop_assert_eq!(t.distance_sq(a, b), t.distance_sq(b, a));
            prop_assert!(t.distance(a, c) <= t.distance(a, b) + t.distance(b, c) + 1e-12);
        }

        #[test]
        fn translation_composes(t in torus_strategy(), a in 0usize..10_000, b in 0usize..10_000) {
            let n = t.volume();
            let (a, b) = (a % n, b % n);
            let d = t.displacement_index(a, b);
            prop_assert_eq!(t.translate(a, d), b);
        }
    }
}
