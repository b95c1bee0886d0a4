//! Axis-aligned boxes in R^n.

use crate::error::{Error, Result};

/// A closed real interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "inverted interval [{lo}, {hi}]");
        Interval { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval::new(self.lo.min(other.lo), self.hi.max(other.hi))
    }

    /// Intersection; callers guarantee the two overlap.
    pub fn meet(&self, other: &Interval) -> Interval {
        Interval::new(self.lo.max(other.lo), self.hi.min(other.hi))
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// A closed axis-aligned box `[lo_1, hi_1] x ... x [lo_n, hi_n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Region {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Config(format!(
                "box bounds must have equal, nonzero length (got {} and {})",
                lo.len(),
                hi.len()
            )));
        }
        for (axis, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite()) || l > h {
                return Err(Error::Config(format!(
                    "box axis {axis} is empty or non-finite: [{l}, {h}]"
                )));
            }
        }
        Ok(Region { lo, hi })
    }

    /// Box from `(lo, hi)` pairs, one per axis.
    pub fn from_bounds(bounds: &[(f64, f64)]) -> Result<Self> {
        let (lo, hi) = bounds.iter().copied().unzip();
        Region::new(lo, hi)
    }

    /// Same box in every axis: `[lo, hi]^dim`.
    pub fn cube(lo: f64, hi: f64, dim: usize) -> Result<Self> {
        Region::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    /// Half side lengths per axis.
    pub fn radii(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (h - l))
            .collect()
    }

    /// Largest half side length (the infinity-norm radius).
    pub fn radius(&self) -> f64 {
        self.radii().into_iter().fold(0.0, f64::max)
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    pub fn contains_box(&self, other: &Region) -> bool {
        (0..self.dim()).all(|i| self.lo[i] <= other.lo[i] && other.hi[i] <= self.hi[i])
    }

    pub fn intersects(&self, other: &Region) -> bool {
        (0..self.dim()).all(|i| self.lo[i] <= other.hi[i] && other.lo[i] <= self.hi[i])
    }

    /// Every face moved inward by `margin`; `None` once any side is fully consumed.
    pub fn shrink(&self, margin: f64) -> Option<Region> {
        let mut lo = Vec::with_capacity(self.dim());
        let mut hi = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            if self.hi[i] - self.lo[i] <= 2.0 * margin && margin > 0.0 {
                return None;
            }
            lo.push(self.lo[i] + margin);
            hi.push(self.hi[i] - margin);
        }
        Some(Region { lo, hi })
    }

    /// Every face moved outward by `margin`.
    pub fn expand(&self, margin: f64) -> Region {
        Region {
            lo: self.lo.iter().map(|l| l - margin).collect(),
            hi: self.hi.iter().map(|h| h + margin).collect(),
        }
    }

    /// Splits every axis into `k` equal parts, returning the `k^n` sub-boxes in
    /// row-major order (last axis fastest).
    pub fn subdivide(&self, k: usize) -> Vec<Region> {
        assert!(k >= 1, "subdivision factor must be positive");
        let n = self.dim();
        let steps: Vec<f64> = (0..n).map(|i| (self.hi[i] - self.lo[i]) / k as f64).collect();
        let total = k.pow(n as u32);
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; n];
        for _ in 0..total {
            let lo: Vec<f64> = (0..n).map(|i| self.lo[i] + idx[i] as f64 * steps[i]).collect();
            let hi: Vec<f64> = (0..n)
                .map(|i| {
                    if idx[i] + 1 == k {
                        self.hi[i]
                    } else {
                        self.lo[i] + (idx[i] + 1) as f64 * steps[i]
                    }
                })
                .collect();
            out.push(Region { lo, hi });
            for axis in (0..n).rev() {
                idx[axis] += 1;
                if idx[axis] < k {
                    break;
                }
                idx[axis] = 0;
            }
        }
        out
    }

    /// The box spanned by one interval per axis.
    pub fn from_intervals(intervals: &[Interval]) -> Result<Self> {
        Region::new(intervals.iter().map(|i| i.lo).collect(), intervals.iter().map(|i| i.hi).collect())
    }

    /// Infinity-norm distance from a point to this box (0 inside).
    pub fn linf_distance(&self, x: &[f64]) -> f64 {
        x.iter()
            .enumerate()
            .map(|(i, v)| (self.lo[i] - v).max(v - self.hi[i]).max(0.0))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shrink_and_expand() {
        let b = Region::cube(0.0, 1.0, 2).unwrap();
        assert!(b.shrink(0.5).is_none());
        let s = b.shrink(0.1).unwrap();
        assert_eq!(s.lo(), &[0.1, 0.1]);
        assert_eq!(s.hi(), &[0.9, 0.9]);
        let e = b.expand(0.1);
        assert_eq!(e.lo(), &[-0.1, -0.1]);
        assert_eq!(e.hi(), &[1.1, 1.1]);
        assert_eq!(b.shrink(0.0).unwrap(), b);
        assert_eq!(b.expand(0.0), b);
    }

    #[test]
    fn subdivide_tiles_the_box() {
        let b = Region::from_bounds(&[(0.0, 3.0), (-1.0, 1.0)]).unwrap();
        let parts = b.subdivide(3);
        assert_eq!(parts.len(), 9);
        assert_eq!(parts[0].lo(), &[0.0, -1.0]);
        assert_eq!(parts[8].hi(), &[3.0, 1.0]);
        let area: f64 = parts
            .iter()
            .map(|p| (p.hi()[0] - p.lo()[0]) * (p.hi()[1] - p.lo()[1]))
            .sum();
        assert!((area - 6.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_inverted_bounds() {
        assert!(Region::new(vec![1.0], vec![0.0]).is_err());
        assert!(Region::new(vec![], vec![]).is_err());
    }
}
