//! Kernel-weighted sums over training rows grouped by identical confounder value.
//!
//! Rows sharing a `z` value contribute identical kernel weights, so their
//! per-row statistics are pre-summed once. Evaluating a Nadaraya–Watson ratio
//! then costs one pass over distinct `z` values inside the kernel window.

use crate::error::{Error, Result};
use crate::kernel_mean::KernelFamily;

/// Relative mass floor `ε_mass`; see [`GroupedSupport::check_mass`].
pub const MASS_FLOOR_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GroupedSupport {
    z: Vec<f64>,
    count: Vec<f64>,
    stats: Vec<f64>,
    width: usize,
    n: usize,
}

impl GroupedSupport {
    /// `fill(i, out)` writes the `width` statistics of row `i` into `out`.
    pub fn build(z: &[f64], width: usize, mut fill: impl FnMut(usize, &mut [f64])) -> Self {
        let mut order: Vec<usize> = (0..z.len()).collect();
        order.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));
        let mut zs = Vec::new();
        let mut count = Vec::new();
        let mut stats: Vec<f64> = Vec::new();
        let mut row = vec![0.0; width];
        for &i in &order {
            if zs.last() != Some(&z[i]) {
                zs.push(z[i]);
                count.push(0.0);
                stats.extend(std::iter::repeat_n(0.0, width));
            }
            let g = zs.len() - 1;
            count[g] += 1.0;
            row.iter_mut().for_each(|v| *v = 0.0);
            fill(i, &mut row);
            for (acc, v) in stats[g * width..(g + 1) * width].iter_mut().zip(&row) {
                *acc += v;
            }
        }
        Self { z: zs, count, stats, width, n: z.len() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn z_min(&self) -> f64 {
        self.z[0]
    }

    pub fn z_max(&self) -> f64 {
        self.z[self.z.len() - 1]
    }

    /// Group index range whose weights can be nonzero in `f64`.
    fn window(&self, family: KernelFamily, z: f64, h: f64) -> (usize, usize) {
        if h.is_infinite() {
            return (0, self.z.len());
        }
        let r = family.cutoff_radius() * h;
        let lo = self.z.partition_point(|&v| v < z - r);
        let hi = self.z.partition_point(|&v| v <= z + r);
        (lo, hi)
    }

    /// Relative kernel weight (the `1/h` factor cancels in every ratio);
    /// an infinite bandwidth gives equal weights.
    #[inline]
    pub fn weight(family: KernelFamily, u: f64, h: f64) -> f64 {
        if h.is_infinite() {
            1.0
        } else {
            family.unit_shape(u / h)
        }
    }

    /// Accumulates `Σ_g w_g · stats_g[e]` for each `e` in `entries` into `out[e]`
    /// and returns the weight mass `Σ_g w_g · count_g`.
    pub fn accumulate(&self, family: KernelFamily, z: f64, h: f64, entries: &[usize], out: &mut [f64]) -> f64 {
        let (lo, hi) = self.window(family, z, h);
        let mut mass = 0.0;
        for g in lo..hi {
            let w = Self::weight(family, self.z[g] - z, h);
            if w == 0.0 {
                continue;
            }
            mass += w * self.count[g];
            let base = g * self.width;
            for &e in entries {
                out[e] += w * self.stats[base + e];
            }
        }
        mass
    }

    /// Mass floor `n · K_h(3h) · ε_mass` in relative-weight units.
    pub fn mass_floor(family: KernelFamily, n: usize, h: f64) -> f64 {
        if h.is_infinite() {
            0.0
        } else {
            n as f64 * family.unit_shape(3.0) * MASS_FLOOR_EPS
        }
    }

    pub fn check_mass(family: KernelFamily, n: usize, z: f64, h: f64, mass: f64) -> Result<()> {
        let floor = Self::mass_floor(family, n, h);
        if mass > 0.0 && mass >= floor {
            Ok(())
        } else {
            Err(Error::SparseRegion { z, mass, floor })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_identical_values() {
        let z = [2.0, 1.0, 2.0, 3.0, 1.0];
        let s = GroupedSupport::build(&z, 1, |i, out| out[0] = i as f64);
        assert_eq!(s.z, vec![1.0, 2.0, 3.0]);
        assert_eq!(s.count, vec![2.0, 2.0, 1.0]);
        assert_eq!(s.stats, vec![1.0 + 4.0, 0.0 + 2.0, 3.0]);
    }

    #[test]
    fn window_drops_only_zero_weights() {
        let z: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let s = GroupedSupport::build(&z, 1, |_, out| out[0] = 1.0);
        let mut full = [0.0];
        let mut mass_direct = 0.0;
        for &zi in &z {
            mass_direct += GroupedSupport::weight(KernelFamily::Gaussian, zi - 50.0, 0.7);
        }
        let mass = s.accumulate(KernelFamily::Gaussian, 50.0, 0.7, &[0], &mut full);
        assert_eq!(mass, mass_direct);
    }
}
