//! Fixed-horizon energy and price vectors.
//!
//! Every quantity the scheduler moves around (household load, a PEV schedule,
//! the fleet aggregate, the day-ahead purchase, the imbalance) is a 24-slot
//! vector of kWh per one-hour slot. Slot indices are 0-based in code; files
//! and user-facing config use 1-based slot numbers.

use std::ops::{Add, AddAssign, Index, IndexMut, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

/// Number of one-hour slots in the scheduling horizon.
pub const SLOTS: usize = 24;

/// Energy per slot in kWh over the 24-slot horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LoadProfile([f64; SLOTS]);

impl Default for LoadProfile {
    fn default() -> Self {
        Self::zeros()
    }
}

impl LoadProfile {
    pub const fn zeros() -> Self {
        LoadProfile([0.0; SLOTS])
    }

    pub const fn new(slots: [f64; SLOTS]) -> Self {
        LoadProfile(slots)
    }

    pub fn constant(value: f64) -> Self {
        LoadProfile([value; SLOTS])
    }

    /// Builds a profile from a slice, which must hold exactly [`SLOTS`] values.
    pub fn from_slice(values: &[f64]) -> Option<Self> {
        <[f64; SLOTS]>::try_from(values).ok().map(LoadProfile)
    }

    pub fn from_fn(f: impl FnMut(usize) -> f64) -> Self {
        LoadProfile(std::array::from_fn(f))
    }

    pub fn as_array(&self) -> &[f64; SLOTS] {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn dot(&self, other: &LoadProfile) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn scale(&self, k: f64) -> LoadProfile {
        LoadProfile::from_fn(|t| self.0[t] * k)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> LoadProfile {
        LoadProfile::from_fn(|t| f(self.0[t]))
    }

    pub fn zip_with(&self, other: &LoadProfile, mut f: impl FnMut(f64, f64) -> f64) -> LoadProfile {
        LoadProfile::from_fn(|t| f(self.0[t], other.0[t]))
    }

    /// Slot index and value of the largest entry; ties resolve to the earliest slot.
    pub fn peak(&self) -> (usize, f64) {
        let mut best = (0, self.0[0]);
        for (t, &v) in self.0.iter().enumerate().skip(1) {
            if v > best.1 {
                best = (t, v);
            }
        }
        best
    }

    pub fn max_abs_diff(&self, other: &LoadProfile) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Population standard deviation of the slot values.
    pub fn std_dev(&self) -> f64 {
        let mean = self.total() / SLOTS as f64;
        let var = self.0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / SLOTS as f64;
        var.sqrt()
    }
}

impl Index<usize> for LoadProfile {
    type Output = f64;
    fn index(&self, t: usize) -> &f64 {
        &self.0[t]
    }
}

impl IndexMut<usize> for LoadProfile {
    fn index_mut(&mut self, t: usize) -> &mut f64 {
        &mut self.0[t]
    }
}

impl Add for LoadProfile {
    type Output = LoadProfile;
    fn add(self, rhs: LoadProfile) -> LoadProfile {
        self.zip_with(&rhs, |a, b| a + b)
    }
}

impl Sub for LoadProfile {
    type Output = LoadProfile;
    fn sub(self, rhs: LoadProfile) -> LoadProfile {
        self.zip_with(&rhs, |a, b| a - b)
    }
}

impl Neg for LoadProfile {
    type Output = LoadProfile;
    fn neg(self) -> LoadProfile {
        self.map(|v| -v)
    }
}

impl AddAssign for LoadProfile {
    fn add_assign(&mut self, rhs: LoadProfile) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a += b;
        }
    }
}

impl SubAssign for LoadProfile {
    fn sub_assign(&mut self, rhs: LoadProfile) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a -= b;
        }
    }
}

impl<'a> std::iter::Sum<&'a LoadProfile> for LoadProfile {
    fn sum<I: Iterator<Item = &'a LoadProfile>>(iter: I) -> Self {
        let mut acc = LoadProfile::zeros();
        for p in iter {
            acc += *p;
        }
        acc
    }
}

impl std::iter::Sum for LoadProfile {
    fn sum<I: Iterator<Item = LoadProfile>>(iter: I) -> Self {
        let mut acc = LoadProfile::zeros();
        for p in iter {
            acc += p;
        }
        acc
    }
}

/// Mean of squared slot-wise differences, in kWh².
pub fn profile_mse(a: &LoadProfile, b: &LoadProfile) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / SLOTS as f64
}

/// Maps wall-clock hours onto horizon slots.
///
/// Slot 0 of the horizon is the clock hour `start_hour` (0..24). Clock slots on
/// a [`crate::fleet::PevProfile`] are numbered 1..=24, where 24 is the hour
/// starting at midnight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizon {
    pub start_hour: u8,
}

impl Default for Horizon {
    /// Noon-to-noon, so evening arrivals and morning departures fall in one
    /// contiguous window.
    fn default() -> Self {
        Horizon { start_hour: 12 }
    }
}

impl Horizon {
    pub fn new(start_hour: u8) -> Self {
        Horizon { start_hour: start_hour % 24 }
    }

    /// 0-based horizon position of a clock slot (1..=24, 24 ≡ hour 0).
    pub fn position(&self, clock_slot: u8) -> usize {
        let hour = (clock_slot % 24) as usize;
        (hour + 24 - self.start_hour as usize) % 24
    }

    /// Wall-clock hour (0..24) covered by horizon position `t`.
    pub fn clock_hour(&self, t: usize) -> usize {
        (self.start_hour as usize + t) % 24
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_of_identical_is_zero() {
        let a = LoadProfile::from_fn(|t| t as f64 * 0.3);
        assert_eq!(profile_mse(&a, &a), 0.0);
    }

    #[test]
    fn mse_of_unit_offset_is_one() {
        let a = LoadProfile::from_fn(|t| (t as f64).sin());
        let b = a.map(|v| v + 1.0);
        assert!((profile_mse(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn horizon_positions_wrap_midnight() {
        let h = Horizon::default();
        assert_eq!(h.position(12), 0);
        assert_eq!(h.position(18), 6);
        assert_eq!(h.position(24), 12);
        assert_eq!(h.position(7), 19);
        assert_eq!(h.position(11), 23);
        assert_eq!(h.clock_hour(19), 7);
        let identity = Horizon::new(0);
        assert_eq!(identity.position(18), 18);
    }

    #[test]
    fn peak_prefers_earliest() {
        let mut p = LoadProfile::constant(1.0);
        p[3] = 5.0;
        p[9] = 5.0;
        assert_eq!(p.peak(), (3, 5.0));
    }
}
