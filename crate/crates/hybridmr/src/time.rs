//! Simulated-clock instants with nanosecond resolution.
//!
//! All protocol timing is expressed on one global simulated clock. Values are
//! stored as whole nanoseconds so that ordering, arithmetic and serialization
//! are exact; the scenario and report surfaces use fractional milliseconds.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::{Add, AddAssign};

/// An instant (or offset) on the simulated clock.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_ns(ns: u64) -> Self {
        SimTime(ns)
    }

    /// Converts fractional milliseconds, rounding to the nearest nanosecond.
    pub fn from_ms(ms: f64) -> Self {
        debug_assert!(ms >= 0.0, "simulated time cannot be negative");
        SimTime((ms * 1_000_000.0).round() as u64)
    }

    pub fn as_ns(self) -> u64 {
        self.0
    }

    pub fn as_ms(self) -> f64 {
        self.0 as f64 / 1_000_000.0
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.as_ms())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ms_round_trip_is_exact_for_whole_microseconds() {
        let t = SimTime::from_ms(0.2);
        assert_eq!(t.as_ns(), 200_000);
        assert_eq!(t.as_ms(), 0.2);
    }

    #[test]
    fn ordering_follows_nanoseconds() {
        assert!(SimTime::from_ns(5) < SimTime::from_ns(6));
        assert_eq!(SimTime::from_ms(1.0) + SimTime::from_ms(0.2), SimTime::from_ms(1.2));
    }
}
