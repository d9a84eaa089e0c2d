use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

/// Microseconds since simulation start.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct VirtualTime(pub u64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);

    pub fn from_micros(us: u64) -> Self {
        VirtualTime(us)
    }

    pub fn from_millis(ms: u64) -> Self {
        VirtualTime(ms * 1_000)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    /// Elapsed micros since `earlier`, zero if `earlier` is later.
    pub fn since(self, earlier: VirtualTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl Add<u64> for VirtualTime {
    type Output = VirtualTime;

    fn add(self, micros: u64) -> VirtualTime {
        VirtualTime(self.0 + micros)
    }
}

impl AddAssign<u64> for VirtualTime {
    fn add_assign(&mut self, micros: u64) {
        self.0 += micros;
    }
}

impl Sub for VirtualTime {
    type Output = u64;

    fn sub(self, rhs: VirtualTime) -> u64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic() {
        let t = VirtualTime::from_millis(5) + 250;
        assert_eq!(t.as_micros(), 5_250);
        assert_eq!(t - VirtualTime::from_millis(5), 250);
        assert_eq!(VirtualTime(3).since(VirtualTime(10)), 0);
    }
}
