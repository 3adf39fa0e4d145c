//! Arithmetic operation counters.

use std::ops::{Add, AddAssign};

/// Number of scalar additions (subtractions included) and multiplications.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    pub adds: u64,
    pub mults: u64,
}

impl OpCount {
    pub const fn new(adds: u64, mults: u64) -> Self {
        OpCount { adds, mults }
    }
}

impl Add for OpCount {
    type Output = OpCount;

    fn add(self, rhs: OpCount) -> OpCount {
        OpCount {
            adds: self.adds + rhs.adds,
            mults: self.mults + rhs.mults,
        }
    }
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, rhs: OpCount) {
        self.adds += rhs.adds;
        self.mults += rhs.mults;
    }
}

/// Formats a count with three significant figures, truncating the remaining
/// digits, e.g. `316800 -> "3.16e5"`.
pub fn sig3(value: u64) -> String {
    if value < 100 {
        return match value {
            0..=9 => format!("{value}.00e0"),
            _ => format!("{}.{}0e1", value / 10, value % 10),
        };
    }
    let exponent = value.ilog10();
    let lead = value / 10u64.pow(exponent - 2);
    format!("{}.{:02}e{}", lead / 100, lead % 100, exponent)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig3_truncates() {
        assert_eq!(sig3(7200), "7.20e3");
        assert_eq!(sig3(316_800), "3.16e5");
        assert_eq!(sig3(2_779_200), "2.77e6");
        assert_eq!(sig3(6_998_400), "6.99e6");
        assert_eq!(sig3(10_801), "1.08e4");
        assert_eq!(sig3(6001), "6.00e3");
        assert_eq!(sig3(100), "1.00e2");
        assert_eq!(sig3(42), "4.20e1");
        assert_eq!(sig3(7), "7.00e0");
    }
}
