//! Galois linear feedback shift registers.

use crate::{Error, Result};

/// Feedback polynomial x^14 + x^13 + x^12 + x^2 + 1, as exponent list.
pub const GLFSR14_TAPS: [u32; 4] = [14, 13, 12, 2];

/// One period of a pseudo-noise bit sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codeword {
    /// Bits as 0/1.
    pub bits: Vec<u8>,
    /// Register length.
    pub order: u32,
    /// Non-constant exponents of the feedback polynomial.
    pub taps: Vec<u32>,
}

impl Codeword {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|b| **b == 1).count()
    }
}

/// Right-shifting Galois register: the output is the low bit, and when it
/// is set the state is XORed with the feedback mask.
#[derive(Debug, Clone, Copy)]
pub struct GaloisLfsr {
    state: u32,
    mask: u32,
    order: u32,
}

impl GaloisLfsr {
    pub fn new(order: u32, taps: &[u32], seed: u32) -> Result<Self> {
        if !(2..=31).contains(&order) {
            return Err(Error::domain(format!("unsupported register length {order}")));
        }
        let limit = 1u32 << order;
        if seed == 0 || seed >= limit {
            return Err(Error::domain(format!(
                "seed must be a nonzero {order}-bit value, got {seed:#x}"
            )));
        }
        let mut mask = 0u32;
        for &t in taps {
            if t == 0 || t > order {
                return Err(Error::domain(format!("tap {t} outside 1..={order}")));
            }
            mask |= 1 << (t - 1);
        }
        if mask & (1 << (order - 1)) == 0 {
            return Err(Error::domain("taps must include the register length"));
        }
        Ok(Self {
            state: seed,
            mask,
            order,
        })
    }

    pub fn state(&self) -> u32 {
        self.state
    }

    pub fn next_bit(&mut self) -> u8 {
        let out = (self.state & 1) as u8;
        self.state >>= 1;
        if out == 1 {
            self.state ^= self.mask;
        }
        out
    }

    /// Bits produced until the state returns to its starting value
    /// (capped at `2^order` steps).
    pub fn period(mut self) -> usize {
        let start = self.state;
        let cap = 1usize << self.order;
        for n in 1..=cap {
            self.next_bit();
            if self.state == start {
                return n;
            }
        }
        cap
    }
}

/// One full period (16,383 bits) of the 14-bit GLFSR codeword.
pub fn glfsr14(seed: u16) -> Result<Codeword> {
    let mut reg = GaloisLfsr::new(14, &GLFSR14_TAPS, u32::from(seed))?;
    let period = (1usize << 14) - 1;
    let bits = (0..period).map(|_| reg.next_bit()).collect();
    Ok(Codeword {
        bits,
        order: 14,
        taps: GLFSR14_TAPS.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Golden prefix for seed 1, produced by a separate 10-line simulator
    /// before this module existed.
    const SEED1_PREFIX: [u8; 16] = [1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 0, 1, 0, 0];

    #[test]
    fn golden_prefix() {
        let cw = glfsr14(1).unwrap();
        assert_eq!(&cw.bits[..16], &SEED1_PREFIX);
    }

    #[test]
    fn maximal_period_and_balance() {
        for seed in [1u16, 0x2aa, 0x3fff, 777] {
            let reg = GaloisLfsr::new(14, &GLFSR14_TAPS, u32::from(seed)).unwrap();
            assert_eq!(reg.period(), 16_383);
            let cw = glfsr14(seed).unwrap();
            assert_eq!(cw.len(), 16_383);
            assert_eq!(cw.ones(), 8_192);
            assert_eq!(cw.len() - cw.ones(), 8_191);
        }
    }

    #[test]
    fn bad_seeds_rejected() {
        assert!(matches!(glfsr14(0), Err(Error::Domain(_))));
        assert!(glfsr14(0x4000).is_err());
    }

    #[test]
    fn seeds_are_shifts_of_one_sequence() {
        let a = glfsr14(1).unwrap().bits;
        let b = glfsr14(0x1234).unwrap().bits;
        let shift = (0..a.len()).find(|s| (0..a.len()).all(|k| a[(k + s) % a.len()] == b[k]));
        assert!(shift.is_some());
    }
}
