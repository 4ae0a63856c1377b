//! Single-period HyperLogLog sketches.
//!
//! A sketch is an array of `s = 2^b` registers. Each recorded element is
//! hashed to 64 bits; the leading `b` bits pick a register and the remaining
//! `64 - b` bits contribute their leading-zero rank. Besides the usual
//! cardinality estimate, sketches support register-wise union (max) and
//! intersection (min), the building blocks for multi-period analysis.
//!
//! Recording is single-writer per sketch; estimation and merges are
//! read-only and safe to run concurrently with each other.

use thiserror::Error;

use crate::hash::{hash_bytes, hash_u64};

#[derive(Debug, Error, PartialEq)]
pub enum SketchError {
    #[error("register count {0} is not a power of two >= 16")]
    BadRegisterCount(usize),
    #[error("register width {0} must be between 1 and 8 bits")]
    BadRegisterWidth(u32),
    #[error("register value {value} exceeds cap {cap}")]
    RegisterOverflow { value: u8, cap: u8 },
    #[error("no bias-correction constant for {0} registers")]
    UnsupportedAlpha(usize),
    #[error("sketch shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty sketch list")]
    EmptyInput,
}

/// Hashes elements and splits the 64-bit result into a register index and
/// the rank-bearing tail. One hasher (one seed) is shared by every sketch of
/// a deployment so that sketches stay mergeable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElementHasher {
    seed: u64,
}

/// A 64-bit element hash split for a sketch of `2^b` registers: `index` is
/// the leading `b` bits, `tail` holds the remaining `64 - b` bits shifted to
/// the top of the word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashSplit {
    pub index: usize,
    pub tail: u64,
    pub tail_bits: u32,
}

impl ElementHasher {
    pub fn new(seed: u64) -> Self {
        ElementHasher { seed }
    }

    #[inline]
    pub fn split(&self, element: &[u8], index_bits: u32) -> HashSplit {
        Self::split_hash(hash_bytes(element, self.seed), index_bits)
    }

    #[inline]
    pub fn split_u64(&self, element: u64, index_bits: u32) -> HashSplit {
        Self::split_hash(hash_u64(element, self.seed), index_bits)
    }

    #[inline]
    fn split_hash(x: u64, index_bits: u32) -> HashSplit {
        debug_assert!((1..64).contains(&index_bits));
        HashSplit {
            index: (x >> (64 - index_bits)) as usize,
            tail: x << index_bits,
            tail_bits: 64 - index_bits,
        }
    }
}

/// Rank of a bit string: one plus the number of leading zeros, i.e. the
/// position of the leftmost 1. An all-zero string of n bits maps to n + 1.
///
/// `q` carries the string left-aligned in a `u64`; bits below the top
/// `q_bits` must be zero.
#[inline]
pub fn rho(q: u64, q_bits: u32) -> u32 {
    debug_assert!((1..=64).contains(&q_bits));
    debug_assert!(q_bits == 64 || q & ((1u64 << (64 - q_bits)) - 1) == 0);
    if q == 0 {
        q_bits + 1
    } else {
        q.leading_zeros() + 1
    }
}

/// Bias-correction constant for the harmonic-mean estimate.
///
/// Tabulated for 16, 32 and 64 registers; `0.7213 / (1 + 1.079/s)` for
/// 128 registers and up.
pub fn alpha(s: usize) -> Result<f64, SketchError> {
    match s {
        16 => Ok(0.673),
        32 => Ok(0.697),
        64 => Ok(0.709),
        _ if s >= 128 => Ok(0.7213 / (1.0 + 1.079 / s as f64)),
        _ => Err(SketchError::UnsupportedAlpha(s)),
    }
}

/// Cardinality estimate over a raw register slice.
///
/// Computes the normalized harmonic mean; below `2.5 s` it switches to
/// linear counting on the zero-register fraction when any register is still
/// zero (if none is, the harmonic-mean value is kept: the logarithm of a
/// zero fraction is undefined).
pub fn estimate_registers(registers: &[u8]) -> Result<f64, SketchError> {
    let s = registers.len();
    let alpha = alpha(s)?;
    let s_f = s as f64;
    let mut harmonic = 0.0f64;
    let mut zeros = 0usize;
    for &r in registers {
        harmonic += (-(r as f64)).exp2();
        if r == 0 {
            zeros += 1;
        }
    }
    let raw = alpha * s_f * s_f / harmonic;
    if raw < 2.5 * s_f && zeros > 0 {
        let v = zeros as f64 / s_f;
        Ok(-s_f * v.ln())
    } else {
        Ok(raw)
    }
}

/// An HLL sketch: `s = 2^b` registers of `h` bits each, values capped at
/// `H = 2^h - 1`. Registers only grow while recording.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HllSketch {
    index_bits: u32,
    width: u32,
    registers: Vec<u8>,
}

impl HllSketch {
    pub fn new(s: usize, width: u32) -> Result<Self, SketchError> {
        if s < 16 || !s.is_power_of_two() {
            return Err(SketchError::BadRegisterCount(s));
        }
        if width == 0 || width > 8 {
            return Err(SketchError::BadRegisterWidth(width));
        }
        Ok(HllSketch {
            index_bits: s.trailing_zeros(),
            width,
            registers: vec![0; s],
        })
    }

    /// Rebuilds a sketch from raw register values (e.g. extracted from a
    /// shared array or loaded from a snapshot).
    pub fn from_registers(registers: Vec<u8>, width: u32) -> Result<Self, SketchError> {
        let mut sketch = HllSketch::new(registers.len(), width)?;
        let cap = sketch.cap();
        for &v in &registers {
            if v > cap {
                return Err(SketchError::RegisterOverflow { value: v, cap });
            }
        }
        sketch.registers = registers;
        Ok(sketch)
    }

    pub fn s(&self) -> usize {
        self.registers.len()
    }

    pub fn index_bits(&self) -> u32 {
        self.index_bits
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    /// Maximum storable register value, `2^h - 1`.
    pub fn cap(&self) -> u8 {
        ((1u16 << self.width) - 1) as u8
    }

    pub fn registers(&self) -> &[u8] {
        &self.registers
    }

    /// Records one element: exactly one register is raised to
    /// `max(current, min(rank, cap))`. Re-recording the same element is a
    /// no-op.
    pub fn record(&mut self, hasher: &ElementHasher, element: &[u8]) {
        let split = hasher.split(element, self.index_bits);
        self.apply(split);
    }

    /// `record` for numeric elements; equivalent to recording the
    /// little-endian bytes.
    pub fn record_u64(&mut self, hasher: &ElementHasher, element: u64) {
        let split = hasher.split_u64(element, self.index_bits);
        self.apply(split);
    }

    #[inline]
    fn apply(&mut self, split: HashSplit) {
        let rank = rho(split.tail, split.tail_bits).min(self.cap() as u32) as u8;
        let slot = &mut self.registers[split.index];
        if *slot < rank {
            *slot = rank;
        }
    }

    /// Estimated number of distinct recorded elements.
    pub fn estimate(&self) -> f64 {
        estimate_registers(&self.registers).expect("sketch sizes always have an alpha constant")
    }

    fn check_same_shape(sketches: &[HllSketch]) -> Result<(), SketchError> {
        let first = sketches.first().ok_or(SketchError::EmptyInput)?;
        for sk in &sketches[1..] {
            if sk.s() != first.s() || sk.width != first.width {
                return Err(SketchError::ShapeMismatch(format!(
                    "expected s={} width={}, found s={} width={}",
                    first.s(),
                    first.width,
                    sk.s(),
                    sk.width
                )));
            }
        }
        Ok(())
    }

    /// Register-wise union (elementwise max). The union of sketches of sets
    /// equals the sketch of the sets' union.
    pub fn union(sketches: &[HllSketch]) -> Result<HllSketch, SketchError> {
        Self::check_same_shape(sketches)?;
        let mut out = sketches[0].clone();
        for sk in &sketches[1..] {
            for (o, &r) in out.registers.iter_mut().zip(&sk.registers) {
                if *o < r {
                    *o = r;
                }
            }
        }
        Ok(out)
    }

    /// Register-wise intersection (elementwise min), the input to the
    /// persistent-spread estimator.
    pub fn intersect(sketches: &[HllSketch]) -> Result<HllSketch, SketchError> {
        Self::check_same_shape(sketches)?;
        let mut out = sketches[0].clone();
        for sk in &sketches[1..] {
            for (o, &r) in out.registers.iter_mut().zip(&sk.registers) {
                if *o > r {
                    *o = r;
                }
            }
        }
        Ok(out)
    }
}
