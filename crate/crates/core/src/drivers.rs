//! Protocol drivers: pluggable value semantics beneath the engine.
//!
//! Both drivers compute in plaintext but preserve the memory footprint,
//! dirtying behavior, and operation structure of the protocols they stand in
//! for: the bit-wire driver stores each bit as a 16-byte wire value (the
//! size of a garbled wire label), and the leveled-batch driver stores each
//! vector as a sized ciphertext record whose byte size depends on its level
//! and relinearization state. The cryptography itself is out of scope.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use rand_core::{RngCore, SeedableRng};

/// Fixed-point scale for batch slot values: numbers are stored as
/// `round(x * 2^20)` in an `i64`, which keeps slot arithmetic bit-exact
/// across platforms.
pub const SCALE_BITS: u32 = 20;
pub const SCALE: i64 = 1 << SCALE_BITS;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DriverError {
    /// A wire value whose padding does not match the driver's pattern;
    /// stale or corrupt data would otherwise masquerade as a valid bit.
    CorruptWire,
    CorruptCiphertext,
    LevelMismatch { left: u8, right: u8 },
    /// Element-wise multiplication is not defined at level 0.
    LevelZeroMul,
    LevelOutOfRange { level: u8, max: u8 },
    NotRelinearized,
    AlreadyRelinearized,
    RelinearizedMixed,
    DimensionMismatch { left: usize, right: usize },
    BadFixedPoint(String),
}

impl fmt::Display for DriverError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriverError::CorruptWire => write!(f, "wire value has corrupt padding"),
            DriverError::CorruptCiphertext => write!(f, "ciphertext record is corrupt"),
            DriverError::LevelMismatch { left, right } => {
                write!(f, "operand levels differ: {left} vs {right}")
            }
            DriverError::LevelZeroMul => {
                write!(f, "a level-0 ciphertext cannot be multiplied")
            }
            DriverError::LevelOutOfRange { level, max } => {
                write!(f, "level {level} out of range (max {max})")
            }
            DriverError::NotRelinearized => {
                write!(f, "operation requires relinearized operands")
            }
            DriverError::AlreadyRelinearized => {
                write!(f, "relinearize-rescale requires an unrelinearized operand")
            }
            DriverError::RelinearizedMixed => {
                write!(f, "cannot mix relinearized and unrelinearized operands")
            }
            DriverError::DimensionMismatch { left, right } => {
                write!(f, "slot dimensions differ: {left} vs {right}")
            }
            DriverError::BadFixedPoint(s) => write!(f, "bad fixed-point literal: {s}"),
        }
    }
}

impl core::error::Error for DriverError {}

/// Plaintext stand-in for a garbled-circuit driver. One wire carries one
/// bit; the wire value occupies `wire_bytes` bytes, byte 0 holding the bit
/// and the rest holding padding derived from the bit and a per-program
/// seed. Reads validate the padding, so a swap or prefetch bug that
/// delivers stale bytes fails loudly instead of producing a lucky bit.
#[derive(Clone)]
pub struct BitWireDriver {
    wire_bytes: usize,
    pattern: [Vec<u8>; 2],
}

pub const DEFAULT_WIRE_BYTES: usize = 16;

impl BitWireDriver {
    pub fn new(wire_bytes: usize, seed: u64) -> BitWireDriver {
        assert!(wire_bytes >= 1);
        let mut pattern = [vec![0u8; wire_bytes], vec![0u8; wire_bytes]];
        for bit in 0..2 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                seed ^ 0x9e3779b97f4a7c15u64.wrapping_mul(bit as u64 + 1),
            );
            rng.fill_bytes(&mut pattern[bit]);
            pattern[bit][0] = bit as u8;
        }
        BitWireDriver { wire_bytes, pattern }
    }

    pub fn wire_bytes(&self) -> usize {
        self.wire_bytes
    }

    fn encode(&self, bit: bool, out: &mut [u8]) {
        out.copy_from_slice(&self.pattern[bit as usize]);
    }

    fn decode(&self, wire: &[u8]) -> Result<bool, DriverError> {
        match wire[0] {
            0 if wire == &self.pattern[0][..] => Ok(false),
            1 if wire == &self.pattern[1][..] => Ok(true),
            _ => Err(DriverError::CorruptWire),
        }
    }

    pub fn gate_and(&self, a: &[u8], b: &[u8], out: &mut [u8]) -> Result<(), DriverError> {
        let v = self.decode(a)? & self.decode(b)?;
        self.encode(v, out);
        Ok(())
    }

    pub fn gate_xor(&self, a: &[u8], b: &[u8], out: &mut [u8]) -> Result<(), DriverError> {
        let v = self.decode(a)? ^ self.decode(b)?;
        self.encode(v, out);
        Ok(())
    }

    pub fn constant(&self, bit: bool, out: &mut [u8]) {
        self.encode(bit, out);
    }

    pub fn input(&self, bit: bool, out: &mut [u8]) {
        self.encode(bit, out);
    }

    pub fn reveal(&self, wire: &[u8]) -> Result<bool, DriverError> {
        self.decode(wire)
    }
}

/// A decoded leveled-batch value: a vector of fixed-point slots plus the
/// level/relinearization metadata that governs which operations are legal
/// and how many bytes the stored form occupies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    pub level: u8,
    pub relinearized: bool,
    pub slots: Vec<i64>,
}

const CT_MAGIC: [u8; 2] = *b"ct";
const CT_HEADER: usize = 8;

/// Plaintext stand-in for a leveled homomorphic driver (CKKS-style level
/// rules). Multiplication requires equal levels >= 1 and relinearized
/// operands and produces an unrelinearized result at the same level;
/// relinearize-rescale restores the standard form and drops one level;
/// addition preserves both level and relinearization state.
#[derive(Clone)]
pub struct LeveledBatchDriver {
    pub max_level: u8,
    pub dimension: usize,
    /// size(l, relinearized) = base_relin * (l + 1); unrelinearized records
    /// are larger: base_unrelin * (l + 1).
    pub base_relin: u64,
    pub base_unrelin: u64,
}

pub const DEFAULT_MAX_LEVEL: u8 = 2;
pub const DEFAULT_DIMENSION: usize = 4096;
pub const DEFAULT_BASE_RELIN: u64 = 64 * 1024;
pub const DEFAULT_BASE_UNRELIN: u64 = 96 * 1024;

impl Default for LeveledBatchDriver {
    fn default() -> Self {
        LeveledBatchDriver::new(
            DEFAULT_MAX_LEVEL,
            DEFAULT_DIMENSION,
            DEFAULT_BASE_RELIN,
            DEFAULT_BASE_UNRELIN,
        )
    }
}

impl LeveledBatchDriver {
    pub fn new(max_level: u8, dimension: usize, base_relin: u64, base_unrelin: u64) -> Self {
        assert!(base_unrelin > base_relin, "unrelinearized records must be larger");
        assert!(
            base_relin as usize >= CT_HEADER + dimension * 8,
            "size table too small for {dimension} slots"
        );
        LeveledBatchDriver {
            max_level,
            dimension,
            base_relin,
            base_unrelin,
        }
    }

    /// Stored size in bytes of a ciphertext with the given metadata.
    pub fn size_of(&self, level: u8, relinearized: bool) -> Result<u64, DriverError> {
        if level > self.max_level {
            return Err(DriverError::LevelOutOfRange {
                level,
                max: self.max_level,
            });
        }
        let base = if relinearized {
            self.base_relin
        } else {
            self.base_unrelin
        };
        Ok(base * (level as u64 + 1))
    }

    /// Builds a fresh ciphertext at the maximum level, as inputs enter the
    /// computation.
    pub fn fresh(&self, slots: Vec<i64>) -> Result<Ciphertext, DriverError> {
        if slots.len() != self.dimension {
            return Err(DriverError::DimensionMismatch {
                left: slots.len(),
                right: self.dimension,
            });
        }
        Ok(Ciphertext {
            level: self.max_level,
            relinearized: true,
            slots,
        })
    }

    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, DriverError> {
        if a.level != b.level {
            return Err(DriverError::LevelMismatch {
                left: a.level,
                right: b.level,
            });
        }
        if a.relinearized != b.relinearized {
            return Err(DriverError::RelinearizedMixed);
        }
        Ok(Ciphertext {
            level: a.level,
            relinearized: a.relinearized,
            slots: zip_slots(a, b, |x, y| x.wrapping_add(y))?,
        })
    }

    pub fn mul_no_relin(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, DriverError> {
        if a.level != b.level {
            return Err(DriverError::LevelMismatch {
                left: a.level,
                right: b.level,
            });
        }
        if a.level == 0 {
            return Err(DriverError::LevelZeroMul);
        }
        if !a.relinearized || !b.relinearized {
            return Err(DriverError::NotRelinearized);
        }
        Ok(Ciphertext {
            level: a.level,
            relinearized: false,
            slots: zip_slots(a, b, fixed_mul)?,
        })
    }

    pub fn relin_rescale(&self, a: &Ciphertext) -> Result<Ciphertext, DriverError> {
        if a.relinearized {
            return Err(DriverError::AlreadyRelinearized);
        }
        Ok(Ciphertext {
            level: a.level - 1,
            relinearized: true,
            slots: a.slots.clone(),
        })
    }

    pub fn add_plain(&self, a: &Ciphertext, plain: i64) -> Result<Ciphertext, DriverError> {
        if !a.relinearized {
            return Err(DriverError::NotRelinearized);
        }
        Ok(Ciphertext {
            level: a.level,
            relinearized: true,
            slots: a.slots.iter().map(|&x| x.wrapping_add(plain)).collect(),
        })
    }

    /// Plaintext multiply followed by the rescale it necessitates: costs one
    /// level, like ciphertext multiplication, but stays relinearized.
    pub fn mul_plain(&self, a: &Ciphertext, plain: i64) -> Result<Ciphertext, DriverError> {
        if a.level == 0 {
            return Err(DriverError::LevelZeroMul);
        }
        if !a.relinearized {
            return Err(DriverError::NotRelinearized);
        }
        Ok(Ciphertext {
            level: a.level - 1,
            relinearized: true,
            slots: a.slots.iter().map(|&x| fixed_mul(x, plain)).collect(),
        })
    }

    /// Serializes a ciphertext into its sized record: an 8-byte header,
    /// the slot data, and zero padding out to `size_of(level, relin)`.
    pub fn write_record(&self, ct: &Ciphertext, out: &mut [u8]) -> Result<(), DriverError> {
        let size = self.size_of(ct.level, ct.relinearized)? as usize;
        debug_assert_eq!(out.len(), size);
        if ct.slots.len() != self.dimension {
            return Err(DriverError::DimensionMismatch {
                left: ct.slots.len(),
                right: self.dimension,
            });
        }
        out.fill(0);
        out[0..2].copy_from_slice(&CT_MAGIC);
        out[2] = ct.level;
        out[3] = ct.relinearized as u8;
        out[4..8].copy_from_slice(&(self.dimension as u32).to_le_bytes());
        for (i, &slot) in ct.slots.iter().enumerate() {
            let at = CT_HEADER + i * 8;
            out[at..at + 8].copy_from_slice(&slot.to_le_bytes());
        }
        Ok(())
    }

    /// Reads the metadata header at `bytes` and returns the full record
    /// size, so the caller can slice out the record before decoding.
    pub fn peek_size(&self, bytes: &[u8]) -> Result<u64, DriverError> {
        if bytes.len() < CT_HEADER || bytes[0..2] != CT_MAGIC {
            return Err(DriverError::CorruptCiphertext);
        }
        let relin = match bytes[3] {
            0 => false,
            1 => true,
            _ => return Err(DriverError::CorruptCiphertext),
        };
        self.size_of(bytes[2], relin)
    }

    pub fn read_record(&self, bytes: &[u8]) -> Result<Ciphertext, DriverError> {
        let size = self.peek_size(bytes)? as usize;
        if bytes.len() < size {
            return Err(DriverError::CorruptCiphertext);
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if dim != self.dimension {
            return Err(DriverError::DimensionMismatch {
                left: dim,
                right: self.dimension,
            });
        }
        let mut slots = Vec::with_capacity(dim);
        for i in 0..dim {
            let at = CT_HEADER + i * 8;
            slots.push(i64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
        }
        Ok(Ciphertext {
            level: bytes[2],
            relinearized: bytes[3] == 1,
            slots,
        })
    }
}

fn zip_slots(
    a: &Ciphertext,
    b: &Ciphertext,
    f: impl Fn(i64, i64) -> i64,
) -> Result<Vec<i64>, DriverError> {
    if a.slots.len() != b.slots.len() {
        return Err(DriverError::DimensionMismatch {
            left: a.slots.len(),
            right: b.slots.len(),
        });
    }
    Ok(a.slots
        .iter()
        .zip(b.slots.iter())
        .map(|(&x, &y)| f(x, y))
        .collect())
}

/// Fixed-point product: the full 128-bit product shifted back down by the
/// scale, truncating toward negative infinity. Rounding happens once per
/// multiplication; oracles must use the same rule.
#[inline]
pub fn fixed_mul(a: i64, b: i64) -> i64 {
    (((a as i128) * (b as i128)) >> SCALE_BITS) as i64
}

/// Parses a plain decimal literal (`-12.75`) into scale-2^20 fixed point,
/// rounding half away from zero.
pub fn parse_fixed(s: &str) -> Result<i64, DriverError> {
    let bad = || DriverError::BadFixedPoint(String::from(s));
    let s = s.trim();
    let (neg, digits) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((i, f)) => (i, f),
        None => (digits, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad());
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit())
        || !frac_part.bytes().all(|b| b.is_ascii_digit())
        || frac_part.len() > 27
    {
        return Err(bad());
    }
    let int_val: u128 = if int_part.is_empty() {
        0
    } else {
        int_part.parse().map_err(|_| bad())?
    };
    let mut scaled = int_val.checked_shl(SCALE_BITS).ok_or_else(bad)?;
    if !frac_part.is_empty() {
        let frac_val: u128 = frac_part.parse().map_err(|_| bad())?;
        let pow10 = 10u128.checked_pow(frac_part.len() as u32).ok_or_else(bad)?;
        scaled += ((frac_val << SCALE_BITS) + pow10 / 2) / pow10;
    }
    if scaled > i64::MAX as u128 {
        return Err(bad());
    }
    Ok(if neg { -(scaled as i64) } else { scaled as i64 })
}

/// Formats a fixed-point value back to an exact decimal string. Every
/// scale-2^20 value has an exact decimal form of at most 20 fraction
/// digits; trailing zeros are trimmed.
pub fn format_fixed(v: i64) -> String {
    let mag = v.unsigned_abs();
    let int_part = mag >> SCALE_BITS;
    let frac = mag & ((1 << SCALE_BITS) - 1);
    let sign = if v < 0 { "-" } else { "" };
    if frac == 0 {
        return alloc::format!("{sign}{int_part}");
    }
    // frac / 2^20 == frac * 5^20 / 10^20, computed exactly in u128.
    let dec = (frac as u128) * 95_367_431_640_625u128;
    let mut digits = alloc::format!("{dec:020}");
    while digits.ends_with('0') {
        digits.pop();
    }
    alloc::format!("{sign}{int_part}.{digits}")
}
