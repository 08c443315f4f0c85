//! Bytecode dialects and their binary encoding.
//!
//! Two dialects share one instruction format: *virtual* programs reference
//! data by virtual address (unbounded, per-program address space) and
//! *physical* memory programs reference frames of the interpreter's memory
//! array. A memory program additionally carries swap/prefetch directives.
//!
//! # Record format
//!
//! Every instruction occupies exactly [`RECORD_LEN`] (40) bytes, so record
//! `k` of a program file sits at byte offset `HEADER_LEN + 40 * k` and the
//! planner's linear passes can stream the file in either direction:
//!
//! ```text
//! offset  0: opcode       u8
//! offset  1: input count  u8   (must match the opcode's arity)
//! offset  2: width        u16  LE (bits for integer ops, slots for batch ops)
//! offset  4: immediate    u64  LE
//! offset 12: output       7-byte LE address (56-bit)
//! offset 19: input[0]     7-byte LE address
//! offset 26: input[1]     7-byte LE address
//! offset 33: input[2]     7-byte LE address
//! ```
//!
//! Addresses are 56-bit; the top byte of each 64-bit field is reserved.
//! For swap directives the `output` field carries a raw memory frame number
//! and `immediate` carries a storage frame number. Network directives pack
//! the peer worker id and the transfer size into `immediate`.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Magic bytes at the start of every program file.
pub const MAGIC: [u8; 4] = *b"MPG1";
/// Format version written into headers.
pub const VERSION: u16 = 1;
/// Fixed size of an encoded instruction record.
pub const RECORD_LEN: usize = 40;
/// Fixed size of an encoded program header.
pub const HEADER_LEN: usize = 48;
/// Addresses are 56-bit quantities.
pub const ADDR_BITS: u32 = 56;
/// Largest representable address.
pub const MAX_ADDR: u64 = (1 << ADDR_BITS) - 1;
/// Sentinel for "never used again" in next-use annotations.
pub const NEVER: u64 = u64::MAX;

/// Splits an address into `(page, offset)` under the given page shift.
#[inline]
pub fn split_addr(addr: u64, page_shift: u8) -> (u64, u64) {
    (addr >> page_shift, addr & ((1u64 << page_shift) - 1))
}

/// Rebuilds an address from `(page, offset)`.
#[inline]
pub fn join_addr(page: u64, offset: u64, page_shift: u8) -> u64 {
    (page << page_shift) | offset
}

/// Which address space a program's operands live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dialect {
    Virtual,
    Physical,
}

/// Unit of addressing: one wire (bit-wire programs) or one byte (batch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AddressUnit {
    Wire,
    Byte,
}

/// Which protocol driver a program was planned for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DriverId {
    BitWire,
    LeveledBatch,
}

impl DriverId {
    pub fn address_unit(self) -> AddressUnit {
        match self {
            DriverId::BitWire => AddressUnit::Wire,
            DriverId::LeveledBatch => AddressUnit::Byte,
        }
    }
}

macro_rules! opcodes {
    ($( $name:ident = $tag:literal, arity $arity:literal, $mn:literal; )*) => {
        /// Operation tags. Tags at `0x30` and above are *directives*: the
        /// engine handles them itself without calling the protocol driver.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        #[repr(u8)]
        pub enum OpCode {
            $( $name = $tag, )*
        }

        impl OpCode {
            pub fn from_tag(tag: u8) -> Option<OpCode> {
                match tag {
                    $( $tag => Some(OpCode::$name), )*
                    _ => None,
                }
            }

            /// Number of input addresses the opcode carries.
            pub fn arity(self) -> usize {
                match self {
                    $( OpCode::$name => $arity, )*
                }
            }

            /// Disassembler mnemonic.
            pub fn mnemonic(self) -> &'static str {
                match self {
                    $( OpCode::$name => $mn, )*
                }
            }

            pub const ALL: &'static [OpCode] = &[ $( OpCode::$name, )* ];
        }
    };
}

opcodes! {
    Input = 0x01, arity 0, "INPUT";
    Output = 0x02, arity 1, "OUTPUT";
    PublicConstant = 0x03, arity 0, "PCONST";
    IntAdd = 0x10, arity 2, "IADD";
    IntSub = 0x11, arity 2, "ISUB";
    IntIncrement = 0x12, arity 1, "IINC";
    BitAnd = 0x13, arity 2, "AND";
    BitXor = 0x14, arity 2, "XOR";
    BitOr = 0x15, arity 2, "OR";
    BitNot = 0x16, arity 1, "NOT";
    ShiftLeftConst = 0x17, arity 1, "SHL";
    ShiftRightConst = 0x18, arity 1, "SHR";
    IntCompareGe = 0x19, arity 2, "ICMPGE";
    IntCompareEq = 0x1a, arity 2, "ICMPEQ";
    Mux = 0x1b, arity 3, "MUX";
    Copy = 0x1c, arity 1, "COPY";
    BatchAdd = 0x20, arity 2, "BADD";
    BatchMulNoRelin = 0x21, arity 2, "BMUL";
    BatchRelinRescale = 0x22, arity 1, "BRELIN";
    BatchAddPlain = 0x23, arity 1, "BADDP";
    BatchMulPlain = 0x24, arity 1, "BMULP";
    NetworkPostSend = 0x30, arity 1, "NSEND";
    NetworkPostReceive = 0x31, arity 0, "NRECV";
    NetworkBarrier = 0x32, arity 0, "NBARRIER";
    IssueSwapIn = 0x40, arity 0, "ISWI";
    FinishSwapIn = 0x41, arity 0, "FSWI";
    IssueSwapOut = 0x42, arity 0, "ISWO";
    FinishSwapOut = 0x43, arity 0, "FSWO";
    CopyFromPrefetch = 0x44, arity 1, "CPFP";
    CopyToPrefetch = 0x45, arity 1, "CPTP";
    PrintStats = 0x50, arity 0, "PSTATS";
    Halt = 0x51, arity 0, "HALT";
}

impl OpCode {
    /// Directives are handled directly by the engine, never by the driver.
    pub fn is_directive(self) -> bool {
        self as u8 >= 0x30
    }

    /// Swap and prefetch-copy directives; these may only appear in memory
    /// programs, never in the virtual dialect.
    pub fn is_swap_directive(self) -> bool {
        matches!(
            self,
            OpCode::IssueSwapIn
                | OpCode::FinishSwapIn
                | OpCode::IssueSwapOut
                | OpCode::FinishSwapOut
                | OpCode::CopyFromPrefetch
                | OpCode::CopyToPrefetch
        )
    }

    pub fn is_network(self) -> bool {
        matches!(
            self,
            OpCode::NetworkPostSend | OpCode::NetworkPostReceive | OpCode::NetworkBarrier
        )
    }

    /// True when the `output` field names a data destination (an address in
    /// protocol instructions, a buffer in network receives).
    pub fn writes_output(self) -> bool {
        match self {
            OpCode::Output
            | OpCode::NetworkPostSend
            | OpCode::NetworkBarrier
            | OpCode::PrintStats
            | OpCode::Halt => false,
            op if op.is_swap_directive() => false,
            _ => true,
        }
    }

    /// True for batch-dialect protocol instructions.
    pub fn is_batch(self) -> bool {
        matches!(self as u8, 0x20..=0x24)
    }

    /// True for bit/integer-dialect protocol instructions.
    pub fn is_int(self) -> bool {
        matches!(self as u8, 0x10..=0x1c)
    }
}

/// One bytecode entry: a high-level operation over up to three inputs and
/// one output, or a directive. Directives reuse the same record layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instruction {
    pub opcode: OpCode,
    pub width: u16,
    pub immediate: u64,
    pub output: u64,
    /// Only the first `opcode.arity()` entries are meaningful; the rest
    /// must be zero so that equality and encoding stay canonical.
    pub inputs: [u64; 3],
    pub num_inputs: u8,
}

impl Instruction {
    pub fn new(opcode: OpCode, width: u16, output: u64, inputs: &[u64], immediate: u64) -> Self {
        let mut padded = [0u64; 3];
        padded[..inputs.len()].copy_from_slice(inputs);
        Instruction {
            opcode,
            width,
            immediate,
            output,
            inputs: padded,
            num_inputs: inputs.len() as u8,
        }
    }

    /// The meaningful input addresses.
    pub fn inputs(&self) -> &[u64] {
        &self.inputs[..self.num_inputs as usize]
    }

    /// Packs a network directive immediate: peer worker in the top 16 bits,
    /// transfer size (in address units) in the low 48.
    pub fn pack_network(peer: u32, size_units: u64) -> u64 {
        debug_assert!(size_units < (1 << 48));
        ((peer as u64) << 48) | size_units
    }

    pub fn network_peer(&self) -> u32 {
        (self.immediate >> 48) as u32
    }

    pub fn network_size(&self) -> u64 {
        self.immediate & ((1 << 48) - 1)
    }

    /// Checks structural well-formedness for a dialect.
    pub fn validate(&self, dialect: Dialect) -> Result<(), BytecodeError> {
        if self.num_inputs as usize != self.opcode.arity() {
            return Err(BytecodeError::Malformed {
                opcode: self.opcode,
                reason: "input count does not match opcode arity",
            });
        }
        for slot in self.num_inputs as usize..3 {
            if self.inputs[slot] != 0 {
                return Err(BytecodeError::Malformed {
                    opcode: self.opcode,
                    reason: "unused input slot is nonzero",
                });
            }
        }
        if self.output > MAX_ADDR || self.inputs.iter().any(|&a| a > MAX_ADDR) {
            return Err(BytecodeError::Malformed {
                opcode: self.opcode,
                reason: "address exceeds 56 bits",
            });
        }
        if dialect == Dialect::Virtual && self.opcode.is_swap_directive() {
            return Err(BytecodeError::Malformed {
                opcode: self.opcode,
                reason: "swap directive in a virtual program",
            });
        }
        Ok(())
    }

    /// Encodes into a fixed 40-byte record.
    pub fn encode(&self, dialect: Dialect) -> Result<[u8; RECORD_LEN], BytecodeError> {
        self.validate(dialect)?;
        let mut rec = [0u8; RECORD_LEN];
        rec[0] = self.opcode as u8;
        rec[1] = self.num_inputs;
        rec[2..4].copy_from_slice(&self.width.to_le_bytes());
        rec[4..12].copy_from_slice(&self.immediate.to_le_bytes());
        put_addr(&mut rec[12..19], self.output);
        put_addr(&mut rec[19..26], self.inputs[0]);
        put_addr(&mut rec[26..33], self.inputs[1]);
        put_addr(&mut rec[33..40], self.inputs[2]);
        Ok(rec)
    }

    /// Decodes a 40-byte record, validating against the dialect.
    pub fn decode(rec: &[u8; RECORD_LEN], dialect: Dialect) -> Result<Instruction, BytecodeError> {
        let opcode = OpCode::from_tag(rec[0]).ok_or(BytecodeError::UnknownOpcode(rec[0]))?;
        let inst = Instruction {
            opcode,
            num_inputs: rec[1],
            width: u16::from_le_bytes([rec[2], rec[3]]),
            immediate: u64::from_le_bytes(rec[4..12].try_into().unwrap()),
            output: get_addr(&rec[12..19]),
            inputs: [
                get_addr(&rec[19..26]),
                get_addr(&rec[26..33]),
                get_addr(&rec[33..40]),
            ],
        };
        inst.validate(dialect)?;
        Ok(inst)
    }
}

fn put_addr(dst: &mut [u8], addr: u64) {
    dst.copy_from_slice(&addr.to_le_bytes()[..7]);
}

fn get_addr(src: &[u8]) -> u64 {
    let mut bytes = [0u8; 8];
    bytes[..7].copy_from_slice(src);
    u64::from_le_bytes(bytes)
}

/// Program file header. Fixed 48 bytes; see the module docs for the record
/// layout that follows it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ProgramHeader {
    pub dialect: Dialect,
    pub address_unit: AddressUnit,
    pub driver: DriverId,
    /// Pages hold `2^page_shift` address units.
    pub page_shift: u8,
    pub instruction_count: u64,
    /// Data frames available to the replacement plan (physical only).
    pub frame_count: u64,
    /// Extra prefetch-buffer frames appended after the data frames.
    pub prefetch_frames: u64,
    /// Storage frames the plan spills to.
    pub storage_frame_count: u64,
}

impl ProgramHeader {
    pub fn page_units(&self) -> u64 {
        1u64 << self.page_shift
    }

    /// Total frames of the runtime memory array: data frames plus the
    /// prefetch buffer.
    pub fn total_frames(&self) -> u64 {
        self.frame_count + self.prefetch_frames
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&MAGIC);
        h[4..6].copy_from_slice(&VERSION.to_le_bytes());
        h[6] = match self.dialect {
            Dialect::Virtual => 0,
            Dialect::Physical => 1,
        };
        h[7] = match self.address_unit {
            AddressUnit::Wire => 0,
            AddressUnit::Byte => 1,
        };
        h[8] = match self.driver {
            DriverId::BitWire => 0,
            DriverId::LeveledBatch => 1,
        };
        h[9] = self.page_shift;
        h[12..20].copy_from_slice(&self.instruction_count.to_le_bytes());
        h[20..28].copy_from_slice(&self.frame_count.to_le_bytes());
        h[28..36].copy_from_slice(&self.prefetch_frames.to_le_bytes());
        h[36..44].copy_from_slice(&self.storage_frame_count.to_le_bytes());
        h
    }

    pub fn decode(h: &[u8; HEADER_LEN]) -> Result<ProgramHeader, BytecodeError> {
        if h[0..4] != MAGIC {
            return Err(BytecodeError::BadMagic);
        }
        let version = u16::from_le_bytes([h[4], h[5]]);
        if version != VERSION {
            return Err(BytecodeError::BadVersion(version));
        }
        let dialect = match h[6] {
            0 => Dialect::Virtual,
            1 => Dialect::Physical,
            d => return Err(BytecodeError::BadField("dialect", d)),
        };
        let address_unit = match h[7] {
            0 => AddressUnit::Wire,
            1 => AddressUnit::Byte,
            u => return Err(BytecodeError::BadField("address_unit", u)),
        };
        let driver = match h[8] {
            0 => DriverId::BitWire,
            1 => DriverId::LeveledBatch,
            d => return Err(BytecodeError::BadField("driver", d)),
        };
        Ok(ProgramHeader {
            dialect,
            address_unit,
            driver,
            page_shift: h[9],
            instruction_count: u64::from_le_bytes(h[12..20].try_into().unwrap()),
            frame_count: u64::from_le_bytes(h[20..28].try_into().unwrap()),
            prefetch_frames: u64::from_le_bytes(h[28..36].try_into().unwrap()),
            storage_frame_count: u64::from_le_bytes(h[36..44].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BytecodeError {
    BadMagic,
    BadVersion(u16),
    BadField(&'static str, u8),
    UnknownOpcode(u8),
    Malformed {
        opcode: OpCode,
        reason: &'static str,
    },
    /// Header promised more records than the file holds.
    Truncated {
        expected: u64,
        got: u64,
    },
    /// A physical operand references a frame outside `frame_count + prefetch_frames`.
    FrameOutOfRange {
        frame: u64,
        total: u64,
    },
    Sink(String),
}

impl fmt::Display for BytecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BytecodeError::BadMagic => write!(f, "bad magic (not a program file)"),
            BytecodeError::BadVersion(v) => write!(f, "unsupported format version {v}"),
            BytecodeError::BadField(name, v) => write!(f, "invalid header field {name}={v}"),
            BytecodeError::UnknownOpcode(t) => write!(f, "unknown opcode tag {t:#04x}"),
            BytecodeError::Malformed { opcode, reason } => {
                write!(f, "malformed {} instruction: {reason}", opcode.mnemonic())
            }
            BytecodeError::Truncated { expected, got } => {
                write!(f, "truncated program: header says {expected} records, file has {got}")
            }
            BytecodeError::FrameOutOfRange { frame, total } => {
                write!(f, "frame {frame} out of range (program has {total} frames)")
            }
            BytecodeError::Sink(msg) => write!(f, "sink error: {msg}"),
        }
    }
}

impl core::error::Error for BytecodeError {}

/// Destination for a stream of instructions. File-backed sinks live in the
/// companion crate; in-memory sinks below serve the planner's tests.
pub trait InstructionSink {
    fn emit(&mut self, inst: &Instruction) -> Result<(), BytecodeError>;
}

/// Collects instructions into a shared vector.
#[derive(Default)]
pub struct VecSink(pub alloc::rc::Rc<core::cell::RefCell<Vec<Instruction>>>);

impl VecSink {
    pub fn new() -> (VecSink, alloc::rc::Rc<core::cell::RefCell<Vec<Instruction>>>) {
        let shared = alloc::rc::Rc::new(core::cell::RefCell::new(Vec::new()));
        (VecSink(shared.clone()), shared)
    }
}

impl InstructionSink for VecSink {
    fn emit(&mut self, inst: &Instruction) -> Result<(), BytecodeError> {
        self.0.borrow_mut().push(*inst);
        Ok(())
    }
}

/// Counts instructions without storing them; used to check that builder
/// memory stays proportional to live handles, not program length.
#[derive(Default)]
pub struct CountingSink {
    pub count: alloc::rc::Rc<core::cell::Cell<u64>>,
}

impl InstructionSink for CountingSink {
    fn emit(&mut self, _inst: &Instruction) -> Result<(), BytecodeError> {
        self.count.set(self.count.get() + 1);
        Ok(())
    }
}

/// Formats one instruction the way the disassembler prints it:
/// `<index:08x> <mnemonic> [w<width>] <out> [<- in, in] [#imm]`.
/// Virtual operands print as `v<page>:<offset>`, physical as
/// `p<frame>:<offset>`; directive frames print bare (`p2`, `s7`).
pub fn format_instruction(
    out: &mut dyn fmt::Write,
    index: u64,
    inst: &Instruction,
    dialect: Dialect,
    page_shift: u8,
) -> fmt::Result {
    let prefix = match dialect {
        Dialect::Virtual => 'v',
        Dialect::Physical => 'p',
    };
    let addr = |a: u64| {
        let (page, off) = split_addr(a, page_shift);
        alloc::format!("{prefix}{page}:{off}")
    };
    write!(out, "{index:08x} {}", inst.opcode.mnemonic())?;
    match inst.opcode {
        OpCode::IssueSwapIn => write!(out, " p{} <- s{}", inst.output, inst.immediate)?,
        OpCode::FinishSwapIn => write!(out, " p{} (s{})", inst.output, inst.immediate)?,
        OpCode::IssueSwapOut => write!(out, " s{} <- p{}", inst.immediate, inst.output)?,
        OpCode::FinishSwapOut => write!(out, " s{}", inst.immediate)?,
        OpCode::CopyFromPrefetch | OpCode::CopyToPrefetch => {
            write!(out, " p{} <- p{}", inst.output, inst.inputs[0])?
        }
        OpCode::NetworkPostSend => write!(
            out,
            " peer={} n={} <- {}",
            inst.network_peer(),
            inst.network_size(),
            addr(inst.inputs[0])
        )?,
        OpCode::NetworkPostReceive => write!(
            out,
            " {} <- peer={} n={}",
            addr(inst.output),
            inst.network_peer(),
            inst.network_size()
        )?,
        OpCode::NetworkBarrier | OpCode::PrintStats | OpCode::Halt => {}
        OpCode::Output => write!(out, " w{} <- {}", inst.width, addr(inst.inputs[0]))?,
        _ => {
            write!(out, " w{} {}", inst.width, addr(inst.output))?;
            if inst.num_inputs > 0 {
                write!(out, " <-")?;
                for (i, &a) in inst.inputs().iter().enumerate() {
                    if i > 0 {
                        write!(out, ",")?;
                    }
                    write!(out, " {}", addr(a))?;
                }
            }
            if matches!(
                inst.opcode,
                OpCode::PublicConstant
                    | OpCode::ShiftLeftConst
                    | OpCode::ShiftRightConst
                    | OpCode::BatchAddPlain
                    | OpCode::BatchMulPlain
            ) {
                write!(out, " #{}", inst.immediate)?;
            }
        }
    }
    Ok(())
}

/// Formats the header summary lines the disassembler prints before the body.
pub fn format_header(out: &mut dyn fmt::Write, header: &ProgramHeader) -> fmt::Result {
    writeln!(
        out,
        "; program dialect={} unit={} driver={} page_shift={}",
        match header.dialect {
            Dialect::Virtual => "virtual",
            Dialect::Physical => "physical",
        },
        match header.address_unit {
            AddressUnit::Wire => "wire",
            AddressUnit::Byte => "byte",
        },
        match header.driver {
            DriverId::BitWire => "bitwire",
            DriverId::LeveledBatch => "leveledbatch",
        },
        header.page_shift
    )?;
    writeln!(
        out,
        "; instructions={} frames={} prefetch={} storage_frames={}",
        header.instruction_count,
        header.frame_count,
        header.prefetch_frames,
        header.storage_frame_count
    )
}
