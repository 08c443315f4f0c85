//! Program-builder API embedded in the host language.
//!
//! Executing a builder thunk does no arithmetic: every operation allocates
//! space for its result in the virtual address space and emits one
//! instruction into the sink. Handles carry only the address and metadata;
//! dropping a handle (or reassigning over it) deallocates its address, so
//! liveness in the emitted program follows ordinary scoping.

use alloc::boxed::Box;
use alloc::rc::Rc;
use core::cell::RefCell;
use core::fmt;

use crate::bytecode::{BytecodeError, Dialect, DriverId, Instruction, InstructionSink, OpCode};
use crate::drivers::LeveledBatchDriver;
use crate::placement::{AllocError, SlabAllocator};

/// Input origin tag. Recorded for documentation of the input-file layout;
/// all parties' inputs arrive through the worker's single input stream in
/// emission order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Party {
    P0,
    P1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BuildError {
    WidthMismatch { left: u16, right: u16 },
    BadWidth(u16),
    SelectorNotBit(u16),
    BadShift { amount: u64, width: u16 },
    ConstantOutOfRange { value: u64, width: u16 },
    AlreadyMarked,
    NotWritten,
    ContextMismatch,
    WrongDialect { op: &'static str, driver: DriverId },
    SelfSend,
    PeerOutOfRange { peer: u32, worker_count: u32 },
    LevelMismatch { left: u8, right: u8 },
    LevelZeroMul,
    RelinearizedMixed,
    NotRelinearized,
    AlreadyRelinearized,
    UnevenShard { total: u64, workers: u32 },
    /// Allocations still live when the build finished.
    Leak { live: u64 },
    Alloc(AllocError),
    Emit(BytecodeError),
}

impl fmt::Display for BuildError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BuildError::WidthMismatch { left, right } => {
                write!(f, "operand widths differ: {left} vs {right}")
            }
            BuildError::BadWidth(w) => write!(f, "unsupported width {w} (must be 1..=128)"),
            BuildError::SelectorNotBit(w) => write!(f, "mux selector must be 1 wire, got {w}"),
            BuildError::BadShift { amount, width } => {
                write!(f, "shift by {amount} out of range for width {width}")
            }
            BuildError::ConstantOutOfRange { value, width } => {
                write!(f, "constant {value} does not fit in {width} bits")
            }
            BuildError::AlreadyMarked => write!(f, "handle was already written"),
            BuildError::NotWritten => write!(f, "handle read before being written"),
            BuildError::ContextMismatch => write!(f, "handles belong to different builders"),
            BuildError::WrongDialect { op, driver } => {
                write!(f, "{op} is not available under the {driver:?} driver")
            }
            BuildError::SelfSend => write!(f, "network operation targets this worker"),
            BuildError::PeerOutOfRange { peer, worker_count } => {
                write!(f, "peer {peer} out of range for {worker_count} workers")
            }
            BuildError::LevelMismatch { left, right } => {
                write!(f, "ciphertext levels differ: {left} vs {right}")
            }
            BuildError::LevelZeroMul => write!(f, "cannot multiply at level 0"),
            BuildError::RelinearizedMixed => {
                write!(f, "cannot mix relinearized and unrelinearized operands")
            }
            BuildError::NotRelinearized => write!(f, "operand must be relinearized"),
            BuildError::AlreadyRelinearized => write!(f, "operand is already relinearized"),
            BuildError::UnevenShard { total, workers } => {
                write!(f, "{total} elements do not shard evenly over {workers} workers")
            }
            BuildError::Leak { live } => {
                write!(f, "{live} allocations still live at end of build")
            }
            BuildError::Alloc(e) => write!(f, "allocation failed: {e}"),
            BuildError::Emit(e) => write!(f, "emit failed: {e}"),
        }
    }
}

impl core::error::Error for BuildError {}

impl From<AllocError> for BuildError {
    fn from(e: AllocError) -> Self {
        BuildError::Alloc(e)
    }
}

impl From<BytecodeError> for BuildError {
    fn from(e: BytecodeError) -> Self {
        BuildError::Emit(e)
    }
}

/// Per-build options; the worker id and worker count let one thunk emit a
/// different shard of a distributed program on each planner invocation.
#[derive(Debug, Clone)]
pub struct ProgramOptions {
    pub worker_id: u32,
    pub worker_count: u32,
    /// Workload problem size.
    pub problem_size: u64,
    pub page_shift: u8,
    /// Tile edge hint for tiled workloads; picked by the planner frontend
    /// from the frame budget.
    pub tile: Option<u64>,
}

impl ProgramOptions {
    pub fn single(problem_size: u64, page_shift: u8) -> ProgramOptions {
        ProgramOptions {
            worker_id: 0,
            worker_count: 1,
            problem_size,
            page_shift,
            tile: None,
        }
    }
}

/// Sizing rules the builder needs from the driver that will run the
/// program: bit-wire programs allocate in wires, batch programs in bytes
/// per the driver's size table.
#[derive(Clone)]
pub enum DriverProfile {
    BitWire,
    Batch(LeveledBatchDriver),
}

impl DriverProfile {
    pub fn driver_id(&self) -> DriverId {
        match self {
            DriverProfile::BitWire => DriverId::BitWire,
            DriverProfile::Batch(_) => DriverId::LeveledBatch,
        }
    }
}

pub(crate) struct BuildState {
    pub(crate) alloc: SlabAllocator,
    sink: Box<dyn InstructionSink>,
    opts: ProgramOptions,
    profile: DriverProfile,
    emitted: u64,
    /// Deallocation failures surface from handle drops; the first one is
    /// kept and reported when the build finishes.
    sticky: Option<BuildError>,
}

impl BuildState {
    fn emit(&mut self, inst: Instruction) -> Result<(), BuildError> {
        inst.validate(Dialect::Virtual)?;
        self.sink.emit(&inst)?;
        self.emitted += 1;
        Ok(())
    }

    fn allocate(&mut self, units: u64) -> Result<u64, BuildError> {
        Ok(self.alloc.allocate(units)?)
    }

    fn release(&mut self, addr: u64) {
        if let Err(e) = self.alloc.deallocate(addr) {
            if self.sticky.is_none() {
                self.sticky = Some(e.into());
            }
        }
    }
}

type Ctx = Rc<RefCell<BuildState>>;

/// One program build. Exactly one context exists per build; all handles
/// are tied to it.
pub struct BuilderContext {
    state: Ctx,
}

impl BuilderContext {
    pub(crate) fn new(
        opts: ProgramOptions,
        profile: DriverProfile,
        sink: Box<dyn InstructionSink>,
    ) -> BuilderContext {
        let alloc = SlabAllocator::new(opts.page_shift);
        BuilderContext {
            state: Rc::new(RefCell::new(BuildState {
                alloc,
                sink,
                opts,
                profile,
                emitted: 0,
                sticky: None,
            })),
        }
    }

    pub fn options(&self) -> ProgramOptions {
        self.state.borrow().opts.clone()
    }

    pub fn worker_id(&self) -> u32 {
        self.state.borrow().opts.worker_id
    }

    pub fn worker_count(&self) -> u32 {
        self.state.borrow().opts.worker_count
    }

    pub fn problem_size(&self) -> u64 {
        self.state.borrow().opts.problem_size
    }

    pub fn instructions_emitted(&self) -> u64 {
        self.state.borrow().emitted
    }

    fn require_bitwire(&self, op: &'static str) -> Result<(), BuildError> {
        let st = self.state.borrow();
        match st.profile {
            DriverProfile::BitWire => Ok(()),
            DriverProfile::Batch(_) => Err(BuildError::WrongDialect {
                op,
                driver: DriverId::LeveledBatch,
            }),
        }
    }

    fn batch_profile(&self, op: &'static str) -> Result<LeveledBatchDriver, BuildError> {
        let st = self.state.borrow();
        match &st.profile {
            DriverProfile::Batch(d) => Ok(d.clone()),
            DriverProfile::BitWire => Err(BuildError::WrongDialect {
                op,
                driver: DriverId::BitWire,
            }),
        }
    }

    /// Allocates an integer variable without writing it. It must be marked
    /// as an input before any use.
    pub fn int_fresh(&self, width: u16) -> Result<IntHandle, BuildError> {
        self.require_bitwire("integer variable")?;
        if width == 0 || width > 128 {
            return Err(BuildError::BadWidth(width));
        }
        let addr = self.state.borrow_mut().allocate(width as u64)?;
        Ok(IntHandle {
            width,
            addr,
            valid: false,
            state: self.state.clone(),
        })
    }

    pub fn int_input(&self, width: u16, party: Party) -> Result<IntHandle, BuildError> {
        let mut h = self.int_fresh(width)?;
        h.mark_input(party)?;
        Ok(h)
    }

    pub fn int_constant(&self, width: u16, value: u64) -> Result<IntHandle, BuildError> {
        self.require_bitwire("integer constant")?;
        if width == 0 || width > 128 {
            return Err(BuildError::BadWidth(width));
        }
        if width < 64 && value >> width != 0 {
            return Err(BuildError::ConstantOutOfRange { value, width });
        }
        let mut st = self.state.borrow_mut();
        let addr = st.allocate(width as u64)?;
        st.emit(Instruction::new(OpCode::PublicConstant, width, addr, &[], value))?;
        drop(st);
        Ok(IntHandle {
            width,
            addr,
            valid: true,
            state: self.state.clone(),
        })
    }

    /// Allocates a batch variable without writing it.
    pub fn batch_fresh(&self) -> Result<BatchHandle, BuildError> {
        let profile = self.batch_profile("batch variable")?;
        let level = profile.max_level;
        let size = profile.size_of(level, true).expect("max level sized");
        let addr = self.state.borrow_mut().allocate(size)?;
        Ok(BatchHandle {
            level,
            relinearized: true,
            element_count: profile.dimension as u32,
            addr,
            valid: false,
            state: self.state.clone(),
        })
    }

    pub fn batch_input(&self, party: Party) -> Result<BatchHandle, BuildError> {
        let mut h = self.batch_fresh()?;
        h.mark_input(party)?;
        Ok(h)
    }

    fn check_peer(&self, peer: u32) -> Result<(), BuildError> {
        let st = self.state.borrow();
        if peer == st.opts.worker_id {
            return Err(BuildError::SelfSend);
        }
        if peer >= st.opts.worker_count {
            return Err(BuildError::PeerOutOfRange {
                peer,
                worker_count: st.opts.worker_count,
            });
        }
        Ok(())
    }

    /// Posts an asynchronous send of one integer variable to a peer worker.
    /// Completion is only guaranteed after a later [`BuilderContext::barrier`].
    pub fn post_send_int(&self, h: &IntHandle, peer: u32) -> Result<(), BuildError> {
        h.check_ctx(self)?;
        h.check_valid()?;
        self.check_peer(peer)?;
        self.state.borrow_mut().emit(Instruction::new(
            OpCode::NetworkPostSend,
            0,
            0,
            &[h.addr],
            Instruction::pack_network(peer, h.width as u64),
        ))
    }

    /// Posts an asynchronous receive of one integer variable from a peer.
    /// The handle's contents are defined only after a later barrier.
    pub fn post_receive_int(&self, width: u16, peer: u32) -> Result<IntHandle, BuildError> {
        self.check_peer(peer)?;
        let mut h = self.int_fresh(width)?;
        self.state.borrow_mut().emit(Instruction::new(
            OpCode::NetworkPostReceive,
            0,
            h.addr,
            &[],
            Instruction::pack_network(peer, width as u64),
        ))?;
        h.valid = true;
        Ok(h)
    }

    pub fn post_send_batch(&self, h: &BatchHandle, peer: u32) -> Result<(), BuildError> {
        h.check_ctx(self)?;
        h.check_valid()?;
        self.check_peer(peer)?;
        let profile = self.batch_profile("batch send")?;
        let size = profile
            .size_of(h.level, h.relinearized)
            .expect("handle metadata in range");
        self.state.borrow_mut().emit(Instruction::new(
            OpCode::NetworkPostSend,
            0,
            0,
            &[h.addr],
            Instruction::pack_network(peer, size),
        ))
    }

    /// Posts a receive of one ciphertext with the given metadata; the peer
    /// must send a ciphertext of exactly that shape.
    pub fn post_receive_batch(
        &self,
        level: u8,
        relinearized: bool,
        peer: u32,
    ) -> Result<BatchHandle, BuildError> {
        self.check_peer(peer)?;
        let profile = self.batch_profile("batch receive")?;
        let size = profile
            .size_of(level, relinearized)
            .map_err(|_| BuildError::LevelMismatch { left: level, right: profile.max_level })?;
        let addr = self.state.borrow_mut().allocate(size)?;
        self.state.borrow_mut().emit(Instruction::new(
            OpCode::NetworkPostReceive,
            0,
            addr,
            &[],
            Instruction::pack_network(peer, size),
        ))?;
        Ok(BatchHandle {
            level,
            relinearized,
            element_count: profile.dimension as u32,
            addr,
            valid: true,
            state: self.state.clone(),
        })
    }

    /// Waits for every outstanding network operation posted so far.
    pub fn barrier(&self) -> Result<(), BuildError> {
        self.state
            .borrow_mut()
            .emit(Instruction::new(OpCode::NetworkBarrier, 0, 0, &[], 0))
    }
}

/// A planned integer variable: a width and the virtual address of its
/// wires. Dropping the handle frees the address.
pub struct IntHandle {
    width: u16,
    addr: u64,
    valid: bool,
    state: Ctx,
}

impl Drop for IntHandle {
    fn drop(&mut self) {
        self.state.borrow_mut().release(self.addr);
    }
}

impl IntHandle {
    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn addr(&self) -> u64 {
        self.addr
    }

    fn check_ctx(&self, ctx: &BuilderContext) -> Result<(), BuildError> {
        if Rc::ptr_eq(&self.state, &ctx.state) {
            Ok(())
        } else {
            Err(BuildError::ContextMismatch)
        }
    }

    fn check_valid(&self) -> Result<(), BuildError> {
        if self.valid {
            Ok(())
        } else {
            Err(BuildError::NotWritten)
        }
    }

    fn check_same(&self, other: &IntHandle) -> Result<(), BuildError> {
        if !Rc::ptr_eq(&self.state, &other.state) {
            return Err(BuildError::ContextMismatch);
        }
        self.check_valid()?;
        other.check_valid()?;
        if self.width != other.width {
            return Err(BuildError::WidthMismatch {
                left: self.width,
                right: other.width,
            });
        }
        Ok(())
    }

    /// Declares this fresh variable a program input; its value is consumed
    /// from the input stream at run time. Input order defines the input
    /// file layout.
    pub fn mark_input(&mut self, _party: Party) -> Result<(), BuildError> {
        if self.valid {
            return Err(BuildError::AlreadyMarked);
        }
        self.state.borrow_mut().emit(Instruction::new(
            OpCode::Input,
            self.width,
            self.addr,
            &[],
            0,
        ))?;
        self.valid = true;
        Ok(())
    }

    /// Appends this variable's value to the program output.
    pub fn mark_output(&self) -> Result<(), BuildError> {
        self.check_valid()?;
        self.state.borrow_mut().emit(Instruction::new(
            OpCode::Output,
            self.width,
            0,
            &[self.addr],
            0,
        ))
    }

    fn binary(&self, op: OpCode, other: &IntHandle) -> Result<IntHandle, BuildError> {
        self.check_same(other)?;
        self.derive(op, self.width, &[self.addr, other.addr], 0)
    }

    fn derive(
        &self,
        op: OpCode,
        out_width: u16,
        inputs: &[u64],
        immediate: u64,
    ) -> Result<IntHandle, BuildError> {
        let mut st = self.state.borrow_mut();
        let addr = st.allocate(out_width as u64)?;
        st.emit(Instruction::new(op, out_width, addr, inputs, immediate))?;
        drop(st);
        Ok(IntHandle {
            width: out_width,
            addr,
            valid: true,
            state: self.state.clone(),
        })
    }

    pub fn add(&self, other: &IntHandle) -> Result<IntHandle, BuildError> {
        self.binary(OpCode::IntAdd, other)
    }

    pub fn sub(&self, other: &IntHandle) -> Result<IntHandle, BuildError> {
        self.binary(OpCode::IntSub, other)
    }

    pub fn bit_and(&self, other: &IntHandle) -> Result<IntHandle, BuildError> {
        self.binary(OpCode::BitAnd, other)
    }

    pub fn bit_or(&self, other: &IntHandle) -> Result<IntHandle, BuildError> {
        self.binary(OpCode::BitOr, other)
    }

    pub fn bit_xor(&self, other: &IntHandle) -> Result<IntHandle, BuildError> {
        self.binary(OpCode::BitXor, other)
    }

    pub fn increment(&self) -> Result<IntHandle, BuildError> {
        self.check_valid()?;
        self.derive(OpCode::IntIncrement, self.width, &[self.addr], 0)
    }

    pub fn bit_not(&self) -> Result<IntHandle, BuildError> {
        self.check_valid()?;
        self.derive(OpCode::BitNot, self.width, &[self.addr], 0)
    }

    pub fn shl(&self, amount: u64) -> Result<IntHandle, BuildError> {
        self.check_valid()?;
        if amount >= self.width as u64 {
            return Err(BuildError::BadShift {
                amount,
                width: self.width,
            });
        }
        self.derive(OpCode::ShiftLeftConst, self.width, &[self.addr], amount)
    }

    pub fn shr(&self, amount: u64) -> Result<IntHandle, BuildError> {
        self.check_valid()?;
        if amount >= self.width as u64 {
            return Err(BuildError::BadShift {
                amount,
                width: self.width,
            });
        }
        self.derive(OpCode::ShiftRightConst, self.width, &[self.addr], amount)
    }

    /// `self >= other`, unsigned; the result is a single wire. The
    /// instruction's width field carries the operand width the comparison
    /// chain runs over.
    pub fn ge(&self, other: &IntHandle) -> Result<IntHandle, BuildError> {
        self.check_same(other)?;
        self.compare(OpCode::IntCompareGe, other)
    }

    pub fn eq(&self, other: &IntHandle) -> Result<IntHandle, BuildError> {
        self.check_same(other)?;
        self.compare(OpCode::IntCompareEq, other)
    }

    fn compare(&self, op: OpCode, other: &IntHandle) -> Result<IntHandle, BuildError> {
        let mut st = self.state.borrow_mut();
        let addr = st.allocate(1)?;
        st.emit(Instruction::new(
            op,
            self.width,
            addr,
            &[self.addr, other.addr],
            0,
        ))?;
        drop(st);
        Ok(IntHandle {
            width: 1,
            addr,
            valid: true,
            state: self.state.clone(),
        })
    }

    /// Selects `if_true` when this single-wire selector is 1, else
    /// `if_false`.
    pub fn mux(&self, if_true: &IntHandle, if_false: &IntHandle) -> Result<IntHandle, BuildError> {
        self.check_valid()?;
        if self.width != 1 {
            return Err(BuildError::SelectorNotBit(self.width));
        }
        if_true.check_same(if_false)?;
        if !Rc::ptr_eq(&self.state, &if_true.state) {
            return Err(BuildError::ContextMismatch);
        }
        self.derive(
            OpCode::Mux,
            if_true.width,
            &[self.addr, if_true.addr, if_false.addr],
            0,
        )
    }

    pub fn duplicate(&self) -> Result<IntHandle, BuildError> {
        self.check_valid()?;
        self.derive(OpCode::Copy, self.width, &[self.addr], 0)
    }
}

/// A planned batch (ciphertext) variable with its level algebra metadata.
pub struct BatchHandle {
    level: u8,
    relinearized: bool,
    element_count: u32,
    addr: u64,
    valid: bool,
    state: Ctx,
}

impl Drop for BatchHandle {
    fn drop(&mut self) {
        self.state.borrow_mut().release(self.addr);
    }
}

impl BatchHandle {
    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn relinearized(&self) -> bool {
        self.relinearized
    }

    pub fn addr(&self) -> u64 {
        self.addr
    }

    pub fn element_count(&self) -> u32 {
        self.element_count
    }

    fn check_ctx(&self, ctx: &BuilderContext) -> Result<(), BuildError> {
        if Rc::ptr_eq(&self.state, &ctx.state) {
            Ok(())
        } else {
            Err(BuildError::ContextMismatch)
        }
    }

    fn check_valid(&self) -> Result<(), BuildError> {
        if self.valid {
            Ok(())
        } else {
            Err(BuildError::NotWritten)
        }
    }

    fn profile(&self) -> LeveledBatchDriver {
        match &self.state.borrow().profile {
            DriverProfile::Batch(d) => d.clone(),
            DriverProfile::BitWire => unreachable!("batch handle under bit-wire profile"),
        }
    }

    pub fn mark_input(&mut self, _party: Party) -> Result<(), BuildError> {
        if self.valid {
            return Err(BuildError::AlreadyMarked);
        }
        self.state.borrow_mut().emit(Instruction::new(
            OpCode::Input,
            self.element_count as u16,
            self.addr,
            &[],
            0,
        ))?;
        self.valid = true;
        Ok(())
    }

    pub fn mark_output(&self) -> Result<(), BuildError> {
        self.check_valid()?;
        self.state.borrow_mut().emit(Instruction::new(
            OpCode::Output,
            self.element_count as u16,
            0,
            &[self.addr],
            0,
        ))
    }

    fn derive(
        &self,
        op: OpCode,
        level: u8,
        relinearized: bool,
        inputs: &[u64],
        immediate: u64,
    ) -> Result<BatchHandle, BuildError> {
        let size = self
            .profile()
            .size_of(level, relinearized)
            .expect("derived metadata in range");
        let mut st = self.state.borrow_mut();
        let addr = st.allocate(size)?;
        st.emit(Instruction::new(
            op,
            self.element_count as u16,
            addr,
            inputs,
            immediate,
        ))?;
        drop(st);
        Ok(BatchHandle {
            level,
            relinearized,
            element_count: self.element_count,
            addr,
            valid: true,
            state: self.state.clone(),
        })
    }

    /// Element-wise addition; operands must agree on level and
    /// relinearization state, both of which the result keeps.
    pub fn add(&self, other: &BatchHandle) -> Result<BatchHandle, BuildError> {
        if !Rc::ptr_eq(&self.state, &other.state) {
            return Err(BuildError::ContextMismatch);
        }
        self.check_valid()?;
        other.check_valid()?;
        if self.level != other.level {
            return Err(BuildError::LevelMismatch {
                left: self.level,
                right: other.level,
            });
        }
        if self.relinearized != other.relinearized {
            return Err(BuildError::RelinearizedMixed);
        }
        self.derive(
            OpCode::BatchAdd,
            self.level,
            self.relinearized,
            &[self.addr, other.addr],
            0,
        )
    }

    /// Element-wise multiplication without relinearization: the result
    /// stays at the operand level but in the larger unrelinearized form.
    pub fn mul_no_relin(&self, other: &BatchHandle) -> Result<BatchHandle, BuildError> {
        if !Rc::ptr_eq(&self.state, &other.state) {
            return Err(BuildError::ContextMismatch);
        }
        self.check_valid()?;
        other.check_valid()?;
        if self.level != other.level {
            return Err(BuildError::LevelMismatch {
                left: self.level,
                right: other.level,
            });
        }
        if self.level == 0 {
            return Err(BuildError::LevelZeroMul);
        }
        if !self.relinearized || !other.relinearized {
            return Err(BuildError::NotRelinearized);
        }
        self.derive(
            OpCode::BatchMulNoRelin,
            self.level,
            false,
            &[self.addr, other.addr],
            0,
        )
    }

    /// Restores the standard ciphertext form and drops one level. Batching
    /// several products behind one relinearization (e.g. `ab + cd`) is the
    /// point of keeping it separate from multiplication.
    pub fn relin_rescale(&self) -> Result<BatchHandle, BuildError> {
        self.check_valid()?;
        if self.relinearized {
            return Err(BuildError::AlreadyRelinearized);
        }
        self.derive(
            OpCode::BatchRelinRescale,
            self.level - 1,
            true,
            &[self.addr],
            0,
        )
    }

    /// Adds a public fixed-point constant to every slot.
    pub fn add_plain(&self, constant: i64) -> Result<BatchHandle, BuildError> {
        self.check_valid()?;
        if !self.relinearized {
            return Err(BuildError::NotRelinearized);
        }
        self.derive(
            OpCode::BatchAddPlain,
            self.level,
            true,
            &[self.addr],
            constant as u64,
        )
    }

    /// Multiplies every slot by a public fixed-point constant; costs one
    /// level like ciphertext multiplication.
    pub fn mul_plain(&self, constant: i64) -> Result<BatchHandle, BuildError> {
        self.check_valid()?;
        if self.level == 0 {
            return Err(BuildError::LevelZeroMul);
        }
        if !self.relinearized {
            return Err(BuildError::NotRelinearized);
        }
        self.derive(
            OpCode::BatchMulPlain,
            self.level - 1,
            true,
            &[self.addr],
            constant as u64,
        )
    }
}

/// An array of `total_len` elements partitioned evenly across workers;
/// local indices map bijectively onto a contiguous global slice.
#[derive(Debug, Clone, Copy)]
pub struct ShardedArray {
    total_len: u64,
    worker_id: u32,
    worker_count: u32,
}

impl ShardedArray {
    pub fn new(total_len: u64, opts: &ProgramOptions) -> Result<ShardedArray, BuildError> {
        if opts.worker_count == 0 || total_len % opts.worker_count as u64 != 0 {
            return Err(BuildError::UnevenShard {
                total: total_len,
                workers: opts.worker_count,
            });
        }
        Ok(ShardedArray {
            total_len,
            worker_id: opts.worker_id,
            worker_count: opts.worker_count,
        })
    }

    pub fn total_len(&self) -> u64 {
        self.total_len
    }

    pub fn shard_len(&self) -> u64 {
        self.total_len / self.worker_count as u64
    }

    pub fn local_start(&self) -> u64 {
        self.shard_len() * self.worker_id as u64
    }

    pub fn global_of(&self, local: u64) -> u64 {
        debug_assert!(local < self.shard_len());
        self.local_start() + local
    }

    pub fn owner_of(&self, global: u64) -> u32 {
        debug_assert!(global < self.total_len);
        (global / self.shard_len()) as u32
    }

    pub fn local_of(&self, global: u64) -> u64 {
        global % self.shard_len()
    }
}

/// Report from one placement run: how many instructions were emitted and
/// what the allocator saw.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PlacementReport {
    pub instructions: u64,
    pub alloc: crate::placement::AllocatorStats,
}

/// Runs a builder thunk against a fresh context, streaming the emitted
/// virtual bytecode into `sink`. Checks the handle-hygiene invariant at the
/// end: every allocation must have been released when the thunk's handles
/// went out of scope.
pub fn run_placement(
    opts: ProgramOptions,
    profile: DriverProfile,
    sink: Box<dyn InstructionSink>,
    thunk: impl FnOnce(&mut BuilderContext) -> Result<(), BuildError>,
) -> Result<PlacementReport, BuildError> {
    let mut ctx = BuilderContext::new(opts, profile, sink);
    thunk(&mut ctx)?;
    let state = ctx.state.borrow();
    if let Some(e) = &state.sticky {
        return Err(e.clone());
    }
    let live = state.alloc.live_allocations();
    if live != 0 {
        return Err(BuildError::Leak { live });
    }
    Ok(PlacementReport {
        instructions: state.emitted,
        alloc: state.alloc.stats(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::VecSink;
    use alloc::vec::Vec;

    fn bit_opts() -> ProgramOptions {
        ProgramOptions::single(0, 12)
    }

    fn collect_bitwire(
        thunk: impl FnOnce(&mut BuilderContext) -> Result<(), BuildError>,
    ) -> (PlacementReport, Vec<Instruction>) {
        let (sink, shared) = VecSink::new();
        let report =
            run_placement(bit_opts(), DriverProfile::BitWire, Box::new(sink), thunk).unwrap();
        let insts = shared.borrow().clone();
        (report, insts)
    }

    #[test]
    fn millionaire_program_shape() {
        let (report, insts) = collect_bitwire(|ctx| {
            let alice = ctx.int_input(32, Party::P0)?;
            let bob = ctx.int_input(32, Party::P1)?;
            let result = alice.ge(&bob)?;
            result.mark_output()
        });
        let ops: Vec<OpCode> = insts.iter().map(|i| i.opcode).collect();
        assert_eq!(
            ops,
            [OpCode::Input, OpCode::Input, OpCode::IntCompareGe, OpCode::Output]
        );
        // 32 + 32 input wires plus the 1-wire comparison result.
        assert_eq!(report.alloc.peak_live_units, 65);
        assert_eq!(report.instructions, 4);
    }

    #[test]
    fn add_allocates_and_emits_once() {
        let (report, insts) = collect_bitwire(|ctx| {
            let a = ctx.int_input(32, Party::P0)?;
            let b = ctx.int_input(32, Party::P0)?;
            let c = a.add(&b)?;
            c.mark_output()
        });
        assert_eq!(insts[2].opcode, OpCode::IntAdd);
        assert_eq!(insts[2].width, 32);
        assert_eq!(insts[2].inputs(), &[insts[0].output, insts[1].output]);
        assert_eq!(report.alloc.peak_live_units, 96);
    }

    #[test]
    fn xor_with_self_is_legal() {
        let (_, insts) = collect_bitwire(|ctx| {
            let a = ctx.int_input(8, Party::P0)?;
            let z = a.bit_xor(&a)?;
            z.mark_output()
        });
        assert_eq!(insts[1].inputs()[0], insts[1].inputs()[1]);
    }

    #[test]
    fn width_mismatch_rejected() {
        let (sink, _) = VecSink::new();
        let err = run_placement(bit_opts(), DriverProfile::BitWire, Box::new(sink), |ctx| {
            let a = ctx.int_input(32, Party::P0)?;
            let b = ctx.int_input(16, Party::P0)?;
            a.add(&b).map(|_| ())
        })
        .unwrap_err();
        assert_eq!(err, BuildError::WidthMismatch { left: 32, right: 16 });

        let (sink, _) = VecSink::new();
        let err = run_placement(bit_opts(), DriverProfile::BitWire, Box::new(sink), |ctx| {
            let a = ctx.int_input(32, Party::P0)?;
            let b = ctx.int_input(8, Party::P0)?;
            a.ge(&b).map(|_| ())
        })
        .unwrap_err();
        assert!(matches!(err, BuildError::WidthMismatch { .. }));
    }

    #[test]
    fn double_mark_input_rejected() {
        let (sink, _) = VecSink::new();
        let err = run_placement(bit_opts(), DriverProfile::BitWire, Box::new(sink), |ctx| {
            let mut a = ctx.int_fresh(8)?;
            a.mark_input(Party::P0)?;
            a.mark_input(Party::P0)
        })
        .unwrap_err();
        assert_eq!(err, BuildError::AlreadyMarked);
    }

    #[test]
    fn reading_unwritten_handle_rejected() {
        let (sink, _) = VecSink::new();
        let err = run_placement(bit_opts(), DriverProfile::BitWire, Box::new(sink), |ctx| {
            let a = ctx.int_fresh(8)?;
            a.mark_output()
        })
        .unwrap_err();
        assert_eq!(err, BuildError::NotWritten);
    }

    #[test]
    fn empty_program_emits_nothing() {
        let (report, insts) = collect_bitwire(|_ctx| Ok(()));
        assert_eq!(report.instructions, 0);
        assert!(insts.is_empty());
    }

    #[test]
    fn self_send_and_bad_peer_rejected() {
        let opts = ProgramOptions {
            worker_id: 0,
            worker_count: 2,
            ..ProgramOptions::single(0, 12)
        };
        let (sink, _) = VecSink::new();
        let err = run_placement(opts.clone(), DriverProfile::BitWire, Box::new(sink), |ctx| {
            let a = ctx.int_input(8, Party::P0)?;
            ctx.post_send_int(&a, 0)
        })
        .unwrap_err();
        assert_eq!(err, BuildError::SelfSend);

        let (sink, _) = VecSink::new();
        let err = run_placement(opts, DriverProfile::BitWire, Box::new(sink), |ctx| {
            let a = ctx.int_input(8, Party::P0)?;
            ctx.post_send_int(&a, 2)
        })
        .unwrap_err();
        assert_eq!(
            err,
            BuildError::PeerOutOfRange { peer: 2, worker_count: 2 }
        );
    }

    #[test]
    fn same_build_twice_is_identical() {
        let build = |ctx: &mut BuilderContext| {
            let a = ctx.int_input(16, Party::P0)?;
            let b = ctx.int_input(16, Party::P1)?;
            let s = a.add(&b)?;
            let d = s.sub(&a)?;
            d.mark_output()
        };
        let (_, first) = collect_bitwire(build);
        let (_, second) = collect_bitwire(build);
        assert_eq!(first, second);
    }

    fn batch_profile() -> DriverProfile {
        DriverProfile::Batch(LeveledBatchDriver::new(2, 4, 1024, 1536))
    }

    fn batch_opts() -> ProgramOptions {
        ProgramOptions::single(0, 13) // 8 KiB pages in byte units
    }

    #[test]
    fn deferred_relinearization_shape() {
        let (sink, shared) = VecSink::new();
        run_placement(batch_opts(), batch_profile(), Box::new(sink), |ctx| {
            let a = ctx.batch_input(Party::P0)?;
            let b = ctx.batch_input(Party::P0)?;
            let c = ctx.batch_input(Party::P0)?;
            let d = ctx.batch_input(Party::P0)?;
            let ab = a.mul_no_relin(&b)?;
            assert!(!ab.relinearized() && ab.level() == 2);
            let cd = c.mul_no_relin(&d)?;
            let sum = ab.add(&cd)?;
            assert!(!sum.relinearized());
            let out = sum.relin_rescale()?;
            assert!(out.relinearized() && out.level() == 1);
            out.mark_output()
        })
        .unwrap();
        let relins = shared
            .borrow()
            .iter()
            .filter(|i| i.opcode == OpCode::BatchRelinRescale)
            .count();
        assert_eq!(relins, 1, "one relinearization covers ab + cd");
    }

    #[test]
    fn batch_level_errors() {
        let (sink, _) = VecSink::new();
        let err = run_placement(batch_opts(), batch_profile(), Box::new(sink), |ctx| {
            let a = ctx.batch_input(Party::P0)?;
            let low = a.mul_plain(crate::drivers::SCALE)?.mul_plain(crate::drivers::SCALE)?;
            assert_eq!(low.level(), 0);
            low.mul_no_relin(&low).map(|_| ())
        })
        .unwrap_err();
        assert_eq!(err, BuildError::LevelZeroMul);

        let (sink, _) = VecSink::new();
        let err = run_placement(batch_opts(), batch_profile(), Box::new(sink), |ctx| {
            let a = ctx.batch_input(Party::P0)?;
            let b = ctx.batch_input(Party::P0)?;
            let lower = b.mul_plain(crate::drivers::SCALE)?;
            a.add(&lower).map(|_| ())
        })
        .unwrap_err();
        assert_eq!(err, BuildError::LevelMismatch { left: 2, right: 1 });
    }

    #[test]
    fn mixing_dialects_rejected() {
        let (sink, _) = VecSink::new();
        let err = run_placement(batch_opts(), batch_profile(), Box::new(sink), |ctx| {
            ctx.int_fresh(8).map(|_| ())
        })
        .unwrap_err();
        assert!(matches!(err, BuildError::WrongDialect { .. }));
    }

    #[test]
    fn sharded_array_bounds() {
        let opts = ProgramOptions {
            worker_id: 1,
            worker_count: 4,
            ..ProgramOptions::single(16, 12)
        };
        let arr = ShardedArray::new(16, &opts).unwrap();
        assert_eq!(arr.shard_len(), 4);
        assert_eq!(arr.local_start(), 4);
        assert_eq!(arr.global_of(2), 6);
        assert_eq!(arr.owner_of(6), 1);
        assert_eq!(arr.local_of(6), 2);
        assert!(ShardedArray::new(10, &opts).is_err());
    }
}
