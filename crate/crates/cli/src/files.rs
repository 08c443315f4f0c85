//! Program files and planner intermediates.
//!
//! A program file is a fixed 48-byte header followed by fixed 40-byte
//! instruction records, so record `k` sits at a computable offset and the
//! planner's passes can stream the file forwards or backwards with a
//! bounded buffer. Writers stream: the header is patched in place once
//! the record count (and, for the planner, frame counts) are known.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use memprog_core::bytecode::{
    BytecodeError, Dialect, Instruction, InstructionSink, ProgramHeader, HEADER_LEN, RECORD_LEN,
};

/// Streaming program writer. Writes a placeholder header immediately and
/// patches the real one in [`ProgramWriter::finish`].
pub struct ProgramWriter {
    path: PathBuf,
    file: BufWriter<File>,
    header: ProgramHeader,
    written: u64,
}

impl ProgramWriter {
    pub fn create(path: &Path, header: ProgramHeader) -> Result<ProgramWriter> {
        let file = File::create(path)
            .with_context(|| format!("creating program file {}", path.display()))?;
        let mut w = BufWriter::new(file);
        w.write_all(&header.encode())?;
        Ok(ProgramWriter {
            path: path.to_path_buf(),
            file: w,
            header,
            written: 0,
        })
    }

    pub fn emit_instruction(&mut self, inst: &Instruction) -> Result<()> {
        let rec = inst
            .encode(self.header.dialect)
            .with_context(|| format!("encoding record {} for {}", self.written, self.path.display()))?;
        self.file.write_all(&rec)?;
        self.written += 1;
        Ok(())
    }

    /// Patches the header with the final counts and closes the file.
    pub fn finish(mut self, patch: impl FnOnce(&mut ProgramHeader)) -> Result<ProgramHeader> {
        self.header.instruction_count = self.written;
        patch(&mut self.header);
        self.file.seek(SeekFrom::Start(0))?;
        self.file.write_all(&self.header.encode())?;
        self.file.flush()?;
        Ok(self.header)
    }

    pub fn written(&self) -> u64 {
        self.written
    }
}

/// Adapter so core planner stages can stream into a file through the
/// `InstructionSink` trait. IO errors are captured and re-surfaced by
/// [`SinkAdapter::into_inner`].
pub struct SinkAdapter {
    writer: Option<ProgramWriter>,
    error: Option<io::Error>,
}

impl SinkAdapter {
    pub fn new(writer: ProgramWriter) -> SinkAdapter {
        SinkAdapter {
            writer: Some(writer),
            error: None,
        }
    }

    pub fn into_inner(self) -> Result<ProgramWriter> {
        if let Some(e) = self.error {
            return Err(e.into());
        }
        Ok(self.writer.unwrap())
    }
}

impl InstructionSink for SinkAdapter {
    fn emit(&mut self, inst: &Instruction) -> Result<(), BytecodeError> {
        match self.writer.as_mut().unwrap().emit_instruction(inst) {
            Ok(()) => Ok(()),
            Err(e) => {
                let msg = format!("{e}");
                self.error = Some(io::Error::other(e.to_string()));
                Err(BytecodeError::Sink(msg))
            }
        }
    }
}

/// Streaming forward reader; peak memory is one IO buffer regardless of
/// program length.
pub struct ProgramReader {
    file: BufReader<File>,
    header: ProgramHeader,
    read: u64,
    path: PathBuf,
}

impl ProgramReader {
    pub fn open(path: &Path) -> Result<ProgramReader> {
        let file =
            File::open(path).with_context(|| format!("opening program file {}", path.display()))?;
        let mut file = BufReader::new(file);
        let mut hdr = [0u8; HEADER_LEN];
        file.read_exact(&mut hdr)
            .with_context(|| format!("reading header of {}", path.display()))?;
        let header = ProgramHeader::decode(&hdr)
            .with_context(|| format!("decoding header of {}", path.display()))?;
        Ok(ProgramReader {
            file,
            header,
            read: 0,
            path: path.to_path_buf(),
        })
    }

    pub fn header(&self) -> &ProgramHeader {
        &self.header
    }

    pub fn next_instruction(&mut self) -> Result<Option<Instruction>> {
        if self.read == self.header.instruction_count {
            return Ok(None);
        }
        let mut rec = [0u8; RECORD_LEN];
        match self.file.read_exact(&mut rec) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                bail!(
                    "{}: {}",
                    self.path.display(),
                    BytecodeError::Truncated {
                        expected: self.header.instruction_count,
                        got: self.read,
                    }
                );
            }
            Err(e) => return Err(e).context("reading instruction record"),
        }
        let inst = Instruction::decode(&rec, self.header.dialect)
            .with_context(|| format!("{}: record {}", self.path.display(), self.read))?;
        if self.header.dialect == Dialect::Physical {
            let total = self.header.total_frames();
            for (_, addr, _) in memprog_core::replacement::operand_slots(&inst) {
                let frame = addr >> self.header.page_shift;
                if frame >= total {
                    bail!(
                        "{}: record {}: {}",
                        self.path.display(),
                        self.read,
                        BytecodeError::FrameOutOfRange { frame, total }
                    );
                }
            }
        }
        self.read += 1;
        Ok(Some(inst))
    }

    /// Iterator adapter mapping into any error type built from a string.
    pub fn iter_mapped<E>(
        mut self,
        wrap: impl Fn(String) -> E + 'static,
    ) -> impl Iterator<Item = Result<Instruction, E>> {
        std::iter::from_fn(move || match self.next_instruction() {
            Ok(Some(inst)) => Some(Ok(inst)),
            Ok(None) => None,
            Err(e) => Some(Err(wrap(format!("{e:#}")))),
        })
    }
}

/// Reads fixed-width records of any length in reverse file order with a
/// bounded chunk buffer. The replacement stage walks the virtual program
/// backwards with this, and forwards over the (backward-written)
/// annotation file.
pub struct ReverseRecordReader {
    file: File,
    record_len: usize,
    /// Records remaining, counting down.
    remaining: u64,
    base_offset: u64,
    chunk: Vec<u8>,
    /// Records currently buffered and not yet handed out.
    buffered: usize,
}

const REVERSE_CHUNK_RECORDS: usize = 4096;

impl ReverseRecordReader {
    pub fn open(path: &Path, base_offset: u64, record_len: usize, count: u64) -> Result<Self> {
        let file = File::open(path)
            .with_context(|| format!("opening {} for reverse read", path.display()))?;
        Ok(ReverseRecordReader {
            file,
            record_len,
            remaining: count,
            base_offset,
            chunk: Vec::new(),
            buffered: 0,
        })
    }

    /// Next record, moving from the last toward the first.
    pub fn next_back(&mut self) -> Result<Option<Vec<u8>>> {
        if self.remaining == 0 {
            return Ok(None);
        }
        if self.buffered == 0 {
            let take = (self.remaining as usize).min(REVERSE_CHUNK_RECORDS);
            let start = self.base_offset + (self.remaining - take as u64) * self.record_len as u64;
            self.chunk.resize(take * self.record_len, 0);
            self.file.seek(SeekFrom::Start(start))?;
            self.file.read_exact(&mut self.chunk)?;
            self.buffered = take;
        }
        self.buffered -= 1;
        self.remaining -= 1;
        let at = self.buffered * self.record_len;
        Ok(Some(self.chunk[at..at + self.record_len].to_vec()))
    }
}

/// Next-use annotations, one 32-byte record per instruction:
/// `[output, in0, in1, in2]` as little-endian u64s. Written during the
/// backward pass (so the file holds them in reverse instruction order)
/// and read back with the reverse reader, which restores forward order.
pub const ANNOTATION_LEN: usize = 32;

pub fn encode_annotation(ann: &[u64; 4]) -> [u8; ANNOTATION_LEN] {
    let mut rec = [0u8; ANNOTATION_LEN];
    for (i, v) in ann.iter().enumerate() {
        rec[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
    }
    rec
}

pub fn decode_annotation(rec: &[u8]) -> [u64; 4] {
    let mut ann = [0u64; 4];
    for (i, slot) in ann.iter_mut().enumerate() {
        *slot = u64::from_le_bytes(rec[i * 8..(i + 1) * 8].try_into().unwrap());
    }
    ann
}

#[cfg(test)]
mod tests {
    use super::*;
    use memprog_core::bytecode::{AddressUnit, DriverId, OpCode};

    fn header(n: u64) -> ProgramHeader {
        ProgramHeader {
            dialect: Dialect::Virtual,
            address_unit: AddressUnit::Wire,
            driver: DriverId::BitWire,
            page_shift: 12,
            instruction_count: n,
            frame_count: 0,
            prefetch_frames: 0,
            storage_frame_count: 0,
        }
    }

    fn sample(i: u64) -> Instruction {
        Instruction::new(OpCode::Input, 8, i * 8, &[], 0)
    }

    #[test]
    fn write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.mpg");
        let mut w = ProgramWriter::create(&path, header(0)).unwrap();
        for i in 0..100 {
            w.emit_instruction(&sample(i)).unwrap();
        }
        let h = w.finish(|_| {}).unwrap();
        assert_eq!(h.instruction_count, 100);

        let mut r = ProgramReader::open(&path).unwrap();
        assert_eq!(r.header().instruction_count, 100);
        for i in 0..100 {
            assert_eq!(r.next_instruction().unwrap().unwrap(), sample(i));
        }
        assert!(r.next_instruction().unwrap().is_none());
    }

    #[test]
    fn empty_program_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.mpg");
        let w = ProgramWriter::create(&path, header(0)).unwrap();
        w.finish(|_| {}).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), HEADER_LEN as u64);
        let mut r = ProgramReader::open(&path).unwrap();
        assert!(r.next_instruction().unwrap().is_none());
    }

    #[test]
    fn truncated_program_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mpg");
        let mut w = ProgramWriter::create(&path, header(0)).unwrap();
        for i in 0..4 {
            w.emit_instruction(&sample(i)).unwrap();
        }
        w.finish(|h| h.instruction_count = 5).unwrap();
        let mut r = ProgramReader::open(&path).unwrap();
        for _ in 0..4 {
            r.next_instruction().unwrap();
        }
        let err = r.next_instruction().unwrap_err();
        assert!(format!("{err}").contains("truncated"), "{err}");
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mpg");
        std::fs::write(&path, b"NOPE".repeat(12)).unwrap();
        let err = match ProgramReader::open(&path) {
            Err(e) => e,
            Ok(_) => panic!("bad magic accepted"),
        };
        assert!(format!("{err:#}").contains("bad magic"), "{err:#}");
    }

    #[test]
    fn reverse_reader_yields_reverse_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.tmp");
        let mut f = File::create(&path).unwrap();
        for i in 0..10u64 {
            f.write_all(&encode_annotation(&[i, i + 1, i + 2, i + 3]))
                .unwrap();
        }
        drop(f);
        let mut r = ReverseRecordReader::open(&path, 0, ANNOTATION_LEN, 10).unwrap();
        for i in (0..10u64).rev() {
            let rec = r.next_back().unwrap().unwrap();
            assert_eq!(decode_annotation(&rec), [i, i + 1, i + 2, i + 3]);
        }
        assert!(r.next_back().unwrap().is_none());
    }

    #[test]
    fn identical_writes_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for name in ["a.mpg", "b.mpg"] {
            let path = dir.path().join(name);
            let mut w = ProgramWriter::create(&path, header(0)).unwrap();
            for i in 0..17 {
                w.emit_instruction(&sample(i)).unwrap();
            }
            w.finish(|_| {}).unwrap();
            bytes.push(std::fs::read(&path).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
    }
}
