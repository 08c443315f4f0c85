//! The disassembler: prints a program file as a human-readable listing,
//! one line per instruction, header summary first.

use std::io::Write;
use std::path::Path;

use anyhow::Result;
use memprog_core::bytecode::{format_header, format_instruction};

use crate::files::ProgramReader;

pub fn disassemble(path: &Path, limit: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let mut reader = ProgramReader::open(path)?;
    let header = *reader.header();
    let mut text = String::new();
    format_header(&mut text, &header)?;
    out.write_all(text.as_bytes())?;
    let mut index = 0u64;
    while let Some(inst) = reader.next_instruction()? {
        if let Some(limit) = limit {
            if index >= limit {
                writeln!(out, "... ({} more records)", header.instruction_count - index)?;
                break;
            }
        }
        let mut line = String::new();
        format_instruction(&mut line, index, &inst, header.dialect, header.page_shift)?;
        writeln!(out, "{line}")?;
        index += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use memprog_core::bytecode::{
        AddressUnit, Dialect, DriverId, Instruction, OpCode, ProgramHeader,
    };

    #[test]
    fn listing_shows_header_and_pinned_formats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.mpg");
        let header = ProgramHeader {
            dialect: Dialect::Virtual,
            address_unit: AddressUnit::Wire,
            driver: DriverId::BitWire,
            page_shift: 12,
            instruction_count: 0,
            frame_count: 0,
            prefetch_frames: 0,
            storage_frame_count: 0,
        };
        let mut w = crate::files::ProgramWriter::create(&path, header).unwrap();
        w.emit_instruction(&Instruction::new(OpCode::IntAdd, 32, 4096, &[0, 32], 0))
            .unwrap();
        w.finish(|_| {}).unwrap();
        let mut out = Vec::new();
        disassemble(&path, None, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("; program dialect=virtual unit=wire driver=bitwire"));
        assert!(text.contains("00000000 IADD w32 v1:0 <- v0:0, v0:32"));
    }
}
