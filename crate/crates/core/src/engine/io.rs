//! Record streams and model checkpoints.
//!
//! Checkpoint layout: 4-byte magic `DFAM`, `m` as u32, `d` as u64, then the
//! `d x m` model coordinates as f64, client-major, all little-endian.

use std::io::{self, Read, Write};

use super::RoundRecord;
use crate::vector::ParamVector;

pub const CSV_HEADER: &str = "t,f_avg,grad_norm_sq,consensus,bits_total,wall_ms";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DFAM";

impl RoundRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.t, self.f_avg, self.grad_norm_sq, self.consensus, self.bits_total, self.wall_ms
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(format!("expected 6 fields, got {}: {line:?}", f.len()));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("field {i} ({:?}): {e}", f[i]));
        let int = |i: usize| f[i].parse::<u64>().map_err(|e| format!("field {i} ({:?}): {e}", f[i]));
        Ok(RoundRecord {
            t: int(0)?,
            f_avg: num(1)?,
            grad_norm_sq: num(2)?,
            consensus: num(3)?,
            bits_total: int(4)?,
            wall_ms: num(5)?,
        })
    }
}

pub fn write_records_csv<W: Write>(mut w: W, records: &[RoundRecord]) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.to_csv_row())?;
    }
    Ok(())
}

pub fn write_records_jsonl<W: Write>(mut w: W, records: &[RoundRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, models: &[ParamVector]) -> io::Result<()> {
    let d = models.first().map_or(0, |x| x.dim());
    if models.iter().any(|x| x.dim() != d) {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "models differ in dimension"));
    }
    let m = u32::try_from(models.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "too many clients"))?;
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&m.to_le_bytes())?;
    w.write_all(&(d as u64).to_le_bytes())?;
    for x in models {
        for v in x.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> io::Result<Vec<ParamVector>> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if header[..4] != CHECKPOINT_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad checkpoint magic"));
    }
    let m = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let mut buf = [0u8; 8];
    let mut models = Vec::with_capacity(m);
    for _ in 0..m {
        let mut x = Vec::with_capacity(d);
        for _ in 0..d {
            r.read_exact(&mut buf)?;
            x.push(f64::from_le_bytes(buf));
        }
        models.push(ParamVector::from_vec(x));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("{} trailing bytes", rest.len())));
    }
    Ok(models)
}
