//! On-disk formats: the parameter checkpoint container, the raw tensor
//! dump, the filter-bank debug dump, and the CSV reports.
//!
//! All binary layouts are little-endian and fully specified here because
//! cross-run byte identity is part of the reproducibility contract:
//!
//! * checkpoint: magic `EHYBCKPT`, u32 version, u32 entry count, then per
//!   entry a u16 name length, the name bytes, a u8 dtype tag (1 = f64),
//!   four u32 shape fields and the raw values;
//! * tensor dump: magic `EHYBTNSR`, u32 version, four u32 shape fields,
//!   then 32-bit float values;
//! * filter dump: one file per filter with a 16-byte header (magic
//!   `SCATFLT1`, u32 rows, u32 cols) and 64-bit float taps, plus a text
//!   manifest mapping `(j, theta, alpha)` to file names.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};
use crate::wavelets::WaveletFilterBank;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EHYBCKPT";
pub const TENSOR_MAGIC: &[u8; 8] = b"EHYBTNSR";
pub const FILTER_MAGIC: &[u8; 8] = b"SCATFLT1";
pub const FORMAT_VERSION: u32 = 1;

/// Dtype tag for 64-bit floats, the only width the store uses.
const DTYPE_F64: u8 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(Error::Data(format!(
                "{}: truncated at byte {} (need {n} more bytes of {})",
                self.what,
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

// ---------------------------------------------------------------------------
// Checkpoints.

/// Serializes every store entry (trainable weights and running statistics
/// alike) in name order, so identical stores give identical bytes.
pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let entries: Vec<_> = store.entries().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, entries.len() as u32);
    for (name, tensor, _) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        let s = tensor.shape();
        for dim in [s.n, s.c, s.h, s.w] {
            push_u32(&mut out, dim as u32);
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses checkpoint bytes into `(name, tensor)` pairs in stored order.
pub fn decode_checkpoint(bytes: &[u8], what: &str) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, what };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!("{what}: not a checkpoint (bad magic)")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{what}: unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Data(format!("{what}: entry name is not UTF-8")))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Data(format!(
                "{what}: entry {name} has unsupported dtype tag {dtype}"
            )));
        }
        let shape = Shape::new(
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        );
        let raw = r.take(shape.count() * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        entries.push((name, Tensor::from_vec(shape, values)?));
    }
    Ok(entries)
}

pub fn write_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

/// Restores checkpoint entries into an existing store. Every entry must
/// already be registered with a matching shape.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    for (name, tensor) in read_checkpoint(path)? {
        if !store.contains(&name) {
            return Err(Error::Data(format!(
                "{}: checkpoint entry {name} does not exist in this model",
                path.display()
            )));
        }
        store.set(&name, tensor)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Raw tensor dumps.

pub fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + tensor.data().len() * 4);
    out.extend_from_slice(TENSOR_MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    let s = tensor.shape();
    for dim in [s.n, s.c, s.h, s.w] {
        push_u32(&mut out, dim as u32);
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], what: &str) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0, what };
    if r.take(8)? != TENSOR_MAGIC {
        return Err(Error::Data(format!("{what}: not a tensor dump (bad magic)")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{what}: unsupported tensor version {version}"
        )));
    }
    let shape = Shape::new(
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
    );
    let raw = r.take(shape.count() * 4)?;
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect();
    Tensor::from_vec(shape, values)
}

pub fn write_tensor(tensor: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_tensor(tensor))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    decode_tensor(&bytes, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Filter-bank debug dump.

fn encode_filter(taps: &[f64], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + taps.len() * 8);
    out.extend_from_slice(FILTER_MAGIC);
    push_u32(&mut out, rows as u32);
    push_u32(&mut out, cols as u32);
    for &v in taps {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes every real phase-shifted wavelet and the low-pass into `dir`,
/// one file per filter, plus `manifest.txt` mapping indices to files.
pub fn write_filter_dump(bank: &WaveletFilterBank, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for j in 0..bank.j_count() {
        for l in 0..bank.angles() {
            for k in 0..bank.phases() {
                let filter = bank.psi_real(j, l, k);
                let side = filter.support();
                let file = format!("psi_j{j}_t{l}_a{k}.bin");
                fs::write(dir.join(&file), encode_filter(filter.data(), side, side))?;
                let _ = writeln!(manifest, "j={j} theta={l} alpha={k} -> {file}");
            }
        }
    }
    let phi = bank.phi();
    let side = phi.support();
    fs::write(dir.join("phi.bin"), encode_filter(phi.data(), side, side))?;
    manifest.push_str("phi -> phi.bin\n");
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV reports. Column names are part of the format.

pub fn write_per_class_ap_csv(path: &Path, per_class: &[(usize, f64)]) -> Result<()> {
    let mut out = String::from("class_id,ap\n");
    for (class, ap) in per_class {
        let _ = writeln!(out, "{class},{ap}");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut out = String::from("epoch,train_loss,lr,seconds\n");
    for (epoch, ((loss, lr), secs)) in report
        .train_loss
        .iter()
        .zip(&report.lr_trace)
        .zip(&report.seconds)
        .enumerate()
    {
        let _ = writeln!(out, "{epoch},{loss},{lr},{secs}");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_final_csv(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut out = String::from("arm,map\n");
    for (arm, map) in rows {
        let _ = writeln!(out, "{arm},{map}");
    }
    fs::write(path, out)?;
    Ok(())
}
