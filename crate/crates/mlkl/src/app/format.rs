//! On-disk formats for frame stacks.
//!
//! The native MLAF container is a dependency-free little-endian layout:
//!
//! ```text
//! magic "MLAF" | u16 version = 1 | u16 flags (bit 0: masks present)
//! u32 rows | u32 cols | u32 bands | u32 frame count
//! per frame:
//!   i64 day label
//!   rows*cols*bands f64 values, row-major with bands innermost
//!   ceil(N/8) mask bytes when flagged (bit i of the stream = cell i,
//!   LSB first, 1 = valid)
//! ```
//!
//! A CSV import/export path (one file per frame plus a JSON manifest) covers
//! interoperability; values are printed with 17 significant digits so the
//! round trip through text is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Frame, FrameStack};

const MAGIC: &[u8; 4] = b"MLAF";
const VERSION: u16 = 1;
const FLAG_MASKS: u16 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at byte {offset}: not an MLAF file")]
    BadMagic { offset: u64 },
    #[error("unsupported version {version} at byte {offset}")]
    UnsupportedVersion { version: u16, offset: u64 },
    #[error("invalid {what} at byte {offset}: {detail}")]
    BadField {
        what: &'static str,
        offset: u64,
        detail: String,
    },
    #[error("file truncated at byte {offset} while reading {section}")]
    Truncated { section: String, offset: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }

    fn read_exact_section(&mut self, buf: &mut [u8], section: &str) -> Result<(), FormatError> {
        let offset = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                FormatError::Truncated {
                    section: section.to_string(),
                    offset,
                }
            } else {
                FormatError::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u16(&mut self, section: &str) -> Result<u16, FormatError> {
        let mut b = [0u8; 2];
        self.read_exact_section(&mut b, section)?;
        Ok(u16::from_le_bytes(b))
    }

    fn read_u32(&mut self, section: &str) -> Result<u32, FormatError> {
        let mut b = [0u8; 4];
        self.read_exact_section(&mut b, section)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_i64(&mut self, section: &str) -> Result<i64, FormatError> {
        let mut b = [0u8; 8];
        self.read_exact_section(&mut b, section)?;
        Ok(i64::from_le_bytes(b))
    }
}

/// Write a stack in the MLAF container.
pub fn write_frame_stack(stack: &FrameStack, path: &Path) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    let has_masks = stack.frames().iter().any(|f| f.mask.is_some());
    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_u16::<LittleEndian>(if has_masks { FLAG_MASKS } else { 0 })?;
    w.write_u32::<LittleEndian>(stack.rows() as u32)?;
    w.write_u32::<LittleEndian>(stack.cols() as u32)?;
    w.write_u32::<LittleEndian>(stack.band_count() as u32)?;
    w.write_u32::<LittleEndian>(stack.frames().len() as u32)?;
    let n = stack.rows() * stack.cols();
    for frame in stack.frames() {
        w.write_i64::<LittleEndian>(frame.day)?;
        for r in 0..n {
            for h in 0..stack.band_count() {
                w.write_f64::<LittleEndian>(frame.values[(r, h)])?;
            }
        }
        if has_masks {
            let mut bytes = vec![0u8; n.div_ceil(8)];
            match &frame.mask {
                Some(mask) => {
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            bytes[i / 8] |= 1 << (i % 8);
                        }
                    }
                }
                None => bytes.fill(0xFF),
            }
            // clear padding bits past N
            if !n.is_multiple_of(8) {
                let last = bytes.len() - 1;
                bytes[last] &= (1u8 << (n % 8)) - 1;
            }
            w.write_all(&bytes)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read an MLAF stack, validating magic, version, dimensions and day order.
pub fn read_frame_stack(path: &Path) -> Result<FrameStack, FormatError> {
    let mut r = CountingReader::new(BufReader::new(File::open(path)?));
    let mut magic = [0u8; 4];
    r.read_exact_section(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(FormatError::BadMagic { offset: 0 });
    }
    let version_offset = r.offset;
    let version = r.read_u16("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            version,
            offset: version_offset,
        });
    }
    let flags = r.read_u16("flags")?;
    let dims_offset = r.offset;
    let rows = r.read_u32("rows")? as usize;
    let cols = r.read_u32("cols")? as usize;
    let bands = r.read_u32("bands")? as usize;
    let count = r.read_u32("frame count")? as usize;
    if rows == 0 || cols == 0 || bands == 0 {
        return Err(FormatError::BadField {
            what: "dimensions",
            offset: dims_offset,
            detail: format!("{rows}x{cols}x{bands}"),
        });
    }
    let n = rows * cols;
    let has_masks = flags & FLAG_MASKS != 0;

    let mut frames = Vec::with_capacity(count);
    let mut last_day = None;
    for idx in 0..count {
        let day_offset = r.offset;
        let day = r.read_i64(&format!("frame {idx} day"))?;
        if let Some(prev) = last_day {
            if day <= prev {
                return Err(FormatError::BadField {
                    what: "day label",
                    offset: day_offset,
                    detail: format!("day {day} after {prev}: labels must strictly increase"),
                });
            }
        }
        last_day = Some(day);
        let mut raw = vec![0u8; n * bands * 8];
        r.read_exact_section(&mut raw, &format!("frame {idx} values"))?;
        let mut values = DMatrix::zeros(n, bands);
        for c in 0..n {
            for h in 0..bands {
                let at = (c * bands + h) * 8;
                values[(c, h)] = f64::from_le_bytes(raw[at..at + 8].try_into().expect("8 bytes"));
            }
        }
        let mask = if has_masks {
            let mut bytes = vec![0u8; n.div_ceil(8)];
            r.read_exact_section(&mut bytes, &format!("frame {idx} mask"))?;
            Some((0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect())
        } else {
            None
        };
        frames.push(Frame { day, values, mask });
    }
    FrameStack::new(rows, cols, bands, frames).map_err(|e| FormatError::Manifest(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    rows: usize,
    cols: usize,
    bands: usize,
    frames: Vec<ManifestFrame>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFrame {
    day: i64,
    file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask_file: Option<String>,
}

/// Export a stack as CSV files plus a `manifest.json` in `dir`.
pub fn write_frame_stack_csv(stack: &FrameStack, dir: &Path) -> Result<(), FormatError> {
    std::fs::create_dir_all(dir)?;
    let mut frames = Vec::new();
    for frame in stack.frames() {
        let file = format!("frame_{}.csv", frame.day);
        let mut w = BufWriter::new(File::create(dir.join(&file))?);
        writeln!(w, "row,col,band,value")?;
        for cell in 0..stack.rows() * stack.cols() {
            let (row, col) = (cell / stack.cols(), cell % stack.cols());
            for h in 0..stack.band_count() {
                writeln!(w, "{row},{col},{h},{:.16e}", frame.values[(cell, h)])?;
            }
        }
        w.flush()?;
        let mask_file = match &frame.mask {
            Some(mask) => {
                let name = format!("mask_{}.csv", frame.day);
                let mut w = BufWriter::new(File::create(dir.join(&name))?);
                writeln!(w, "row,col,valid")?;
                for (cell, &m) in mask.iter().enumerate() {
                    let (row, col) = (cell / stack.cols(), cell % stack.cols());
                    writeln!(w, "{row},{col},{}", u8::from(m))?;
                }
                w.flush()?;
                Some(name)
            }
            None => None,
        };
        frames.push(ManifestFrame {
            day: frame.day,
            file,
            mask_file,
        });
    }
    let manifest = Manifest {
        rows: stack.rows(),
        cols: stack.cols(),
        bands: stack.band_count(),
        frames,
    };
    let mut w = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest)
        .map_err(|e| FormatError::Manifest(e.to_string()))?;
    w.flush()?;
    Ok(())
}

/// Import a stack from a CSV manifest written by [`write_frame_stack_csv`].
pub fn read_frame_stack_csv(manifest_path: &Path) -> Result<FrameStack, FormatError> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let n = manifest.rows * manifest.cols;
    let mut frames = Vec::new();
    for mf in &manifest.frames {
        let mut values = DMatrix::zeros(n, manifest.bands);
        let body = std::fs::read_to_string(dir.join(&mf.file))?;
        for (lineno, line) in body.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(FormatError::Manifest(format!(
                    "{}:{}: expected row,col,band,value",
                    mf.file,
                    lineno + 1
                )));
            }
            let parse = |s: &str, what: &str| -> Result<usize, FormatError> {
                s.trim().parse().map_err(|_| {
                    FormatError::Manifest(format!("{}:{}: bad {what}", mf.file, lineno + 1))
                })
            };
            let row = parse(parts[0], "row")?;
            let col = parse(parts[1], "col")?;
            let band = parse(parts[2], "band")?;
            if row >= manifest.rows || col >= manifest.cols || band >= manifest.bands {
                return Err(FormatError::Manifest(format!(
                    "{}:{}: index out of range",
                    mf.file,
                    lineno + 1
                )));
            }
            let value: f64 = parts[3].trim().parse().map_err(|_| {
                FormatError::Manifest(format!("{}:{}: bad value", mf.file, lineno + 1))
            })?;
            values[(row * manifest.cols + col, band)] = value;
        }
        let mask = match &mf.mask_file {
            Some(name) => {
                let mut mask = vec![false; n];
                let body = std::fs::read_to_string(dir.join(name))?;
                for line in body.lines().skip(1) {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let parts: Vec<&str> = line.split(',').collect();
                    if parts.len() != 3 {
                        return Err(FormatError::Manifest(format!(
                            "{name}: expected row,col,valid"
                        )));
                    }
                    let row: usize = parts[0]
                        .trim()
                        .parse()
                        .map_err(|_| FormatError::Manifest(format!("{name}: bad row")))?;
                    let col: usize = parts[1]
                        .trim()
                        .parse()
                        .map_err(|_| FormatError::Manifest(format!("{name}: bad col")))?;
                    mask[row * manifest.cols + col] = parts[2].trim() == "1";
                }
                Some(mask)
            }
            None => None,
        };
        frames.push(Frame {
            day: mf.day,
            values,
            mask,
        });
    }
    FrameStack::new(manifest.rows, manifest.cols, manifest.bands, frames)
        .map_err(|e| FormatError::Manifest(e.to_string()))
}
