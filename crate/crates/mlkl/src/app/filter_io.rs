//! Serialization of fitted filters.
//!
//! The file stores the expensive estimation products (mean, spectrum,
//! eigenfields) next to the configuration and grid dimensions; the kd-tree
//! and multilevel basis are rebuilt deterministically on load, so two loads
//! of the same file always reproduce the same filter. A SHA-256 over the
//! payload guards against corruption, and detection refuses stacks whose
//! dimensions do not match the embedded ones.
//!
//! Layout: magic "MLKF" | u16 version = 1 | 32-byte SHA-256 of the rest |
//! u32 JSON header length | JSON header | f64 arrays (little-endian):
//! lambdas, tail_sum, tail_root_sum, mean, eigenfields.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::format::FormatError;
use super::AppError;
use crate::config::FilterConfig;
use crate::detect::AnomalyFilter;
use crate::geometry::{build_grid_domain, PiecewiseField};
use crate::spectral::KLBasis;

const MAGIC: &[u8; 4] = b"MLKF";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterHeader {
    pub config: FilterConfig,
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub cell_measure: f64,
    pub truncation: usize,
    /// Number of snapshots the filter was trained on.
    pub training_frames: usize,
}

/// Write a fitted filter with its header.
pub fn write_filter(
    filter: &AnomalyFilter,
    header: &FilterHeader,
    path: &Path,
) -> Result<(), AppError> {
    let kl = filter.kl();
    let mut payload = Vec::new();
    let header_json = serde_json::to_vec(header)?;
    payload.write_u32::<LittleEndian>(header_json.len() as u32)?;
    payload.extend_from_slice(&header_json);
    for &l in kl.lambdas() {
        payload.write_f64::<LittleEndian>(l)?;
    }
    payload.write_f64::<LittleEndian>(kl.tail_sum())?;
    payload.write_f64::<LittleEndian>(kl.tail_root_sum())?;
    let write_field = |payload: &mut Vec<u8>, f: &PiecewiseField| -> Result<(), AppError> {
        for r in 0..f.values().nrows() {
            for c in 0..f.values().ncols() {
                payload.write_f64::<LittleEndian>(f.values()[(r, c)])?;
            }
        }
        Ok(())
    };
    write_field(&mut payload, kl.mean())?;
    for phi in kl.eigenfields() {
        write_field(&mut payload, phi)?;
    }

    let hash = Sha256::digest(&payload);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_all(&hash)?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

/// Load a filter file: verify magic, version and content hash, then rebuild
/// the tree and multilevel basis from the stored KL estimate.
pub fn read_filter(path: &Path) -> Result<(AnomalyFilter, FilterHeader), AppError> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 4];
    read_section(&mut file, &mut magic, "magic", 0)?;
    if &magic != MAGIC {
        return Err(FormatError::BadMagic { offset: 0 }.into());
    }
    let mut vbytes = [0u8; 2];
    read_section(&mut file, &mut vbytes, "version", 4)?;
    let version = u16::from_le_bytes(vbytes);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion { version, offset: 4 }.into());
    }
    let mut hash = [0u8; 32];
    read_section(&mut file, &mut hash, "content hash", 6)?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    let actual = Sha256::digest(&payload);
    if actual.as_slice() != hash {
        return Err(FormatError::BadField {
            what: "content hash",
            offset: 6,
            detail: "stored and computed digests differ".into(),
        }
        .into());
    }

    let mut cursor = std::io::Cursor::new(payload.as_slice());
    let header_len = cursor.read_u32::<LittleEndian>().map_err(FormatError::Io)? as usize;
    let mut header_json = vec![0u8; header_len];
    read_section(&mut cursor, &mut header_json, "header", 42)?;
    let header: FilterHeader = serde_json::from_slice(&header_json)?;

    let n = header.rows * header.cols;
    let m = header.truncation;
    let mut lambdas = Vec::with_capacity(m);
    for _ in 0..m {
        lambdas.push(read_f64(&mut cursor, "eigenvalues")?);
    }
    let tail_sum = read_f64(&mut cursor, "tail sum")?;
    let tail_root_sum = read_f64(&mut cursor, "tail root sum")?;

    let domain = build_grid_domain(header.rows, header.cols, header.cell_measure, header.bands)
        .map_err(crate::detect::DetectError::Geometry)?;
    let mut read_field = |section: &str| -> Result<PiecewiseField, AppError> {
        let mut values = nalgebra::DMatrix::zeros(n, header.bands);
        for r in 0..n {
            for c in 0..header.bands {
                values[(r, c)] = read_f64(&mut cursor, section)?;
            }
        }
        Ok(PiecewiseField::new(domain.clone(), values)
            .map_err(crate::detect::DetectError::Geometry)?)
    };
    let mean = read_field("mean field")?;
    let mut eigenfields = Vec::with_capacity(m);
    for _ in 0..m {
        eigenfields.push(read_field("eigenfields")?);
    }

    let kl = KLBasis::from_parts(mean, lambdas, eigenfields, tail_sum, tail_root_sum)?;
    let filter = AnomalyFilter::from_kl(kl, header.config.clone())?;
    Ok((filter, header))
}

fn read_section<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    section: &str,
    offset: u64,
) -> Result<(), AppError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            AppError::Format(FormatError::Truncated {
                section: section.to_string(),
                offset,
            })
        } else {
            AppError::Io(e)
        }
    })
}

fn read_f64<R: Read>(r: &mut R, section: &str) -> Result<f64, AppError> {
    r.read_f64::<LittleEndian>().map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            AppError::Format(FormatError::Truncated {
                section: section.to_string(),
                offset: 0,
            })
        } else {
            AppError::Io(e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid_domain, PiecewiseField};
    use crate::spectral::SnapshotSet;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fitted() -> (AnomalyFilter, FilterHeader) {
        let domain = build_grid_domain(5, 4, 1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<PiecewiseField> = (0..15)
            .map(|_| {
                PiecewiseField::new(
                    domain.clone(),
                    DMatrix::from_fn(20, 2, |_, _| rng.random::<f64>()),
                )
                .unwrap()
            })
            .collect();
        let set = SnapshotSet::new(frames).unwrap();
        let config = FilterConfig {
            truncation: 4,
            leaf_capacity: 3,
            ..FilterConfig::default()
        };
        let filter = AnomalyFilter::fit(&set, config.clone()).unwrap();
        let header = FilterHeader {
            config,
            rows: 5,
            cols: 4,
            bands: 2,
            cell_measure: 1.0,
            truncation: 4,
            training_frames: 15,
        };
        (filter, header)
    }

    #[test]
    fn filter_round_trip_reproduces_scores() {
        let (filter, header) = fitted();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mlkf");
        write_filter(&filter, &header, &path).unwrap();
        let (loaded, back_header) = read_filter(&path).unwrap();
        assert_eq!(back_header.rows, 5);
        assert_eq!(loaded.kl().lambdas(), filter.kl().lambdas());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let field = PiecewiseField::new(
            filter.domain().clone(),
            DMatrix::from_fn(20, 2, |_, _| rng.random::<f64>()),
        )
        .unwrap();
        let a = filter.score(&field, None).unwrap();
        let b = loaded.score(&field, None).unwrap();
        assert_eq!(a.table.entries(), b.table.entries());
        assert_eq!(a.norm.to_bits(), b.norm.to_bits());
    }

    #[test]
    fn corrupted_filter_is_refused() {
        let (filter, header) = fitted();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mlkf");
        write_filter(&filter, &header, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let at = bytes.len() - 9;
        bytes[at] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        match read_filter(&path) {
            Err(AppError::Format(FormatError::BadField {
                what: "content hash",
                ..
            })) => {}
            other => panic!("expected hash refusal, got {other:?}"),
        }
    }
}
