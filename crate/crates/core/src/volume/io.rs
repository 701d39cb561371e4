//! The `.vvol` container: `VITVOL01` magic, a length-prefixed JSON header,
//! then little-endian `f32` voxels in z-major order. Masks reuse the same
//! container with domain `"Mask"` and values restricted to 0.0/1.0.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Domain, Mask3D, Volume3D, VolumeError};

const MAGIC: &[u8; 8] = b"VITVOL01";

#[derive(Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    domain: String,
}

fn io_err(path: &Path, source: std::io::Error) -> VolumeError {
    VolumeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serialize a volume into any writer.
pub fn write_volume_to<W: Write>(vol: &Volume3D, mut w: W) -> std::io::Result<()> {
    let domain = match vol.domain() {
        Domain::Hu => "HU",
        Domain::Unit => "Unit",
    };
    write_container(&mut w, vol.dims(), vol.spacing(), domain, vol.voxels())
}

pub fn write_volume(vol: &Volume3D, path: &Path) -> Result<(), VolumeError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write_volume_to(vol, &mut w).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Serialize a mask into any writer. Spacing is carried for convenience so a
/// mask file is self-describing next to its companion volume.
pub fn write_mask_to<W: Write>(
    mask: &Mask3D,
    spacing: (f64, f64, f64),
    mut w: W,
) -> std::io::Result<()> {
    let values: Vec<f32> = mask.bits().iter().map(|&b| b as f32).collect();
    write_container(&mut w, mask.dims(), spacing, "Mask", &values)
}

pub fn write_mask(mask: &Mask3D, spacing: (f64, f64, f64), path: &Path) -> Result<(), VolumeError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write_mask_to(mask, spacing, &mut w).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

fn write_container<W: Write>(
    w: &mut W,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    domain: &str,
    values: &[f32],
) -> std::io::Result<()> {
    let header = Header {
        dims: [dims.0, dims.1, dims.2],
        spacing_mm: [spacing.0, spacing.1, spacing.2],
        domain: domain.to_string(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serialization cannot fail");
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Deserialize a volume from any reader.
pub fn read_volume_from<R: Read>(r: R) -> Result<Volume3D, VolumeError> {
    let (header, values) = read_container(r)?;
    let domain = match header.domain.as_str() {
        "HU" => Domain::Hu,
        "Unit" => Domain::Unit,
        other => {
            return Err(VolumeError::MalformedHeader(format!(
                "unknown volume domain {other:?}"
            )))
        }
    };
    Volume3D::from_vec(
        (header.dims[0], header.dims[1], header.dims[2]),
        (
            header.spacing_mm[0],
            header.spacing_mm[1],
            header.spacing_mm[2],
        ),
        domain,
        values,
    )
}

pub fn read_volume(path: &Path) -> Result<Volume3D, VolumeError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    read_volume_from(BufReader::new(file))
}

/// Deserialize a mask and the spacing recorded alongside it.
pub fn read_mask_from<R: Read>(r: R) -> Result<(Mask3D, (f64, f64, f64)), VolumeError> {
    let (header, values) = read_container(r)?;
    if header.domain != "Mask" {
        return Err(VolumeError::MalformedHeader(format!(
            "expected Mask domain, got {:?}",
            header.domain
        )));
    }
    let mut bits = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        if v == 0.0 {
            bits.push(0u8);
        } else if v == 1.0 {
            bits.push(1u8);
        } else {
            return Err(VolumeError::InvalidMaskValue { index: i, value: v });
        }
    }
    let mask = Mask3D::from_bits((header.dims[0], header.dims[1], header.dims[2]), bits)?;
    let spacing = (
        header.spacing_mm[0],
        header.spacing_mm[1],
        header.spacing_mm[2],
    );
    Ok((mask, spacing))
}

pub fn read_mask(path: &Path) -> Result<(Mask3D, (f64, f64, f64)), VolumeError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    read_mask_from(BufReader::new(file))
}

fn read_container<R: Read>(mut r: R) -> Result<(Header, Vec<f32>), VolumeError> {
    let mut magic = [0u8; 8];
    read_exact_or(&mut r, &mut magic, || VolumeError::BadMagic)?;
    if &magic != MAGIC {
        return Err(VolumeError::BadMagic);
    }
    let mut len_bytes = [0u8; 4];
    read_exact_or(&mut r, &mut len_bytes, || {
        VolumeError::MalformedHeader("truncated header length".into())
    })?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    if header_len == 0 || header_len > 1 << 20 {
        return Err(VolumeError::MalformedHeader(format!(
            "implausible header length {header_len}"
        )));
    }
    let mut header_bytes = vec![0u8; header_len];
    read_exact_or(&mut r, &mut header_bytes, || {
        VolumeError::MalformedHeader("truncated header".into())
    })?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| VolumeError::MalformedHeader(e.to_string()))?;
    if header.dims.iter().any(|&d| d == 0) {
        return Err(VolumeError::InvalidDims((
            header.dims[0],
            header.dims[1],
            header.dims[2],
        )));
    }
    let count = header.dims[0]
        .checked_mul(header.dims[1])
        .and_then(|v| v.checked_mul(header.dims[2]))
        .ok_or_else(|| VolumeError::MalformedHeader("dims overflow".into()))?;
    let expected = count * 4;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| VolumeError::Io {
        path: "<stream>".into(),
        source: e,
    })?;
    if payload.len() != expected {
        return Err(VolumeError::PayloadLengthMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, values))
}

fn read_exact_or<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    err: impl Fn() -> VolumeError,
) -> Result<(), VolumeError> {
    r.read_exact(buf).map_err(|_| err())
}
