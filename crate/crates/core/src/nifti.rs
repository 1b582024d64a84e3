//! Minimal NIfTI-1 reader/writer.
//!
//! Supported subset: uncompressed single-file `.nii`, little-endian, no
//! extensions, datatypes uint8 / int16 / float32. Scalar volumes and masks
//! are 3-D; displacement fields are 5-D with `dim = [5, nx, ny, nz, 1, 3]`
//! and the vector component as the slowest-varying axis, matching common
//! registration-tool output. Writers always emit float32 (uint8 for masks),
//! so write∘read of a written file is byte-identical.
//!
//! The qform/sform header block is carried opaquely through read→write
//! round-trips but never interpreted: all inputs are assumed to live on one
//! pre-aligned grid.

use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::field::DisplacementField3;
use crate::volume::{Grid3, Mask3, Volume3};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

const INTENT_VECTOR: i16 = 1007;

/// Opaque spatial-orientation block: pixdim[0] (qfac) plus header bytes
/// 252..328 (qform/sform codes, quaternion, offsets, srows).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMeta {
    pub(crate) qfac_bits: u32,
    pub(crate) block: [u8; 76],
}

impl SpatialMeta {
    fn identity() -> Self {
        SpatialMeta {
            qfac_bits: 1.0f32.to_bits(),
            block: [0u8; 76],
        }
    }
}

struct Header {
    dim: [i16; 8],
    datatype: i16,
    bitpix: i16,
    pixdim: [f32; 8],
    vox_offset: f32,
    scl_slope: f32,
    scl_inter: f32,
    meta: SpatialMeta,
}

fn fmt_err(path: &Path, field: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        field,
        detail: detail.into(),
    }
}

fn read_i16(bytes: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([bytes[off], bytes[off + 1]])
}

fn read_i32(bytes: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
}

fn read_f32(bytes: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < HEADER_SIZE + 4 {
        return Err(fmt_err(
            path,
            "header",
            format!("file too short for a NIfTI-1 header: {} bytes", bytes.len()),
        ));
    }
    let sizeof_hdr = read_i32(bytes, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        let detail = if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            "big-endian files are not supported".to_string()
        } else {
            format!("expected 348, got {sizeof_hdr}")
        };
        return Err(fmt_err(path, "sizeof_hdr", detail));
    }
    if &bytes[344..348] != MAGIC {
        return Err(fmt_err(
            path,
            "magic",
            format!("expected \"n+1\\0\", got {:?}", &bytes[344..348]),
        ));
    }
    if bytes[HEADER_SIZE] != 0 {
        return Err(fmt_err(path, "extension", "extensions are not supported"));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = read_i16(bytes, 40 + 2 * i);
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = read_f32(bytes, 76 + 4 * i);
    }
    let datatype = read_i16(bytes, 70);
    let bitpix = read_i16(bytes, 72);

    let mut block = [0u8; 76];
    block.copy_from_slice(&bytes[252..328]);

    Ok(Header {
        dim,
        datatype,
        bitpix,
        pixdim,
        vox_offset: read_f32(bytes, 108),
        scl_slope: read_f32(bytes, 112),
        scl_inter: read_f32(bytes, 116),
        meta: SpatialMeta {
            qfac_bits: pixdim[0].to_bits(),
            block,
        },
    })
}

fn grid_from_header(h: &Header, path: &Path) -> Result<Grid3> {
    let (nx, ny, nz) = (h.dim[1], h.dim[2], h.dim[3]);
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(fmt_err(
            path,
            "dim",
            format!("spatial dims must be >= 2, got [{nx}, {ny}, {nz}]"),
        ));
    }
    let spacing = (
        h.pixdim[1] as f64,
        h.pixdim[2] as f64,
        h.pixdim[3] as f64,
    );
    for s in [spacing.0, spacing.1, spacing.2] {
        if !s.is_finite() || s <= 0.0 {
            return Err(fmt_err(
                path,
                "pixdim",
                format!("voxel spacing must be finite and > 0, got {:?}", spacing),
            ));
        }
    }
    Grid3::new((nx as usize, ny as usize, nz as usize), spacing)
        .map_err(|e| fmt_err(path, "dim", e.to_string()))
}

fn element_size(datatype: i16, path: &Path) -> Result<usize> {
    match datatype {
        DT_UINT8 => Ok(1),
        DT_INT16 => Ok(2),
        DT_FLOAT32 => Ok(4),
        other => Err(fmt_err(
            path,
            "datatype",
            format!("unsupported datatype code {other} (supported: uint8=2, int16=4, float32=16)"),
        )),
    }
}

/// Decode the payload into f64 scalars, applying scl_slope/scl_inter when set.
fn decode_payload(bytes: &[u8], h: &Header, n: usize, path: &Path) -> Result<Vec<f64>> {
    let elem = element_size(h.datatype, path)?;
    if h.bitpix as usize != 8 * elem {
        return Err(fmt_err(
            path,
            "bitpix",
            format!("bitpix {} does not match datatype {}", h.bitpix, h.datatype),
        ));
    }
    let offset = h.vox_offset as usize;
    if !h.vox_offset.is_finite() || offset < HEADER_SIZE {
        return Err(fmt_err(
            path,
            "vox_offset",
            format!("invalid vox_offset {}", h.vox_offset),
        ));
    }
    let need = n * elem;
    if bytes.len() < offset + need {
        return Err(fmt_err(
            path,
            "data",
            format!(
                "payload truncated: need {need} bytes at offset {offset}, file has {}",
                bytes.len()
            ),
        ));
    }
    let payload = &bytes[offset..offset + need];
    let mut out = Vec::with_capacity(n);
    match h.datatype {
        DT_UINT8 => out.extend(payload.iter().map(|&b| b as f64)),
        DT_INT16 => {
            for c in payload.chunks_exact(2) {
                out.push(i16::from_le_bytes([c[0], c[1]]) as f64);
            }
        }
        DT_FLOAT32 => {
            for c in payload.chunks_exact(4) {
                out.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
        _ => unreachable!(),
    }
    // slope 0 means "no scaling" per the standard; slope 1 / inter 0 is a no-op.
    let slope = h.scl_slope as f64;
    let inter = h.scl_inter as f64;
    if h.scl_slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        for v in &mut out {
            *v = *v * slope + inter;
        }
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(fmt_err(path, "data", "payload contains non-finite values"));
    }
    Ok(out)
}

/// Read a 3-D scalar volume.
pub fn read_volume(path: &Path) -> Result<Volume3> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let h = parse_header(&bytes, path)?;
    // dim[0] == 4 with a singleton 4th axis is accepted for interoperability.
    let ok = h.dim[0] == 3 || (h.dim[0] == 4 && h.dim[4] <= 1);
    if !ok {
        return Err(fmt_err(
            path,
            "dim",
            format!("expected a 3-D volume, got dim[0] = {}", h.dim[0]),
        ));
    }
    let grid = grid_from_header(&h, path)?;
    let data = decode_payload(&bytes, &h, grid.len(), path)?;
    let mut v = Volume3::new(grid, data).map_err(|e| fmt_err(path, "data", e.to_string()))?;
    v.nifti_meta = Some(h.meta);
    Ok(v)
}

/// Read a binary mask stored as a scalar volume; voxels > 0.5 are set.
pub fn read_mask(path: &Path) -> Result<Mask3> {
    let v = read_volume(path)?;
    let data = v.data().iter().map(|&x| x > 0.5).collect();
    Mask3::new(*v.grid(), data)
}

/// Read a 5-D displacement field (`dim = [5, nx, ny, nz, 1, 3]`).
pub fn read_field(path: &Path) -> Result<DisplacementField3> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let h = parse_header(&bytes, path)?;
    if h.dim[0] != 5 || h.dim[4] > 1 || h.dim[5] != 3 {
        return Err(fmt_err(
            path,
            "dim",
            format!(
                "expected a displacement field with dim = [5, nx, ny, nz, 1, 3], got {:?}",
                &h.dim
            ),
        ));
    }
    let grid = grid_from_header(&h, path)?;
    let n = grid.len();
    let planar = decode_payload(&bytes, &h, 3 * n, path)?;
    // On disk the component axis varies slowest; interleave per voxel.
    let mut data = vec![0.0; 3 * n];
    for c in 0..3 {
        for i in 0..n {
            data[3 * i + c] = planar[c * n + i];
        }
    }
    DisplacementField3::new(grid, data)
}

struct WriteSpec<'a> {
    dim: [i16; 8],
    datatype: i16,
    bitpix: i16,
    intent_code: i16,
    grid: Grid3,
    meta: &'a SpatialMeta,
}

fn write_header(spec: &WriteSpec) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r'; // "regular" per convention
    for (i, d) in spec.dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[68..70].copy_from_slice(&spec.intent_code.to_le_bytes());
    h[70..72].copy_from_slice(&spec.datatype.to_le_bytes());
    h[72..74].copy_from_slice(&spec.bitpix.to_le_bytes());
    let qfac = f32::from_bits(spec.meta.qfac_bits);
    let pixdim = [
        qfac,
        spec.grid.spacing.0 as f32,
        spec.grid.spacing.1 as f32,
        spec.grid.spacing.2 as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    h[116..120].copy_from_slice(&0.0f32.to_le_bytes()); // scl_inter
    h[123] = 2; // xyzt_units: mm
    h[252..328].copy_from_slice(&spec.meta.block);
    h[344..348].copy_from_slice(MAGIC);
    // bytes 348..352 stay zero: no extensions
    h
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Write a scalar volume as float32.
pub fn write_volume(v: &Volume3, path: &Path) -> Result<()> {
    let (nx, ny, nz) = v.grid().dims;
    let meta = v.nifti_meta.clone().unwrap_or_else(SpatialMeta::identity);
    let spec = WriteSpec {
        dim: [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1],
        datatype: DT_FLOAT32,
        bitpix: 32,
        intent_code: 0,
        grid: *v.grid(),
        meta: &meta,
    };
    let mut bytes = write_header(&spec);
    bytes.reserve(4 * v.data().len());
    for &x in v.data() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    write_bytes(path, &bytes)
}

/// Write a mask as uint8 with values {0, 1}.
pub fn write_mask(m: &Mask3, path: &Path) -> Result<()> {
    let (nx, ny, nz) = m.grid().dims;
    let meta = SpatialMeta::identity();
    let spec = WriteSpec {
        dim: [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1],
        datatype: DT_UINT8,
        bitpix: 8,
        intent_code: 0,
        grid: *m.grid(),
        meta: &meta,
    };
    let mut bytes = write_header(&spec);
    bytes.extend(m.data().iter().map(|&b| u8::from(b)));
    write_bytes(path, &bytes)
}

/// Write a displacement field as 5-D float32, component axis last.
pub fn write_field(f: &DisplacementField3, path: &Path) -> Result<()> {
    let (nx, ny, nz) = f.grid().dims;
    let meta = SpatialMeta::identity();
    let spec = WriteSpec {
        dim: [5, nx as i16, ny as i16, nz as i16, 1, 3, 1, 1],
        datatype: DT_FLOAT32,
        bitpix: 32,
        intent_code: INTENT_VECTOR,
        grid: *f.grid(),
        meta: &meta,
    };
    let mut bytes = write_header(&spec);
    let n = f.grid().len();
    bytes.reserve(12 * n);
    for c in 0..3 {
        for i in 0..n {
            bytes.extend_from_slice(&(f.data()[3 * i + c] as f32).to_le_bytes());
        }
    }
    write_bytes(path, &bytes)
}
