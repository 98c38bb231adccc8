//! The `GRFPTNSR` binary tensor container and image exports.
//!
//! Layout: 8 magic bytes `GRFPTNSR`, format version `u8`, dtype code `u8`
//! (0 = f32, 1 = f64), rank `u8`, one little-endian `u32` per extent, then the
//! values little-endian in row-major order with channels innermost.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{GrfpError, Result};
use crate::labels::LabelMap;
use crate::tensor::{DType, Real, Tensor};
use crate::warp::FlowField;

pub const MAGIC: &[u8; 8] = b"GRFPTNSR";
pub const FORMAT_VERSION: u8 = 1;
pub const EXTENSION: &str = "GRFPTNSR";

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(11 + 4 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn format_err(offset: usize, msg: impl Into<String>) -> GrfpError {
    GrfpError::Format {
        offset,
        msg: msg.into(),
    }
}

/// Parsed header of a container.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data_offset: usize,
}

pub fn decode_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 8 {
        return Err(format_err(bytes.len(), "truncated magic"));
    }
    if &bytes[..8] != MAGIC {
        return Err(format_err(0, "bad magic, expected GRFPTNSR"));
    }
    let fixed = bytes.get(8..11).ok_or_else(|| format_err(bytes.len(), "truncated header"))?;
    if fixed[0] != FORMAT_VERSION {
        return Err(format_err(8, format!("unsupported format version {}", fixed[0])));
    }
    let dtype = DType::from_code(fixed[1]).ok_or_else(|| format_err(9, format!("unknown dtype code {}", fixed[1])))?;
    let rank = fixed[2] as usize;
    if rank > 4 {
        return Err(format_err(10, format!("rank {} exceeds 4", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut off = 11;
    for _ in 0..rank {
        let e = bytes
            .get(off..off + 4)
            .ok_or_else(|| format_err(bytes.len(), "truncated extents"))?;
        shape.push(u32::from_le_bytes(e.try_into().unwrap()) as usize);
        off += 4;
    }
    Ok(Header {
        dtype,
        shape,
        data_offset: off,
    })
}

/// Decodes a container whose dtype must match `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let header = decode_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(format_err(
            9,
            format!("dtype {:?} stored, {:?} requested", header.dtype, T::DTYPE),
        ));
    }
    let numel: usize = header.shape.iter().product();
    let size = T::DTYPE.size();
    let start = header.data_offset;
    let need = start + numel * size;
    if bytes.len() < need {
        return Err(format_err(
            bytes.len(),
            format!("truncated data: {} values need {} bytes", numel, need),
        ));
    }
    if bytes.len() > need {
        return Err(format_err(need, "trailing bytes after tensor data"));
    }
    let data = bytes[start..need].chunks_exact(size).map(T::read_le).collect();
    Tensor::new(&header.shape, data)
}

/// Writes through a temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| GrfpError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| GrfpError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| GrfpError::io(path, e))
}

pub fn save_tensor<T: Real>(t: &Tensor<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(t))
}

pub fn load_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| GrfpError::io(path, e))?;
    decode(&bytes)
}

/// Loads a tensor whichever float width it was stored in.
pub fn load_tensor_any<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| GrfpError::io(path, e))?;
    match decode_header(&bytes)?.dtype {
        DType::F32 => Ok(decode::<f32>(&bytes)?.cast()),
        DType::F64 => Ok(decode::<f64>(&bytes)?.cast()),
    }
}

const FLOW_SIDECAR: &str = "channels: f_x f_y (pixels; vector at each target pixel points to its source location)\n";

/// Saves a flow field plus a one-line text sidecar documenting channel order.
pub fn save_flow_file<T: Real>(flow: &FlowField<T>, path: &Path) -> Result<()> {
    save_tensor(flow.tensor(), path)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".txt");
    write_atomic(Path::new(&side), FLOW_SIDECAR.as_bytes())
}

pub fn load_flow_file<T: Real>(path: &Path) -> Result<FlowField<T>> {
    let bytes = fs::read(path).map_err(|e| GrfpError::io(path, e))?;
    let header = decode_header(&bytes)?;
    if header.shape.len() != 3 {
        return Err(format_err(
            10,
            format!("flow file needs rank 3 (H×W×2), found rank {}", header.shape.len()),
        ));
    }
    if header.shape[2] != 2 {
        return Err(format_err(
            11 + 8,
            format!("flow file needs 2 channels, found {}", header.shape[2]),
        ));
    }
    FlowField::new(decode(&bytes)?)
}

/// Binary PPM (P6) of an `H × W × 3` image with values in `[0, 1]`.
pub fn write_ppm<T: Real>(image: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w, c) = image.hwc()?;
    if c != 3 {
        return Err(GrfpError::contract(format!("PPM export needs 3 channels, got {}", c)));
    }
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    write_atomic(path, &out)
}

/// Binary PGM (P5) with class ids as gray levels.
pub fn write_pgm(labels: &LabelMap, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.data());
    write_atomic(path, &out)
}
