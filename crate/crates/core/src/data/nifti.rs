//! Uncompressed single-file NIfTI-1 reading, plus a small writer used to
//! build fixtures.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const HEADER_SIZE: usize = 348;
const MIN_VOX_OFFSET: usize = 352;

/// On-disk voxel kinds this reader accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDtype {
    U8,
    I16,
    F32,
}

impl NiftiDtype {
    pub fn code(self) -> i16 {
        match self {
            Self::U8 => 2,
            Self::I16 => 4,
            Self::F32 => 16,
        }
    }

    fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Self::U8),
            4 => Some(Self::I16),
            16 => Some(Self::F32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::I16 => 2,
            Self::F32 => 4,
        }
    }
}

/// A CT volume with scale and intercept applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// `(X, Y, Z)` extents from the header.
    pub dims: [usize; 3],
    /// Values laid out `[Z, Y, X]`, x fastest, as stored on disk.
    pub voxels: Tensor<f32>,
    pub source_dtype: NiftiDtype,
}

impl Volume {
    pub fn depth(&self) -> usize {
        self.dims[2]
    }

    /// Axial slice `z` as a `[Y, X]` plane.
    pub fn slice(&self, z: usize) -> Tensor<f32> {
        let [x, y, _] = self.dims;
        let plane = x * y;
        Tensor::from_fn(&[y, x], |i| self.voxels.data()[z * plane + i])
    }
}

fn err(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Nifti {
        field,
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    big: bool,
}

impl Reader<'_> {
    fn array<const N: usize>(&self, at: usize) -> [u8; N] {
        self.bytes[at..at + N].try_into().expect("header slice")
    }

    fn i16(&self, at: usize) -> i16 {
        let b = self.array(at);
        if self.big {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn i32(&self, at: usize) -> i32 {
        let b = self.array(at);
        if self.big {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let b = self.array(at);
        if self.big {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

/// Parse a NIfTI-1 file already in memory.
pub fn parse_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(err("sizeof_hdr", format!("file has {} bytes, header needs 348", bytes.len())));
    }
    let le = Reader { bytes, big: false };
    let big = !(1..=7).contains(&le.i16(40));
    let r = Reader { bytes, big };
    if !(1..=7).contains(&r.i16(40)) {
        return Err(err("dim", "dim[0] outside [1, 7] in either byte order"));
    }
    if r.i32(0) != HEADER_SIZE as i32 {
        return Err(err("sizeof_hdr", format!("expected 348, found {}", r.i32(0))));
    }
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(err("magic", "unsupported: detached header")),
        other => return Err(err("magic", format!("expected \"n+1\\0\", found {other:?}"))),
    }
    let rank = r.i16(40) as usize;
    let mut dims = [1usize; 3];
    for (axis, d) in (1..=7).map(|i| (i, r.i16(40 + 2 * i))) {
        if axis > rank {
            break;
        }
        if d < 1 {
            return Err(err("dim", format!("dim[{axis}] = {d} must be positive")));
        }
        if axis <= 3 {
            dims[axis - 1] = d as usize;
        } else if d != 1 {
            return Err(err("dim", format!("dim[{axis}] = {d}: only 3-D volumes are supported")));
        }
    }
    let code = r.i16(70);
    let dtype = NiftiDtype::from_code(code).ok_or_else(|| {
        err(
            "datatype",
            format!("unsupported datatype code {code} (need 2 = uint8, 4 = int16 or 16 = float32)"),
        )
    })?;
    let offset = r.f32(108);
    if !(offset >= MIN_VOX_OFFSET as f32) || offset.fract() != 0.0 {
        return Err(err("vox_offset", format!("{offset} is not a whole offset >= 352")));
    }
    let offset = offset as usize;
    let mut slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let inter = if inter.is_finite() { inter } else { 0.0 };
    let count = dims.iter().product::<usize>();
    let need = offset + count * dtype.size();
    if bytes.len() < need {
        return Err(err(
            "payload",
            format!("truncated: need {need} bytes for {count} voxels, file has {}", bytes.len()),
        ));
    }
    let data = r.bytes[offset..need]
        .chunks_exact(dtype.size())
        .enumerate()
        .map(|(i, _)| {
            let at = offset + i * dtype.size();
            let raw = match dtype {
                NiftiDtype::U8 => bytes[at] as f64,
                NiftiDtype::I16 => r.i16(at) as f64,
                NiftiDtype::F32 => r.f32(at) as f64,
            };
            (raw * slope + inter) as f32
        })
        .collect();
    Ok(Volume {
        dims,
        voxels: Tensor::new(&[dims[2], dims[1], dims[0]], data)?,
        source_dtype: dtype,
    })
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    parse_nifti(&fs::read(path)?)
}

/// Everything needed to write a NIfTI-1 file. `raw` holds stored values in
/// `[Z, Y, X]` order before scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub dims: [usize; 3],
    pub dtype: NiftiDtype,
    pub raw: Vec<f64>,
    pub slope: f32,
    pub inter: f32,
    pub big_endian: bool,
}

impl NiftiImage {
    pub fn new(dims: [usize; 3], dtype: NiftiDtype, raw: Vec<f64>) -> Self {
        Self {
            dims,
            dtype,
            raw,
            slope: 1.0,
            inter: 0.0,
            big_endian: false,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![0u8; MIN_VOX_OFFSET];
        let big = self.big_endian;
        let put = |out: &mut Vec<u8>, at: usize, b: &[u8]| out[at..at + b.len()].copy_from_slice(b);
        let i16b = |v: i16| if big { v.to_be_bytes() } else { v.to_le_bytes() };
        let i32b = |v: i32| if big { v.to_be_bytes() } else { v.to_le_bytes() };
        let f32b = |v: f32| if big { v.to_be_bytes() } else { v.to_le_bytes() };
        put(&mut out, 0, &i32b(HEADER_SIZE as i32));
        put(&mut out, 40, &i16b(3));
        for (i, &d) in self.dims.iter().enumerate() {
            put(&mut out, 42 + 2 * i, &i16b(d as i16));
        }
        for i in 3..7 {
            put(&mut out, 42 + 2 * i, &i16b(1));
        }
        put(&mut out, 70, &i16b(self.dtype.code()));
        put(&mut out, 72, &i16b(8 * self.dtype.size() as i16));
        for i in 0..4 {
            put(&mut out, 76 + 4 * i, &f32b(1.0));
        }
        put(&mut out, 108, &f32b(MIN_VOX_OFFSET as f32));
        put(&mut out, 112, &f32b(self.slope));
        put(&mut out, 116, &f32b(self.inter));
        put(&mut out, 344, b"n+1\0");
        for &v in &self.raw {
            match self.dtype {
                NiftiDtype::U8 => out.push(v as u8),
                NiftiDtype::I16 => out.extend_from_slice(&i16b(v as i16)),
                NiftiDtype::F32 => out.extend_from_slice(&f32b(v as f32)),
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}
