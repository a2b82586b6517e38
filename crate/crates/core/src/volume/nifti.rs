//! Single-file NIfTI-1 (`.nii`) reading and writing.

use super::{affine_from_spacing, Affine, Intent, Volume4D};
use crate::error::{Error, Result};
use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use std::fs;
use std::io::Write;
use std::path::Path;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

const INTENT_ESTIMATE: i16 = 1001;
const INTENT_LABEL: i16 = 1002;
const INTENT_VECTOR: i16 = 1007;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl NiftiDatatype {
    fn code(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Int32 => 8,
            NiftiDatatype::Float32 => 16,
            NiftiDatatype::Float64 => 64,
        }
    }

    fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => NiftiDatatype::Uint8,
            4 => NiftiDatatype::Int16,
            8 => NiftiDatatype::Int32,
            16 => NiftiDatatype::Float32,
            64 => NiftiDatatype::Float64,
            _ => return None,
        })
    }

    fn bytes(self) -> usize {
        match self {
            NiftiDatatype::Uint8 => 1,
            NiftiDatatype::Int16 => 2,
            NiftiDatatype::Int32 | NiftiDatatype::Float32 => 4,
            NiftiDatatype::Float64 => 8,
        }
    }
}

pub fn read_nifti(path: &Path) -> Result<Volume4D> {
    let bytes = fs::read(path)?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(Error::UnsupportedFormat("gzip-compressed NIfTI".into()));
    }
    parse_nifti(&bytes)
}

pub(crate) fn parse_nifti(bytes: &[u8]) -> Result<Volume4D> {
    if bytes.len() < 4 {
        return Err(Error::parse(bytes.len(), "file shorter than sizeof_hdr field"));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse_with::<LittleEndian>(bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse_with::<BigEndian>(bytes)
    } else {
        Err(Error::parse(
            0,
            format!("sizeof_hdr is {}, expected 348", LittleEndian::read_i32(&bytes[0..4])),
        ))
    }
}

fn parse_with<E: ByteOrder>(bytes: &[u8]) -> Result<Volume4D> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::parse(bytes.len(), "truncated header"));
    }
    let h = &bytes[..HEADER_SIZE];
    let i16_at = |o: usize| E::read_i16(&h[o..o + 2]);
    let f32_at = |o: usize| E::read_f32(&h[o..o + 4]) as f64;

    let magic = &h[344..348];
    if magic == MAGIC_PAIR {
        return Err(Error::UnsupportedFormat("header/image pair (.hdr/.img)".into()));
    }
    if magic != MAGIC_SINGLE {
        return Err(Error::parse(344, format!("bad magic {magic:?}")));
    }

    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::parse(40, format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = [1usize; 4];
    for i in 1..=ndim as usize {
        let d = i16_at(40 + 2 * i);
        if d < 1 {
            return Err(Error::parse(40 + 2 * i, format!("dim[{i}] = {d} must be positive")));
        }
        if i <= 4 {
            dims[i - 1] = d as usize;
        } else if d != 1 {
            return Err(Error::UnsupportedFormat(format!("dim[{i}] = {d}; only 4D data supported")));
        }
    }

    let code = i16_at(70);
    let dtype = NiftiDatatype::from_code(code)
        .ok_or_else(|| Error::UnsupportedFormat(format!("datatype code {code}")))?;

    let pixdim: Vec<f64> = (0..8).map(|i| f32_at(76 + 4 * i)).collect();
    let spacing = [1, 2, 3].map(|i| {
        let s = pixdim[i].abs();
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    });

    let vox_offset = f32_at(108);
    if !(vox_offset >= HEADER_SIZE as f64) || vox_offset.fract() != 0.0 {
        return Err(Error::parse(108, format!("invalid vox_offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    let slope = f32_at(112);
    let inter = f32_at(116);

    let qform_code = i16_at(252);
    let sform_code = i16_at(254);
    let affine = if sform_code > 0 {
        let mut a = [[0.0; 4]; 4];
        for (r, row) in a.iter_mut().enumerate().take(3) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(280 + 16 * r + 4 * c);
            }
        }
        a[3][3] = 1.0;
        a
    } else if qform_code > 0 {
        let q = [256, 260, 264, 268, 272, 276].map(f32_at);
        qform_affine(q, spacing, pixdim[0])
    } else {
        affine_from_spacing(spacing)
    };

    let intent = match i16_at(68) {
        INTENT_LABEL => Intent::Labels,
        INTENT_ESTIMATE => Intent::Scalar,
        INTENT_VECTOR => Intent::ShCoeffs,
        _ => Intent::Dwi,
    };

    let n: usize = dims.iter().product();
    let need = n * dtype.bytes();
    let end = vox_offset + need;
    if bytes.len() < end {
        return Err(Error::parse(
            bytes.len(),
            format!("data section truncated: need {need} bytes from offset {vox_offset}"),
        ));
    }
    let raw = &bytes[vox_offset..end];
    let mut data: Vec<f64> = match dtype {
        NiftiDatatype::Uint8 => raw.iter().map(|&b| b as f64).collect(),
        NiftiDatatype::Int16 => raw.chunks_exact(2).map(|c| E::read_i16(c) as f64).collect(),
        NiftiDatatype::Int32 => raw.chunks_exact(4).map(|c| E::read_i32(c) as f64).collect(),
        NiftiDatatype::Float32 => raw.chunks_exact(4).map(|c| E::read_f32(c) as f64).collect(),
        NiftiDatatype::Float64 => raw.chunks_exact(8).map(E::read_f64).collect(),
    };
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        data.iter_mut().for_each(|x| *x = *x * slope + inter);
    }

    let intent = if intent == Intent::Labels && data.iter().any(|&l| l < 0.0 || l.fract() != 0.0) {
        Intent::Scalar
    } else {
        intent
    };
    Volume4D::new(dims, spacing, affine, data, intent)
}

fn qform_affine(q: [f64; 6], spacing: [f64; 3], qfac: f64) -> Affine {
    let [b, c, d, qx, qy, qz] = q;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ];
    let qfac = if qfac < 0.0 { -1.0 } else { 1.0 };
    let scale = [spacing[0], spacing[1], qfac * spacing[2]];
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * scale[j];
        }
    }
    m[0][3] = qx;
    m[1][3] = qy;
    m[2][3] = qz;
    m[3][3] = 1.0;
    m
}

/// Write as little-endian NIfTI-1 with float32 data.
pub fn write_nifti(v: &Volume4D, path: &Path) -> Result<()> {
    write_nifti_as(v, path, NiftiDatatype::Float32)
}

/// Write with an explicit on-disk datatype. Integer types round to nearest.
pub fn write_nifti_as(v: &Volume4D, path: &Path, dtype: NiftiDatatype) -> Result<()> {
    let bytes = encode_nifti(v, dtype)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn encode_nifti(v: &Volume4D, dtype: NiftiDatatype) -> Result<Vec<u8>> {
    let dims = v.dims();
    if let Some(&d) = dims.iter().find(|&&d| d > i16::MAX as usize) {
        return Err(Error::UnsupportedFormat(format!("dimension {d} exceeds NIfTI-1 limit")));
    }
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], o: usize, x: i16| LittleEndian::write_i16(&mut h[o..o + 2], x);
    let put_f32 = |h: &mut [u8], o: usize, x: f64| LittleEndian::write_f32(&mut h[o..o + 4], x as f32);

    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let ndim = if dims[3] > 1 { 4 } else { 3 };
    put_i16(&mut h, 40, ndim);
    for (i, &d) in dims.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * i, d as i16);
    }
    for i in 5..8 {
        put_i16(&mut h, 40 + 2 * i, 1);
    }
    let intent_code = match v.intent() {
        Intent::Dwi => 0,
        Intent::ShCoeffs => INTENT_VECTOR,
        Intent::Scalar => INTENT_ESTIMATE,
        Intent::Labels => INTENT_LABEL,
    };
    put_i16(&mut h, 68, intent_code);
    put_i16(&mut h, 70, dtype.code());
    put_i16(&mut h, 72, (dtype.bytes() * 8) as i16);
    put_f32(&mut h, 76, 1.0);
    for (i, s) in v.spacing().iter().enumerate() {
        put_f32(&mut h, 80 + 4 * i, *s);
    }
    put_f32(&mut h, 92, 1.0);
    put_f32(&mut h, 108, VOX_OFFSET as f64);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2 | 8; // mm, seconds
    put_i16(&mut h, 254, 1);
    let a = v.affine();
    for r in 0..3 {
        for c in 0..4 {
            put_f32(&mut h, 280 + 16 * r + 4 * c, a[r][c]);
        }
    }
    let name: &[u8] = match v.intent() {
        Intent::ShCoeffs => b"sh_coeffs",
        Intent::Labels => b"labels",
        _ => b"",
    };
    h[328..328 + name.len()].copy_from_slice(name);
    h[344..348].copy_from_slice(MAGIC_SINGLE);

    let mut out = h;
    out.reserve(v.data().len() * dtype.bytes());
    for &x in v.data() {
        match dtype {
            NiftiDatatype::Uint8 => out.write_u8(x.round().clamp(0.0, 255.0) as u8)?,
            NiftiDatatype::Int16 => out.write_i16::<LittleEndian>(x.round() as i16)?,
            NiftiDatatype::Int32 => out.write_i32::<LittleEndian>(x.round() as i32)?,
            NiftiDatatype::Float32 => out.write_f32::<LittleEndian>(x as f32)?,
            NiftiDatatype::Float64 => out.write_f64::<LittleEndian>(x)?,
        }
    }
    out.flush()?;
    Ok(out)
}
