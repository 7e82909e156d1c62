//! NIfTI-1 reader and writer (single `.nii` files and `.hdr`/`.img` pairs,
//! either byte order, uint8/int16/float32/float64 voxels).

use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::{Series, Volume};
use crate::error::{Error, Result};

/// Size of the fixed NIfTI-1 header.
pub const NIFTI_HEADER_SIZE: usize = 348;
/// Data offset written for single-file output (header + 4 extension bytes).
const SINGLE_FILE_OFFSET: usize = 352;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_DESCRIP: usize = 148;
const OFF_QFORM_CODE: usize = 252;
const OFF_SFORM_CODE: usize = 254;
const OFF_QUATERN: usize = 256;
const OFF_QOFFSET: usize = 268;
const OFF_SROW: usize = 280;
const OFF_MAGIC: usize = 344;

/// Supported voxel types with their NIfTI codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Datatype {
    Uint8,
    Int16,
    Float32,
    Float64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::Uint8),
            4 => Ok(Datatype::Int16),
            16 => Ok(Datatype::Float32),
            64 => Ok(Datatype::Float64),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }

    fn range(self) -> Option<(f64, f64)> {
        match self {
            Datatype::Uint8 => Some((0.0, 255.0)),
            Datatype::Int16 => Some((i16::MIN as f64, i16::MAX as f64)),
            _ => None,
        }
    }
}

/// The fields of a NIfTI-1 header that this crate reads and writes back.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: String,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
    /// Byte order of the file, detected from `sizeof_hdr`.
    pub big_endian: bool,
}

impl NiftiHeader {
    /// Spatial extents `(nx, ny, nz)` and number of frames.
    pub fn extents(&self) -> ([usize; 3], usize) {
        let ndim = self.dim[0] as usize;
        let get = |a: usize| if a <= ndim { self.dim[a] as usize } else { 1 };
        ([get(1), get(2), get(3)], get(4))
    }

    /// `Some((slope, inter))` when the header requests value scaling.
    pub fn scaling(&self) -> Option<(f64, f64)> {
        let (s, i) = (self.scl_slope as f64, self.scl_inter as f64);
        if s == 0.0 || !s.is_finite() || !i.is_finite() || (s == 1.0 && i == 0.0) {
            None
        } else {
            Some((s, i))
        }
    }

    fn parse<B: ByteOrder>(b: &[u8], big_endian: bool) -> Result<Self> {
        let err = |offset: usize, message: String| Error::NiftiParse { offset, message };
        let i16_at = |o: usize| B::read_i16(&b[o..o + 2]);
        let f32_at = |o: usize| B::read_f32(&b[o..o + 4]);
        let mut dim = [0i16; 8];
        for (a, d) in dim.iter_mut().enumerate() {
            *d = i16_at(OFF_DIM + 2 * a);
        }
        if !(1..=7).contains(&dim[0]) {
            return Err(err(OFF_DIM, format!("dim[0] = {} outside 1..=7", dim[0])));
        }
        for a in 1..=dim[0] as usize {
            if dim[a] < 1 {
                return Err(err(OFF_DIM + 2 * a, format!("dim[{a}] = {} must be positive", dim[a])));
            }
            if a > 4 && dim[a] != 1 {
                return Err(err(OFF_DIM + 2 * a, format!("only 3-D and 4-D data are supported (dim[{a}] = {})", dim[a])));
            }
        }
        let datatype = Datatype::from_code(i16_at(OFF_DATATYPE))?;
        let bitpix = i16_at(OFF_BITPIX);
        if bitpix as usize != 8 * datatype.bytes() {
            return Err(err(OFF_BITPIX, format!("bitpix {bitpix} does not match {datatype:?}")));
        }
        let mut pixdim = [0f32; 8];
        for (a, p) in pixdim.iter_mut().enumerate() {
            *p = f32_at(OFF_PIXDIM + 4 * a);
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&b[OFF_MAGIC..OFF_MAGIC + 4]);
        if &magic != b"n+1\0" && &magic != b"ni1\0" {
            return Err(err(OFF_MAGIC, format!("bad magic {magic:?}")));
        }
        let vox_offset = f32_at(OFF_VOX_OFFSET);
        if &magic == b"n+1\0" && !(vox_offset >= NIFTI_HEADER_SIZE as f32) {
            return Err(err(OFF_VOX_OFFSET, format!("vox_offset {vox_offset} lies inside the header")));
        }
        let descrip_raw = &b[OFF_DESCRIP..OFF_DESCRIP + 80];
        let end = descrip_raw.iter().position(|&c| c == 0).unwrap_or(80);
        let mut srow = [[0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(OFF_SROW + 16 * r + 4 * c);
            }
        }
        Ok(NiftiHeader {
            dim,
            datatype,
            pixdim,
            vox_offset,
            scl_slope: f32_at(OFF_SCL_SLOPE),
            scl_inter: f32_at(OFF_SCL_INTER),
            xyzt_units: b[OFF_XYZT_UNITS],
            descrip: String::from_utf8_lossy(&descrip_raw[..end]).into_owned(),
            qform_code: i16_at(OFF_QFORM_CODE),
            sform_code: i16_at(OFF_SFORM_CODE),
            quatern: [0, 1, 2].map(|a| f32_at(OFF_QUATERN + 4 * a)),
            qoffset: [0, 1, 2].map(|a| f32_at(OFF_QOFFSET + 4 * a)),
            srow,
            magic,
            big_endian,
        })
    }

    fn encode<B: ByteOrder>(&self) -> Vec<u8> {
        let mut b = vec![0u8; NIFTI_HEADER_SIZE];
        B::write_i32(&mut b[0..4], NIFTI_HEADER_SIZE as i32);
        b[38] = b'r';
        for (a, &d) in self.dim.iter().enumerate() {
            B::write_i16(&mut b[OFF_DIM + 2 * a..], d);
        }
        B::write_i16(&mut b[OFF_DATATYPE..], self.datatype.code());
        B::write_i16(&mut b[OFF_BITPIX..], 8 * self.datatype.bytes() as i16);
        for (a, &p) in self.pixdim.iter().enumerate() {
            B::write_f32(&mut b[OFF_PIXDIM + 4 * a..], p);
        }
        B::write_f32(&mut b[OFF_VOX_OFFSET..], self.vox_offset);
        B::write_f32(&mut b[OFF_SCL_SLOPE..], self.scl_slope);
        B::write_f32(&mut b[OFF_SCL_INTER..], self.scl_inter);
        b[OFF_XYZT_UNITS] = self.xyzt_units;
        let d = self.descrip.as_bytes();
        let n = d.len().min(79);
        b[OFF_DESCRIP..OFF_DESCRIP + n].copy_from_slice(&d[..n]);
        B::write_i16(&mut b[OFF_QFORM_CODE..], self.qform_code);
        B::write_i16(&mut b[OFF_SFORM_CODE..], self.sform_code);
        for a in 0..3 {
            B::write_f32(&mut b[OFF_QUATERN + 4 * a..], self.quatern[a]);
            B::write_f32(&mut b[OFF_QOFFSET + 4 * a..], self.qoffset[a]);
        }
        for (r, row) in self.srow.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                B::write_f32(&mut b[OFF_SROW + 16 * r + 4 * c..], v);
            }
        }
        b[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(&self.magic);
        b
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(Error::NiftiParse {
            offset: bytes.len(),
            message: format!("file of {} bytes is shorter than the {NIFTI_HEADER_SIZE}-byte header", bytes.len()),
        });
    }
    if LittleEndian::read_i32(&bytes[0..4]) == NIFTI_HEADER_SIZE as i32 {
        NiftiHeader::parse::<LittleEndian>(bytes, false)
    } else if BigEndian::read_i32(&bytes[0..4]) == NIFTI_HEADER_SIZE as i32 {
        NiftiHeader::parse::<BigEndian>(bytes, true)
    } else {
        Err(Error::NiftiParse {
            offset: 0,
            message: format!(
                "sizeof_hdr is {} (little-endian) / {} (big-endian), expected {NIFTI_HEADER_SIZE}",
                LittleEndian::read_i32(&bytes[0..4]),
                BigEndian::read_i32(&bytes[0..4])
            ),
        })
    }
}

/// Decodes raw voxels into `f64`, applying `scl_slope`/`scl_inter`.
fn decode<B: ByteOrder>(raw: &[u8], dt: Datatype, n: usize, scaling: Option<(f64, f64)>) -> Vec<f64> {
    let mut out: Vec<f64> = match dt {
        Datatype::Uint8 => raw[..n].iter().map(|&v| v as f64).collect(),
        Datatype::Int16 => raw[..2 * n].chunks_exact(2).map(|c| B::read_i16(c) as f64).collect(),
        Datatype::Float32 => raw[..4 * n].chunks_exact(4).map(|c| B::read_f32(c) as f64).collect(),
        Datatype::Float64 => raw[..8 * n].chunks_exact(8).map(B::read_f64).collect(),
    };
    if let Some((slope, inter)) = scaling {
        for v in &mut out {
            *v = *v * slope + inter;
        }
    }
    out
}

/// Reads a file as `(header, spatial extents, frames, data)` with `data`
/// frame-major and each frame in C order over `(i, j, k)`.
fn read_raw(path: &Path) -> Result<(NiftiHeader, [usize; 3], usize, Vec<f64>)> {
    let bytes = read_file(path)?;
    let header = parse_header(&bytes)?;
    let (ext, frames) = header.extents();
    let voxels: usize = ext.iter().product();
    let n = voxels * frames;
    let (data_bytes, start, data_path): (Vec<u8>, usize, PathBuf) = if &header.magic == b"ni1\0" {
        let img = path.with_extension("img");
        (read_file(&img)?, header.vox_offset.max(0.0) as usize, img)
    } else {
        (bytes, header.vox_offset as usize, path.to_path_buf())
    };
    let need = n * header.datatype.bytes();
    if data_bytes.len() < start + need {
        return Err(Error::NiftiParse {
            offset: data_bytes.len(),
            message: format!(
                "{}: voxel data needs {need} bytes from offset {start}, file has {}",
                data_path.display(),
                data_bytes.len()
            ),
        });
    }
    let raw = &data_bytes[start..start + need];
    let file_order = if header.big_endian {
        decode::<BigEndian>(raw, header.datatype, n, header.scaling())
    } else {
        decode::<LittleEndian>(raw, header.datatype, n, header.scaling())
    };
    // File order has i fastest; store with k fastest.
    let [nx, ny, nz] = ext;
    let mut data = vec![0.0; n];
    for t in 0..frames {
        let (src, dst) = (&file_order[t * voxels..], &mut data[t * voxels..(t + 1) * voxels]);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    dst[(i * ny + j) * nz + k] = src[i + nx * (j + ny * k)];
                }
            }
        }
    }
    Ok((header, ext, frames, data))
}

fn spacing_of(h: &NiftiHeader) -> [f64; 3] {
    [1, 2, 3].map(|a| {
        let p = (h.pixdim[a] as f64).abs();
        if p > 0.0 && p.is_finite() {
            p
        } else {
            1.0
        }
    })
}

/// Reads a 3-D volume; 4-D files are averaged over time.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let series = read_series(path)?;
    if series.frames == 1 {
        return Ok(Volume {
            shape: series.shape,
            data: series.data,
            spacing: series.spacing,
            header: series.header,
        });
    }
    Ok(super::temporal_mean(&series))
}

/// Reads a 3-D or 4-D file as a series (3-D files have one frame).
pub fn read_series(path: &Path) -> Result<Series> {
    let (header, shape, frames, data) = read_raw(path)?;
    let tr = header.pixdim[4] as f64;
    Ok(Series {
        shape,
        frames,
        data,
        spacing: spacing_of(&header),
        repetition_time: if tr > 0.0 && tr.is_finite() { tr } else { 1.0 },
        header: Some(header),
    })
}

/// Output settings of [`write_nifti`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WriteOptions {
    pub datatype: Datatype,
    pub big_endian: bool,
    /// Stored values are `(v − scl_inter) / scl_slope`.
    pub scl_slope: f64,
    pub scl_inter: f64,
}

impl Default for WriteOptions {
    fn default() -> Self {
        WriteOptions {
            datatype: Datatype::Float32,
            big_endian: false,
            scl_slope: 1.0,
            scl_inter: 0.0,
        }
    }
}

impl WriteOptions {
    /// Datatype, byte order and scaling of an existing header.
    pub fn like(h: &NiftiHeader) -> Self {
        let (scl_slope, scl_inter) = h.scaling().unwrap_or((1.0, 0.0));
        WriteOptions {
            datatype: h.datatype,
            big_endian: h.big_endian,
            scl_slope,
            scl_inter,
        }
    }
}

fn build_header(
    template: Option<&NiftiHeader>,
    shape: [usize; 3],
    frames: usize,
    spacing: [f64; 3],
    tr: f64,
    opts: &WriteOptions,
) -> Result<NiftiHeader> {
    let mut dim = [1i16; 8];
    dim[0] = if frames > 1 { 4 } else { 3 };
    for (a, &e) in shape.iter().chain(std::iter::once(&frames)).enumerate() {
        dim[a + 1] = i16::try_from(e)
            .map_err(|_| Error::Contract(format!("extent {e} does not fit a NIfTI-1 header")))?;
    }
    let mut pixdim = [1f32; 8];
    for a in 0..3 {
        pixdim[a + 1] = spacing[a] as f32;
    }
    pixdim[4] = tr as f32;
    let mut h = NiftiHeader {
        dim,
        datatype: opts.datatype,
        pixdim,
        vox_offset: SINGLE_FILE_OFFSET as f32,
        scl_slope: opts.scl_slope as f32,
        scl_inter: opts.scl_inter as f32,
        xyzt_units: 2 | 8,
        descrip: String::new(),
        qform_code: 0,
        sform_code: 1,
        quatern: [0.0; 3],
        qoffset: [0.0; 3],
        srow: [
            [spacing[0] as f32, 0.0, 0.0, 0.0],
            [0.0, spacing[1] as f32, 0.0, 0.0],
            [0.0, 0.0, spacing[2] as f32, 0.0],
        ],
        magic: *b"n+1\0",
        big_endian: opts.big_endian,
    };
    if let Some(t) = template {
        h.pixdim[0] = t.pixdim[0];
        h.xyzt_units = t.xyzt_units;
        h.descrip = t.descrip.clone();
        h.qform_code = t.qform_code;
        h.sform_code = t.sform_code;
        h.quatern = t.quatern;
        h.qoffset = t.qoffset;
        h.srow = t.srow;
    }
    Ok(h)
}

fn encode_values<B: ByteOrder>(values: &[f64], opts: &WriteOptions, out: &mut Vec<u8>) -> Result<()> {
    let scaled = opts.scl_slope != 1.0 || opts.scl_inter != 0.0;
    if opts.scl_slope == 0.0 || !opts.scl_slope.is_finite() || !opts.scl_inter.is_finite() {
        return Err(Error::Contract(format!("invalid scaling slope {} inter {}", opts.scl_slope, opts.scl_inter)));
    }
    let range = opts.datatype.range();
    let mut buf = [0u8; 8];
    for &v in values {
        let raw = if scaled { (v - opts.scl_inter) / opts.scl_slope } else { v };
        if let Some((lo, hi)) = range {
            let r = raw.round();
            if !(lo..=hi).contains(&r) {
                return Err(Error::Contract(format!("value {v} does not fit {:?}", opts.datatype)));
            }
            match opts.datatype {
                Datatype::Uint8 => out.push(r as u8),
                _ => {
                    B::write_i16(&mut buf, r as i16);
                    out.extend_from_slice(&buf[..2]);
                }
            }
        } else if opts.datatype == Datatype::Float32 {
            B::write_f32(&mut buf, raw as f32);
            out.extend_from_slice(&buf[..4]);
        } else {
            B::write_f64(&mut buf, raw);
            out.extend_from_slice(&buf[..8]);
        }
    }
    Ok(())
}

fn write_raw(
    path: &Path,
    header: &NiftiHeader,
    shape: [usize; 3],
    frames: usize,
    data: &[f64],
    opts: &WriteOptions,
) -> Result<()> {
    let voxels: usize = shape.iter().product();
    let mut bytes = if opts.big_endian {
        header.encode::<BigEndian>()
    } else {
        header.encode::<LittleEndian>()
    };
    bytes.resize(SINGLE_FILE_OFFSET, 0);
    bytes.reserve(data.len() * opts.datatype.bytes());
    let [nx, ny, nz] = shape;
    let mut file_order = vec![0.0; voxels];
    for t in 0..frames {
        let src = &data[t * voxels..(t + 1) * voxels];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    file_order[i + nx * (j + ny * k)] = src[(i * ny + j) * nz + k];
                }
            }
        }
        if opts.big_endian {
            encode_values::<BigEndian>(&file_order, opts, &mut bytes)?;
        } else {
            encode_values::<LittleEndian>(&file_order, opts, &mut bytes)?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a single-file (`n+1`) NIfTI-1 volume. Orientation fields are
/// carried over from `vol.header` when present.
pub fn write_nifti(vol: &Volume, path: &Path, opts: &WriteOptions) -> Result<()> {
    let header = build_header(vol.header.as_ref(), vol.shape, 1, vol.spacing, 1.0, opts)?;
    write_raw(path, &header, vol.shape, 1, &vol.data, opts)
}

/// Writes a 4-D series.
pub fn write_series(series: &Series, path: &Path, opts: &WriteOptions) -> Result<()> {
    let header = build_header(
        series.header.as_ref(),
        series.shape,
        series.frames,
        series.spacing,
        series.repetition_time,
        opts,
    )?;
    write_raw(path, &header, series.shape, series.frames, &series.data, opts)
}
