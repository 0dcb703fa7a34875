//! Bit-exact file formats and 8-bit image export.
//!
//! `XVOL`: magic, version u16, dims 3xu32, spacing 3xf32, unit u8, dtype u8
//! (0 = f32), then the payload little-endian in storage order (i fastest).
//! `XIMG` mirrors it for radiographs with dims 2xu32 and a domain byte.
//! All integers and floats are little-endian. Spacing is stored at f32
//! precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::CoreError;
use crate::projector::{Radiograph, RadiographDomain};
use crate::volume::{Unit, Volume};

const XVOL_MAGIC: &[u8; 4] = b"XVOL";
const XIMG_MAGIC: &[u8; 4] = b"XIMG";
const FORMAT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

struct Reader<R: Read> {
    inner: R,
    path: std::path::PathBuf,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], CoreError> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| CoreError::format(&self.path, "truncated file"))?;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16, CoreError> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32, CoreError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f32(&mut self) -> Result<f32, CoreError> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }

    fn u8(&mut self) -> Result<u8, CoreError> {
        Ok(self.bytes::<1>()?[0])
    }

    /// Read exactly `n` f32 values and require EOF afterwards.
    fn f32_payload(&mut self, n: usize) -> Result<Vec<f32>, CoreError> {
        let mut raw = vec![0u8; n * 4];
        self.inner
            .read_exact(&mut raw)
            .map_err(|_| CoreError::format(&self.path, "payload shorter than dims promise"))?;
        let mut trailing = [0u8; 1];
        match self.inner.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => {
                return Err(CoreError::format(
                    &self.path,
                    "payload longer than dims promise",
                ))
            }
            Err(e) => return Err(CoreError::io(&self.path, e)),
        }
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Write a volume in XVOL format.
pub fn save_volume(path: &Path, v: &Volume) -> Result<(), CoreError> {
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| CoreError::io(path, e);
    w.write_all(XVOL_MAGIC).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    let (h, wd, d) = v.dims();
    for dim in [h, wd, d] {
        w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
    }
    let (sx, sy, sz) = v.spacing();
    for s in [sx, sy, sz] {
        w.write_all(&(s as f32).to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&[v.unit().to_tag(), DTYPE_F32]).map_err(io_err)?;
    for val in v.values() {
        w.write_all(&val.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Read a volume from XVOL format, validating header consistency.
pub fn load_volume(path: &Path) -> Result<Volume, CoreError> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path: path.to_path_buf(),
    };
    let magic: [u8; 4] = r.bytes()?;
    if &magic != XVOL_MAGIC {
        return Err(CoreError::format(path, "bad magic, not an XVOL file"));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(CoreError::format(path, format!("unsupported version {version}")));
    }
    let dims = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let spacing = (r.f32()? as f64, r.f32()? as f64, r.f32()? as f64);
    let unit = Unit::from_tag(r.u8()?)
        .ok_or_else(|| CoreError::format(path, "unknown unit tag"))?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(CoreError::format(path, format!("unsupported dtype {dtype}")));
    }
    let n = dims
        .0
        .checked_mul(dims.1)
        .and_then(|x| x.checked_mul(dims.2))
        .ok_or_else(|| CoreError::format(path, "dims overflow"))?;
    let values = r.f32_payload(n)?;
    Volume::new(dims, spacing, unit, values)
}

/// Write a radiograph in XIMG format (f32 payload).
pub fn save_radiograph(path: &Path, r: &Radiograph) -> Result<(), CoreError> {
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| CoreError::io(path, e);
    w.write_all(XIMG_MAGIC).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    for dim in [r.dims.0, r.dims.1] {
        w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&[r.domain.to_tag(), DTYPE_F32]).map_err(io_err)?;
    for val in &r.values {
        w.write_all(&(*val as f32).to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Read a radiograph from XIMG format.
pub fn load_radiograph(path: &Path) -> Result<Radiograph, CoreError> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path: path.to_path_buf(),
    };
    let magic: [u8; 4] = r.bytes()?;
    if &magic != XIMG_MAGIC {
        return Err(CoreError::format(path, "bad magic, not an XIMG file"));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(CoreError::format(path, format!("unsupported version {version}")));
    }
    let dims = (r.u32()? as usize, r.u32()? as usize);
    let domain = RadiographDomain::from_tag(r.u8()?)
        .ok_or_else(|| CoreError::format(path, "unknown domain tag"))?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(CoreError::format(path, format!("unsupported dtype {dtype}")));
    }
    let n = dims
        .0
        .checked_mul(dims.1)
        .ok_or_else(|| CoreError::format(path, "dims overflow"))?;
    let values = r.f32_payload(n)?;
    Radiograph::new(dims, domain, values.into_iter().map(|v| v as f64).collect())
}

/// Min-max scale to u8. A constant image maps to all zeros.
fn gray8(values: &[f64]) -> Vec<u8> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    let inv = 255.0 / (hi - lo);
    values
        .iter()
        .map(|&v| ((v - lo) * inv).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Rows-by-cols image, row-major, exported as 8-bit PGM or PNG depending on
/// the extension (default PGM).
pub fn export_gray(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<(), CoreError> {
    if values.len() != rows * cols {
        return Err(CoreError::dims(format!(
            "image payload {} != {rows}x{cols}",
            values.len()
        )));
    }
    let pixels = gray8(values);
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => {
            let img = image::GrayImage::from_raw(cols as u32, rows as u32, pixels)
                .ok_or_else(|| CoreError::format(path, "png buffer construction failed"))?;
            img.save(path)
                .map_err(|e| CoreError::format(path, format!("png encode: {e}")))
        }
        _ => {
            let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
            let mut w = BufWriter::new(file);
            write!(w, "P5\n{cols} {rows}\n255\n").map_err(|e| CoreError::io(path, e))?;
            w.write_all(&pixels).map_err(|e| CoreError::io(path, e))?;
            w.flush().map_err(|e| CoreError::io(path, e))
        }
    }
}

/// Export a radiograph as an 8-bit image; pixel rows follow the i axis.
pub fn export_radiograph_image(path: &Path, r: &Radiograph) -> Result<(), CoreError> {
    let (h, w) = r.dims;
    // i-fastest storage -> row-major image rows over i.
    let mut rowmajor = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            rowmajor[i * w + j] = r.at(i, j);
        }
    }
    export_gray(path, h, w, &rowmajor)
}

/// Which anatomical plane a 2D slice cuts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlicePlane {
    /// Fixed i (perpendicular to superior–inferior).
    Transverse,
    /// Fixed j (perpendicular to left–right).
    Sagittal,
    /// Fixed k (perpendicular to anterior–posterior).
    Coronal,
}

/// Extract a 2D slice as (rows, cols, row-major values).
pub fn volume_slice(
    v: &Volume,
    plane: SlicePlane,
    index: usize,
) -> Result<(usize, usize, Vec<f64>), CoreError> {
    let (h, w, d) = v.dims();
    let check = |idx: usize, bound: usize| {
        if idx >= bound {
            Err(CoreError::invalid(format!(
                "slice index {idx} out of range (< {bound})"
            )))
        } else {
            Ok(())
        }
    };
    match plane {
        SlicePlane::Transverse => {
            check(index, h)?;
            let mut out = vec![0.0; w * d];
            for k in 0..d {
                for j in 0..w {
                    out[k * w + j] = v.at(index, j, k) as f64;
                }
            }
            Ok((d, w, out))
        }
        SlicePlane::Sagittal => {
            check(index, w)?;
            let mut out = vec![0.0; h * d];
            for i in 0..h {
                for k in 0..d {
                    out[i * d + k] = v.at(i, index, k) as f64;
                }
            }
            Ok((h, d, out))
        }
        SlicePlane::Coronal => {
            check(index, d)?;
            let mut out = vec![0.0; h * w];
            for i in 0..h {
                for j in 0..w {
                    out[i * w + j] = v.at(i, j, index) as f64;
                }
            }
            Ok((h, w, out))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Unit, Volume};

    #[test]
    fn volume_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.xvol");
        let values: Vec<f32> = (0..32 * 32 * 32).map(|i| (i as f32).sin()).collect();
        let v = Volume::new((32, 32, 32), (2.5, 2.5, 2.5), Unit::Hu, values).unwrap();
        save_volume(&path, &v).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.xvol");
        let v = Volume::filled((16, 16, 16), (1.0, 1.0, 1.0), Unit::Hu, 1.0).unwrap();
        save_volume(&path, &v).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_volume(&path).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.xvol");
        std::fs::write(&path, b"NOPE0000000000000000000000").unwrap();
        assert!(load_volume(&path).is_err());
    }

    #[test]
    fn radiograph_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ximg");
        let vals: Vec<f64> = (0..12 * 8).map(|i| (i as f32 * 0.25) as f64).collect();
        let r = Radiograph::new((12, 8), RadiographDomain::LineIntegral, vals).unwrap();
        save_radiograph(&path, &r).unwrap();
        let back = load_radiograph(&path).unwrap();
        assert_eq!(r, back);
    }

    #[test]
    fn slice_extraction_shapes() {
        let v = Volume::filled((4, 5, 6), (1.0, 1.0, 1.0), Unit::Hu, 0.0).unwrap();
        assert_eq!(volume_slice(&v, SlicePlane::Transverse, 0).unwrap().0, 6);
        assert_eq!(volume_slice(&v, SlicePlane::Sagittal, 0).unwrap().1, 6);
        let (r, c, _) = volume_slice(&v, SlicePlane::Coronal, 5).unwrap();
        assert_eq!((r, c), (4, 5));
        assert!(volume_slice(&v, SlicePlane::Coronal, 6).is_err());
    }

    #[test]
    fn pgm_export_writes_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        export_gray(&path, 2, 3, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), "P5\n3 2\n255\n".len() + 6);
    }
}
