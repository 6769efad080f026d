//! On-disk tensor formats.
//!
//! Tensor files ("NTSR"): a 16-byte header — magic `NTSR`, format version
//! u32, ndim u32, reserved u32 — followed by ndim u32 dims and the f32
//! payload, everything little-endian, data in row-major NCHW order.
//!
//! A minimal binary PPM (P6, 8-bit) reader is provided for the detection
//! demo; pixels are scaled to [0, 1] and normalized per channel.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"NTSR";
pub const TENSOR_FORMAT_VERSION: u32 = 1;

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut file = fs::File::create(path)?;
    let mut buf: Vec<u8> = Vec::with_capacity(16 + 16 + tensor.len() * 4);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&4u32.to_le_bytes()); // ndim
    buf.extend_from_slice(&0u32.to_le_bytes()); // reserved
    for d in tensor.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let err = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[0..4] != TENSOR_MAGIC {
        return Err(err("not a tensor file (bad magic)"));
    }
    let u32_at = |off: usize| u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
    if u32_at(4) != TENSOR_FORMAT_VERSION {
        return Err(err("unsupported tensor format version"));
    }
    let ndim = u32_at(8) as usize;
    if ndim != 4 {
        return Err(err("expected a 4-dimensional tensor"));
    }
    if bytes.len() < 16 + 4 * ndim {
        return Err(err("truncated header"));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32_at(16 + 4 * i) as usize;
    }
    let count: usize = dims.iter().product();
    let data_start = 16 + 4 * ndim;
    if bytes.len() != data_start + 4 * count {
        return Err(err("payload length does not match dims"));
    }
    let data: Vec<f32> = bytes[data_start..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(err("payload contains non-finite values"));
    }
    Tensor::new(dims, data)
}

/// Read a binary (P6) PPM image into a 1x3xHxW tensor. Each channel value
/// becomes `(pixel/255 - mean[c]) / std[c]`.
pub fn read_ppm(path: &Path, mean: [f32; 3], std: [f32; 3]) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let err = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if std.iter().any(|&s| s == 0.0) {
        return Err(Error::Invalid("std must be non-zero".into()));
    }

    // header: "P6", whitespace/comment separated width, height, maxval
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated ppm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token()? != "P6" {
        return Err(err("only binary (P6) ppm images are supported"));
    }
    let width: usize = token()?.parse().map_err(|_| err("bad width"))?;
    let height: usize = token()?.parse().map_err(|_| err("bad height"))?;
    let maxval: usize = token()?.parse().map_err(|_| err("bad maxval"))?;
    if maxval != 255 {
        return Err(err("only 8-bit ppm images are supported"));
    }
    pos += 1; // single whitespace after maxval
    let expected = width * height * 3;
    if bytes.len() < pos + expected {
        return Err(err("truncated pixel data"));
    }
    let pixels = &bytes[pos..pos + expected];
    let mut data = vec![0.0f32; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let v = pixels[(y * width + x) * 3 + c] as f32 / 255.0;
                data[(c * height + y) * width + x] = (v - mean[c]) / std[c];
            }
        }
    }
    Tensor::new([1, 3, height, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_file_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let t = Tensor::new(
            [2, 3, 4, 5],
            (0..120).map(|_| rng.random_range(-10.0f32..10.0)).collect(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ntsr");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.dims(), t.dims());
        let bits_a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn tensor_reader_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ntsr");
        fs::write(&path, b"not a tensor").unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format(_))));
    }

    #[test]
    fn ppm_reader_normalizes_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        // 2x1 image: red pixel then blue pixel, with a header comment
        let mut bytes = b"P6\n# test\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        fs::write(&path, bytes).unwrap();
        let t = read_ppm(&path, [0.5; 3], [0.5; 3]).unwrap();
        assert_eq!(t.dims(), [1, 3, 1, 2]);
        assert_eq!(t.at(0, 0, 0, 0), 1.0); // (1.0 - 0.5) / 0.5
        assert_eq!(t.at(0, 0, 0, 1), -1.0);
        assert_eq!(t.at(0, 2, 0, 1), 1.0);
    }
}
