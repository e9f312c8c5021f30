//! Shared binary container format and image dump helpers.
//!
//! Every binary artifact in the pipeline (latent sidecar, embedding codec,
//! mapper checkpoints, raw float map dumps) starts with the same 16-byte
//! header: a 6-byte ASCII magic padded with two NUL bytes to 8, then two
//! little-endian `u32` fields whose meaning depends on the magic. Payloads
//! are little-endian IEEE-754 `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Latent sidecar: fields are (gaussian count, latent dim).
pub const MAGIC_LATENTS: &[u8; 6] = b"RGLAT1";
/// Embedding codec: fields are (input dim, compressed dim).
pub const MAGIC_CODEC: &[u8; 6] = b"RGPCA1";
/// Mapper checkpoint: fields are (layer count, input dim).
pub const MAGIC_MAPPER: &[u8; 6] = b"RGMLP1";
/// Raw float map dump: fields are (pixel count, channels).
pub const MAGIC_MAP: &[u8; 6] = b"RGMAP1";

pub fn write_header(w: &mut impl Write, magic: &[u8; 6], a: u32, b: u32) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&[0u8; 2])?;
    w.write_all(&a.to_le_bytes())?;
    w.write_all(&b.to_le_bytes())
}

pub fn read_header(r: &mut impl Read, magic: &[u8; 6]) -> std::io::Result<std::result::Result<(u32, u32), String>> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    if &head[0..6] != magic || head[6..8] != [0, 0] {
        return Ok(Err(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&head[0..8])
        )));
    }
    let a = u32::from_le_bytes(head[8..12].try_into().unwrap());
    let b = u32::from_le_bytes(head[12..16].try_into().unwrap());
    Ok(Ok((a, b)))
}

pub fn write_f32s(w: &mut impl Write, values: impl IntoIterator<Item = f32>) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f32s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes `count * dim` values (converted to f32) under the given magic.
pub fn save_raw(path: &Path, magic: &[u8; 6], count: u32, dim: u32, data: &[f64]) -> Result<()> {
    assert_eq!(data.len(), count as usize * dim as usize, "payload shape mismatch");
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = write_header(&mut w, magic, count, dim)
        .and_then(|_| write_f32s(&mut w, data.iter().map(|&v| v as f32)))
        .and_then(|_| w.flush());
    res.map_err(|e| Error::io(path, e))
}

/// Reads a raw container back; validates magic and payload length.
pub fn load_raw(path: &Path, magic: &[u8; 6]) -> Result<(u32, u32, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let (count, dim) = read_header(&mut r, magic)
        .map_err(|e| Error::io(path, e))?
        .map_err(|m| Error::format(path, m))?;
    let n = count as usize * dim as usize;
    let values = read_f32s(&mut r, n).map_err(|e| {
        Error::format(path, format!("payload shorter than {count}x{dim} f32: {e}"))
    })?;
    let mut tail = [0u8; 1];
    if r.read(&mut tail).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, format!("trailing bytes after {count}x{dim} payload")));
    }
    Ok((count, dim, values.into_iter().map(f64::from).collect()))
}

/// Dumps an RGB image (values clamped to [0,1]) as an 8-bit PNG.
pub fn save_color_png(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3, "rgb buffer shape mismatch");
    let raw: Vec<u8> = rgb
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, raw)
        .expect("buffer length matches dimensions");
    img.save(path)
        .map_err(|e| Error::format(path, format!("png encode failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
        save_raw(&path, MAGIC_LATENTS, 3, 4, &data).unwrap();
        let (count, dim, back) = load_raw(&path, MAGIC_LATENTS).unwrap();
        assert_eq!((count, dim), (3, 4));
        assert_eq!(back, data);
    }

    #[test]
    fn header_is_sixteen_bytes() {
        let mut buf = Vec::new();
        write_header(&mut buf, MAGIC_LATENTS, 7, 32).unwrap();
        assert_eq!(buf.len(), 16);
        assert_eq!(&buf[0..8], b"RGLAT1\0\0");
        assert_eq!(&buf[8..12], &7u32.to_le_bytes());
        assert_eq!(&buf[12..16], &32u32.to_le_bytes());
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        save_raw(&path, MAGIC_LATENTS, 1, 1, &[0.0]).unwrap();
        let err = load_raw(&path, MAGIC_CODEC).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let mut w = BufWriter::new(File::create(&path).unwrap());
        write_header(&mut w, MAGIC_LATENTS, 2, 4, ).unwrap();
        write_f32s(&mut w, [1.0f32; 5]).unwrap(); // 5 of 8 values
        w.flush().unwrap();
        drop(w);
        assert!(matches!(load_raw(&path, MAGIC_LATENTS), Err(Error::Format { .. })));
    }
}
