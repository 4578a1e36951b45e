//! Little-endian helpers shared by the binary file formats.
//!
//! Three formats are built on these: spectrogram caches (`EVXS`), frame
//! logits (`EVXL`) and model checkpoints (`EVXM`). All start with a four
//! byte magic followed by a `u32` version.

use std::io::{Read, Write};

use crate::{Error, Result};

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f32<W: Write>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f32s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f32>) -> Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, len_u32(s.len())?)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit in u32")))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated payload while reading {what}"))
        } else {
            Error::RawIo(e)
        }
    })
}

pub fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_f32s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_str<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let n = read_u32(r, what)? as usize;
    if n > 1 << 20 {
        return Err(Error::Format(format!("{what}: string length {n} is implausible")));
    }
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::Format(format!("{what}: invalid utf-8")))
}

/// Reads and checks the magic and version header.
pub fn expect_header<R: Read>(r: &mut R, magic: &[u8; 4], version: u32) -> Result<()> {
    let mut m = [0u8; 4];
    read_exact(r, &mut m, "magic")?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = read_u32(r, "version")?;
    if v != version {
        return Err(Error::Format(format!(
            "unsupported version {v}, expected {version}"
        )));
    }
    Ok(())
}

/// Fails if any bytes remain in the reader.
pub fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}
