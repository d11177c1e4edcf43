//! Minimal PGM (P5) / PPM (P6) reading and writing.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Writes an 8-bit or 16-bit P5 graymap. Values must be `<= maxval`;
/// 16-bit samples are big-endian per the format.
pub fn write_pgm(path: &Path, width: usize, height: usize, maxval: u16, values: &[u16]) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    f.write_all(encode_pgm(width, height, maxval, values)?.as_slice())?;
    Ok(())
}

pub fn encode_pgm(width: usize, height: usize, maxval: u16, values: &[u16]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::Format("pgm size mismatch".into()));
    }
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    if maxval < 256 {
        out.extend(values.iter().map(|&v| v as u8));
    } else {
        for &v in values {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    Ok(out)
}

/// Writes an 8-bit P6 pixmap from interleaved RGB bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Format("ppm size mismatch".into()));
    }
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(rgb)?;
    Ok(())
}

pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// 1 (P5) or 3 (P6) samples per pixel, row-major interleaved.
    pub channels: usize,
    pub samples: Vec<u16>,
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_pnm(&buf)
}

pub fn decode_pnm(buf: &[u8]) -> Result<Pnm> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("pnm: truncated header at byte {start}")));
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("pnm: unsupported magic {other:?}"))),
    };
    let parse = |s: String| -> Result<usize> {
        s.parse().map_err(|_| Error::Format(format!("pnm: bad header token {s:?}")))
    };
    let width = parse(token()?)?;
    let height = parse(token()?)?;
    let maxval = parse(token()?)? as u16;
    pos += 1; // single whitespace after maxval
    let n = width * height * channels;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    if buf.len() < pos + n * bytes_per {
        return Err(Error::Format(format!(
            "pnm: truncated pixel data at byte {} (need {})",
            buf.len(),
            pos + n * bytes_per
        )));
    }
    let samples = if bytes_per == 1 {
        buf[pos..pos + n].iter().map(|&b| b as u16).collect()
    } else {
        buf[pos..pos + 2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Ok(Pnm {
        width,
        height,
        maxval,
        channels,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_8bit_roundtrip() {
        let vals: Vec<u16> = (0..12).map(|v| (v * 20) as u16).collect();
        let buf = encode_pgm(4, 3, 255, &vals).unwrap();
        let img = decode_pnm(&buf).unwrap();
        assert_eq!((img.width, img.height, img.maxval, img.channels), (4, 3, 255, 1));
        assert_eq!(img.samples, vals);
    }

    #[test]
    fn pgm_16bit_roundtrip() {
        let vals: Vec<u16> = vec![0, 1, 300, 65535];
        let buf = encode_pgm(2, 2, 65535, &vals).unwrap();
        let img = decode_pnm(&buf).unwrap();
        assert_eq!(img.maxval, 65535);
        assert_eq!(img.samples, vals);
    }

    #[test]
    fn ppm_roundtrip_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let rgb = [10u8, 20, 30, 40, 50, 60];
        write_ppm(&p, 2, 1, &rgb).unwrap();
        let img = read_pnm(&p).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 3));
        assert_eq!(img.samples, rgb.iter().map(|&v| v as u16).collect::<Vec<_>>());
    }

    #[test]
    fn header_comments_and_whitespace_are_tolerated() {
        let buf = b"P5 # comment\n# another comment\n 2\t2 # inline\n255\n\x01\x02\x03\x04".to_vec();
        let img = decode_pnm(&buf).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.samples, vec![1, 2, 3, 4]);
    }

    #[test]
    fn bad_magic_and_truncation_are_errors() {
        assert!(decode_pnm(b"P7\n1 1\n255\n\x00").is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x01\x02").is_err());
    }
}
