//! Binary PPM (P6) and PGM (P5) images with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, interleaved.
    pub pixels: Vec<u8>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<RawImage> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos).ok_or_else(|| format_err(path, "missing magic number"))?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        other => return Err(format_err(path, format!("unsupported magic {:?}", String::from_utf8_lossy(other)))),
    };
    let mut field = |name: &str| -> Result<usize> {
        let t = token(bytes, &mut pos).ok_or_else(|| format_err(path, format!("missing {name}")))?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| format_err(path, format!("invalid {name} {:?}", String::from_utf8_lossy(t))))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(format_err(path, format!("empty image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(format_err(path, format!("maxval {maxval} unsupported, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, "header not terminated"));
    }
    pos += 1;
    let need = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() != need {
        return Err(format_err(path, format!("raster has {} bytes, expected {need}", raster.len())));
    }
    Ok(RawImage { width, height, channels, pixels: raster.to_vec() })
}

pub fn encode(img: &RawImage) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read(path: &Path) -> Result<RawImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, img: &RawImage) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_small_pgm() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 255, 0]);
        let img = decode(&bytes, Path::new("m.pgm")).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 1));
        assert_eq!(img.pixels, vec![0, 255, 255, 0]);
    }

    #[test]
    fn header_comments_and_round_trip() {
        let mut bytes = b"P6 # rgb\n# size follows\n1 2 255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!(img.pixels, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(decode(&encode(&img), Path::new("y.ppm")).unwrap(), img);
    }

    #[test]
    fn malformed_headers() {
        let p = Path::new("bad.pgm");
        assert!(decode(b"P2\n1 1\n255\n\0", p).is_err());
        assert!(decode(b"P5\n1 1\n65535\n\0\0", p).is_err());
        assert!(decode(b"P5\n2 2\n255\n\0", p).is_err());
        assert!(decode(b"P5\nx 2\n255\n\0", p).is_err());
        let msg = decode(b"P5\n0 2\n255\n", p).unwrap_err().to_string();
        assert!(msg.contains("bad.pgm"), "{msg}");
    }
}
