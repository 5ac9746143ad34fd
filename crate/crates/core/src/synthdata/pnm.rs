//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::path::Path;

use super::render::{ParseMap, RgbImage};
use crate::error::{Error, Result};

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::corrupt(
            path,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::corrupt(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::corrupt(path, "expected a number in header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::corrupt(path, "header number too large"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::corrupt(path, "missing whitespace after header")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::corrupt(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::corrupt(path, format!("unsupported maxval {maxval}")));
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize, path: &Path) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let data = &bytes[h.data_start..];
    if data.len() != need {
        return Err(Error::corrupt(
            path,
            format!("expected {need} sample bytes, found {}", data.len()),
        ));
    }
    if let Some(&v) = data.iter().find(|&&v| v as usize > h.maxval) {
        return Err(Error::corrupt(path, format!("sample {v} exceeds maxval {}", h.maxval)));
    }
    Ok(data)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let h = parse_header(bytes, b"P6", path)?;
    let data = payload(bytes, &h, 3, path)?.to_vec();
    Ok(RgbImage {
        height: h.height,
        width: h.width,
        data,
    })
}

pub fn encode_pgm(map: &ParseMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend_from_slice(&map.labels);
    out
}

/// Reads a label map and rejects labels outside `0..num_classes`.
pub fn decode_pgm(bytes: &[u8], num_classes: usize, path: &Path) -> Result<ParseMap> {
    let h = parse_header(bytes, b"P5", path)?;
    let labels = payload(bytes, &h, 1, path)?.to_vec();
    let map = ParseMap::new(h.height, h.width, labels)?;
    map.validate(num_classes)?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_written_pgm_with_comment() {
        let mut bytes = b"P5\n# parser output\n4 2\n7\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let map = decode_pgm(&bytes, 8, Path::new("x.pgm")).unwrap();
        assert_eq!((map.height, map.width), (2, 4));
        assert_eq!(map.get(1, 3), 7);
    }

    #[test]
    fn label_out_of_range() {
        let map = ParseMap::new(1, 3, vec![0, 8, 1]).unwrap();
        let err = decode_pgm(&encode_pgm(&map), 8, Path::new("x.pgm")).unwrap_err();
        assert!(matches!(err, Error::ClassRange { label: 8, num_classes: 8 }));
    }

    #[test]
    fn corrupt_headers() {
        let p = Path::new("x");
        assert!(decode_ppm(b"P5\n1 1\n255\n\0", p).is_err());
        assert!(decode_ppm(b"P6\n1 1\n255\n\0\0", p).is_err());
        assert!(decode_ppm(b"P6\n1 x\n255\n\0\0\0", p).is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0", p).is_err());
        assert!(decode_ppm(b"P6\n1 1\n255\n\0\0\0", p).is_ok());
    }

    #[test]
    fn ppm_round_trip() {
        let img = RgbImage {
            height: 2,
            width: 2,
            data: (0..12).map(|v| v * 20).collect(),
        };
        assert_eq!(decode_ppm(&encode_ppm(&img), Path::new("x")).unwrap(), img);
    }
}
