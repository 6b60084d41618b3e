//! `ITS1` token stream files: raw per-level codes, frame-major and
//! quantizer-minor, independent of the global id layout.
//!
//! ```text
//! "ITS1" | version u16 | Q u16 | K u16 | frame_rate_hz*100 u32 | T' u32 | Q*T' x u16 codes
//! ```
//! All integers little-endian.

use std::path::Path;

use crate::binio::{read_file, write_file, LeReader, LeWriter};
use crate::codec::TokenGrid;
use crate::error::{Error, Result};

pub const STREAM_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"ITS1";
const HEADER_LEN: usize = 4 + 2 + 2 + 2 + 4 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    pub grid: TokenGrid,
    pub codebook_size: u16,
    pub frame_rate_hz: f64,
}

pub fn encode_stream(stream: &TokenStream) -> Result<Vec<u8>> {
    let grid = &stream.grid;
    let q = u16::try_from(grid.levels()).map_err(|_| Error::range("Q", "exceeds 16 bits"))?;
    let frames = u32::try_from(grid.frames()).map_err(|_| Error::range("T'", "exceeds 32 bits"))?;
    if let Some(max) = grid.max_code() {
        if max >= stream.codebook_size {
            return Err(Error::range(
                "code",
                format!("{max} >= K={}", stream.codebook_size),
            ));
        }
    }
    let rate = (stream.frame_rate_hz * 100.0).round();
    if !(0.0..=u32::MAX as f64).contains(&rate) {
        return Err(Error::range("frame rate", format!("{}", stream.frame_rate_hz)));
    }
    let mut w = LeWriter::new();
    w.bytes(MAGIC)
        .u16(STREAM_VERSION)
        .u16(q)
        .u16(stream.codebook_size)
        .u32(rate as u32)
        .u32(frames);
    for t in 0..grid.frames() {
        for level in 0..grid.levels() {
            w.u16(grid.code(level, t));
        }
    }
    Ok(w.into_inner())
}

pub fn decode_stream(bytes: &[u8], path: &Path) -> Result<TokenStream> {
    let mut r = LeReader::new(bytes, path);
    r.expect_magic(MAGIC)?;
    let version = r.u16()?;
    if version != STREAM_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let q = r.u16()? as usize;
    let k = r.u16()?;
    let rate = r.u32()?;
    let frames = r.u32()? as usize;
    if q == 0 {
        return Err(r.error("header Q=0"));
    }
    if k < 2 {
        return Err(r.error(format!("header K={k} < 2")));
    }
    let payload = r.remaining();
    if !payload.is_multiple_of(2 * q) {
        return Err(r.error(format!(
            "truncated payload: {payload} bytes is not a whole number of {q}-code frames"
        )));
    }
    if payload != 2 * q * frames {
        return Err(r.error(format!(
            "truncated payload: header declares {frames} frames, payload holds {}",
            payload / (2 * q)
        )));
    }
    let mut grid = TokenGrid::zeros(q, frames);
    for t in 0..frames {
        for level in 0..q {
            let offset = r.position();
            let code = r.u16()?;
            if code >= k {
                return Err(r.error(format!(
                    "code {code} >= K={k} at byte offset {offset} (frame {t}, level {})",
                    level + 1
                )));
            }
            grid.set(level, t, code);
        }
    }
    debug_assert_eq!(HEADER_LEN + payload, bytes.len());
    Ok(TokenStream {
        grid,
        codebook_size: k,
        frame_rate_hz: rate as f64 / 100.0,
    })
}

pub fn write_stream(path: &Path, stream: &TokenStream) -> Result<()> {
    write_file(path, &encode_stream(stream)?)
}

pub fn read_stream(path: &Path) -> Result<TokenStream> {
    decode_stream(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TokenStream {
        TokenStream {
            grid: TokenGrid::from_rows(&[vec![1, 2, 3], vec![4, 5, 6], vec![0, 63, 7], vec![9, 9, 9]])
                .unwrap(),
            codebook_size: 64,
            frame_rate_hz: 12.5,
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode_stream(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"ITS1");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 4);
        assert_eq!(u16::from_le_bytes([bytes[8], bytes[9]]), 64);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 1250);
        assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 3);
        // frame-major: frame 0 holds levels 1..4 = 1,4,0,9
        let first: Vec<u16> = bytes[18..26]
            .chunks(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        assert_eq!(first, vec![1, 4, 0, 9]);
        assert_eq!(bytes.len(), 18 + 2 * 12);
    }

    #[test]
    fn out_of_range_code_names_offset() {
        let mut bytes = encode_stream(&sample()).unwrap();
        // frame 1, level 2 sits at 18 + 2*(4+1)
        let off = 18 + 2 * 5;
        bytes[off..off + 2].copy_from_slice(&64u16.to_le_bytes());
        let err = decode_stream(&bytes, Path::new("s.its")).unwrap_err().to_string();
        assert!(err.contains(&format!("byte offset {off}")), "{err}");
    }

    #[test]
    fn partial_frame_payload_is_truncation() {
        let mut bytes = encode_stream(&sample()).unwrap();
        bytes.truncate(bytes.len() - 2);
        let err = decode_stream(&bytes, Path::new("s.its")).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        let mut short = encode_stream(&sample()).unwrap();
        short.truncate(short.len() - 8);
        assert!(decode_stream(&short, Path::new("s.its")).is_err());
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_stream(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(decode_stream(&bytes, Path::new("s")).is_err());
        let mut bytes = encode_stream(&sample()).unwrap();
        bytes[4] = 2;
        assert!(decode_stream(&bytes, Path::new("s")).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.its");
        write_stream(&path, &sample()).unwrap();
        assert_eq!(read_stream(&path).unwrap(), sample());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(q in 1usize..6, t in 0usize..30, k in 2u16..300, seed in any::<u64>()) {
            let mut codes = Vec::with_capacity(q * t);
            let mut s = seed;
            for _ in 0..q * t {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                codes.push(((s >> 33) % k as u64) as u16);
            }
            let stream = TokenStream {
                grid: TokenGrid::new(q, t, codes).unwrap(),
                codebook_size: k,
                frame_rate_hz: 12.5,
            };
            let bytes = encode_stream(&stream).unwrap();
            prop_assert_eq!(decode_stream(&bytes, Path::new("p")).unwrap(), stream);
        }
    }
}
