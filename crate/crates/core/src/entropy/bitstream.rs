//! Container layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "POEL"
//! 4       1     version (1)
//! 5       4     width, u32 little-endian (original, before padding)
//! 9       4     height, u32 little-endian
//! 13      1     model scale id (0 toy, 1 full)
//! 14      ...   11 streams, each an unsigned LEB128 byte length then the bytes:
//!               hyper-latent, then for group 0..5 the anchor and non-anchor passes
//! ```

use crate::error::BitstreamError;

pub const MAGIC: [u8; 4] = *b"POEL";
pub const VERSION: u8 = 1;
pub const NUM_STREAMS: usize = 11;
const HEADER_LEN: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub width: u32,
    pub height: u32,
    pub scale_id: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    /// `streams[0]` codes the hyper-latent; `streams[1 + 2k + pass]` codes
    /// group `k` in `pass` (0 anchor, 1 non-anchor).
    pub streams: Vec<Vec<u8>>,
}

pub fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7F) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

/// Returns the value and the number of bytes read.
pub fn read_varint(data: &[u8]) -> Result<(u64, usize), BitstreamError> {
    let mut v = 0u64;
    for (i, &b) in data.iter().enumerate() {
        if i >= 10 {
            return Err(BitstreamError::Corrupt("varint too long"));
        }
        v |= ((b & 0x7F) as u64) << (7 * i);
        if b & 0x80 == 0 {
            return Ok((v, i + 1));
        }
    }
    Err(BitstreamError::Truncated)
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        assert_eq!(self.streams.len(), NUM_STREAMS);
        let mut out = Vec::with_capacity(HEADER_LEN + self.streams.iter().map(|s| s.len() + 3).sum::<usize>());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.header.width.to_le_bytes());
        out.extend_from_slice(&self.header.height.to_le_bytes());
        out.push(self.header.scale_id);
        for s in &self.streams {
            write_varint(&mut out, s.len() as u64);
            out.extend_from_slice(s);
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, BitstreamError> {
        if data.len() < 4 {
            return Err(if MAGIC.starts_with(data) {
                BitstreamError::Truncated
            } else {
                BitstreamError::BadMagic
            });
        }
        if data[..4] != MAGIC {
            return Err(BitstreamError::BadMagic);
        }
        if data.len() < HEADER_LEN {
            return Err(BitstreamError::Truncated);
        }
        if data[4] != VERSION {
            return Err(BitstreamError::BadVersion(data[4]));
        }
        let u32_at = |o: usize| u32::from_le_bytes([data[o], data[o + 1], data[o + 2], data[o + 3]]);
        let header = Header {
            width: u32_at(5),
            height: u32_at(9),
            scale_id: data[13],
        };
        if header.width == 0 || header.height == 0 {
            return Err(BitstreamError::BadDimensions(header.width, header.height));
        }
        let mut pos = HEADER_LEN;
        let mut streams = Vec::with_capacity(NUM_STREAMS);
        for _ in 0..NUM_STREAMS {
            let (len, used) = read_varint(&data[pos..])?;
            pos += used;
            let len = usize::try_from(len).map_err(|_| BitstreamError::Truncated)?;
            if data.len() - pos < len {
                return Err(BitstreamError::Truncated);
            }
            streams.push(data[pos..pos + len].to_vec());
            pos += len;
        }
        if pos != data.len() {
            return Err(BitstreamError::TrailingBytes(data.len() - pos));
        }
        Ok(Self { header, streams })
    }
}
