use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LPRS";
pub const VERSION: u8 = 1;
/// Fixed header size in bytes.
pub const HEADER_LEN: usize = 4 + 1 + 8 + 1 + 4 + 4 + 2 + 2 + 2 + 4;

/// Rate-distortion weights with a one-byte index in the header.
pub const LAMBDA_GRID: [f64; 4] = [0.003, 0.01, 0.03, 0.1];

/// Grid index of `lambda`, or 255 when it is not on the grid.
pub fn lambda_index(lambda: f64) -> u8 {
    LAMBDA_GRID
        .iter()
        .position(|&l| ((l - lambda) / l).abs() < 1e-9)
        .map_or(u8::MAX, |i| i as u8)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub model_id: u64,
    pub lambda_index: u8,
    /// Original (unpadded) image size.
    pub width: u32,
    pub height: u32,
    pub latent_channels: u16,
    pub latent_height: u16,
    pub latent_width: u16,
    pub payload_len: u32,
}

impl BitstreamHeader {
    pub fn symbol_count(&self) -> usize {
        self.latent_channels as usize * self.latent_height as usize * self.latent_width as usize
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        let mut w = 0;
        let mut put = |bytes: &[u8]| {
            out[w..w + bytes.len()].copy_from_slice(bytes);
            w += bytes.len();
        };
        put(MAGIC);
        put(&[VERSION]);
        put(&self.model_id.to_le_bytes());
        put(&[self.lambda_index]);
        put(&self.width.to_le_bytes());
        put(&self.height.to_le_bytes());
        put(&self.latent_channels.to_le_bytes());
        put(&self.latent_height.to_le_bytes());
        put(&self.latent_width.to_le_bytes());
        put(&self.payload_len.to_le_bytes());
        out
    }

    /// Parse the fixed-size header from the front of `bytes`.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::NotABitstream("missing LPRS magic".into()));
        }
        if bytes.len() < 5 {
            return Err(Error::NotABitstream("truncated header".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion {
                found: bytes[4],
                expected: VERSION,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::NotABitstream("truncated header".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        Ok(BitstreamHeader {
            model_id: u64::from_le_bytes(bytes[5..13].try_into().unwrap()),
            lambda_index: bytes[13],
            width: u32_at(14),
            height: u32_at(18),
            latent_channels: u16_at(22),
            latent_height: u16_at(24),
            latent_width: u16_at(26),
            payload_len: u32_at(28),
        })
    }
}

/// Header plus range-coded payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    pub payload: Vec<u8>,
}

impl Bitstream {
    /// Build a bitstream; the header's payload length is taken from `payload`.
    pub fn new(mut header: BitstreamHeader, payload: Vec<u8>) -> Result<Self> {
        header.payload_len = u32::try_from(payload.len())
            .map_err(|_| Error::rejected("payload longer than 4 GiB"))?;
        Ok(Bitstream { header, payload })
    }

    pub fn pack(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend(self.header.to_bytes());
        out.extend(&self.payload);
        out
    }

    pub fn unpack(bytes: &[u8]) -> Result<Self> {
        let header = BitstreamHeader::parse(bytes)?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != header.payload_len as usize {
            return Err(Error::Decode(format!(
                "header announces {} payload bytes, found {}",
                header.payload_len,
                payload.len()
            )));
        }
        Ok(Bitstream {
            header,
            payload: payload.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}
