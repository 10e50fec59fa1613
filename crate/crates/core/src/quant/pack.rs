//! Bit-exact storage of quantized weights and a matvec that reads it
//! directly.
//!
//! Layout (little-endian): magic `GRQ1`, version `u16`, bits `u8`, pad `u8`,
//! group size `u32`, `d_out` `u32`, `d_in` `u32`, true element count `u64`,
//! group count `u32`, then `G` scales as `f32` and the code payload. 4-bit
//! codes are two's-complement nibbles, two per byte, even index in the low
//! nibble; 8-bit codes take one byte each.

use super::{QuantConfig, QuantizedTensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GRQ1";
pub const VERSION: u16 = 1;
/// Bytes before the scale array.
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedBlob {
    bits: u8,
    group_size: usize,
    d_out: usize,
    d_in: usize,
    scales: Vec<f32>,
    payload: Vec<u8>,
}

fn payload_len(bits: u8, n: usize) -> usize {
    if bits == 4 {
        n.div_ceil(2)
    } else {
        n
    }
}

impl PackedBlob {
    /// Stores the integer codes of `qw` and its scales rounded to `f32`.
    pub fn pack(qw: &QuantizedTensor, cfg: &QuantConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.group_size != qw.group_size() {
            return Err(Error::Config(format!(
                "config group size {} but tensor was grouped by {}",
                cfg.group_size,
                qw.group_size()
            )));
        }
        let codes = qw.codes(cfg);
        let payload = match cfg.bits {
            4 => codes
                .chunks(2)
                .map(|pair| {
                    let lo = (pair[0] as u8) & 0x0F;
                    let hi = pair.get(1).map_or(0, |&c| (c as u8) & 0x0F);
                    lo | (hi << 4)
                })
                .collect(),
            _ => codes.iter().map(|&c| c as i8 as u8).collect(),
        };
        let (d_out, d_in) = qw.shape();
        Ok(Self {
            bits: cfg.bits,
            group_size: cfg.group_size,
            d_out,
            d_in,
            scales: qw.scales().iter().map(|&s| s as f32).collect(),
            payload,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.d_out, self.d_in)
    }

    pub fn element_count(&self) -> usize {
        self.d_out * self.d_in
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Bytes a matvec reads: payload plus scales.
    pub fn storage_bytes(&self) -> usize {
        self.payload.len() + 4 * self.scales.len()
    }

    /// Serialized size, header included.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.storage_bytes()
    }

    #[inline]
    fn code(&self, idx: usize) -> i32 {
        if self.bits == 4 {
            let byte = self.payload[idx / 2];
            let nib = if idx % 2 == 0 { byte & 0x0F } else { byte >> 4 };
            i32::from(((nib << 4) as i8) >> 4)
        } else {
            i32::from(self.payload[idx] as i8)
        }
    }

    /// Integer codes of all real elements, row-major.
    pub fn codes(&self) -> Vec<i32> {
        (0..self.element_count()).map(|i| self.code(i)).collect()
    }

    /// Dequantized weights, row-major, using the stored `f32` scales.
    pub fn dequantize(&self) -> Vec<f64> {
        (0..self.element_count())
            .map(|i| f64::from(self.scales[i / self.group_size]) * f64::from(self.code(i)))
            .collect()
    }

    /// `Ŵ x` straight from the packed codes.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in {
            return Err(Error::Shape(format!(
                "vector has {} entries, weights expect {}",
                x.len(),
                self.d_in
            )));
        }
        let g = self.group_size;
        let mut out = Vec::with_capacity(self.d_out);
        for r in 0..self.d_out {
            let start = r * self.d_in;
            let end = start + self.d_in;
            let mut acc = 0.0;
            let mut idx = start;
            // walk the row one group segment at a time
            while idx < end {
                let group = idx / g;
                let seg_end = ((group + 1) * g).min(end);
                let mut partial = 0.0;
                for i in idx..seg_end {
                    partial += f64::from(self.code(i)) * x[i - start];
                }
                acc += partial * f64::from(self.scales[group]);
                idx = seg_end;
            }
            out.push(acc);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(self.bits);
        buf.push(0);
        buf.extend_from_slice(&(self.group_size as u32).to_le_bytes());
        buf.extend_from_slice(&(self.d_out as u32).to_le_bytes());
        buf.extend_from_slice(&(self.d_in as u32).to_le_bytes());
        buf.extend_from_slice(&(self.element_count() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.scales.len() as u32).to_le_bytes());
        for s in &self.scales {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        buf.extend_from_slice(&self.payload);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Format(msg);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[..4])));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let version = u16_at(4);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let bits = bytes[6];
        if !matches!(bits, 4 | 8) {
            return Err(bad(format!("unsupported bit width {bits}")));
        }
        let group_size = u32_at(8);
        let d_out = u32_at(12);
        let d_in = u32_at(16);
        let n = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let groups = u32_at(28);
        if group_size == 0 {
            return Err(bad("group size 0".into()));
        }
        if n != (d_out as u64) * (d_in as u64) {
            return Err(bad(format!("element count {n} does not match shape {d_out}x{d_in}")));
        }
        let n = n as usize;
        if groups != n.div_ceil(group_size) {
            return Err(bad(format!("{groups} groups for {n} elements of group size {group_size}")));
        }
        let expected = HEADER_LEN + 4 * groups + payload_len(bits, n);
        if bytes.len() != expected {
            return Err(bad(format!("blob is {} bytes, header implies {expected}", bytes.len())));
        }
        let scales: Vec<f32> = bytes[HEADER_LEN..HEADER_LEN + 4 * groups]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(bad("non-positive or non-finite scale".into()));
        }
        Ok(Self {
            bits,
            group_size,
            d_out,
            d_in,
            scales,
            payload: bytes[HEADER_LEN + 4 * groups..].to_vec(),
        })
    }
}
