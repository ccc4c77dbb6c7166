//! `.fspa` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FSPA"                      4 bytes magic
//! version                     u16 (currently 1)
//! activation                  u8  (0 = identity, 1 = relu)
//! flags                       u8  (bit 0: mask section present per layer)
//! name length                 u16, then that many UTF-8 bytes
//! layer count                 u32
//! per layer:
//!   rows, cols                u32, u32
//!   weights                   rows*cols f64, row-major
//!   mask (if flag bit 0)      ceil(rows*cols/8) bytes, row-major flat index k
//!                             at byte k/8, bit k%8 (LSB first), 1 = kept
//! crc32                       u32, IEEE CRC-32 of every preceding byte
//! ```

use ndarray::Array2;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Activation, LayeredModel, PruneMask, WeightMatrix};

pub const MAGIC: [u8; 4] = *b"FSPA";
pub const FORMAT_VERSION: u16 = 1;
const FLAG_MASKS: u8 = 1;

pub(crate) fn packed_len(bits: usize) -> usize {
    bits.div_ceil(8)
}

pub(crate) fn pack_mask(mask: &PruneMask, out: &mut Vec<u8>) {
    let start = out.len();
    out.resize(start + packed_len(mask.len()), 0);
    for (k, &kept) in mask.bits().iter().enumerate() {
        if kept {
            out[start + k / 8] |= 1 << (k % 8);
        }
    }
}

pub(crate) fn unpack_mask(rows: usize, cols: usize, bytes: &[u8]) -> Result<PruneMask, CheckpointError> {
    let n = rows * cols;
    if bytes.len() != packed_len(n) {
        return Err(CheckpointError::Malformed(format!(
            "mask section has {} bytes, expected {}",
            bytes.len(),
            packed_len(n)
        )));
    }
    if n % 8 != 0 && bytes[n / 8] >> (n % 8) != 0 {
        return Err(CheckpointError::Malformed("nonzero padding bits in mask".into()));
    }
    let bits = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let k = r * cols + c;
        bytes[k / 8] >> (k % 8) & 1 == 1
    });
    PruneMask::new(bits).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.remaining() < n {
            return Err(CheckpointError::Truncated(self.buf.len()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(self.buf.len()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub(crate) fn put_weights(w: &WeightMatrix, out: &mut Vec<u8>) {
    out.extend_from_slice(&(w.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(w.cols() as u32).to_le_bytes());
    out.reserve(8 * w.len());
    for v in w.values().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_weights(r: &mut Reader<'_>) -> Result<WeightMatrix, CheckpointError> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if rows == 0 || cols == 0 {
        return Err(CheckpointError::Malformed(format!("layer dims {rows}x{cols}")));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| CheckpointError::Malformed("layer dims overflow".into()))?;
    let values = r.f64s(n)?;
    WeightMatrix::from_vec(rows, cols, values).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

pub fn serialize_checkpoint(model: &LayeredModel, masks: Option<&[PruneMask]>) -> Result<Vec<u8>> {
    if let Some(masks) = masks {
        if masks.len() != model.num_layers() {
            return Err(Error::dim("checkpoint masks", model.num_layers(), masks.len()));
        }
        for (w, m) in model.layers().iter().zip(masks) {
            if w.dim() != m.dim() {
                return Err(Error::dim("checkpoint mask", format!("{:?}", w.dim()), format!("{:?}", m.dim())));
            }
        }
    }
    let name = model.name().as_bytes();
    if name.len() > u16::MAX as usize {
        return Err(Error::dim("checkpoint model name", "<= 65535 bytes", name.len()));
    }

    let mut out = Vec::with_capacity(16 + name.len() + model.num_weights() * 9 + 8 * model.num_layers());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(match model.activation() {
        Activation::Identity => 0,
        Activation::Relu => 1,
    });
    out.push(if masks.is_some() { FLAG_MASKS } else { 0 });
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&(model.num_layers() as u32).to_le_bytes());
    for (j, w) in model.layers().iter().enumerate() {
        put_weights(w, &mut out);
        if let Some(masks) = masks {
            pack_mask(&masks[j], &mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(LayeredModel, Option<Vec<PruneMask>>)> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let activation = match r.u8()? {
        0 => Activation::Identity,
        1 => Activation::Relu,
        other => return Err(CheckpointError::Malformed(format!("activation tag {other}")).into()),
    };
    let flags = r.u8()?;
    if flags & !FLAG_MASKS != 0 {
        return Err(CheckpointError::Malformed(format!("unknown flags {flags:#04x}")).into());
    }
    let name_len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| CheckpointError::Malformed("model name is not UTF-8".into()))?
        .to_owned();
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(CheckpointError::Malformed("zero layers".into()).into());
    }

    let mut layers = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..count {
        let w = read_weights(&mut r)?;
        if flags & FLAG_MASKS != 0 {
            let packed = r.take(packed_len(w.len()))?;
            masks.push(unpack_mask(w.rows(), w.cols(), packed)?);
        }
        layers.push(w);
    }

    let body_end = r.position();
    let stored = r.u32()?;
    if r.remaining() != 0 {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes after checksum", r.remaining())).into());
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed }.into());
    }

    let model = LayeredModel::new(name, activation, layers)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let masks = (flags & FLAG_MASKS != 0).then_some(masks);
    Ok((model, masks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> (LayeredModel, Vec<PruneMask>) {
        let model = LayeredModel::random("toy-α", &[3, 5, 2], Activation::Relu, 9).unwrap();
        let masks = model
            .layers()
            .iter()
            .map(|w| PruneMask::new(w.values().mapv(|v| v > 0.0)).unwrap())
            .collect();
        (model, masks)
    }

    #[test]
    fn round_trip_with_and_without_masks() {
        let (model, masks) = sample();
        let bytes = serialize_checkpoint(&model, None).unwrap();
        let (back, m) = load_checkpoint(&bytes).unwrap();
        assert_eq!(back, model);
        assert!(m.is_none());

        let bytes = serialize_checkpoint(&model, Some(&masks)).unwrap();
        let (back, m) = load_checkpoint(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(m.unwrap(), masks);
    }

    #[test]
    fn header_layout() {
        let (model, _) = sample();
        let bytes = serialize_checkpoint(&model, None).unwrap();
        assert_eq!(&bytes[..4], b"FSPA");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 1);
        assert_eq!(bytes[7], 0);
        let name_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!(&bytes[10..10 + name_len], "toy-α".as_bytes());
        let count_at = 10 + name_len;
        assert_eq!(u32::from_le_bytes(bytes[count_at..count_at + 4].try_into().unwrap()), 2);
        let expected_len = count_at + 4 + (8 + 8 * 15) + (8 + 8 * 10) + 4;
        assert_eq!(bytes.len(), expected_len);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let (model, masks) = sample();
        let bytes = serialize_checkpoint(&model, Some(&masks)).unwrap();
        for cut in 0..bytes.len() {
            assert!(load_checkpoint(&bytes[..cut]).is_err(), "prefix of length {cut} loaded");
        }
    }

    #[test]
    fn corruption_errors() {
        let (model, _) = sample();
        let bytes = serialize_checkpoint(&model, None).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_checkpoint(&bad), Err(Error::Checkpoint(CheckpointError::BadMagic(_)))));

        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(
            load_checkpoint(&bad),
            Err(Error::Checkpoint(CheckpointError::UnsupportedVersion(7)))
        ));

        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x10;
        assert!(matches!(
            load_checkpoint(&bad),
            Err(Error::Checkpoint(CheckpointError::ChecksumMismatch { .. }))
        ));

        let mut bad = bytes;
        bad.push(0);
        assert!(load_checkpoint(&bad).is_err());
    }

    #[test]
    fn pack_bits_lsb_first() {
        let m = PruneMask::from_rows(&[[1, 0, 0], [1, 1, 0], [0, 0, 1]]).unwrap();
        let mut out = Vec::new();
        pack_mask(&m, &mut out);
        assert_eq!(out, vec![0b0001_1001, 0b0000_0001]);
        assert_eq!(unpack_mask(3, 3, &out).unwrap(), m);
        assert!(unpack_mask(3, 3, &[0b0001_1001, 0b0000_0011]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..7, 2..5),
            seed in any::<u64>(),
            mask_seed in any::<u64>(),
            with_masks in any::<bool>(),
        ) {
            let model = LayeredModel::random("p", &dims, Activation::Identity, seed).unwrap();
            let masks: Vec<PruneMask> = model.layers().iter().enumerate().map(|(j, w)| {
                PruneMask::new(Array2::from_shape_fn(w.dim(), |(r, c)| {
                    (mask_seed.rotate_left((j * 7 + r * 3 + c) as u32 % 64)) & 1 == 1
                })).unwrap()
            }).collect();
            let bytes = serialize_checkpoint(&model, with_masks.then_some(masks.as_slice())).unwrap();
            let (back, back_masks) = load_checkpoint(&bytes).unwrap();
            for (a, b) in back.layers().iter().zip(model.layers()) {
                prop_assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            prop_assert_eq!(back, model);
            prop_assert_eq!(back_masks, with_masks.then_some(masks));
        }
    }
}
