//! Wire messages exchanged in a simulated round. Byte accounting uses the
//! lengths of these encodings.
//!
//! Downlink (server → client), little-endian:
//! `"FSPD" | round u32 | client u32 | count u32 | count × (layer u32, rows u32, cols u32, rows·cols f64)`
//!
//! Uplink (client → server) is the same with magic `"FSPU"` and each layer
//! followed by its packed keep-mask (`ceil(rows·cols/8)` bytes, LSB first).

use crate::aggregation::ClientLayerUpdate;
use crate::checkpoint::{pack_mask, packed_len, put_weights, read_weights, unpack_mask, Reader};
use crate::error::{CheckpointError, Result};
use crate::model::{PruneMask, WeightMatrix};

pub const DOWNLINK_MAGIC: [u8; 4] = *b"FSPD";
pub const UPLINK_MAGIC: [u8; 4] = *b"FSPU";

fn header(magic: [u8; 4], round: usize, client: usize, count: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&(round as u32).to_le_bytes());
    out.extend_from_slice(&(client as u32).to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out
}

fn read_header(bytes: &[u8], magic: [u8; 4]) -> Result<(Reader<'_>, usize, usize, usize), CheckpointError> {
    let mut r = Reader::new(bytes);
    let got: [u8; 4] = r.take(4)?.try_into().unwrap();
    if got != magic {
        return Err(CheckpointError::BadMagic(got));
    }
    let round = r.u32()? as usize;
    let client = r.u32()? as usize;
    let count = r.u32()? as usize;
    Ok((r, round, client, count))
}

pub fn encode_downlink<'a>(round: usize, client: usize, layers: impl ExactSizeIterator<Item = (usize, &'a WeightMatrix)>) -> Vec<u8> {
    let mut out = header(DOWNLINK_MAGIC, round, client, layers.len());
    for (index, w) in layers {
        out.extend_from_slice(&(index as u32).to_le_bytes());
        put_weights(w, &mut out);
    }
    out
}

pub fn decode_downlink(bytes: &[u8]) -> Result<Vec<(usize, WeightMatrix)>> {
    let (mut r, _, _, count) = read_header(bytes, DOWNLINK_MAGIC)?;
    let mut layers = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let index = r.u32()? as usize;
        layers.push((index, read_weights(&mut r)?));
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Malformed("trailing bytes in downlink".into()).into());
    }
    Ok(layers)
}

pub fn encode_uplink(round: usize, client: usize, layers: &[(usize, &WeightMatrix, &PruneMask)]) -> Vec<u8> {
    let mut out = header(UPLINK_MAGIC, round, client, layers.len());
    for &(index, w, m) in layers {
        out.extend_from_slice(&(index as u32).to_le_bytes());
        put_weights(w, &mut out);
        pack_mask(m, &mut out);
    }
    out
}

pub fn decode_uplink(bytes: &[u8]) -> Result<(usize, Vec<ClientLayerUpdate>)> {
    let (mut r, _, client, count) = read_header(bytes, UPLINK_MAGIC)?;
    let mut updates = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let index = r.u32()? as usize;
        let w = read_weights(&mut r)?;
        let mask = unpack_mask(w.rows(), w.cols(), r.take(packed_len(w.len()))?)?;
        updates.push(ClientLayerUpdate::new(client, index, w, mask)?);
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Malformed("trailing bytes in uplink".into()).into());
    }
    Ok((client, updates))
}
