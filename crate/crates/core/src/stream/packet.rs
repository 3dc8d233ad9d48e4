//! Fixed 24-byte tracker packet.
//!
//! ```text
//! offset  size  field
//!      0     2  magic 0xA7 0x51
//!      2     1  tracker id (0-15)
//!      3     1  battery percent (0-100)
//!      4     2  sequence number, u16 LE, wrapping
//!      6     8  sample timestamp, UTC ms, u64 LE
//!     14     8  quaternion w, x, y, z as Q15 i16 LE
//!     22     2  CRC-16/CCITT-FALSE over bytes 0..22, u16 LE
//! ```

use thiserror::Error;

use crate::so3::Rotation;

pub const PACKET_LEN: usize = 24;
pub const PACKET_MAGIC: [u8; 2] = [0xA7, 0x51];

const Q15_SCALE: f64 = 32768.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PacketError {
    #[error("short buffer: {0} bytes, need 24")]
    ShortBuffer(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("checksum mismatch: computed {computed:#06x}, packet carries {carried:#06x}")]
    BadChecksum { computed: u16, carried: u16 },
    #[error("tracker id {0} out of range")]
    InvalidId(u8),
    #[error("battery level {0} out of range")]
    InvalidBattery(u8),
    #[error("quaternion norm {0:.4} is more than 2% from unit")]
    BadQuaternion(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackerPacket {
    pub id: u8,
    pub battery: u8,
    pub seq: u16,
    pub timestamp_ms: u64,
    pub orientation: Rotation,
}

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no xorout.
pub fn crc16_ccitt(bytes: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &b in bytes {
        crc ^= (b as u16) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ 0x1021
            } else {
                crc << 1
            };
        }
    }
    crc
}

fn to_q15(x: f64) -> i16 {
    (x * Q15_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn encode_packet(p: &TrackerPacket) -> Result<[u8; PACKET_LEN], PacketError> {
    if p.id >= 16 {
        return Err(PacketError::InvalidId(p.id));
    }
    if p.battery > 100 {
        return Err(PacketError::InvalidBattery(p.battery));
    }
    let mut out = [0u8; PACKET_LEN];
    out[0..2].copy_from_slice(&PACKET_MAGIC);
    out[2] = p.id;
    out[3] = p.battery;
    out[4..6].copy_from_slice(&p.seq.to_le_bytes());
    out[6..14].copy_from_slice(&p.timestamp_ms.to_le_bytes());
    let q = p.orientation.canonical_quaternion();
    for (k, c) in [q.w, q.i, q.j, q.k].into_iter().enumerate() {
        out[14 + 2 * k..16 + 2 * k].copy_from_slice(&to_q15(c).to_le_bytes());
    }
    let crc = crc16_ccitt(&out[..22]);
    out[22..24].copy_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Decodes the first 24 bytes of `bytes`.
pub fn decode_packet(bytes: &[u8]) -> Result<TrackerPacket, PacketError> {
    if bytes.len() < PACKET_LEN {
        return Err(PacketError::ShortBuffer(bytes.len()));
    }
    let b = &bytes[..PACKET_LEN];
    if b[0..2] != PACKET_MAGIC {
        return Err(PacketError::BadMagic([b[0], b[1]]));
    }
    let computed = crc16_ccitt(&b[..22]);
    let carried = u16::from_le_bytes([b[22], b[23]]);
    if computed != carried {
        return Err(PacketError::BadChecksum { computed, carried });
    }
    let id = b[2];
    if id >= 16 {
        return Err(PacketError::InvalidId(id));
    }
    let battery = b[3];
    if battery > 100 {
        return Err(PacketError::InvalidBattery(battery));
    }
    let seq = u16::from_le_bytes([b[4], b[5]]);
    let timestamp_ms = u64::from_le_bytes(b[6..14].try_into().expect("8 bytes"));
    let mut q = [0.0; 4];
    for (k, c) in q.iter_mut().enumerate() {
        *c = i16::from_le_bytes([b[14 + 2 * k], b[15 + 2 * k]]) as f64 / Q15_SCALE;
    }
    let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 0.02 {
        return Err(PacketError::BadQuaternion(norm));
    }
    let orientation = Rotation::from_quaternion(q[0], q[1], q[2], q[3])
        .map_err(|_| PacketError::BadQuaternion(norm))?;
    Ok(TrackerPacket {
        id,
        battery,
        seq,
        timestamp_ms,
        orientation,
    })
}
