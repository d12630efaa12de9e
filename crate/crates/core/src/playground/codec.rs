//! Binary state frames streamed to playground clients.
//!
//! Layout, version 1, all fields little-endian:
//!
//! | offset | type  | field                                   |
//! |--------|-------|-----------------------------------------|
//! | 0      | [u8;4]| magic `SFRM`                            |
//! | 4      | u16   | format version                          |
//! | 6      | u16   | flags (see `FLAG_*`)                    |
//! | 8      | u64   | frame index since the last reset        |
//! | 16     | f64   | seconds since the session started       |
//! | 24     | f32   | rolling fps estimate                    |
//! | 28     | u32   | particle count of the live state        |
//! | 32     | u32   | streamed point count `P`                |
//! | 36     | u32   | anchor count `A`                        |
//! | 40     | f32   | material scale                          |
//! | 44     | u32   | decimation stride                       |
//! | 48     | f32   | `P × 3` positions, row-major            |
//! | 48+12P | f32   | `A × 3` anchor positions, row-major     |

use crate::error::{Error, Result};
use crate::math::Vec3;

pub const FRAME_MAGIC: [u8; 4] = *b"SFRM";
pub const FRAME_FORMAT_VERSION: u16 = 1;
pub const FRAME_HEADER_BYTES: usize = 48;

pub const FLAG_PAUSED: u16 = 1;
/// Set on the first frame after a divergence-triggered reset.
pub const FLAG_RESET_AFTER_DIVERGENCE: u16 = 1 << 1;
pub const FLAG_DECIMATED: u16 = 1 << 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameHeader {
    pub flags: u16,
    pub frame: u64,
    pub timestamp: f64,
    pub fps: f32,
    pub particle_count: u32,
    pub material_scale: f32,
    pub stride: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireFrame {
    pub header: FrameHeader,
    pub points: Vec<[f32; 3]>,
    pub anchors: Vec<[f32; 3]>,
}

/// Indices kept when streaming `n` particles under a `max_points` budget:
/// every `stride`-th particle, with the stride as small as the budget allows.
pub fn decimation(n: usize, max_points: usize) -> (usize, Vec<usize>) {
    let stride = n.div_ceil(max_points.max(1)).max(1);
    (stride, (0..n).step_by(stride).collect())
}

fn to_f32(v: &Vec3) -> [f32; 3] {
    [v.x as f32, v.y as f32, v.z as f32]
}

impl WireFrame {
    pub fn from_state(
        mut header: FrameHeader,
        x: &[Vec3],
        keep: &[usize],
        stride: usize,
        anchors: &[Vec3],
    ) -> Self {
        header.particle_count = x.len() as u32;
        header.stride = stride as u32;
        if stride > 1 {
            header.flags |= FLAG_DECIMATED;
        }
        WireFrame {
            header,
            points: keep.iter().map(|&i| to_f32(&x[i])).collect(),
            anchors: anchors.iter().map(to_f32).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out =
            Vec::with_capacity(FRAME_HEADER_BYTES + 12 * (self.points.len() + self.anchors.len()));
        out.extend_from_slice(&FRAME_MAGIC);
        out.extend_from_slice(&FRAME_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&h.flags.to_le_bytes());
        out.extend_from_slice(&h.frame.to_le_bytes());
        out.extend_from_slice(&h.timestamp.to_le_bytes());
        out.extend_from_slice(&h.fps.to_le_bytes());
        out.extend_from_slice(&h.particle_count.to_le_bytes());
        out.extend_from_slice(&(self.points.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.anchors.len() as u32).to_le_bytes());
        out.extend_from_slice(&h.material_scale.to_le_bytes());
        out.extend_from_slice(&h.stride.to_le_bytes());
        for p in self.points.iter().chain(&self.anchors) {
            for c in p {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Message(format!("frame: {m}"));
        if bytes.len() < FRAME_HEADER_BYTES {
            return Err(bad(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if bytes[..4] != FRAME_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u16_at(4);
        if version != FRAME_FORMAT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header = FrameHeader {
            flags: u16_at(6),
            frame: u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")),
            timestamp: f64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")),
            fps: f32_at(24),
            particle_count: u32_at(28),
            material_scale: f32_at(40),
            stride: u32_at(44),
        };
        let (p, a) = (u32_at(32) as usize, u32_at(36) as usize);
        let expected = FRAME_HEADER_BYTES + 12 * (p + a);
        if bytes.len() != expected {
            return Err(bad(format!(
                "expected {expected} bytes for {p} points and {a} anchors, got {}",
                bytes.len()
            )));
        }
        let read = |start: usize, count: usize| -> Vec<[f32; 3]> {
            (0..count)
                .map(|i| {
                    let o = start + 12 * i;
                    [f32_at(o), f32_at(o + 4), f32_at(o + 8)]
                })
                .collect()
        };
        Ok(WireFrame {
            header,
            points: read(FRAME_HEADER_BYTES, p),
            anchors: read(FRAME_HEADER_BYTES + 12 * p, a),
        })
    }
}
