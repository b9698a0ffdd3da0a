//! Binary frame codec.
//!
//! Frame: magic "GLSU", version u8 = 1, variant tag u8, payload length u32 LE,
//! payload. Index-set payload: u32 count then count sorted u32 ids. Matrix
//! payload: u32 rows, u32 cols, then rows*cols f64 LE row-major. Layer-tagged
//! payloads prepend one u8 layer index. All integers little-endian.

use crate::error::{GlasuError, Result};
use crate::linalg::Matrix;

use super::{Control, Message};

pub const MAGIC: [u8; 4] = *b"GLSU";
pub const WIRE_VERSION: u8 = 1;

pub const HEADER_LEN: usize = 10;

const TAG_SAMPLE_BROADCAST: u8 = 0;
const TAG_INDEX_UPLOAD: u8 = 1;
const TAG_INDEX_UNION_BROADCAST: u8 = 2;
const TAG_REPR_UPLOAD: u8 = 3;
const TAG_REPR_BROADCAST: u8 = 4;
const TAG_COTANGENT_BROADCAST: u8 = 5;
const TAG_CONTROL: u8 = 6;

const CTRL_HELLO: u8 = 0;
const CTRL_ROUND_BEGIN: u8 = 1;
const CTRL_END: u8 = 2;

fn put_index_set(buf: &mut Vec<u8>, set: &[u32]) {
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for &id in set {
        buf.extend_from_slice(&id.to_le_bytes());
    }
}

fn put_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        debug_assert!(v.is_finite(), "wire matrices must be finite");
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Deterministic byte-for-byte encoding of a message.
pub fn serialize(msg: &Message) -> Vec<u8> {
    let mut payload = Vec::new();
    let tag = match msg {
        Message::SampleBroadcast(set) => {
            put_index_set(&mut payload, set);
            TAG_SAMPLE_BROADCAST
        }
        Message::IndexUpload { layer, set } => {
            payload.push(*layer);
            put_index_set(&mut payload, set);
            TAG_INDEX_UPLOAD
        }
        Message::IndexUnionBroadcast { layer, set } => {
            payload.push(*layer);
            put_index_set(&mut payload, set);
            TAG_INDEX_UNION_BROADCAST
        }
        Message::ReprUpload { layer, matrix } => {
            payload.push(*layer);
            put_matrix(&mut payload, matrix);
            TAG_REPR_UPLOAD
        }
        Message::ReprBroadcast { layer, matrix } => {
            payload.push(*layer);
            put_matrix(&mut payload, matrix);
            TAG_REPR_BROADCAST
        }
        Message::CotangentBroadcast(matrix) => {
            put_matrix(&mut payload, matrix);
            TAG_COTANGENT_BROADCAST
        }
        Message::Control(c) => {
            match c {
                Control::Hello { client } => {
                    payload.push(CTRL_HELLO);
                    payload.extend_from_slice(&client.to_le_bytes());
                }
                Control::RoundBegin { round } => {
                    payload.push(CTRL_ROUND_BEGIN);
                    payload.extend_from_slice(&round.to_le_bytes());
                }
                Control::End => {
                    payload.push(CTRL_END);
                    payload.extend_from_slice(&0u32.to_le_bytes());
                }
            }
            TAG_CONTROL
        }
    };

    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.extend_from_slice(&MAGIC);
    frame.push(WIRE_VERSION);
    frame.push(tag);
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(&payload);
    frame
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(GlasuError::Protocol(format!(
                "truncated frame: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn index_set(&mut self) -> Result<Vec<u32>> {
        let count_off = self.pos;
        let count = self.u32()? as usize;
        let mut set = Vec::with_capacity(count);
        for _ in 0..count {
            set.push(self.u32()?);
        }
        if !set.windows(2).all(|w| w[0] < w[1]) {
            return Err(GlasuError::Protocol(format!(
                "index set at offset {count_off} not sorted strictly ascending"
            )));
        }
        Ok(set)
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let off = self.pos;
            let v = self.f64()?;
            if !v.is_finite() {
                return Err(GlasuError::Protocol(format!(
                    "non-finite matrix entry at offset {off}"
                )));
            }
            data.push(v);
        }
        Ok(Matrix::from_vec(rows, cols, data))
    }
}

/// Inverse of [`serialize`]; rejects bad magic/version/length with the byte
/// offset of the problem.
pub fn deserialize(bytes: &[u8]) -> Result<Message> {
    if bytes.len() < HEADER_LEN {
        return Err(GlasuError::Protocol(format!(
            "frame shorter than {HEADER_LEN}-byte header ({} bytes)",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(GlasuError::Protocol(format!(
            "bad magic at offset 0: expected \"GLSU\", got {:?}",
            &bytes[0..4]
        )));
    }
    if bytes[4] != WIRE_VERSION {
        return Err(GlasuError::Protocol(format!(
            "unsupported version {} at offset 4",
            bytes[4]
        )));
    }
    let tag = bytes[5];
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    if HEADER_LEN + len > bytes.len() {
        return Err(GlasuError::Protocol(format!(
            "length field {len} at offset 6 exceeds buffer ({} payload bytes present)",
            bytes.len() - HEADER_LEN
        )));
    }
    let mut r = Reader { buf: &bytes[HEADER_LEN..HEADER_LEN + len], pos: 0 };
    let msg = match tag {
        TAG_SAMPLE_BROADCAST => Message::SampleBroadcast(r.index_set()?),
        TAG_INDEX_UPLOAD => {
            let layer = r.u8()?;
            Message::IndexUpload { layer, set: r.index_set()? }
        }
        TAG_INDEX_UNION_BROADCAST => {
            let layer = r.u8()?;
            Message::IndexUnionBroadcast { layer, set: r.index_set()? }
        }
        TAG_REPR_UPLOAD => {
            let layer = r.u8()?;
            Message::ReprUpload { layer, matrix: r.matrix()? }
        }
        TAG_REPR_BROADCAST => {
            let layer = r.u8()?;
            Message::ReprBroadcast { layer, matrix: r.matrix()? }
        }
        TAG_COTANGENT_BROADCAST => Message::CotangentBroadcast(r.matrix()?),
        TAG_CONTROL => {
            let kind = r.u8()?;
            let value = r.u32()?;
            let c = match kind {
                CTRL_HELLO => Control::Hello { client: value },
                CTRL_ROUND_BEGIN => Control::RoundBegin { round: value },
                CTRL_END => Control::End,
                other => {
                    return Err(GlasuError::Protocol(format!(
                        "unknown control kind {other} at offset {HEADER_LEN}"
                    )))
                }
            };
            Message::Control(c)
        }
        other => {
            return Err(GlasuError::Protocol(format!("unknown variant tag {other} at offset 5")));
        }
    };
    if r.pos != len {
        return Err(GlasuError::Protocol(format!(
            "trailing {} bytes after payload at offset {}",
            len - r.pos,
            HEADER_LEN + r.pos
        )));
    }
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(msg: Message) {
        let bytes = serialize(&msg);
        let back = deserialize(&bytes).unwrap();
        assert_eq!(back, msg);
    }

    #[test]
    fn roundtrips_every_variant() {
        let m = Matrix::from_rows(&[vec![1.0, -2.5], vec![0.0, 3.25]]);
        roundtrip(Message::SampleBroadcast(vec![0, 3, 9]));
        roundtrip(Message::IndexUpload { layer: 2, set: vec![1, 4] });
        roundtrip(Message::IndexUnionBroadcast { layer: 0, set: vec![] });
        roundtrip(Message::ReprUpload { layer: 1, matrix: m.clone() });
        roundtrip(Message::ReprBroadcast { layer: 3, matrix: m.clone() });
        roundtrip(Message::CotangentBroadcast(m));
        roundtrip(Message::Control(Control::Hello { client: 7 }));
        roundtrip(Message::Control(Control::RoundBegin { round: 12 }));
        roundtrip(Message::Control(Control::End));
    }

    #[test]
    fn empty_index_set_payload_is_four_bytes() {
        let bytes = serialize(&Message::SampleBroadcast(vec![]));
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        assert_eq!(&bytes[HEADER_LEN..], &[0, 0, 0, 0]);
    }

    #[test]
    fn one_by_one_matrix_payload_layout() {
        let bytes = serialize(&Message::CotangentBroadcast(Matrix::from_vec(1, 1, vec![2.5])));
        assert_eq!(bytes.len(), HEADER_LEN + 4 + 4 + 8);
        assert_eq!(&bytes[HEADER_LEN + 8..], &2.5f64.to_le_bytes());
    }

    #[test]
    fn golden_repr_upload_frame() {
        // layer 2, 1x2 matrix [1.0, 2.5]; payload = 1 + 4 + 4 + 16 = 25 bytes.
        let golden: Vec<u8> = vec![
            0x47, 0x4C, 0x53, 0x55, // "GLSU"
            0x01, // version
            0x03, // ReprUpload tag
            0x19, 0x00, 0x00, 0x00, // payload length 25
            0x02, // layer
            0x01, 0x00, 0x00, 0x00, // rows
            0x02, 0x00, 0x00, 0x00, // cols
            0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xF0, 0x3F, // 1.0
            0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x04, 0x40, // 2.5
        ];
        let msg = Message::ReprUpload { layer: 2, matrix: Matrix::from_vec(1, 2, vec![1.0, 2.5]) };
        assert_eq!(serialize(&msg), golden);
        assert_eq!(deserialize(&golden).unwrap(), msg);
    }

    #[test]
    fn corrupted_magic_names_expected_magic() {
        let mut bytes = serialize(&Message::SampleBroadcast(vec![1]));
        bytes[0] = b'X';
        let err = deserialize(&bytes).unwrap_err();
        assert!(err.to_string().contains("GLSU"), "{err}");
    }

    #[test]
    fn oversized_length_field_is_truncation_error() {
        let mut bytes = serialize(&Message::SampleBroadcast(vec![1]));
        bytes[6] = 0xFF;
        let err = deserialize(&bytes).unwrap_err();
        assert!(err.to_string().contains("exceeds buffer"), "{err}");
    }

    #[test]
    fn unsorted_index_set_rejected() {
        let mut bytes = serialize(&Message::SampleBroadcast(vec![1, 2]));
        // Swap the two ids to break ordering.
        let p = HEADER_LEN + 4;
        bytes.swap(p, p + 4);
        bytes.swap(p + 1, p + 5);
        let (a, b) = (
            u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()),
            u32::from_le_bytes(bytes[p + 4..p + 8].try_into().unwrap()),
        );
        assert!(a > b);
        assert!(deserialize(&bytes).is_err());
    }
}
