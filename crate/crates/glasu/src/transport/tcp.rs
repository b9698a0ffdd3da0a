//! Blocking framed TCP channel: one long-lived connection per client,
//! server-initiated rounds, request/response per barrier.

use std::io::{Read, Write};
use std::net::TcpStream;

use crate::error::{GlasuError, Result};

use super::codec::{deserialize, serialize, HEADER_LEN, MAGIC, WIRE_VERSION};
use super::Message;

pub struct FramedStream {
    stream: TcpStream,
}

impl FramedStream {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream
            .set_nodelay(true)
            .map_err(|e| GlasuError::Protocol(format!("set_nodelay failed: {e}")))?;
        Ok(FramedStream { stream })
    }

    pub fn send(&mut self, msg: &Message) -> Result<()> {
        let frame = serialize(msg);
        self.stream.write_all(&frame)?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Message> {
        let mut header = [0u8; HEADER_LEN];
        self.stream.read_exact(&mut header)?;
        if header[0..4] != MAGIC || header[4] != WIRE_VERSION {
            return Err(GlasuError::Protocol("bad frame header on stream".into()));
        }
        let len = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
        let mut frame = vec![0u8; HEADER_LEN + len];
        frame[..HEADER_LEN].copy_from_slice(&header);
        self.stream.read_exact(&mut frame[HEADER_LEN..])?;
        deserialize(&frame)
    }
}
