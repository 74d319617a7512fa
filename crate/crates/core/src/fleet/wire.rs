//! Newline-delimited JSON framing between units and the coordinator.
//!
//! Each frame is one JSON object on one line, terminated by `\n`, at most
//! [`MAX_LINE_BYTES`] bytes including the terminator. The `type` field names
//! the message. A connection opens with the unit's `hello`; the coordinator
//! answers `welcome` or a fatal `error` and closes.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufRead, AsyncBufReadExt, AsyncReadExt, AsyncWrite, AsyncWriteExt, BufReader, BufWriter};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream, ToSocketAddrs};
use tokio::sync::{mpsc, oneshot};

use crate::error::{Error, Result};

use super::coordinator::LinkRequest;
use super::{Ack, CommandMessage, Coordinator, TelemetryMessage, UnitState};

pub const PROTOCOL_VERSION: &str = "spawnwatch/1";
pub const MAX_LINE_BYTES: usize = 1 << 20;

const HELLO_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol: String,
    pub unit_id: String,
    pub tank_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<UnitState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Welcome {
    pub protocol: String,
    pub reorder_window_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorFrame {
    /// `unsupported_version`, `unknown_unit`, `handshake`, `malformed`,
    /// `protocol` or `rejected`.
    pub code: String,
    pub message: String,
    /// The sender closes the connection after a fatal error.
    #[serde(default)]
    pub fatal: bool,
}

impl ErrorFrame {
    fn message(code: &str, message: impl Into<String>, fatal: bool) -> WireMessage {
        WireMessage::Error(ErrorFrame {
            code: code.into(),
            message: message.into(),
            fatal,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Hello(Hello),
    Welcome(Welcome),
    Telemetry(TelemetryMessage),
    Command(CommandMessage),
    Ack(Ack),
    Error(ErrorFrame),
}

/// Result of reading one line.
#[derive(Debug)]
pub enum Frame {
    Message(WireMessage),
    /// A complete line that is not a valid message.
    Malformed(String),
    Eof,
}

/// Reads one frame. `buf` must be kept between calls: bytes of a partially
/// read line stay there, which makes this safe to use inside `select!`.
pub async fn read_frame<R: AsyncBufRead + Unpin>(reader: &mut R, buf: &mut Vec<u8>) -> Result<Frame> {
    let room = (MAX_LINE_BYTES + 1).saturating_sub(buf.len()) as u64;
    (&mut *reader).take(room).read_until(b'\n', buf).await?;
    if buf.last() != Some(&b'\n') {
        if buf.len() > MAX_LINE_BYTES {
            return Err(Error::Protocol(format!("frame exceeds {MAX_LINE_BYTES} bytes")));
        }
        if buf.is_empty() {
            return Ok(Frame::Eof);
        }
        return Err(Error::Protocol("connection closed mid-frame".into()));
    }
    let line = std::mem::take(buf);
    let text = &line[..line.len() - 1];
    let text = text.strip_suffix(b"\r").unwrap_or(text);
    Ok(match serde_json::from_slice::<WireMessage>(text) {
        Ok(m) => Frame::Message(m),
        Err(e) => Frame::Malformed(e.to_string()),
    })
}

pub async fn write_frame<W: AsyncWrite + Unpin>(writer: &mut W, msg: &WireMessage) -> Result<()> {
    let mut line = serde_json::to_vec(msg)?;
    line.push(b'\n');
    if line.len() > MAX_LINE_BYTES {
        return Err(Error::Protocol(format!("frame exceeds {MAX_LINE_BYTES} bytes")));
    }
    writer.write_all(&line).await?;
    writer.flush().await?;
    Ok(())
}

/// Accepts unit connections until the listener fails.
pub async fn serve_units(listener: TcpListener, coordinator: Arc<Coordinator>) -> Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let coord = coordinator.clone();
        tokio::spawn(async move {
            if let Err(e) = unit_session(stream, coord).await {
                tracing::warn!(%peer, error = %e, "unit session ended with error");
            }
        });
    }
}

async fn unit_session(stream: TcpStream, coord: Arc<Coordinator>) -> Result<()> {
    stream.set_nodelay(true)?;
    let (r, w) = stream.into_split();
    let mut reader = BufReader::new(r);
    let mut writer = BufWriter::new(w);
    let mut buf = Vec::new();

    let hello = match tokio::time::timeout(HELLO_TIMEOUT, read_frame(&mut reader, &mut buf)).await {
        Ok(Ok(Frame::Message(WireMessage::Hello(h)))) => h,
        Ok(Ok(Frame::Eof)) => return Ok(()),
        Ok(Ok(_)) | Err(_) => {
            write_frame(&mut writer, &ErrorFrame::message("handshake", "expected hello", true)).await?;
            return Ok(());
        }
        Ok(Err(e)) => return Err(e),
    };
    if hello.protocol != PROTOCOL_VERSION {
        let msg = format!("protocol {} not supported; use {PROTOCOL_VERSION}", hello.protocol);
        write_frame(&mut writer, &ErrorFrame::message("unsupported_version", msg, true)).await?;
        return Ok(());
    }
    let (link_tx, mut link_rx) = mpsc::channel::<LinkRequest>(16);
    if let Err(e) = coord.register(&hello, Some(link_tx)) {
        let code = if matches!(e, Error::UnknownUnit(_)) {
            "unknown_unit"
        } else {
            "handshake"
        };
        write_frame(&mut writer, &ErrorFrame::message(code, e.to_string(), true)).await?;
        return Ok(());
    }
    let welcome = Welcome {
        protocol: PROTOCOL_VERSION.into(),
        reorder_window_s: coord.config().reorder_window_s,
    };
    write_frame(&mut writer, &WireMessage::Welcome(welcome)).await?;

    let unit_id = hello.unit_id.clone();
    let mut pending: HashMap<u64, oneshot::Sender<Ack>> = HashMap::new();
    let result = loop {
        tokio::select! {
            frame = read_frame(&mut reader, &mut buf) => {
                let reply = match frame {
                    Err(e) => {
                        let _ = write_frame(&mut writer, &ErrorFrame::message("protocol", e.to_string(), true)).await;
                        break Err(e);
                    }
                    Ok(Frame::Eof) => break Ok(()),
                    Ok(Frame::Malformed(why)) => Some(ErrorFrame::message("malformed", why, false)),
                    Ok(Frame::Message(WireMessage::Telemetry(t))) => {
                        if t.unit_id != unit_id {
                            Some(ErrorFrame::message("rejected", format!("connection is bound to {unit_id}"), false))
                        } else {
                            match coord.ingest(t) {
                                Ok(_) => None,
                                Err(e) => Some(ErrorFrame::message("rejected", e.to_string(), false)),
                            }
                        }
                    }
                    Ok(Frame::Message(WireMessage::Ack(ack))) => {
                        if let Some(tx) = pending.remove(&ack.command_id) {
                            let _ = tx.send(ack);
                        }
                        None
                    }
                    Ok(Frame::Message(other)) => Some(ErrorFrame::message(
                        "rejected",
                        format!("unexpected {} frame", frame_type(&other)),
                        false,
                    )),
                };
                if let Some(r) = reply {
                    write_frame(&mut writer, &r).await?;
                }
            }
            Some(req) = link_rx.recv() => {
                pending.insert(req.command.command_id, req.reply);
                write_frame(&mut writer, &WireMessage::Command(req.command)).await?;
            }
        }
    };
    coord.disconnect(&unit_id);
    result
}

fn frame_type(m: &WireMessage) -> &'static str {
    match m {
        WireMessage::Hello(_) => "hello",
        WireMessage::Welcome(_) => "welcome",
        WireMessage::Telemetry(_) => "telemetry",
        WireMessage::Command(_) => "command",
        WireMessage::Ack(_) => "ack",
        WireMessage::Error(_) => "error",
    }
}

/// Unit side of a connection.
pub struct UnitClient {
    reader: BufReader<OwnedReadHalf>,
    writer: BufWriter<OwnedWriteHalf>,
    buf: Vec<u8>,
    welcome: Welcome,
}

impl UnitClient {
    /// Connects and completes the hello handshake.
    pub async fn connect(addr: impl ToSocketAddrs, hello: Hello) -> Result<Self> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (r, w) = stream.into_split();
        let mut reader = BufReader::new(r);
        let mut writer = BufWriter::new(w);
        let mut buf = Vec::new();
        write_frame(&mut writer, &WireMessage::Hello(hello)).await?;
        match read_frame(&mut reader, &mut buf).await? {
            Frame::Message(WireMessage::Welcome(welcome)) => Ok(UnitClient {
                reader,
                writer,
                buf,
                welcome,
            }),
            Frame::Message(WireMessage::Error(e)) => Err(Error::Protocol(format!("{}: {}", e.code, e.message))),
            other => Err(Error::Protocol(format!("unexpected handshake reply {other:?}"))),
        }
    }

    pub fn welcome(&self) -> &Welcome {
        &self.welcome
    }

    pub async fn send(&mut self, msg: &WireMessage) -> Result<()> {
        write_frame(&mut self.writer, msg).await
    }

    /// Writes a telemetry frame without flushing; call [`flush`](Self::flush)
    /// after a batch.
    pub async fn send_telemetry_buffered(&mut self, t: &TelemetryMessage) -> Result<()> {
        let mut line = serde_json::to_vec(&WireMessage::Telemetry(t.clone()))?;
        line.push(b'\n');
        self.writer.write_all(&line).await?;
        Ok(())
    }

    pub async fn flush(&mut self) -> Result<()> {
        self.writer.flush().await?;
        Ok(())
    }

    /// Next frame from the coordinator; `None` once it closes the connection.
    pub async fn recv(&mut self) -> Result<Option<WireMessage>> {
        loop {
            match read_frame(&mut self.reader, &mut self.buf).await? {
                Frame::Message(m) => return Ok(Some(m)),
                Frame::Eof => return Ok(None),
                Frame::Malformed(why) => tracing::warn!(%why, "malformed frame from coordinator"),
            }
        }
    }

    /// Closes the write side and waits for the coordinator to finish
    /// processing everything sent so far.
    pub async fn close(mut self) -> Result<()> {
        self.writer.flush().await?;
        self.writer.shutdown().await?;
        while self.recv().await?.is_some() {}
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokio::io::BufReader;

    #[tokio::test]
    async fn framing_round_trip_and_limits() {
        let msg = WireMessage::Error(ErrorFrame {
            code: "x".into(),
            message: "line\nbreak".into(),
            fatal: false,
        });
        let mut out = Vec::new();
        write_frame(&mut out, &msg).await.unwrap();
        assert_eq!(out.iter().filter(|b| **b == b'\n').count(), 1);
        out.extend_from_slice(b"{oops}\n");
        let mut r = BufReader::new(&out[..]);
        let mut buf = Vec::new();
        assert!(matches!(read_frame(&mut r, &mut buf).await.unwrap(), Frame::Message(m) if m == msg));
        assert!(matches!(
            read_frame(&mut r, &mut buf).await.unwrap(),
            Frame::Malformed(_)
        ));
        assert!(matches!(read_frame(&mut r, &mut buf).await.unwrap(), Frame::Eof));

        let huge = vec![b'a'; MAX_LINE_BYTES + 10];
        let mut r = BufReader::new(&huge[..]);
        assert!(read_frame(&mut r, &mut Vec::new()).await.is_err());
    }
}
